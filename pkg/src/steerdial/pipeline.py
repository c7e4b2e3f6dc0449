"""Workflow commands: prepare -> train (lm, lm_joint, classifier, discriminator) -> generate -> evaluate, plus chat

Each command runs as a Stage under an exclusive lock on the run output directory and writes the resolved
config snapshot first. Every artifact is a deterministic function of the config and the seed.
"""
from __future__ import annotations

import json
from collections.abc import Callable, Iterable, Mapping, Sequence
from pathlib import Path
from typing import Optional

import torch
from rich.table import Table

from . import log
from .checkpoint import load_checkpoint, save_checkpoint
from .commonsense import (
    CacheBackend,
    CommonsenseBackend,
    RemoteBackend,
    dialogue_knowledge,
    generate_tuples,
    verbalize_selection,
)
from .configer import RunConfig, write_snapshot
from .consts import SPLITS, TRAIN_TARGETS, CheckpointKinds, RunFiles
from .corpus import (
    Dialogue,
    SpeakerRole,
    TrainingExample,
    Utterance,
    Vocabulary,
    build_examples,
    build_input,
    build_vocabulary,
    detokenize,
    load_dataset,
    load_examples,
    select_knowledge,
    tokenize,
    tokenize_dialogue,
    write_examples,
)
from .credentials import service_token
from .decoding import batch_generate, decode_utterance, turn_seed, write_generations, write_step_logs
from .evaluation import EvaluationReport, evaluate_run
from .exceptions import ConfigError, ConfigMismatch, MissingCheckpoint, MissingData, MissingEntailment
from .lm import encode, train_lm
from .locks import output_lock
from .stages import Stage
from .strategy import (
    StrategyPredictor,
    StrategySource,
    response_tokens,
    train_discriminator,
    train_external_classifier,
)
from .training import write_trace

CHAT_DIALOGUE_ID = 'chat'
QUIT_COMMAND = '/quit'
STRATEGY_COMMAND = '/strategy'


def setup_torch(threads: int) -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(threads)


def make_backend(config: RunConfig) -> Optional[CommonsenseBackend]:
    """Commonsense backend for the run, None when augmentation is off"""
    commonsense = config.commonsense
    if not commonsense.enabled:
        return None
    cache = CacheBackend(commonsense.cache_path) if commonsense.cache_path else None
    if commonsense.backend == 'cache':
        return cache
    return RemoteBackend(commonsense.endpoint, timeout=commonsense.timeout, cache=cache, token=service_token(),
                         retries=commonsense.retries)


def knowledge_by_dialogue(dialogues: Sequence[Dialogue], backend: Optional[CommonsenseBackend],
                          config: RunConfig) -> Optional[dict[str, list[list[str]]]]:
    """Verbalized sentences per utterance for every dialogue, None when augmentation is off"""
    if backend is None:
        return None
    table = config.commonsense.template_table()
    knowledge = {}
    for dialogue in dialogues:
        try:
            knowledge[dialogue.id] = dialogue_knowledge([u.text for u in dialogue.utterances], backend, table,
                                                        config.commonsense.relations)
        except MissingEntailment as e:
            raise e.with_context(f'dialogue {dialogue.id!r}')
    return knowledge


def load_vocabulary(config: RunConfig) -> Vocabulary:
    path = config.path(RunFiles.VOCAB)
    if not path.exists():
        raise MissingData(f'{path} not found, run prepare first')
    vocab = Vocabulary.from_json(path.read_text(encoding='utf-8'))
    if vocab.strategies != config.strategies:
        raise ConfigMismatch(f'prepared strategies {vocab.strategies.labels} differ from the config '
                             f'{config.strategies.labels}')
    return vocab


def checkpoint_path(config: RunConfig, target: str) -> Path:
    return config.path(RunFiles.CHECKPOINT, target=target)


def load_component(config: RunConfig, target: str, vocab: Vocabulary):
    """Load a trained component by train target name
    :raises MissingCheckpoint: checkpoint file absent
    """
    path = checkpoint_path(config, target)
    if not path.exists():
        raise MissingCheckpoint(target, path)
    kind = CheckpointKinds.LM if target in ('lm', 'lm_joint') else target
    model, _ = load_checkpoint(path, kind, vocab)
    return model


def generations_path(config: RunConfig) -> Path:
    generate = config.generate
    return config.path(RunFiles.GENERATIONS, source=generate.strategy_source, fudge='-fudge' if generate.fudge else '')


class PrepareStage(Stage):
    def __init__(self, config: RunConfig):
        super().__init__('prepare')
        self.config = config

    def require(self) -> None:
        data = self.config.data
        self.config.require_paths(data.train)
        self.config.require_paths(*(path for path in (data.dev, data.test) if path is not None))
        commonsense = self.config.commonsense
        if commonsense.enabled and commonsense.backend == 'cache':
            self.config.require_paths(commonsense.cache_path)

    def execute(self) -> dict:
        config = self.config
        strategies = config.strategies
        dialogues = {split: load_dataset(path, strategies) for split in SPLITS
                     if (path := config.data.split_path(split)) is not None}
        backend = make_backend(config)
        knowledge = {split: knowledge_by_dialogue(split_dialogues, backend, config)
                     for split, split_dialogues in dialogues.items()}
        extra_texts = [sentence for per_dialogue in (knowledge['train'] or {}).values()
                       for sentences in per_dialogue for sentence in sentences]
        vocab = build_vocabulary(dialogues['train'], config.data.min_count, strategies, extra_texts)
        config.path(RunFiles.VOCAB).write_text(vocab.to_json(), encoding='utf-8')
        summary = {'vocab_size': len(vocab), 'commonsense': config.commonsense.enabled}
        for split, split_dialogues in dialogues.items():
            examples = []
            for dialogue in split_dialogues:
                per_utterance = knowledge[split][dialogue.id] if knowledge[split] else None
                examples.extend(build_examples(tokenize_dialogue(dialogue, vocab), vocab, per_utterance,
                                               config.commonsense.scope))
            write_examples(examples, config.path(RunFiles.EXAMPLES, split=split))
            summary[split] = {'dialogues': len(split_dialogues), 'examples': len(examples)}
        summary_path = config.path(RunFiles.PREPARE_SUMMARY)
        summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + '\n', encoding='utf-8')
        log.log_as('json', summary)
        return summary

    def validate(self, result: dict) -> None:
        if not result['train']['examples']:
            self.logger.warning('train split has no helper turns, training will fail')


class TrainStage(Stage):
    def __init__(self, config: RunConfig, target: str):
        if target not in TRAIN_TARGETS:
            raise ConfigError(f'Unsupported train target {target}. Options: {TRAIN_TARGETS}')
        super().__init__(f'train {target}')
        self.config = config
        self.target = target

    def require(self) -> None:
        for path in (self.config.path(RunFiles.VOCAB), self.config.path(RunFiles.EXAMPLES, split='train')):
            if not path.exists():
                raise MissingData(f'{path} not found, run prepare first')

    def _examples(self, split: str) -> list[TrainingExample]:
        path = self.config.path(RunFiles.EXAMPLES, split=split)
        return load_examples(path) if path.exists() else []

    def execute(self) -> Path:
        config, target = self.config, self.target
        vocab = load_vocabulary(config)
        train, dev = self._examples('train'), self._examples('dev')
        if not train:
            raise MissingData('no training examples, the train split has no helper turns')
        sizes = {'vocab_size': len(vocab), 'strategy_count': config.strategies.size,
                 'seed': config.component_seed(target)}
        training_config = config.training_config(target)
        if target in ('lm', 'lm_joint'):
            trained = train_lm(train, config.lm.sized(**sizes), training_config,
                               'joint' if target == 'lm_joint' else 'generation_only', dev)
        elif target == 'classifier':
            trained = train_external_classifier([(e.input_ids, e.gold_strategy) for e in train],
                                                config.classifier.sized(**sizes), training_config,
                                                [(e.input_ids, e.gold_strategy) for e in dev])
        else:
            trained = train_discriminator([(response_tokens(e), e.gold_strategy) for e in train],
                                          config.discriminator.sized(**sizes), training_config,
                                          [(response_tokens(e), e.gold_strategy) for e in dev])
        path = save_checkpoint(trained.model, checkpoint_path(config, target), vocab)
        write_trace(trained.trace, config.path(RunFiles.TRACE, target=target))
        final = trained.trace[-1]
        for key in ('dev_accuracy', 'dev_strategy_accuracy'):
            if key in final:
                self.logger.info(f'{target} held-out accuracy: {final[key]:.4f}')
        return path

    def validate(self, result: Path) -> None:
        if not result.exists():
            raise MissingData(f'checkpoint {result} was not written')


class GenerateStage(Stage):
    def __init__(self, config: RunConfig):
        super().__init__('generate')
        self.config = config

    @property
    def components(self) -> list[str]:
        generate = self.config.generate
        components = [generate.lm_target]
        if generate.strategy_source == StrategySource.CLASSIFIER.value:
            components.append('classifier')
        if generate.fudge:
            components.append('discriminator')
        return components

    def require(self) -> None:
        self.config.require_paths(self.config.data.test)
        for component in self.components:
            path = checkpoint_path(self.config, component)
            if not path.exists():
                raise MissingCheckpoint(component, path)

    def execute(self) -> Path:
        config = self.config
        vocab = load_vocabulary(config)
        generate = config.generate
        lm = load_component(config, generate.lm_target, vocab)
        classifier = load_component(config, 'classifier', vocab) if 'classifier' in self.components else None
        disc = load_component(config, 'discriminator', vocab) if generate.fudge else None
        predictor = StrategyPredictor(generate.strategy_source, lm, classifier)
        test = load_dataset(config.data.test, config.strategies)
        knowledge = knowledge_by_dialogue(test, make_backend(config), config)
        decoding = config.decoding_config()
        rows = batch_generate(test, predictor, lm, vocab, decoding, disc, knowledge, config.commonsense.scope,
                              generate.workers)
        path = write_generations(rows, generations_path(config), vocab)
        if decoding.trace:
            write_step_logs(rows, path.with_name(f'{path.stem}.steps.jsonl'))
        self.logger.info(f'Wrote {len(rows)} generations to {path}')
        return path


def report_table(report: EvaluationReport, title: str) -> Table:
    table = Table(title=title)
    table.add_column('metric', style='cyan')
    table.add_column('value', justify='right')
    for key, value in report.to_dict().items():
        if key == 'per_strategy':
            continue
        table.add_row(key, '-' if value is None else f'{value:.4f}' if isinstance(value, float) else str(value))
    for name, counts in report.per_strategy.items():
        table.add_row(f'  {name}', f'{counts["correct"]}/{counts["gold"]}')
    return table


class EvaluateStage(Stage):
    def __init__(self, config: RunConfig, generation_file: Optional[str | Path] = None):
        super().__init__('evaluate')
        self.config = config
        self.generation_file = Path(generation_file) if generation_file else generations_path(config)

    def require(self) -> None:
        self.config.require_paths(self.generation_file)

    def execute(self) -> Path:
        report_path = self.config.path(RunFiles.REPORT, stem=self.generation_file.stem)
        report = evaluate_run(self.generation_file, self.config.strategies, self.config.markers or None, report_path)
        log.print_table(report_table(report, self.generation_file.name))
        return report_path


class ChatSession:
    """Plain line-based chat over a trained LM. Transcript rows are kept in memory until the session ends

    :param config: run config; the strategy source comes from generate.strategy_source, oracle falls back to lm
    :param echo: output function for responses and messages
    """
    def __init__(self, config: RunConfig, echo: Callable[[str], None], situation: str = ''):
        self.config = config
        self.echo = echo
        self.situation = situation
        self.logger = log.get_logger()
        self.vocab = load_vocabulary(config)
        generate = config.generate
        source = StrategySource(generate.strategy_source)
        if source is StrategySource.ORACLE:
            self.logger.warning('oracle strategies need gold labels, chat uses the lm strategy source')
            source = StrategySource.LM
        lm_target = 'lm_joint' if source is StrategySource.JOINT else generate.lm_variant
        self.lm = load_component(config, lm_target, self.vocab)
        classifier = load_component(config, 'classifier', self.vocab) if source is StrategySource.CLASSIFIER else None
        self.disc = load_component(config, 'discriminator', self.vocab) if generate.fudge else None
        self.predictor = StrategyPredictor(source, self.lm, classifier)
        self.backend = make_backend(config)
        self.decoding = config.decoding_config()
        self.history: list[Utterance] = []
        self.knowledge: list[list[str]] = []
        self.transcript: list[dict] = []
        self.override: Optional[int] = None

    def _sentences(self, text: str) -> list[str]:
        if self.backend is None:
            return []
        try:
            tuples = generate_tuples(text, self.backend)
        except MissingEntailment as e:
            self.logger.warning(f'No commonsense for this turn: {e}')
            return []
        return verbalize_selection(tuples, self.config.commonsense.template_table(), self.config.commonsense.relations)

    def _set_override(self, name: str) -> None:
        strategies = self.config.strategies
        try:
            self.override = strategies.index(name)
        except KeyError:
            self.echo(f'unknown strategy {name!r}. Options: {", ".join(strategies.labels)}')
            return
        self.echo(f'next strategy: {name}')

    def respond(self, text: str) -> str:
        """Add a seeker turn and generate the helper response
        :return: '[Strategy] response'
        """
        vocab = self.vocab
        self.history.append(Utterance(SpeakerRole.SEEKER, text, tokens=tokenize(text, vocab)))
        self.knowledge.append(self._sentences(text))
        turn_index = len(self.history)
        dialogue = Dialogue(CHAT_DIALOGUE_ID, self.situation, tuple(self.history))
        knowledge = select_knowledge(dialogue, turn_index, self.knowledge, self.config.commonsense.scope)
        input_ids = build_input(self.situation, self.history, vocab, knowledge)
        with torch.no_grad():
            ctx = encode(self.lm, input_ids)
            strategy = self.override if self.override is not None else self.predictor.predict(input_ids, ctx=ctx)
        self.override = None
        generator = torch.Generator().manual_seed(turn_seed(self.decoding.seed, CHAT_DIALOGUE_ID, turn_index))
        result = decode_utterance(ctx, strategy, self.lm, self.disc, self.decoding, generator)
        response = detokenize(result.tokens, vocab)
        name = self.config.strategies.name(strategy)
        self.history.append(Utterance(SpeakerRole.HELPER, response, strategy, result.tokens))
        # helper turns only contribute knowledge under the "all" scope
        all_scope = self.config.commonsense.scope == 'all'
        self.knowledge.append(self._sentences(response) if response and all_scope else [])
        self.transcript.append({'turn': len(self.transcript), 'seeker': text, 'strategy': name, 'response': response})
        return f'[{name}] {response}'

    def run(self, lines: Iterable[str]) -> list[dict]:
        for line in lines:
            line = line.strip()
            if not line:
                continue
            if line == QUIT_COMMAND:
                break
            if line == STRATEGY_COMMAND or line.startswith(STRATEGY_COMMAND + ' '):
                self._set_override(line[len(STRATEGY_COMMAND):].strip())
                continue
            self.echo(self.respond(line))
        return self.transcript


def write_transcript(rows: Sequence[Mapping], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', encoding='utf-8') as f:
        for row in rows:
            f.write(json.dumps(row) + '\n')
    return path


class ChatStage(Stage):
    def __init__(self, config: RunConfig, lines: Iterable[str], echo: Callable[[str], None]):
        super().__init__('chat')
        self.config = config
        self.lines = lines
        self.echo = echo

    def require(self) -> None:
        load_vocabulary(self.config)

    def execute(self) -> Path:
        session = ChatSession(self.config, self.echo)
        try:
            session.run(self.lines)
        finally:
            path = write_transcript(session.transcript, self.config.path(RunFiles.TRANSCRIPT))
        self.logger.debug(f'Wrote {len(session.transcript)} chat turns to {path}')
        return path


def _run_locked(config: RunConfig, stage: Stage):
    setup_torch(config.threads)
    with output_lock(config.out_dir):
        write_snapshot(config)
        return stage.run()


def cmd_prepare(config: RunConfig) -> dict:
    """Load the splits, build the vocabulary and the tokenized examples
    :return: summary with vocab size and per-split dialogue and example counts
    """
    return _run_locked(config, PrepareStage(config))


def cmd_train(config: RunConfig, target: str) -> Path:
    """Train one component and write its checkpoint and loss trace
    :param target: one of lm, lm_joint, classifier, discriminator
    :return: checkpoint path
    """
    return _run_locked(config, TrainStage(config, target))


def cmd_generate(config: RunConfig) -> Path:
    """Generate a response for every helper turn of the test split
    :return: generation file path
    """
    return _run_locked(config, GenerateStage(config))


def cmd_evaluate(config: RunConfig, generation_file: Optional[str | Path] = None) -> Path:
    """Score a generation file, by default the one cmd_generate writes for the same config
    :return: report path
    """
    return _run_locked(config, EvaluateStage(config, generation_file))


def cmd_chat(config: RunConfig, lines: Iterable[str], echo: Callable[[str], None]) -> Path:
    """Interactive session. `/strategy <name>` forces the next turn's strategy, `/quit` ends the session
    :return: transcript path
    """
    return _run_locked(config, ChatStage(config, lines, echo))
