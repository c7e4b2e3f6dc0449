"""Response decoding with optional future-discriminator reweighting

At each step the LM's top-k_f candidates are rescored as
    log p_lm(c) + lambda * log p_disc(strategy | prefix + c)
and renormalized over the candidate set. Tokens outside the set get probability 0.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch

from . import log
from .consts import (
    BOS_ID,
    CONTROL_LAMBDA_DEFAULT,
    DECODING_MODES,
    EOS_ID,
    FUDGE_CANDIDATES_DEFAULT,
    KNOWLEDGE_SCOPES,
    MARKER_OFFSET,
    MAX_LENGTH_DEFAULT,
    PROB_FLOOR,
    SAMPLE_K_DEFAULT,
)
from .corpus import Dialogue, TokenSequence, Vocabulary, build_examples, detokenize, tokenize_dialogue
from .exceptions import ConfigError, SteerDialError
from .lm import EncodedContext, SteerLM, encode
from .strategy import DiscriminatorModel, DiscState, StrategyPredictor


@dataclass(frozen=True)
class DecodingConfig:
    mode: str = DECODING_MODES[0]
    sample_k: int = SAMPLE_K_DEFAULT
    fudge_candidates: int = FUDGE_CANDIDATES_DEFAULT
    control_lambda: float = CONTROL_LAMBDA_DEFAULT
    max_length: int = MAX_LENGTH_DEFAULT
    seed: int = 0
    trace: bool = False

    def __post_init__(self):
        if self.mode not in DECODING_MODES:
            raise ConfigError(f'Unsupported decoding mode {self.mode}. Options: {DECODING_MODES}')
        for name in ('sample_k', 'fudge_candidates', 'max_length'):
            if getattr(self, name) < 1:
                raise ConfigError(f'{name} must be >= 1, got {getattr(self, name)}')
        if not self.control_lambda >= 0:
            raise ConfigError(f'control_lambda must be >= 0, got {self.control_lambda}')


@dataclass(frozen=True)
class StepLog:
    candidates: tuple[int, ...]
    lm_probs: tuple[float, ...]
    disc_probs: tuple[float, ...]
    final_probs: tuple[float, ...]
    chosen: int


@dataclass(frozen=True)
class GenerationResult:
    tokens: TokenSequence  # without marker and EOS
    strategy_used: int
    per_step_log: Optional[tuple[StepLog, ...]] = None


@dataclass(frozen=True)
class GenerationRow:
    dialogue_id: str
    turn_index: int
    result: GenerationResult
    reference: str
    gold_strategy: int


def turn_seed(run_seed: int, dialogue_id: str, turn_index: int) -> int:
    """Per-turn RNG seed, so parallel and serial generation agree"""
    digest = hashlib.sha256(f'{run_seed}:{dialogue_id}:{turn_index}'.encode()).digest()
    return int.from_bytes(digest[:8], 'big') & ((1 << 63) - 1)


def top_candidates(distribution: torch.Tensor, k: int) -> torch.Tensor:
    """Ids of the k most probable tokens, ties by lowest id"""
    return torch.sort(distribution, descending=True, stable=True).indices[:k]


def _rescore(lm_dist: torch.Tensor, strategy: int, disc: DiscriminatorModel, k_f: int, control_lambda: float,
             disc_state: DiscState) -> tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]:
    if control_lambda == 0 and k_f >= lm_dist.numel():
        return lm_dist, torch.arange(lm_dist.numel()), None
    candidates = top_candidates(lm_dist, k_f)
    disc_probs = disc.candidate_distributions(disc_state, candidates)[:, strategy]
    scores = (torch.log(lm_dist[candidates].clamp_min(PROB_FLOOR))
              + control_lambda * torch.log(disc_probs.clamp_min(PROB_FLOOR)))
    rescored = torch.zeros_like(lm_dist)
    rescored[candidates] = torch.softmax(scores, dim=-1)
    return rescored, candidates, disc_probs


def fudge_rescore(lm_dist: torch.Tensor, prefix: Sequence[int], strategy: int, disc: DiscriminatorModel,
                  k_f: int = FUDGE_CANDIDATES_DEFAULT, control_lambda: float = CONTROL_LAMBDA_DEFAULT,
                  disc_state: DiscState = None) -> torch.Tensor:
    """Reweight the LM distribution toward `strategy` using the discriminator

    :param lm_dist: next-token distribution
    :param prefix: response decoded so far, marker stripped
    :param strategy: target strategy index
    :param disc: prefix discriminator
    :param k_f: candidate set size
    :param control_lambda: control strength. 0 with k_f >= |V| returns lm_dist unchanged
    :param disc_state: discriminator state after `prefix`, if the caller tracks it incrementally
    :return: distribution supported on the top-k_f candidates
    """
    with torch.no_grad():
        if disc_state is None and prefix:
            disc_state = disc.prefix_state(prefix)
        return _rescore(lm_dist, strategy, disc, k_f, control_lambda, disc_state)[0]


def _pick(distribution: torch.Tensor, cfg: DecodingConfig, generator: torch.Generator) -> int:
    if cfg.mode == 'greedy':
        return int(torch.argmax(distribution).item())
    candidates = top_candidates(distribution, cfg.sample_k)
    weights = distribution[candidates]
    choice = torch.multinomial(weights / weights.sum(), 1, generator=generator)
    return int(candidates[choice].item())


def decode_utterance(ctx: EncodedContext, strategy: int, lm: SteerLM, disc: Optional[DiscriminatorModel] = None,
                     cfg: DecodingConfig = DecodingConfig(), generator: Optional[torch.Generator] = None
                     ) -> GenerationResult:
    """Generate one response conditioned on a strategy

    :param ctx: single-example encoder context
    :param strategy: strategy index; its marker leads the decoder prefix
    :param lm: language model
    :param disc: optional discriminator. Absent means plain LM decoding
    :param cfg: decoding config
    :param generator: RNG for top_k_sample. Defaults to one seeded with cfg.seed
    :return: tokens without marker and EOS, at most cfg.max_length of them
    """
    if not 0 <= strategy < lm.config.strategy_count:
        raise ValueError(f'strategy {strategy} outside 0..{lm.config.strategy_count - 1}')
    generator = generator or torch.Generator().manual_seed(cfg.seed)
    tokens: list[int] = []
    steps: list[StepLog] = []
    disc_state: DiscState = None
    with torch.no_grad():
        state, _ = lm.step(ctx, lm.start(ctx), BOS_ID)
        state, logits = lm.step(ctx, state, MARKER_OFFSET + strategy)
        while len(tokens) < cfg.max_length:
            lm_dist = torch.softmax(logits, dim=-1)
            distribution, candidates, disc_probs = lm_dist, None, None
            if disc is not None:
                distribution, candidates, disc_probs = _rescore(lm_dist, strategy, disc, cfg.fudge_candidates,
                                                                cfg.control_lambda, disc_state)
            token = _pick(distribution, cfg, generator)
            if cfg.trace:
                if candidates is None:
                    candidates = top_candidates(lm_dist, cfg.fudge_candidates)
                steps.append(StepLog(
                    candidates=tuple(candidates.tolist()),
                    lm_probs=tuple(lm_dist[candidates].tolist()),
                    disc_probs=tuple(disc_probs.tolist()) if disc_probs is not None else (),
                    final_probs=tuple(distribution[candidates].tolist()),
                    chosen=token,
                ))
            if token == EOS_ID:
                break
            tokens.append(token)
            if disc is not None:
                disc_state = disc.advance(disc_state, token)
            state, logits = lm.step(ctx, state, token)
    return GenerationResult(tokens=tuple(tokens), strategy_used=strategy,
                            per_step_log=tuple(steps) if cfg.trace else None)


def _generate_dialogue(dialogue: Dialogue, predictor: StrategyPredictor, lm: SteerLM, vocab: Vocabulary,
                       cfg: DecodingConfig, disc: Optional[DiscriminatorModel],
                       knowledge: Optional[Sequence[Sequence[str]]], scope: str) -> list[GenerationRow]:
    rows = []
    dialogue = tokenize_dialogue(dialogue, vocab)
    for example in build_examples(dialogue, vocab, knowledge, scope):
        ctx = encode(lm, example.input_ids)
        strategy = predictor.predict(example.input_ids, example.gold_strategy, ctx=ctx)
        generator = torch.Generator().manual_seed(turn_seed(cfg.seed, dialogue.id, example.turn_index))
        result = decode_utterance(ctx, strategy, lm, disc, cfg, generator)
        rows.append(GenerationRow(
            dialogue_id=dialogue.id,
            turn_index=example.turn_index,
            result=result,
            reference=dialogue.utterances[example.turn_index].text,
            gold_strategy=example.gold_strategy,
        ))
    return rows


def batch_generate(dialogues: Sequence[Dialogue], predictor: StrategyPredictor, lm: SteerLM, vocab: Vocabulary,
                   cfg: DecodingConfig, disc: Optional[DiscriminatorModel] = None,
                   knowledge: Optional[Mapping[str, Sequence[Sequence[str]]]] = None,
                   scope: str = KNOWLEDGE_SCOPES[0], workers: int = 1) -> list[GenerationRow]:
    """One generation per helper turn, inputs built as in build_examples

    :param dialogues: dialogues to respond in
    :param predictor: strategy source for each turn
    :param lm: language model
    :param vocab: run vocabulary
    :param cfg: decoding config; cfg.seed is the run seed for per-turn RNGs
    :param disc: optional discriminator
    :param knowledge: dialogue id -> verbalized sentences per utterance, when commonsense is enabled
    :param scope: knowledge scope, see corpus.select_knowledge
    :param workers: dialogues decoded concurrently. Output order and content do not depend on it
    :return: rows in dialogue order, then turn order
    """
    logger = log.get_logger()

    def run(dialogue: Dialogue) -> list[GenerationRow]:
        try:
            return _generate_dialogue(dialogue, predictor, lm, vocab, cfg, disc,
                                      knowledge.get(dialogue.id) if knowledge else None, scope)
        except SteerDialError as e:
            raise e.with_context(f'dialogue {dialogue.id!r}')

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            per_dialogue = list(executor.map(run, dialogues))
    else:
        per_dialogue = [run(dialogue) for dialogue in dialogues]
    rows = [row for group in per_dialogue for row in group]
    logger.info(f'Generated {len(rows)} responses for {len(dialogues)} dialogues')
    return rows


def row_to_dict(row: GenerationRow, vocab: Vocabulary) -> dict:
    strategies = vocab.strategies
    return {
        'dialogue_id': row.dialogue_id,
        'turn_index': row.turn_index,
        'strategy_used': strategies.name(row.result.strategy_used),
        'text': detokenize(row.result.tokens, vocab),
        'reference': row.reference,
        'gold_strategy': strategies.name(row.gold_strategy),
    }


def write_generations(rows: Sequence[GenerationRow], path: str | Path, vocab: Vocabulary) -> Path:
    """Write generation rows as JSON Lines"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', encoding='utf-8') as f:
        for row in rows:
            f.write(json.dumps(row_to_dict(row, vocab)) + '\n')
    return path


def write_step_logs(rows: Sequence[GenerationRow], path: str | Path) -> Path:
    """Per-step candidate traces for rows generated with cfg.trace"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', encoding='utf-8') as f:
        for row in rows:
            for step, entry in enumerate(row.result.per_step_log or ()):
                f.write(json.dumps({'dialogue_id': row.dialogue_id, 'turn_index': row.turn_index, 'step': step,
                                    **dataclasses.asdict(entry)}) + '\n')
    return path
