"""Strategy-annotated dialogue corpora: loading, vocabulary, tokenization and training example construction

Dataset format is JSON Lines, one dialogue per line:
    {"id": str, "situation": str, "utterances": [{"role": "seeker"|"helper", "text": str, "strategy": str}]}
`strategy` is required on helper turns only and must match a StrategySet name exactly.
"""
from __future__ import annotations

import json
import re
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional

from . import log
from .consts import (
    BOS_ID,
    CLS_ID,
    DEFAULT_STRATEGIES,
    EOS_ID,
    KNOWLEDGE_SCOPES,
    MARKER_OFFSET,
    MARKER_PATTERN,
    MIN_COUNT_DEFAULT,
    SEP_ID,
    UNK_ID,
    ReservedTokens,
)
from .exceptions import EmptyCorpus, IoError, ParseError, ValidationError

TokenSequence = tuple[int, ...]

_TOKEN_PATTERN = re.compile(r'\w+|[^\w\s]')


class SpeakerRole(str, Enum):
    SEEKER = 'seeker'
    HELPER = 'helper'


@dataclass(frozen=True)
class StrategySet:
    """Ordered, fixed set of strategy names. Order is the label index used by every component of a run"""
    labels: tuple[str, ...] = DEFAULT_STRATEGIES

    def __post_init__(self) -> None:
        object.__setattr__(self, 'labels', tuple(self.labels))
        if not self.labels:
            raise ValueError('StrategySet needs at least one strategy')
        if any(not label or not label.strip() for label in self.labels):
            raise ValueError(f'Strategy names must be non-empty: {self.labels}')
        if len(set(self.labels)) != len(self.labels):
            raise ValueError(f'Strategy names must be unique: {self.labels}')

    @property
    def size(self) -> int:
        return len(self.labels)

    def index(self, name: str) -> int:
        """Case-sensitive lookup
        :raises KeyError: for unknown names
        """
        try:
            return self.labels.index(name)
        except ValueError:
            raise KeyError(name)

    def name(self, index: int) -> str:
        return self.labels[index]


@dataclass(frozen=True)
class Utterance:
    role: SpeakerRole
    text: str
    strategy: Optional[int] = None
    tokens: TokenSequence = ()


@dataclass(frozen=True)
class Dialogue:
    id: str
    situation: str
    utterances: tuple[Utterance, ...]

    @property
    def helper_turns(self) -> list[int]:
        return [i for i, utterance in enumerate(self.utterances) if utterance.role is SpeakerRole.HELPER]


@dataclass(frozen=True)
class TrainingExample:
    input_ids: TokenSequence
    target_ids: TokenSequence
    gold_strategy: int
    dialogue_id: str
    turn_index: int

    def to_json(self) -> str:
        return json.dumps({
            'dialogue_id': self.dialogue_id,
            'turn_index': self.turn_index,
            'gold_strategy': self.gold_strategy,
            'input_ids': list(self.input_ids),
            'target_ids': list(self.target_ids),
        }, separators=(',', ':'))

    @classmethod
    def from_json(cls, line: str) -> TrainingExample:
        data = json.loads(line)
        return cls(
            input_ids=tuple(data['input_ids']),
            target_ids=tuple(data['target_ids']),
            gold_strategy=data['gold_strategy'],
            dialogue_id=data['dialogue_id'],
            turn_index=data['turn_index'],
        )


@dataclass(frozen=True)
class Vocabulary:
    """Token <-> id bijection. Reserved tokens first (PAD, BOS, EOS, UNK, CLS, SEP), then one marker per strategy
    in StrategySet order, then corpus tokens"""
    tokens: tuple[str, ...]
    strategies: StrategySet = field(default_factory=StrategySet)
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, 'tokens', tuple(self.tokens))
        expected_head = ReservedTokens.ORDER + self.marker_tokens(self.strategies)
        if self.tokens[:len(expected_head)] != expected_head:
            raise ValueError('Vocabulary must start with the reserved tokens and strategy markers')
        index = {token: i for i, token in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError('Vocabulary tokens must be unique')
        object.__setattr__(self, '_index', index)

    @staticmethod
    def marker_tokens(strategies: StrategySet) -> tuple[str, ...]:
        return tuple(MARKER_PATTERN.format(label) for label in strategies.labels)

    @classmethod
    def from_corpus_tokens(cls, corpus_tokens: Iterable[str], strategies: StrategySet) -> Vocabulary:
        return cls(ReservedTokens.ORDER + cls.marker_tokens(strategies) + tuple(corpus_tokens), strategies)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def token_of(self, id_: int) -> str:
        return self.tokens[id_]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[id_] for id_ in ids]

    @property
    def marker_offset(self) -> int:
        return MARKER_OFFSET

    def marker_id(self, strategy: int) -> int:
        if not 0 <= strategy < self.strategies.size:
            raise IndexError(f'strategy index {strategy} outside 0..{self.strategies.size - 1}')
        return self.marker_offset + strategy

    @property
    def marker_ids(self) -> tuple[int, ...]:
        return tuple(range(self.marker_offset, self.marker_offset + self.strategies.size))

    def strategy_of_marker(self, id_: int) -> Optional[int]:
        strategy = id_ - self.marker_offset
        return strategy if 0 <= strategy < self.strategies.size else None

    def to_json(self) -> str:
        return json.dumps({'strategies': list(self.strategies.labels), 'tokens': list(self.tokens)}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> Vocabulary:
        data = json.loads(text)
        return cls(tuple(data['tokens']), StrategySet(tuple(data['strategies'])))


def split_words(text: str) -> list[str]:
    """Lowercase, split punctuation into separate tokens, split on whitespace"""
    return _TOKEN_PATTERN.findall(text.lower())


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    """Deterministic word-level tokenization; out-of-vocabulary words map to UNK
    :param text: raw text
    :param vocab: run vocabulary
    :return: token ids, empty for empty text
    """
    return tuple(vocab.id_of(word) for word in split_words(text))


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    return ' '.join(vocab.decode(ids))


def tokenize_dialogue(dialogue: Dialogue, vocab: Vocabulary) -> Dialogue:
    """Fill every utterance's tokens"""
    return replace(dialogue, utterances=tuple(
        replace(utterance, tokens=tokenize(utterance.text, vocab)) for utterance in dialogue.utterances
    ))


def _parse_dialogue(data: dict, strategy_set: StrategySet) -> Dialogue:
    dialogue_id = data.get('id')
    if not isinstance(dialogue_id, str) or not dialogue_id:
        raise ValidationError(str(dialogue_id), None, 'missing or non-string id')
    raw_utterances = data.get('utterances')
    if not isinstance(raw_utterances, list) or not raw_utterances:
        raise ValidationError(dialogue_id, None, 'utterances must be a non-empty list')
    utterances = []
    for i, raw in enumerate(raw_utterances):
        if not isinstance(raw, dict):
            raise ValidationError(dialogue_id, i, 'utterance must be an object')
        try:
            role = SpeakerRole(raw.get('role'))
        except ValueError:
            raise ValidationError(dialogue_id, i, f'unknown role {raw.get("role")!r}')
        text = raw.get('text')
        if not isinstance(text, str):
            raise ValidationError(dialogue_id, i, 'text must be a string')
        strategy_name = raw.get('strategy')
        strategy = None
        if role is SpeakerRole.HELPER:
            if strategy_name is None:
                raise ValidationError(dialogue_id, i, 'helper turn missing strategy')
            try:
                strategy = strategy_set.index(strategy_name)
            except KeyError:
                raise ValidationError(dialogue_id, i, f'unknown strategy {strategy_name!r}')
        elif strategy_name is not None:
            raise ValidationError(dialogue_id, i, 'seeker turn must not carry a strategy')
        utterances.append(Utterance(role=role, text=text, strategy=strategy))
    situation = data.get('situation', '')
    if not isinstance(situation, str):
        raise ValidationError(dialogue_id, None, 'situation must be a string')
    return Dialogue(id=dialogue_id, situation=situation, utterances=tuple(utterances))


def read_lines(path: str | Path) -> list[str]:
    """Lines of a UTF-8 text file, without line endings
    :raises IoError: unreadable path
    :raises ParseError: a line that is not valid UTF-8, with its 1-based number
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IoError(path, e.strerror or 'unreadable')
    lines = []
    for line_num, line in enumerate(raw.splitlines(), 1):
        try:
            lines.append(line.decode('utf-8'))
        except UnicodeDecodeError as e:
            raise ParseError(line_num, str(path), f'invalid UTF-8: {e.reason}')
    return lines


def load_dataset(path: str | Path, strategy_set: StrategySet) -> list[Dialogue]:
    """Load a JSON Lines dialogue corpus, validating every utterance
    :param path: dataset file
    :param strategy_set: the run's strategies. Names are matched case-sensitively
    :return: dialogues in file order
    :raises IoError: on unreadable path
    :raises ParseError: on malformed JSON, with the 1-based line number
    :raises ValidationError: on data model violations, with dialogue id and utterance index
    """
    path = Path(path)
    lines = read_lines(path)
    dialogues = []
    seen_ids = set()
    for line_num, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(line_num, str(path), e.msg)
        if not isinstance(data, dict):
            raise ParseError(line_num, str(path), 'expected an object')
        dialogue = _parse_dialogue(data, strategy_set)
        if dialogue.id in seen_ids:
            raise ValidationError(dialogue.id, None, 'duplicate dialogue id')
        seen_ids.add(dialogue.id)
        dialogues.append(dialogue)
    log.get_logger().debug(f'Loaded {len(dialogues)} dialogues from {path}')
    return dialogues


def dialogue_to_dict(dialogue: Dialogue, strategy_set: StrategySet) -> dict:
    utterances = []
    for utterance in dialogue.utterances:
        item = {'role': utterance.role.value, 'text': utterance.text}
        if utterance.strategy is not None:
            item['strategy'] = strategy_set.name(utterance.strategy)
        utterances.append(item)
    return {'id': dialogue.id, 'situation': dialogue.situation, 'utterances': utterances}


def dump_dataset(dialogues: Iterable[Dialogue], path: str | Path, strategy_set: StrategySet) -> Path:
    """Write dialogues back out in the JSON Lines dataset format"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', encoding='utf-8') as f:
        for dialogue in dialogues:
            f.write(json.dumps(dialogue_to_dict(dialogue, strategy_set)) + '\n')
    return path


def build_vocabulary(dialogues: Sequence[Dialogue], min_count: int = MIN_COUNT_DEFAULT,
                     strategy_set: Optional[StrategySet] = None, extra_texts: Iterable[str] = ()) -> Vocabulary:
    """Build the run vocabulary from situations and utterances

    :param dialogues: corpus
    :param min_count: keep corpus tokens seen at least this many times
    :param strategy_set: strategies whose markers are reserved. Defaults to the 8 standard strategies
    :param extra_texts: more texts to count, e.g. verbalized commonsense sentences
    :return: reserved tokens, then corpus tokens by descending frequency, ties lexicographic
    :raises EmptyCorpus: if there are no dialogues
    """
    if min_count < 1:
        raise ValueError(f'min_count must be >= 1, got {min_count}')
    if not dialogues:
        raise EmptyCorpus('cannot build a vocabulary from zero dialogues')
    counts: Counter[str] = Counter()
    for dialogue in dialogues:
        counts.update(split_words(dialogue.situation))
        for utterance in dialogue.utterances:
            counts.update(split_words(utterance.text))
    for text in extra_texts:
        counts.update(split_words(text))
    kept = sorted((token for token, count in counts.items() if count >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary.from_corpus_tokens(kept, strategy_set or StrategySet())


def build_input(situation: str, history: Sequence[Utterance], vocab: Vocabulary,
                knowledge: Sequence[str] = ()) -> TokenSequence:
    """CLS + situation + SEP-joined history, then SEP + knowledge sentences when any are given"""
    ids = [CLS_ID, *tokenize(situation, vocab)]
    for utterance in history:
        ids.append(SEP_ID)
        ids.extend(utterance.tokens or tokenize(utterance.text, vocab))
    if knowledge:
        ids.append(SEP_ID)
        for sentence in knowledge:
            ids.extend(tokenize(sentence, vocab))
    return tuple(ids)


def select_knowledge(dialogue: Dialogue, turn_index: int, commonsense: Optional[Sequence[Sequence[str]]],
                     scope: str = KNOWLEDGE_SCOPES[0]) -> list[str]:
    """Pick the verbalized sentences appended to the history of one helper turn

    :param dialogue: source dialogue
    :param turn_index: index of the helper utterance being predicted
    :param commonsense: per-utterance verbalized sentences, aligned with dialogue.utterances
    :param scope: 'last_seeker' - only the most recent seeker utterance; 'all' - every preceding utterance
    :return: sentences in history order
    """
    if not commonsense:
        return []
    if scope not in KNOWLEDGE_SCOPES:
        raise ValueError(f'Unsupported knowledge scope {scope}. Options: {KNOWLEDGE_SCOPES}')
    if scope == 'all':
        return [sentence for i in range(turn_index) for sentence in commonsense[i]]
    for i in range(turn_index - 1, -1, -1):
        if dialogue.utterances[i].role is SpeakerRole.SEEKER:
            return list(commonsense[i])
    return []


def build_examples(dialogue: Dialogue, vocab: Vocabulary, commonsense: Optional[Sequence[Sequence[str]]] = None,
                   scope: str = KNOWLEDGE_SCOPES[0]) -> list[TrainingExample]:
    """One training example per helper utterance

    :param dialogue: validated dialogue
    :param vocab: run vocabulary
    :param commonsense: optional verbalized sentences per utterance, aligned with dialogue.utterances
    :param scope: which utterances' sentences are appended, see select_knowledge
    :return: examples in turn order; empty when the dialogue has no helper turns
    """
    if commonsense is not None and len(commonsense) != len(dialogue.utterances):
        raise ValueError(f'commonsense has {len(commonsense)} entries for {len(dialogue.utterances)} utterances')
    examples = []
    for turn_index in dialogue.helper_turns:
        utterance = dialogue.utterances[turn_index]
        knowledge = select_knowledge(dialogue, turn_index, commonsense, scope)
        target = (vocab.marker_id(utterance.strategy), *(utterance.tokens or tokenize(utterance.text, vocab)), EOS_ID)
        examples.append(TrainingExample(
            input_ids=build_input(dialogue.situation, dialogue.utterances[:turn_index], vocab, knowledge),
            target_ids=target,
            gold_strategy=utterance.strategy,
            dialogue_id=dialogue.id,
            turn_index=turn_index,
        ))
    return examples


def decoder_input(target_ids: Sequence[int]) -> TokenSequence:
    """Teacher-forced decoder input: BOS followed by the target without its last token"""
    return (BOS_ID, *target_ids[:-1])


def load_examples(path: str | Path) -> list[TrainingExample]:
    examples = []
    for line_num, line in enumerate(read_lines(path), 1):
        if not line.strip():
            continue
        try:
            examples.append(TrainingExample.from_json(line))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise ParseError(line_num, str(path), str(e))
    return examples


def write_examples(examples: Iterable[TrainingExample], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', encoding='utf-8') as f:
        for example in examples:
            f.write(example.to_json() + '\n')
    return path
