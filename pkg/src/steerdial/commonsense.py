"""Commonsense relation-entailment tuples and their verbalization into prompt sentences

Backends:
- CacheBackend: JSON Lines of {"text": str, "tuples": [{"relation": str, "entailment": str}, ...x10]}
- RemoteBackend: POST {endpoint}/entail with {"text": str, "relations": [str]} -> {"tuples": [...]},
  written through to a cache on success
"""
from __future__ import annotations

import json
import threading
from abc import ABC, abstractmethod
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Optional

import requests
from tenacity import RetryCallState, retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from . import log
from .consts import (
    DEFAULT_TEMPLATES,
    ENTAIL_ROUTE,
    HISTORY_SEPARATOR,
    RELATIONS,
    SERVICE_RETRIES_DEFAULT,
    SERVICE_TIMEOUT_DEFAULT,
)
from .corpus import read_lines
from .exceptions import EmptyInput, MissingEntailment, ParseError, ServiceError


class Relation(str, Enum):
    """The 10 social relations. x-relations concern the speaker (PersonX), o-relations concern others"""
    O_EFFECT = 'oEffect'
    O_REACT = 'oReact'
    O_WANT = 'oWant'
    X_ATTR = 'xAttr'
    X_EFFECT = 'xEffect'
    X_INTENT = 'xIntent'
    X_NEED = 'xNeed'
    X_REACT = 'xReact'
    X_REASON = 'xReason'
    X_WANT = 'xWant'

    @property
    def order(self) -> int:
        return RELATIONS.index(self.value)

    @classmethod
    def canonical(cls) -> tuple[Relation, ...]:
        return tuple(cls(name) for name in RELATIONS)

    @classmethod
    def parse(cls, names: Iterable[str | Relation]) -> tuple[Relation, ...]:
        """Resolve relation names, deduplicated, in canonical order
        :raises ValueError: on unknown names
        """
        try:
            relations = {cls(name) for name in names}
        except ValueError as e:
            raise ValueError(f'{e}. Options: {RELATIONS}')
        return tuple(sorted(relations, key=lambda r: r.order))


@dataclass(frozen=True)
class CommonsenseTuple:
    relation: Relation
    entailment: str

    def __post_init__(self):
        object.__setattr__(self, 'relation', Relation(self.relation))
        if not self.entailment or not self.entailment.strip():
            raise ValueError(f'empty entailment for {self.relation.value}')

    def to_dict(self) -> dict:
        return {'relation': self.relation.value, 'entailment': self.entailment}


@dataclass(frozen=True)
class TemplateTable:
    """Relation -> sentence template with exactly one `{}` slot. Must cover all 10 relations"""
    templates: Mapping[Relation, str] = field(
        default_factory=lambda: {Relation(name): template for name, template in DEFAULT_TEMPLATES.items()})

    def __post_init__(self):
        templates = {Relation(relation): template for relation, template in self.templates.items()}
        if missing := [r.value for r in Relation.canonical() if r not in templates]:
            raise ValueError(f'template table missing relations: {missing}')
        for relation, template in templates.items():
            if template.count('{}') != 1 or template.count('{') != 1:
                raise ValueError(f'template for {relation.value} must contain exactly one {{}} slot: {template!r}')
        object.__setattr__(self, 'templates', MappingProxyType(templates))

    def __getitem__(self, relation: Relation) -> str:
        return self.templates[relation]


def verbalize(tuple_: CommonsenseTuple, table: TemplateTable) -> str:
    """Fill the relation's template with the entailment
    :param tuple_: relation-entailment pair
    :param table: template table
    :return: sentence ending with a period. The entailment is inserted verbatim
    """
    sentence = table[tuple_.relation].format(tuple_.entailment)
    return sentence if sentence.endswith('.') else sentence + '.'


def verbalize_selection(tuples: Sequence[CommonsenseTuple], table: TemplateTable,
                        selection: Iterable[Relation]) -> list[str]:
    """Verbalized sentences for the selected relations, in canonical relation order"""
    by_relation = {t.relation: t for t in tuples}
    sentences = []
    for relation in Relation.parse(selection):
        if relation not in by_relation:
            raise MissingEntailment(relation.value, 'no tuple for relation')
        sentences.append(verbalize(by_relation[relation], table))
    return sentences


def augment_history(history_sentences: Sequence[str], tuples: Sequence[CommonsenseTuple], table: TemplateTable,
                    selection: Iterable[Relation]) -> str:
    """Join history, then append the verbalized sentences of the selected relations after one more separator

    :param history_sentences: dialogue history utterances
    :param tuples: tuples to draw from
    :param table: template table
    :param selection: relations to append. Empty selection returns the joined history unchanged
    :return: augmented input text
    """
    history = HISTORY_SEPARATOR.join(history_sentences)
    sentences = verbalize_selection(tuples, table, selection)
    if not sentences:
        return history
    return history + HISTORY_SEPARATOR + ' '.join(sentences)


def _complete_tuples(raw: Sequence[Mapping]) -> list[CommonsenseTuple]:
    """Validate raw tuples into one per relation, in canonical order
    :raises ValueError: on malformed items or missing relations
    """
    by_relation = {}
    for item in raw:
        try:
            tuple_ = CommonsenseTuple(Relation(item['relation']), item['entailment'])
        except (KeyError, TypeError) as e:
            raise ValueError(f'malformed tuple {item!r} ({e})')
        by_relation.setdefault(tuple_.relation, tuple_)
    if missing := [r.value for r in Relation.canonical() if r not in by_relation]:
        raise ValueError(f'missing relations {missing}')
    return [by_relation[r] for r in Relation.canonical()]


class CommonsenseBackend(ABC):
    @abstractmethod
    def generate_tuples(self, text: str) -> list[CommonsenseTuple]:
        """One tuple per relation, in canonical relation order"""
        ...


class CacheBackend(CommonsenseBackend):
    """Deterministic lookup in a JSON Lines cache. Reads are lock-free after load; writes are serialized"""
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._entries: Optional[dict[str, list[CommonsenseTuple]]] = None
        self._write_lock = threading.Lock()

    @property
    def entries(self) -> dict[str, list[CommonsenseTuple]]:
        if self._entries is None:
            self._entries = self._load()
        return self._entries

    def _load(self) -> dict[str, list[CommonsenseTuple]]:
        if not self.path.exists():
            log.get_logger().debug(f'Commonsense cache {self.path} does not exist yet')
            return {}
        entries = {}
        for line_num, line in enumerate(read_lines(self.path), 1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                text, raw = data['text'], data['tuples']
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ParseError(line_num, str(self.path), str(e))
            try:
                entries[text] = _complete_tuples(raw)
            except ValueError as e:
                raise MissingEntailment(text, f'incomplete cached entailments: {e}')
        return entries

    def __contains__(self, text: str) -> bool:
        return text in self.entries

    def generate_tuples(self, text: str) -> list[CommonsenseTuple]:
        try:
            return list(self.entries[text])
        except KeyError:
            raise MissingEntailment(text)

    def store(self, text: str, tuples: Sequence[CommonsenseTuple]) -> None:
        """Append an entry to the cache file and the in-memory index"""
        with self._write_lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open('a', encoding='utf-8') as f:
                f.write(json.dumps({'text': text, 'tuples': [t.to_dict() for t in tuples]}) + '\n')
            self.entries[text] = list(tuples)


class RetryableServiceError(ServiceError):
    """Timeout, connection failure or 5xx from the commonsense service"""


def log_after(retry_state: RetryCallState) -> None:
    """Log after each failed attempt
    :param retry_state: tenacity retry state object
    """
    exception = retry_state.outcome.exception()
    if exception is not None:
        log.get_logger().warning(f'Retry {retry_state.attempt_number}, '
                                 f'{retry_state.seconds_since_start:.2f}s: {exception}')


class RemoteBackend(CommonsenseBackend):
    """Commonsense model behind HTTP. Cached texts are served locally; fresh results are written through to the
    cache only after a complete, valid response
    """
    def __init__(self, endpoint: str, timeout: float = SERVICE_TIMEOUT_DEFAULT, cache: Optional[CacheBackend] = None,
                 token: Optional[str] = None, retries: int = SERVICE_RETRIES_DEFAULT,
                 session: Optional[requests.Session] = None, retry_wait: float = 1.0):
        self.url = endpoint.rstrip('/') + ENTAIL_ROUTE
        self.timeout = timeout
        self.cache = cache
        self.retries = max(1, retries)
        self.retry_wait = retry_wait
        self.session = session or requests.Session()
        if token:
            self.session.headers['Authorization'] = f'Bearer {token}'

    def _post_once(self, text: str) -> dict:
        logger = log.get_logger()
        logger.debug(f'POST {self.url}')
        try:
            response = self.session.post(self.url, json={'text': text, 'relations': list(RELATIONS)},
                                         timeout=self.timeout)
        except requests.exceptions.Timeout:
            raise RetryableServiceError(reason=f'timeout after {self.timeout}s')
        except requests.exceptions.ConnectionError as e:
            raise RetryableServiceError(reason=f'connection error: {e}')
        if response.status_code >= 500:
            raise RetryableServiceError(response.status_code, response.reason or '')
        if response.status_code != 200:
            raise ServiceError(response.status_code, response.reason or '')
        try:
            return response.json()
        except ValueError:
            raise ServiceError(response.status_code, 'response is not JSON')

    def _post(self, text: str) -> dict:
        return retry(
            retry=retry_if_exception_type(RetryableServiceError),
            stop=stop_after_attempt(self.retries),
            wait=wait_exponential(multiplier=self.retry_wait, max=10 * self.retry_wait),
            after=log_after,
            reraise=True,
        )(self._post_once)(text)

    def generate_tuples(self, text: str) -> list[CommonsenseTuple]:
        if self.cache is not None and text in self.cache:
            return self.cache.generate_tuples(text)
        data = self._post(text)
        raw = data.get('tuples') if isinstance(data, dict) else None
        if not isinstance(raw, list):
            raise ServiceError(200, 'response has no tuples list')
        try:
            tuples = _complete_tuples(raw)
        except ValueError as e:
            raise ServiceError(200, str(e))
        if self.cache is not None:
            self.cache.store(text, tuples)
        return tuples


def generate_tuples(text: str, backend: CommonsenseBackend) -> list[CommonsenseTuple]:
    """Relation-entailment tuples for one text
    :param text: non-empty utterance or history text
    :param backend: cache or remote backend
    :return: exactly 10 tuples in canonical relation order
    :raises MissingEntailment: cache lacks the text
    :raises ServiceError: remote failure. The cache is left untouched
    """
    if not text or not text.strip():
        raise EmptyInput('commonsense text must be non-empty')
    return backend.generate_tuples(text)


def dialogue_knowledge(utterance_texts: Sequence[str], backend: CommonsenseBackend, table: TemplateTable,
                       selection: Iterable[Relation]) -> list[list[str]]:
    """Verbalized sentences per utterance, aligned with the utterance list. Empty texts get no sentences"""
    selection = Relation.parse(selection)
    knowledge = []
    for text in utterance_texts:
        if not selection or not text.strip():
            knowledge.append([])
            continue
        knowledge.append(verbalize_selection(generate_tuples(text, backend), table, selection))
    return knowledge
