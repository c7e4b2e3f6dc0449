"""Automatic metrics over generation files: corpus BLEU-1..4, ROUGE-L, strategy accuracy, marker consistency

BLEU is corpus-level with pooled clipped k-gram counts, a single reference per candidate and no smoothing: any
zero precision gives 0. ROUGE-L is the macro average of per-pair LCS F1 (beta = 1).
"""
from __future__ import annotations

import json
import math
from collections import Counter
from collections.abc import Hashable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import log
from .corpus import StrategySet, read_lines, split_words
from .exceptions import EmptyInput, LengthMismatch, ParseError

GENERATION_KEYS = ('dialogue_id', 'turn_index', 'strategy_used', 'text', 'reference', 'gold_strategy')
TEXT_KEYS = ('text', 'reference')
Tokens = Sequence[Hashable]


def _check_pairs(left: Sequence, right: Sequence) -> None:
    if len(left) != len(right):
        raise LengthMismatch(len(left), len(right))


def ngrams(tokens: Tokens, k: int) -> Counter:
    return Counter(tuple(tokens[i:i + k]) for i in range(len(tokens) - k + 1))


def bleu_n(candidates: Sequence[Tokens], references: Sequence[Tokens], n: int) -> float:
    """Corpus BLEU-n
    :param candidates: generated token sequences
    :param references: one reference per candidate
    :param n: max k-gram order, 1..4
    :return: geometric mean of clipped precisions for k=1..n times the brevity penalty min(1, exp(1 - r/c))
    :raises LengthMismatch: candidate and reference counts differ
    """
    _check_pairs(candidates, references)
    if not 1 <= n <= 4:
        raise ValueError(f'n must be within 1..4, got {n}')
    candidate_length = sum(len(c) for c in candidates)
    reference_length = sum(len(r) for r in references)
    if candidate_length == 0:
        return 0.0
    log_precision = 0.0
    for k in range(1, n + 1):
        matches = total = 0
        for candidate, reference in zip(candidates, references):
            candidate_counts, reference_counts = ngrams(candidate, k), ngrams(reference, k)
            matches += sum(min(count, reference_counts[gram]) for gram, count in candidate_counts.items())
            total += max(len(candidate) - k + 1, 0)
        if matches == 0:
            return 0.0
        log_precision += math.log(matches / total)
    brevity_penalty = min(1.0, math.exp(1 - reference_length / candidate_length))
    return brevity_penalty * math.exp(log_precision / n)


def lcs_length(a: Tokens, b: Tokens) -> int:
    previous = [0] * (len(b) + 1)
    for x in a:
        current = [0]
        for j, y in enumerate(b, 1):
            current.append(previous[j - 1] + 1 if x == y else max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l(candidates: Sequence[Tokens], references: Sequence[Tokens]) -> float:
    """Macro-averaged LCS F1
    :raises LengthMismatch: candidate and reference counts differ
    :raises EmptyInput: no pairs
    """
    _check_pairs(candidates, references)
    if not candidates:
        raise EmptyInput('rouge_l needs at least one pair')
    total = 0.0
    for candidate, reference in zip(candidates, references):
        lcs = lcs_length(candidate, reference)
        precision = lcs / len(candidate) if candidate else 0.0
        recall = lcs / len(reference) if reference else 0.0
        total += 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return total / len(candidates)


def strategy_accuracy(predicted: Sequence[int], gold: Sequence[int]) -> float:
    """Fraction of exact matches
    :raises LengthMismatch: lists differ in length
    :raises EmptyInput: empty lists
    """
    _check_pairs(predicted, gold)
    if not predicted:
        raise EmptyInput('strategy_accuracy needs at least one label')
    return sum(p == g for p, g in zip(predicted, gold)) / len(predicted)


def marker_consistency(rows: Sequence[Mapping], markers: Mapping[str, str]) -> float:
    """Fraction of generated texts containing the marker word of the strategy they were generated for"""
    if not rows:
        raise EmptyInput('marker_consistency needs at least one row')
    hits = sum(markers.get(row['strategy_used']) in split_words(row['text']) for row in rows)
    return hits / len(rows)


@dataclass(frozen=True)
class EvaluationReport:
    """Metrics in [0, 1]. to_dict scales BLEU and ROUGE-L by 100"""
    bleu_1: float
    bleu_2: float
    bleu_3: float
    bleu_4: float
    rouge_l: float
    strategy_accuracy: float
    count: int
    marker_consistency: Optional[float] = None
    per_strategy: dict = field(default_factory=dict)
    bertscore: Optional[float] = None  # reserved for an externally computed score

    def to_dict(self) -> dict:
        report = {
            **{f'bleu_{n}': 100 * getattr(self, f'bleu_{n}') for n in range(1, 5)},
            'rouge_l': 100 * self.rouge_l,
            'strategy_accuracy': self.strategy_accuracy,
            'count': self.count,
            'bertscore': self.bertscore,
            'per_strategy': self.per_strategy,
        }
        if self.marker_consistency is not None:
            report['marker_consistency'] = self.marker_consistency
        return report

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + '\n'


def read_generations(path: str | Path, strategy_set: StrategySet) -> list[dict]:
    """Read and validate a generation JSON Lines file
    :raises IoError: unreadable file
    :raises ParseError: malformed or non-UTF-8 line, missing keys, non-string texts or unknown strategy names
    """
    path = Path(path)
    rows = []
    for line_num, line in enumerate(read_lines(path), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(line_num, str(path), e.msg)
        if not isinstance(row, dict):
            raise ParseError(line_num, str(path), 'expected an object')
        if missing := [k for k in GENERATION_KEYS if k not in row]:
            raise ParseError(line_num, str(path), f'missing keys {missing}')
        if wrong := [k for k in TEXT_KEYS if not isinstance(row[k], str)]:
            raise ParseError(line_num, str(path), f'expected strings for {wrong}')
        for key in ('strategy_used', 'gold_strategy'):
            if row[key] not in strategy_set.labels:
                raise ParseError(line_num, str(path), f'unknown strategy {row[key]!r} in {key}')
        rows.append(row)
    return rows


def evaluate_rows(rows: Sequence[Mapping], strategy_set: StrategySet,
                  markers: Optional[Mapping[str, str]] = None) -> EvaluationReport:
    if not rows:
        raise EmptyInput('no generations to evaluate')
    candidates = [split_words(row['text']) for row in rows]
    references = [split_words(row['reference']) for row in rows]
    predicted = [strategy_set.index(row['strategy_used']) for row in rows]
    gold = [strategy_set.index(row['gold_strategy']) for row in rows]
    per_strategy = {}
    for name in strategy_set.labels:
        index = strategy_set.index(name)
        support = sum(g == index for g in gold)
        if support:
            per_strategy[name] = {'gold': support, 'correct': sum(p == g == index for p, g in zip(predicted, gold))}
    return EvaluationReport(
        **{f'bleu_{n}': bleu_n(candidates, references, n) for n in range(1, 5)},
        rouge_l=rouge_l(candidates, references),
        strategy_accuracy=strategy_accuracy(predicted, gold),
        count=len(rows),
        marker_consistency=marker_consistency(rows, markers) if markers else None,
        per_strategy=per_strategy,
    )


def evaluate_run(generation_file: str | Path, strategy_set: StrategySet, markers: Optional[Mapping[str, str]] = None,
                 report_path: Optional[str | Path] = None) -> EvaluationReport:
    """Compute all metrics for a generation file, tokenizing texts with the corpus word rule

    :param generation_file: JSON Lines written by decoding.write_generations
    :param strategy_set: strategies the file's names refer to
    :param markers: optional strategy name -> marker word, enables marker_consistency
    :param report_path: where to write the report JSON, if given
    :return: report
    :raises ParseError: malformed file
    :raises EmptyInput: file has no rows
    """
    report = evaluate_rows(read_generations(generation_file, strategy_set), strategy_set, markers)
    if report_path is not None:
        report_path = Path(report_path)
        report_path.parent.mkdir(parents=True, exist_ok=True)
        report_path.write_text(report.to_json(), encoding='utf-8')
        log.get_logger().debug(f'Wrote report to {report_path}')
    return report
