"""Strategy prediction (joint head, standalone classifier, LM markers, oracle) and the prefix discriminator

The discriminator reads only the response tokens, marker and EOS stripped, and emits a strategy distribution at
every position from a unidirectional LSTM, so position t depends on x_1..x_t only.
"""
from __future__ import annotations

import dataclasses
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .consts import (
    BOS_ID,
    DEFAULT_STRATEGIES,
    INIT_SCALE_DEFAULT,
    MARKER_OFFSET,
    CheckpointKinds,
)
from .corpus import TokenSequence, TrainingExample
from .exceptions import ConfigError, EmptyInput, InvalidToken, MissingGold
from .lm import EncodedContext, SteerLM, encode, pad
from .training import Trained, TrainingConfig, fit, init_uniform_

DiscState = Optional[tuple[torch.Tensor, torch.Tensor]]


class StrategySource(str, Enum):
    JOINT = 'joint'
    CLASSIFIER = 'classifier'
    ORACLE = 'oracle'
    LM = 'lm'


def _check_dims(config, names: Sequence[str]) -> None:
    if config.vocab_size < 0:
        raise ConfigError(f'vocab_size must be >= 0, got {config.vocab_size}')
    for name in names:
        if getattr(config, name) < 1:
            raise ConfigError(f'{name} must be >= 1, got {getattr(config, name)}')


@dataclass(frozen=True)
class ClassifierConfig:
    vocab_size: int = 0
    embedding_dim: int = 32
    hidden_dim: int = 32
    strategy_count: int = len(DEFAULT_STRATEGIES)
    seed: int = 1
    init_scale: float = INIT_SCALE_DEFAULT

    def __post_init__(self):
        _check_dims(self, ('embedding_dim', 'hidden_dim', 'strategy_count'))

    def sized(self, vocab_size: int, strategy_count: int, seed: Optional[int] = None) -> ClassifierConfig:
        return dataclasses.replace(self, vocab_size=vocab_size, strategy_count=strategy_count,
                                   seed=self.seed if seed is None else seed)


@dataclass(frozen=True)
class DiscriminatorConfig:
    vocab_size: int = 0
    embedding_dim: int = 32
    hidden_dim: int = 32
    strategy_count: int = len(DEFAULT_STRATEGIES)
    seed: int = 2
    init_scale: float = INIT_SCALE_DEFAULT

    def __post_init__(self):
        _check_dims(self, ('embedding_dim', 'hidden_dim', 'strategy_count'))

    def sized(self, vocab_size: int, strategy_count: int, seed: Optional[int] = None) -> DiscriminatorConfig:
        return dataclasses.replace(self, vocab_size=vocab_size, strategy_count=strategy_count,
                                   seed=self.seed if seed is None else seed)


@checkpoint.register(CheckpointKinds.CLASSIFIER)
class ExternalClassifier(nn.Module):
    """Bag-of-embeddings history classifier, trained separately from the LM"""
    config_type = ClassifierConfig

    def __init__(self, config: ClassifierConfig):
        super().__init__()
        if config.vocab_size < 1:
            raise ConfigError('vocab_size must be set before building the model')
        self.config = config
        self.embedding = nn.Embedding(config.vocab_size, config.embedding_dim)
        self.hidden = nn.Linear(config.embedding_dim, config.hidden_dim)
        self.output = nn.Linear(config.hidden_dim, config.strategy_count)
        self.double()
        init_uniform_(self, config.seed, config.init_scale)

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        mask = (torch.arange(ids.shape[1])[None, :] < lengths[:, None]).unsqueeze(-1)
        pooled = (self.embedding(ids) * mask).sum(dim=1) / lengths[:, None]
        return self.output(torch.tanh(self.hidden(pooled)))

    def distribution(self, history: Sequence[int]) -> torch.Tensor:
        ids, lengths = pad([history], self.config.vocab_size)
        return torch.softmax(self(ids, lengths)[0], dim=-1)


@checkpoint.register(CheckpointKinds.DISCRIMINATOR)
class DiscriminatorModel(nn.Module):
    """Recurrent prefix classifier: one strategy distribution per token position"""
    config_type = DiscriminatorConfig

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        if config.vocab_size < 1:
            raise ConfigError('vocab_size must be set before building the model')
        self.config = config
        self.embedding = nn.Embedding(config.vocab_size, config.embedding_dim)
        self.lstm = nn.LSTM(config.embedding_dim, config.hidden_dim, batch_first=True)
        self.output = nn.Linear(config.hidden_dim, config.strategy_count)
        self.double()
        init_uniform_(self, config.seed, config.init_scale)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """Per-position logits [batch, steps, strategies]. Right padding does not affect earlier positions"""
        outputs, _ = self.lstm(self.embedding(ids))
        return self.output(outputs)

    def advance(self, state: DiscState, token: int) -> DiscState:
        """Recurrent state after consuming one more token. None is the empty-prefix state"""
        _, state = self.lstm(self.embedding(torch.tensor([[token]])), state)
        return state

    def prefix_state(self, prefix: Sequence[int]) -> DiscState:
        if not prefix:
            return None
        ids, _ = pad([prefix], self.config.vocab_size)
        _, state = self.lstm(self.embedding(ids))
        return state

    def candidate_distributions(self, state: DiscState, candidates: torch.Tensor) -> torch.Tensor:
        """Strategy distribution at the last position of prefix + c, for every candidate c at once
        :param state: state after the prefix
        :param candidates: token ids [k]
        :return: probabilities [k, strategies]
        """
        if state is not None:
            state = tuple(s.expand(-1, len(candidates), -1).contiguous() for s in state)
        outputs, _ = self.lstm(self.embedding(candidates[:, None]), state)
        return torch.softmax(self.output(outputs[:, -1]), dim=-1)


def response_tokens(example: TrainingExample) -> TokenSequence:
    """Discriminator input for an example: the target without its leading marker and trailing EOS"""
    return tuple(example.target_ids[1:-1])


def predict_strategy_joint(model: SteerLM, ctx: EncodedContext) -> torch.Tensor:
    """Softmax of the dense strategy head on the CLS vector"""
    return torch.softmax(model.strategy_logits(ctx)[0], dim=-1)


def lm_marker_distribution(model: SteerLM, ctx: EncodedContext) -> torch.Tensor:
    """The LM's first-step distribution after BOS, restricted to strategy markers and renormalized"""
    _, logits = model.step(ctx, model.start(ctx), BOS_ID)
    return torch.softmax(logits[MARKER_OFFSET:MARKER_OFFSET + model.config.strategy_count], dim=-1)


def argmax_label(distribution: torch.Tensor) -> int:
    """Highest-probability strategy. Ties go to the lowest index"""
    return int(torch.argmax(distribution).item())


class StrategyPredictor:
    """Resolves the conditioning strategy for a turn from one source

    :param source: where the strategy comes from
    :param lm: required for joint and lm sources
    :param classifier: required for the classifier source
    """
    def __init__(self, source: StrategySource | str, lm: Optional[SteerLM] = None,
                 classifier: Optional[ExternalClassifier] = None):
        self.source = StrategySource(source)
        if self.source in (StrategySource.JOINT, StrategySource.LM) and lm is None:
            raise ConfigError(f'strategy source {self.source.value} needs a language model')
        if self.source is StrategySource.CLASSIFIER and classifier is None:
            raise ConfigError('strategy source classifier needs a trained classifier')
        self.lm = lm
        self.classifier = classifier

    def distribution(self, history: Sequence[int], ctx: Optional[EncodedContext] = None) -> torch.Tensor:
        if self.source is StrategySource.CLASSIFIER:
            return self.classifier.distribution(history)
        if ctx is None:
            ctx = encode(self.lm, history)
        if self.source is StrategySource.JOINT:
            return predict_strategy_joint(self.lm, ctx)
        if self.source is StrategySource.LM:
            return lm_marker_distribution(self.lm, ctx)
        raise ValueError('oracle source has no distribution')

    def predict(self, history: Sequence[int], gold: Optional[int] = None,
                ctx: Optional[EncodedContext] = None) -> int:
        if self.source is StrategySource.ORACLE:
            if gold is None:
                raise MissingGold('oracle strategy source requires a gold label')
            return gold
        with torch.no_grad():
            return argmax_label(self.distribution(history, ctx))


def predict_strategy(history: Sequence[int], source: StrategySource | str, gold: Optional[int] = None,
                     lm: Optional[SteerLM] = None, classifier: Optional[ExternalClassifier] = None) -> int:
    """Argmax strategy of the chosen source, ties to the lowest index. Oracle returns the gold label
    :raises MissingGold: oracle without a gold label
    """
    return StrategyPredictor(source, lm, classifier).predict(history, gold)


def disc_step_distributions(prefix: Sequence[int], model: DiscriminatorModel) -> torch.Tensor:
    """One strategy distribution per prefix position
    :param prefix: non-empty response tokens
    :param model: discriminator
    :return: probabilities [len(prefix), strategies]
    :raises InvalidToken: empty prefix or ids outside the vocabulary
    """
    if not prefix:
        raise InvalidToken('discriminator prefix must be non-empty')
    ids, _ = pad([prefix], model.config.vocab_size)
    return torch.softmax(model(ids)[0], dim=-1)


def disc_loss(utterance: Sequence[int], gold: int, model: DiscriminatorModel) -> torch.Tensor:
    """Sum over all prefixes of -log p(gold | x_1..x_t)"""
    if not utterance:
        raise InvalidToken('utterance must be non-empty')
    ids, _ = pad([utterance], model.config.vocab_size)
    return -F.log_softmax(model(ids)[0], dim=-1)[:, gold].sum()


def _disc_batch_loss(model: DiscriminatorModel, batch: Sequence[tuple[TokenSequence, int]]) -> torch.Tensor:
    ids, lengths = pad([u for u, _ in batch], model.config.vocab_size)
    log_probs = F.log_softmax(model(ids), dim=-1)
    gold = torch.as_tensor([g for _, g in batch], dtype=torch.long)
    nll = -log_probs.gather(-1, gold[:, None, None].expand(-1, ids.shape[1], 1)).squeeze(-1)
    mask = torch.arange(ids.shape[1])[None, :] < lengths[:, None]
    return (nll * mask).sum()


def discriminator_accuracy(model: DiscriminatorModel, items: Sequence[tuple[TokenSequence, int]]) -> float:
    """Full-sequence accuracy: argmax at the last position against the gold label"""
    ids, lengths = pad([u for u, _ in items], model.config.vocab_size)
    with torch.no_grad():
        last = model(ids)[torch.arange(len(items)), lengths - 1]
    return sum(int(p) == g for p, (_, g) in zip(last.argmax(dim=-1).tolist(), items)) / len(items)


def classifier_accuracy(model: ExternalClassifier, items: Sequence[tuple[TokenSequence, int]]) -> float:
    ids, lengths = pad([h for h, _ in items], model.config.vocab_size)
    with torch.no_grad():
        predicted = model(ids, lengths).argmax(dim=-1).tolist()
    return sum(p == g for p, (_, g) in zip(predicted, items)) / len(items)


def train_external_classifier(examples: Sequence[tuple[TokenSequence, int]], model_config: ClassifierConfig,
                              config: TrainingConfig,
                              dev_examples: Sequence[tuple[TokenSequence, int]] = ()) -> Trained:
    """Train the standalone history classifier. Never touches LM parameters

    :param examples: (history tokens, gold label) pairs
    :param model_config: sized classifier config
    :param config: training config
    :param dev_examples: held-out pairs; accuracy is reported per epoch as dev_accuracy
    :return: trained classifier and trace
    """
    if not examples:
        raise EmptyInput('train_external_classifier needs at least one example')
    model = ExternalClassifier(model_config)

    def batch_loss(batch):
        ids, lengths = pad([h for h, _ in batch], model.config.vocab_size)
        gold = torch.as_tensor([g for _, g in batch], dtype=torch.long)
        loss = F.cross_entropy(model(ids, lengths), gold, reduction='sum')
        return {'loss': loss}

    def evaluate(module):
        return {'dev_accuracy': classifier_accuracy(module, dev_examples)}

    trace = fit(model, examples, batch_loss, config, 'classifier', evaluate if dev_examples else None)
    return Trained(model, trace)


def train_discriminator(utterances: Sequence[tuple[TokenSequence, int]], model_config: DiscriminatorConfig,
                        config: TrainingConfig,
                        dev_utterances: Sequence[tuple[TokenSequence, int]] = ()) -> Trained:
    """Train the prefix discriminator on the mean prefix loss

    :param utterances: (response tokens, gold label) pairs, marker stripped. Empty responses are skipped
    :param model_config: sized discriminator config
    :param config: training config
    :param dev_utterances: held-out pairs; full-sequence accuracy is reported per epoch as dev_accuracy
    :return: trained discriminator and trace
    """
    utterances = [(u, g) for u, g in utterances if u]
    dev_utterances = [(u, g) for u, g in dev_utterances if u]
    if not utterances:
        raise EmptyInput('train_discriminator needs at least one non-empty utterance')
    model = DiscriminatorModel(model_config)

    def batch_loss(batch):
        return {'loss': _disc_batch_loss(model, batch)}

    def evaluate(module):
        return {'dev_accuracy': discriminator_accuracy(module, dev_utterances)}

    trace = fit(model, utterances, batch_loss, config, 'discriminator', evaluate if dev_utterances else None)
    return Trained(model, trace)
