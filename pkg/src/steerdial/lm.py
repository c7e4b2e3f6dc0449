"""Conditional encoder-decoder language model with a joint strategy head

Encoder: tied embedding -> bidirectional LSTM. The state at position 0 (CLS) is the context vector for the
strategy head and, through a tanh bridge, the decoder's initial hidden state.
Decoder: tied embedding -> LSTM -> dot attention over encoder states -> tanh combine -> vocabulary logits.

The strategy conditioning signal is the marker token leading every target, so p(x_t | x_<t, s) is the decoder
distribution after BOS, marker, x_1..x_{t-1}.
"""
from __future__ import annotations

import dataclasses
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from . import checkpoint, log
from .consts import (
    BOS_ID,
    CLS_ID,
    DEFAULT_STRATEGIES,
    INIT_SCALE_DEFAULT,
    MARKER_OFFSET,
    PAD_ID,
    CheckpointKinds,
)
from .corpus import TrainingExample, decoder_input
from .exceptions import ConfigError, EmptyInput, InvalidToken
from .training import Trained, TrainingConfig, fit, init_uniform_

TRAIN_MODES = ('generation_only', 'joint')
DecoderState = tuple[torch.Tensor, torch.Tensor]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 0  # 0 until the vocabulary is built
    embedding_dim: int = 32
    hidden_dim: int = 64
    encoder_layers: int = 1
    decoder_layers: int = 1
    strategy_count: int = len(DEFAULT_STRATEGIES)
    seed: int = 0
    init_scale: float = INIT_SCALE_DEFAULT

    def __post_init__(self):
        if self.vocab_size < 0:
            raise ConfigError(f'vocab_size must be >= 0, got {self.vocab_size}')
        for name in ('embedding_dim', 'hidden_dim', 'encoder_layers', 'decoder_layers', 'strategy_count'):
            if getattr(self, name) < 1:
                raise ConfigError(f'{name} must be >= 1, got {getattr(self, name)}')

    def sized(self, vocab_size: int, strategy_count: int, seed: Optional[int] = None) -> ModelConfig:
        """Copy with the run's vocabulary and strategy set sizes filled in"""
        return dataclasses.replace(self, vocab_size=vocab_size, strategy_count=strategy_count,
                                   seed=self.seed if seed is None else seed)


@dataclass(frozen=True)
class EncodedContext:
    """Encoder output for a batch. For a single input the batch dimension is 1"""
    states: torch.Tensor  # [batch, source_len, 2 * hidden]
    keys: torch.Tensor  # [batch, source_len, hidden]
    mask: torch.Tensor  # [batch, source_len], True on real tokens

    @property
    def cls_vector(self) -> torch.Tensor:
        return self.states[:, 0]

    def __len__(self) -> int:
        return self.states.shape[1]


def pad(sequences: Sequence[Sequence[int]], vocab_size: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad token sequences with PAD
    :return: (ids [batch, max_len], lengths [batch])
    :raises InvalidToken: on ids outside 0..vocab_size-1 or empty sequences
    """
    lengths = [len(s) for s in sequences]
    if min(lengths) < 1:
        raise InvalidToken('empty token sequence')
    ids = torch.full((len(sequences), max(lengths)), PAD_ID, dtype=torch.long)
    for row, sequence in enumerate(sequences):
        ids[row, :len(sequence)] = torch.as_tensor(sequence, dtype=torch.long)
    if ids.min().item() < 0 or ids.max().item() >= vocab_size:
        bad = [i for s in sequences for i in s if not 0 <= i < vocab_size]
        raise InvalidToken(f'token id {bad[0]} outside vocabulary of size {vocab_size}')
    return ids, torch.as_tensor(lengths, dtype=torch.long)


@checkpoint.register(CheckpointKinds.LM)
class SteerLM(nn.Module):
    config_type = ModelConfig

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.vocab_size < 1:
            raise ConfigError('vocab_size must be set before building the model')
        self.config = config
        hidden, layers = config.hidden_dim, config.decoder_layers
        self.embedding = nn.Embedding(config.vocab_size, config.embedding_dim)  # shared by encoder and decoder
        self.encoder = nn.LSTM(config.embedding_dim, hidden, num_layers=config.encoder_layers, batch_first=True,
                               bidirectional=True)
        self.bridge = nn.Linear(2 * hidden, hidden * layers)
        self.decoder = nn.LSTM(config.embedding_dim, hidden, num_layers=layers, batch_first=True)
        self.attention_key = nn.Linear(2 * hidden, hidden, bias=False)
        self.combine = nn.Linear(3 * hidden, hidden)
        self.output = nn.Linear(hidden, config.vocab_size)
        self.strategy_head = nn.Linear(2 * hidden, config.strategy_count)
        self.double()
        init_uniform_(self, config.seed, config.init_scale)

    def encode(self, ids: torch.Tensor, lengths: torch.Tensor) -> EncodedContext:
        embedded = self.embedding(ids)
        packed = pack_padded_sequence(embedded, lengths, batch_first=True, enforce_sorted=False)
        states, _ = self.encoder(packed)
        states, _ = pad_packed_sequence(states, batch_first=True, total_length=ids.shape[1])
        mask = torch.arange(ids.shape[1])[None, :] < lengths[:, None]
        return EncodedContext(states=states, keys=self.attention_key(states), mask=mask)

    def start(self, ctx: EncodedContext) -> DecoderState:
        """Initial decoder state from the CLS vector"""
        batch, layers, hidden = ctx.states.shape[0], self.config.decoder_layers, self.config.hidden_dim
        h0 = torch.tanh(self.bridge(ctx.cls_vector)).view(batch, layers, hidden).transpose(0, 1).contiguous()
        return h0, torch.zeros_like(h0)

    def project(self, ctx: EncodedContext, outputs: torch.Tensor) -> torch.Tensor:
        """Attend over the encoder states and map decoder outputs [batch, steps, hidden] to vocabulary logits"""
        scores = outputs @ ctx.keys.transpose(1, 2)
        scores = scores.masked_fill(~ctx.mask[:, None, :], float('-inf'))
        context = torch.softmax(scores, dim=-1) @ ctx.states
        return self.output(torch.tanh(self.combine(torch.cat([outputs, context], dim=-1))))

    def decode(self, ctx: EncodedContext, decoder_ids: torch.Tensor) -> torch.Tensor:
        """Teacher-forced logits [batch, steps, vocab]. Right padding does not affect earlier steps"""
        outputs, _ = self.decoder(self.embedding(decoder_ids), self.start(ctx))
        return self.project(ctx, outputs)

    def step(self, ctx: EncodedContext, state: DecoderState, token: int) -> tuple[DecoderState, torch.Tensor]:
        """Feed one token to a single-example decoder
        :return: (new state, logits over the vocabulary for the next token)
        """
        outputs, state = self.decoder(self.embedding(torch.tensor([[token]])), state)
        return state, self.project(ctx, outputs)[0, -1]

    def strategy_logits(self, ctx: EncodedContext) -> torch.Tensor:
        return self.strategy_head(ctx.cls_vector)

    def batch_losses(self, examples: Sequence[TrainingExample],
                     with_strategy: bool = True) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
        """Per-example LM loss and strategy loss
        :return: (lm_loss [batch], strategy_loss [batch] or None)
        """
        vocab_size = self.config.vocab_size
        src, src_lengths = pad([e.input_ids for e in examples], vocab_size)
        targets, target_lengths = pad([e.target_ids for e in examples], vocab_size)
        decoder_ids, _ = pad([decoder_input(e.target_ids) for e in examples], vocab_size)
        ctx = self.encode(src, src_lengths)
        log_probs = F.log_softmax(self.decode(ctx, decoder_ids), dim=-1)
        nll = -log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
        target_mask = torch.arange(targets.shape[1])[None, :] < target_lengths[:, None]
        lm = (nll * target_mask).sum(dim=1)
        if not with_strategy:
            return lm, None
        gold = torch.as_tensor([e.gold_strategy for e in examples], dtype=torch.long)
        strategy = F.cross_entropy(self.strategy_logits(ctx), gold, reduction='none')
        return lm, strategy


def _check_input(model: SteerLM, input_ids: Sequence[int]) -> None:
    if not input_ids:
        raise InvalidToken('input must be non-empty')
    if input_ids[0] != CLS_ID:
        raise InvalidToken(f'input must begin with CLS ({CLS_ID}), got {input_ids[0]}')


def encode(model: SteerLM, input_ids: Sequence[int]) -> EncodedContext:
    """Encode one input sequence
    :param model: language model
    :param input_ids: CLS-led token ids
    :return: context with one position per input token
    :raises InvalidToken: empty input, missing CLS, or an id outside the vocabulary
    """
    _check_input(model, input_ids)
    ids, lengths = pad([input_ids], model.config.vocab_size)
    return model.encode(ids, lengths)


def next_token_distribution(model: SteerLM, ctx: EncodedContext, prefix: Sequence[int]) -> torch.Tensor:
    """p(x_t | x_<t, s) where s is the strategy marker leading `prefix`
    :param model: language model
    :param ctx: single-example encoder context
    :param prefix: marker followed by the tokens decoded so far
    :return: probabilities over the vocabulary
    :raises InvalidToken: prefix not led by a strategy marker, or ids outside the vocabulary
    """
    if not prefix or not MARKER_OFFSET <= prefix[0] < MARKER_OFFSET + model.config.strategy_count:
        raise InvalidToken('prefix must begin with a strategy-marker token')
    decoder_ids, _ = pad([(BOS_ID, *prefix)], model.config.vocab_size)
    return torch.softmax(model.decode(ctx, decoder_ids)[0, -1], dim=-1)


def lm_loss(model: SteerLM, example: TrainingExample) -> torch.Tensor:
    """Sum over target positions of -log p(gold token)"""
    return model.batch_losses([example], with_strategy=False)[0][0]


def strategy_loss(model: SteerLM, ctx: EncodedContext, gold: int) -> torch.Tensor:
    """-log softmax(head(cls_vector))[gold]"""
    return -F.log_softmax(model.strategy_logits(ctx)[0], dim=-1)[gold]


def joint_loss(model: SteerLM, example: TrainingExample, alpha: float) -> torch.Tensor:
    """lm_loss + alpha * strategy_loss"""
    if alpha < 0:
        raise ValueError(f'alpha must be >= 0, got {alpha}')
    lm, strategy = model.batch_losses([example])
    return lm[0] + alpha * strategy[0]


def train_lm(examples: Sequence[TrainingExample], model_config: ModelConfig, config: TrainingConfig,
             mode: str = TRAIN_MODES[0], dev_examples: Sequence[TrainingExample] = ()) -> Trained:
    """Train the LM on lm_loss (generation_only) or on lm_loss + alpha * strategy_loss (joint)

    :param examples: non-empty training examples
    :param model_config: sized model config; its seed initializes the parameters
    :param config: training config; its seed orders the minibatches
    :param mode: one of TRAIN_MODES
    :param dev_examples: optional held-out examples for per-epoch dev loss (and dev strategy accuracy in joint mode)
    :return: trained model and per-epoch trace
    :raises DivergedError: on a non-finite loss
    """
    if mode not in TRAIN_MODES:
        raise ConfigError(f'Unsupported training mode {mode}. Options: {TRAIN_MODES}')
    if not examples:
        raise EmptyInput('train_lm needs at least one example')
    joint = mode == 'joint'
    model = SteerLM(model_config)
    log.get_logger().debug(f'LM parameters: {sum(p.numel() for p in model.parameters())}')

    def batch_loss(batch: Sequence[TrainingExample]) -> dict[str, torch.Tensor]:
        lm, strategy = model.batch_losses(batch, with_strategy=joint)
        if not joint:
            return {'loss': lm.sum(), 'lm_loss': lm.sum()}
        return {'loss': lm.sum() + config.alpha * strategy.sum(), 'lm_loss': lm.sum(), 'strategy_loss': strategy.sum()}

    def evaluate(module: SteerLM) -> dict[str, float]:
        lm, strategy = module.batch_losses(dev_examples)
        metrics = {'dev_lm_loss': lm.mean().item()}
        if joint:
            src, lengths = pad([e.input_ids for e in dev_examples], module.config.vocab_size)
            predicted = module.strategy_logits(module.encode(src, lengths)).argmax(dim=-1).tolist()
            metrics['dev_strategy_accuracy'] = sum(
                p == e.gold_strategy for p, e in zip(predicted, dev_examples)) / len(dev_examples)
        return metrics

    trace = fit(model, examples, batch_loss, config, f'lm[{mode}]', evaluate if dev_examples else None)
    return Trained(model, trace)
