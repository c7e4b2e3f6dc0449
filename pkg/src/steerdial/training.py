"""Minibatch training loop shared by the LM, the classifier and the discriminator, plus gradient checking"""
from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, TypeVar

import torch
from torch import nn

from . import log
from .consts import ALPHA_DEFAULT, INIT_SCALE_DEFAULT
from .exceptions import ConfigError, DivergedError

T = TypeVar('T')
OPTIMIZERS = ('sgd', 'adam')  # OPTIMIZERS[0] is the default

# a batch loss returns named per-batch sums; 'loss' is the objective, the rest are reported in the trace
BatchLoss = Callable[[Sequence[T]], dict[str, torch.Tensor]]


@dataclass(frozen=True)
class TrainingConfig:
    alpha: float = ALPHA_DEFAULT
    learning_rate: float = 0.1
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    optimizer: str = OPTIMIZERS[0]
    grad_clip: Optional[float] = None  # elementwise value clip; None disables

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ConfigError(f'alpha must be >= 0, got {self.alpha}')
        if not self.learning_rate > 0:
            raise ConfigError(f'learning_rate must be > 0, got {self.learning_rate}')
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f'epochs and batch_size must be >= 1, got {self.epochs} and {self.batch_size}')
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f'Unsupported optimizer {self.optimizer}. Options: {OPTIMIZERS}')
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError(f'grad_clip must be > 0, got {self.grad_clip}')


@dataclass
class Trained:
    """A trained model with its per-epoch trace"""
    model: nn.Module
    trace: list[dict] = field(default_factory=list)


def init_uniform_(module: nn.Module, seed: int, scale: float = INIT_SCALE_DEFAULT) -> nn.Module:
    """Draw every parameter from U(-scale, scale) with a generator seeded by `seed`, in parameter order"""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for param in module.parameters():
            param.copy_(torch.empty_like(param).uniform_(-scale, scale, generator=generator))
    return module


def make_optimizer(module: nn.Module, config: TrainingConfig) -> torch.optim.Optimizer:
    if config.optimizer == 'adam':
        return torch.optim.Adam(module.parameters(), lr=config.learning_rate, foreach=False)
    return torch.optim.SGD(module.parameters(), lr=config.learning_rate, foreach=False)


def fit(module: nn.Module, items: Sequence[T], batch_loss: BatchLoss, config: TrainingConfig, component: str,
        evaluate: Optional[Callable[[nn.Module], dict[str, float]]] = None) -> list[dict]:
    """Minibatch gradient descent over shuffled items

    Each step minimizes the batch mean of `batch_loss(batch)['loss']`. Shuffling draws from a generator seeded with
    config.seed, so two runs with the same seed take identical steps

    :param module: model to train in place
    :param items: training items
    :param batch_loss: returns named per-batch sums. 'loss' is the optimized objective
    :param config: training config
    :param component: name used in logs and errors
    :param evaluate: optional held-out metrics computed after each epoch, added to the trace
    :return: per-epoch trace rows: epoch, per-item mean of each loss term, plus held-out metrics
    :raises DivergedError: when the loss becomes non-finite
    """
    logger = log.get_logger()
    generator = torch.Generator().manual_seed(config.seed)
    optimizer = make_optimizer(module, config)
    trace = []
    for epoch in range(1, config.epochs + 1):
        module.train()
        totals: dict[str, float] = {}
        order = torch.randperm(len(items), generator=generator).tolist()
        for start in range(0, len(order), config.batch_size):
            batch = [items[i] for i in order[start:start + config.batch_size]]
            terms = batch_loss(batch)
            loss = terms['loss']
            if not torch.isfinite(loss):
                raise DivergedError(component, epoch, loss.item())
            optimizer.zero_grad(set_to_none=True)
            (loss / len(batch)).backward()
            if config.grad_clip is not None:
                nn.utils.clip_grad_value_(module.parameters(), config.grad_clip)
            optimizer.step()
            for name, value in terms.items():
                totals[name] = totals.get(name, 0.0) + value.item()
        row = {'epoch': epoch, **{name: total / len(items) for name, total in totals.items()}}
        if not math.isfinite(row['loss']):
            raise DivergedError(component, epoch, row['loss'])
        if evaluate is not None:
            module.eval()
            with torch.no_grad():
                row.update(evaluate(module))
        trace.append(row)
        logger.info(f'{component} epoch {epoch}/{config.epochs} '
                    + ' '.join(f'{k}={v:.4f}' for k, v in row.items() if k != 'epoch'))
    module.eval()
    return trace


def write_trace(trace: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', encoding='utf-8') as f:
        for row in trace:
            f.write(json.dumps(row, sort_keys=True) + '\n')
    return path


def gradient_check(module: nn.Module, loss_fn: Callable[[], torch.Tensor], step: float = 1e-4,
                   rtol: float = 1e-4, atol: float = 1e-7) -> dict[str, tuple[float, float]]:
    """Compare autograd gradients with central finite differences, per parameter tensor

    :param module: float64 model
    :param loss_fn: closure computing a scalar loss from the module's current parameters
    :param step: finite-difference step
    :param rtol: relative error bound
    :param atol: absolute error bound, for tensors whose gradient is ~0
    :return: {parameter name: (relative error, absolute error)}
    :raises AssertionError: naming the first tensor that fails both bounds
    """
    module.zero_grad(set_to_none=True)
    loss_fn().backward()
    analytic = {name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                for name, p in module.named_parameters()}
    errors = {}
    with torch.no_grad():
        for name, param in module.named_parameters():
            numeric = torch.zeros_like(param)
            flat, flat_numeric = param.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + step
                plus = loss_fn().item()
                flat[i] = original - step
                minus = loss_fn().item()
                flat[i] = original
                flat_numeric[i] = (plus - minus) / (2 * step)
            diff = (analytic[name] - numeric).norm().item()
            scale = max(analytic[name].norm().item(), numeric.norm().item(), 1e-12)
            errors[name] = (diff / scale, diff)
            assert errors[name][0] < rtol or diff < atol, f'{name}: relative error {diff / scale:.3e}'
    return errors
