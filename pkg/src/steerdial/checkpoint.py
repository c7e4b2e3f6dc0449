"""Versioned JSON checkpoint container shared by the LM, the classifier and the discriminator

Layout:
    {"format_version": 1, "kind": "lm"|"classifier"|"discriminator", "labels": {...},
     "config": {...}, "strategies": [...], "vocab": [...], "params": [{"name", "shape", "values"}, ...]}

`params` follow the module's state_dict order. Values are float64 written with repr precision, so a save/load
round trip is bit-exact and two saves of the same model are byte-identical
"""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Callable, Optional

import torch
from torch import nn

from . import log
from .consts import CHECKPOINT_FORMAT_VERSION, DEFAULT_LABELS
from .corpus import StrategySet, Vocabulary
from .exceptions import ConfigMismatch, FormatError, IoError

_REGISTRY: dict[str, tuple[type[nn.Module], type]] = {}


def register(kind: str) -> Callable[[type[nn.Module]], type[nn.Module]]:
    """Class decorator registering a model as a checkpoint kind. The model must take its config dataclass as the
    only constructor argument, expose it as `.config` and declare the config type as `config_type`
    """
    def decorator(cls: type[nn.Module]) -> type[nn.Module]:
        _REGISTRY[kind] = (cls, cls.config_type)
        cls.kind = kind
        return cls
    return decorator


def to_dict(model: nn.Module, vocab: Vocabulary) -> dict:
    params = [
        {'name': name, 'shape': list(tensor.shape), 'values': tensor.detach().reshape(-1).tolist()}
        for name, tensor in model.state_dict().items()
    ]
    return {
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'kind': model.kind,
        'labels': dict(DEFAULT_LABELS),
        'config': dataclasses.asdict(model.config),
        'strategies': list(vocab.strategies.labels),
        'vocab': list(vocab.tokens),
        'params': params,
    }


def save_checkpoint(model: nn.Module, path: str | Path, vocab: Vocabulary) -> Path:
    """Write a model with its config and vocabulary snapshot
    :param model: registered model
    :param path: destination file
    :param vocab: run vocabulary
    :return: path written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = to_dict(model, vocab)
    path.write_text(json.dumps(data, separators=(',', ':')) + '\n', encoding='utf-8')
    log.get_logger().debug(f'Saved {model.kind} checkpoint to {path}')
    return path


def from_dict(data: dict, kind: Optional[str] = None, vocab: Optional[Vocabulary] = None) -> tuple[nn.Module, Vocabulary]:
    if not isinstance(data, dict) or 'format_version' not in data:
        raise FormatError('not a steerdial checkpoint')
    if data['format_version'] != CHECKPOINT_FORMAT_VERSION:
        raise FormatError(f'format version {data["format_version"]} != supported {CHECKPOINT_FORMAT_VERSION}')
    if kind is not None and data.get('kind') != kind:
        raise FormatError(f'expected a {kind} checkpoint, got {data.get("kind")}')
    try:
        model_cls, config_cls = _REGISTRY[data['kind']]
    except KeyError:
        raise FormatError(f'unknown checkpoint kind {data.get("kind")}')
    try:
        snapshot = Vocabulary(tuple(data['vocab']), StrategySet(tuple(data['strategies'])))
        config = config_cls(**data['config'])
        raw_params = data['params']
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f'corrupt checkpoint: {e}')
    if vocab is not None:
        if len(vocab) != len(snapshot):
            raise ConfigMismatch(f'checkpoint vocabulary has {len(snapshot)} tokens, runtime vocabulary {len(vocab)}')
        if vocab.strategies != snapshot.strategies:
            raise ConfigMismatch('checkpoint strategy set differs from the runtime strategy set')
    model = model_cls(config)
    state = model.state_dict()
    if [p.get('name') for p in raw_params] != list(state):
        raise FormatError('parameter list does not match the model layout')
    loaded = {}
    for param in raw_params:
        expected = state[param['name']]
        if list(param['shape']) != list(expected.shape) or len(param['values']) != expected.numel():
            raise FormatError(f'parameter {param["name"]} has the wrong shape')
        loaded[param['name']] = torch.tensor(param['values'], dtype=expected.dtype).reshape(expected.shape)
    model.load_state_dict(loaded)
    model.eval()
    return model, snapshot


def load_checkpoint(path: str | Path, kind: Optional[str] = None,
                    vocab: Optional[Vocabulary] = None) -> tuple[nn.Module, Vocabulary]:
    """Load a checkpoint written by save_checkpoint

    :param path: checkpoint file
    :param kind: expected kind, if any
    :param vocab: runtime vocabulary to check against
    :return: (model in eval mode, vocabulary snapshot)
    :raises FormatError: truncated or corrupt file, other kind, other format version
    :raises ConfigMismatch: vocabulary size or strategy set differs from the runtime one
    """
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise IoError(path, e.strerror or 'unreadable')
    except UnicodeDecodeError:
        raise FormatError(f'{path}: truncated or corrupt checkpoint (invalid UTF-8)')
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f'{path}: truncated or corrupt checkpoint ({e.msg})')
    try:
        return from_dict(data, kind, vocab)
    except FormatError as e:
        raise e.with_context(str(path))
