import json

import pytest
import torch

from steerdial.checkpoint import load_checkpoint, save_checkpoint
from steerdial.consts import CheckpointKinds
from steerdial.corpus import StrategySet, Vocabulary
from steerdial.exceptions import ConfigMismatch, FormatError, IoError
from steerdial.lm import SteerLM
from steerdial.strategy import ClassifierConfig, ExternalClassifier


def _assert_same_params(left, right):
    left_state, right_state = left.state_dict(), right.state_dict()
    assert list(left_state) == list(right_state)
    for name in left_state:
        assert torch.equal(left_state[name], right_state[name]), name


def test_round_trip_is_bit_exact(tmp_path, small_lm, tiny_vocab):
    path = save_checkpoint(small_lm, tmp_path / 'lm.ckpt.json', tiny_vocab)
    model, vocab = load_checkpoint(path, CheckpointKinds.LM, tiny_vocab)
    assert isinstance(model, SteerLM)
    assert model.config == small_lm.config
    assert vocab == tiny_vocab
    assert not model.training
    _assert_same_params(model, small_lm)


def test_round_trip_other_kinds(tmp_path, small_disc, tiny_vocab):
    classifier = ExternalClassifier(ClassifierConfig(vocab_size=len(tiny_vocab), embedding_dim=4, hidden_dim=3,
                                                     strategy_count=tiny_vocab.strategies.size, seed=9))
    for model in (classifier, small_disc):
        path = save_checkpoint(model, tmp_path / f'{model.kind}.ckpt.json', tiny_vocab)
        loaded, _ = load_checkpoint(path, model.kind)
        assert type(loaded) is type(model)
        _assert_same_params(loaded, model)


def test_saves_are_byte_identical(tmp_path, small_lm, tiny_vocab):
    first = save_checkpoint(small_lm, tmp_path / 'a.json', tiny_vocab)
    second = save_checkpoint(small_lm, tmp_path / 'b.json', tiny_vocab)
    assert first.read_bytes() == second.read_bytes()
    reloaded, _ = load_checkpoint(first)
    third = save_checkpoint(reloaded, tmp_path / 'c.json', tiny_vocab)
    assert first.read_bytes() == third.read_bytes()


def test_truncated_checkpoint(tmp_path, small_lm, tiny_vocab):
    path = save_checkpoint(small_lm, tmp_path / 'lm.json', tiny_vocab)
    path.write_bytes(path.read_bytes()[:200])
    with pytest.raises(FormatError) as e:
        load_checkpoint(path)
    assert str(path) in str(e.value)


def test_checkpoint_invalid_utf8(tmp_path, small_lm, tiny_vocab):
    path = save_checkpoint(small_lm, tmp_path / 'lm.json', tiny_vocab)
    path.write_bytes(b'\xff\xfe' + path.read_bytes())
    with pytest.raises(FormatError, match='UTF-8'):
        load_checkpoint(path)


def test_wrong_kind(tmp_path, small_lm, tiny_vocab):
    path = save_checkpoint(small_lm, tmp_path / 'lm.json', tiny_vocab)
    with pytest.raises(FormatError, match='discriminator'):
        load_checkpoint(path, CheckpointKinds.DISCRIMINATOR)


@pytest.mark.parametrize('mutate', [
    lambda data: data.update(format_version=99),
    lambda data: data.update(kind='transformer'),
    lambda data: data.pop('config'),
    lambda data: data['params'].pop(),
    lambda data: data['params'][0]['values'].pop(),
    lambda data: data['config'].update(hidden_dim=7),
])
def test_corrupt_checkpoint(tmp_path, small_lm, tiny_vocab, mutate):
    path = save_checkpoint(small_lm, tmp_path / 'lm.json', tiny_vocab)
    data = json.loads(path.read_text())
    mutate(data)
    path.write_text(json.dumps(data))
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_vocabulary_mismatch(tmp_path, small_lm, tiny_vocab):
    path = save_checkpoint(small_lm, tmp_path / 'lm.json', tiny_vocab)
    bigger = Vocabulary.from_corpus_tokens(tiny_vocab.tokens[14:] + ('extra',), tiny_vocab.strategies)
    with pytest.raises(ConfigMismatch):
        load_checkpoint(path, vocab=bigger)


def test_strategy_set_mismatch(tmp_path, small_lm, tiny_vocab):
    path = save_checkpoint(small_lm, tmp_path / 'lm.json', tiny_vocab)
    labels = list(tiny_vocab.strategies.labels)
    labels[0], labels[1] = labels[1], labels[0]
    reordered = Vocabulary.from_corpus_tokens(tiny_vocab.tokens[14:], StrategySet(tuple(labels)))
    with pytest.raises(ConfigMismatch):
        load_checkpoint(path, vocab=reordered)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(IoError):
        load_checkpoint(tmp_path / 'absent.json')
