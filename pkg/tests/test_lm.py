import math
import random

import pytest
import torch

from steerdial.consts import BOS_ID, CLS_ID, EOS_ID, MARKER_OFFSET, SEP_ID
from steerdial.corpus import TrainingExample
from steerdial.decoding import DecodingConfig, decode_utterance
from steerdial.exceptions import ConfigError, EmptyInput, InvalidToken
from steerdial.lm import (
    ModelConfig,
    SteerLM,
    encode,
    joint_loss,
    lm_loss,
    next_token_distribution,
    strategy_loss,
    train_lm,
)
from steerdial.training import TrainingConfig, gradient_check

VOCAB_SIZE = 20
STRATEGY_COUNT = 4
FIRST_WORD = MARKER_OFFSET + STRATEGY_COUNT


def _random_example(rng, index=0):
    words = list(range(FIRST_WORD, VOCAB_SIZE))
    gold = rng.randrange(STRATEGY_COUNT)
    source = [CLS_ID, *rng.choices(words, k=rng.randint(1, 4)), SEP_ID, *rng.choices(words, k=rng.randint(1, 3))]
    target = [MARKER_OFFSET + gold, *rng.choices(words, k=rng.randint(0, 4)), EOS_ID]
    return TrainingExample(tuple(source), tuple(target), gold, f'r{index}', 1)


def _examples(seed, count):
    rng = random.Random(seed)
    return [_random_example(rng, i) for i in range(count)]


def _model(seed=0, **kwargs):
    config = ModelConfig(vocab_size=VOCAB_SIZE, embedding_dim=4, hidden_dim=3, strategy_count=STRATEGY_COUNT,
                         seed=seed, **kwargs)
    return SteerLM(config)


def _zeroed(model):
    with torch.no_grad():
        for param in model.parameters():
            torch.nn.init.zeros_(param)
    return model


@pytest.mark.parametrize('seed', range(10))
def test_joint_loss_gradients(seed):
    model = _model(seed)
    example = _random_example(random.Random(100 + seed))
    gradient_check(model, lambda: joint_loss(model, example, alpha=0.7))


def test_gradients_two_layer_decoder():
    model = _model(3, decoder_layers=2, init_scale=0.3)
    example = _random_example(random.Random(7))
    gradient_check(model, lambda: joint_loss(model, example, alpha=1.0))


def test_model_is_float64_and_seeded():
    first, second = _model(4), _model(4)
    for (name, p), q in zip(first.named_parameters(), second.parameters()):
        assert p.dtype == torch.float64, name
        assert torch.equal(p, q)
        assert p.abs().max().item() <= 0.08


def test_model_needs_vocab_size():
    with pytest.raises(ConfigError):
        SteerLM(ModelConfig())
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=5, hidden_dim=0)


def test_next_token_distribution():
    model = _model(1)
    ctx = encode(model, (CLS_ID, 12, SEP_ID, 13))
    with torch.no_grad():
        dist = next_token_distribution(model, ctx, (MARKER_OFFSET + 2, 15))
    assert dist.shape == (VOCAB_SIZE,)
    assert dist.sum().item() == pytest.approx(1.0, abs=1e-12)
    assert (dist > 0).all()


def test_next_token_distribution_matches_incremental_steps():
    model = _model(2)
    ctx = encode(model, (CLS_ID, 12, 13))
    prefix = (MARKER_OFFSET + 1, 16, 17)
    with torch.no_grad():
        state = model.start(ctx)
        for token in (BOS_ID, *prefix):
            state, logits = model.step(ctx, state, token)
        full = next_token_distribution(model, ctx, prefix)
    assert torch.allclose(torch.softmax(logits, dim=-1), full, atol=1e-12)


@pytest.mark.parametrize('prefix', [(), (15,), (MARKER_OFFSET + STRATEGY_COUNT,), (BOS_ID,)])
def test_next_token_distribution_needs_marker(prefix):
    model = _model()
    with pytest.raises(InvalidToken):
        next_token_distribution(model, encode(model, (CLS_ID, 12)), prefix)


@pytest.mark.parametrize('input_ids', [(), (12, 13), (CLS_ID, VOCAB_SIZE), (CLS_ID, -1)])
def test_encode_invalid_input(input_ids):
    with pytest.raises(InvalidToken):
        encode(_model(), input_ids)


def test_batch_losses_ignore_padding():
    model = _model(5)
    examples = _examples(3, 4)
    with torch.no_grad():
        lm, strategy = model.batch_losses(examples)
        for i, example in enumerate(examples):
            assert lm[i].item() == pytest.approx(lm_loss(model, example).item(), abs=1e-10)
            ctx = encode(model, example.input_ids)
            assert strategy[i].item() == pytest.approx(strategy_loss(model, ctx, example.gold_strategy).item(),
                                                       abs=1e-10)


def test_joint_loss_composition():
    model = _model(6)
    example = _examples(4, 1)[0]
    with torch.no_grad():
        lm = lm_loss(model, example)
        strategy = strategy_loss(model, encode(model, example.input_ids), example.gold_strategy)
        assert joint_loss(model, example, 0.0).item() == pytest.approx(lm.item(), abs=1e-12)
        assert joint_loss(model, example, 2.0).item() == pytest.approx((lm + 2 * strategy).item(), abs=1e-10)
    with pytest.raises(ValueError):
        joint_loss(model, example, -1.0)


def test_alpha_zero_matches_generation_only():
    examples = _examples(5, 10)
    model_config = ModelConfig(vocab_size=VOCAB_SIZE, embedding_dim=4, hidden_dim=3, strategy_count=STRATEGY_COUNT,
                               seed=8)
    config = TrainingConfig(alpha=0.0, learning_rate=0.1, epochs=2, batch_size=3, seed=8)
    joint = train_lm(examples, model_config, config, mode='joint')
    plain = train_lm(examples, model_config, config, mode='generation_only')
    for (name, p), q in zip(joint.model.named_parameters(), plain.model.parameters()):
        assert torch.equal(p, q), name
    assert [row['lm_loss'] for row in joint.trace] == [row['lm_loss'] for row in plain.trace]


def test_train_lm_trace_and_determinism():
    examples, dev = _examples(6, 8), _examples(7, 3)
    model_config = ModelConfig(vocab_size=VOCAB_SIZE, embedding_dim=4, hidden_dim=3, strategy_count=STRATEGY_COUNT)
    config = TrainingConfig(alpha=1.0, learning_rate=0.05, epochs=2, batch_size=4, seed=1, optimizer='adam')
    first = train_lm(examples, model_config, config, mode='joint', dev_examples=dev)
    second = train_lm(examples, model_config, config, mode='joint', dev_examples=dev)
    assert first.trace == second.trace
    assert set(first.trace[0]) == {'epoch', 'loss', 'lm_loss', 'strategy_loss', 'dev_lm_loss',
                                   'dev_strategy_accuracy'}
    row = first.trace[-1]
    assert row['loss'] == pytest.approx(row['lm_loss'] + row['strategy_loss'])


def test_train_lm_errors():
    model_config = ModelConfig(vocab_size=VOCAB_SIZE, strategy_count=STRATEGY_COUNT)
    with pytest.raises(ConfigError):
        train_lm(_examples(0, 2), model_config, TrainingConfig(), mode='strategy_only')
    with pytest.raises(EmptyInput):
        train_lm([], model_config, TrainingConfig())


def _stepwise_loss(model, example):
    """Sum of -log p(gold) fed one decoder step at a time"""
    ctx = encode(model, example.input_ids)
    state, total = model.start(ctx), 0.0
    for fed, gold in zip((BOS_ID, *example.target_ids[:-1]), example.target_ids):
        state, logits = model.step(ctx, state, fed)
        total -= torch.log_softmax(logits, dim=-1)[gold].item()
    return total


@pytest.mark.parametrize('seed', range(5))
def test_lm_loss_matches_stepwise_oracle(seed):
    model = _model(seed, init_scale=0.5)
    example = _random_example(random.Random(200 + seed))
    with torch.no_grad():
        assert lm_loss(model, example).item() == pytest.approx(_stepwise_loss(model, example), abs=1e-10)


def test_uniform_model_losses():
    model = _zeroed(SteerLM(ModelConfig(vocab_size=VOCAB_SIZE, embedding_dim=4, hidden_dim=3, strategy_count=8)))
    example = TrainingExample((CLS_ID, 15, SEP_ID, 16), (MARKER_OFFSET + 1, 17, EOS_ID), 1, 'u', 1)
    ctx = encode(model, example.input_ids)
    with torch.no_grad():
        assert lm_loss(model, example).item() == pytest.approx(3 * math.log(VOCAB_SIZE), abs=1e-12)
        assert strategy_loss(model, ctx, 5).item() == pytest.approx(math.log(8), abs=1e-12)
        assert joint_loss(model, example, 0.5).item() == pytest.approx(
            3 * math.log(VOCAB_SIZE) + 0.5 * math.log(8), abs=1e-12)
        dist = next_token_distribution(model, ctx, (MARKER_OFFSET + 1,))
    assert torch.allclose(dist, torch.full((VOCAB_SIZE,), 1 / VOCAB_SIZE, dtype=torch.float64), atol=1e-15)


def test_zero_model_cls_vector_ignores_input():
    model = _zeroed(_model())
    with torch.no_grad():
        first = encode(model, (CLS_ID, 12, SEP_ID, 13)).cls_vector
        second = encode(model, (CLS_ID, 17, 18, 19)).cls_vector
    assert torch.equal(first, second)


def test_train_lm_overfits_one_example():
    example = TrainingExample((CLS_ID, 12, SEP_ID, 13), (MARKER_OFFSET + 2, 14, 15, 16, 17, EOS_ID), 2, 'o', 1)
    model_config = ModelConfig(vocab_size=VOCAB_SIZE, embedding_dim=8, hidden_dim=8, strategy_count=STRATEGY_COUNT)
    trained = train_lm([example], model_config, TrainingConfig(learning_rate=0.5, epochs=300, batch_size=1))
    initial = trained.trace[0]['loss']
    with torch.no_grad():
        assert lm_loss(trained.model, example).item() < 0.1 * initial
        result = decode_utterance(encode(trained.model, example.input_ids), 2, trained.model,
                                  cfg=DecodingConfig(mode='greedy'))
    assert result.tokens == example.target_ids[1:-1]
