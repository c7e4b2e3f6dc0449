import json
from unittest.mock import MagicMock

import pytest
import torch

from steerdial.consts import CLS_ID, EOS_ID, SEP_ID
from steerdial.decoding import (
    DecodingConfig,
    GenerationResult,
    GenerationRow,
    batch_generate,
    decode_utterance,
    fudge_rescore,
    top_candidates,
    turn_seed,
    write_generations,
    write_step_logs,
)
from steerdial.exceptions import ConfigError, MissingGold
from steerdial.lm import encode
from steerdial.strategy import DiscriminatorModel, StrategyPredictor


@pytest.fixture
def ctx(small_lm, tiny_vocab):
    return encode(small_lm, (CLS_ID, tiny_vocab.id_of('i'), SEP_ID, tiny_vocab.id_of('job')))


def test_turn_seed():
    assert turn_seed(7, 'd1', 3) == turn_seed(7, 'd1', 3)
    assert len({turn_seed(7, 'd1', 3), turn_seed(8, 'd1', 3), turn_seed(7, 'd2', 3), turn_seed(7, 'd1', 1)}) == 4
    assert 0 <= turn_seed(7, 'd1', 3) < 2 ** 63


def test_top_candidates_ties_by_lowest_id():
    distribution = torch.tensor([0.1, 0.3, 0.2, 0.3, 0.1], dtype=torch.float64)
    assert top_candidates(distribution, 3).tolist() == [1, 3, 2]
    assert top_candidates(distribution, 10).tolist() == [1, 3, 2, 0, 4]


@pytest.mark.parametrize('kwargs', [{'mode': 'beam'}, {'sample_k': 0}, {'fudge_candidates': 0},
                                    {'max_length': 0}, {'control_lambda': -1.0}])
def test_decoding_config_validation(kwargs):
    with pytest.raises(ConfigError):
        DecodingConfig(**kwargs)


def test_fudge_rescore_identity(small_lm, small_disc, ctx, tiny_vocab):
    with torch.no_grad():
        lm_dist = torch.softmax(small_lm.step(ctx, small_lm.start(ctx), CLS_ID)[1], dim=-1)
    rescored = fudge_rescore(lm_dist, [tiny_vocab.id_of('i')], 2, small_disc, k_f=len(tiny_vocab), control_lambda=0)
    assert torch.equal(rescored, lm_dist)


@pytest.mark.parametrize('control_lambda', [0.0, 1.0, 4.0])
def test_fudge_rescore_support(small_disc, tiny_vocab, control_lambda):
    lm_dist = torch.softmax(torch.linspace(-1, 1, len(tiny_vocab), dtype=torch.float64), dim=-1)
    rescored = fudge_rescore(lm_dist, [], 1, small_disc, k_f=5, control_lambda=control_lambda)
    support = torch.nonzero(rescored).flatten().tolist()
    assert sorted(support) == sorted(top_candidates(lm_dist, 5).tolist())
    assert rescored.sum().item() == pytest.approx(1.0, abs=1e-12)


def test_fudge_rescore_zero_lambda_renormalizes_top_k(small_disc, tiny_vocab):
    lm_dist = torch.softmax(torch.linspace(-1, 1, len(tiny_vocab), dtype=torch.float64), dim=-1)
    candidates = top_candidates(lm_dist, 4)
    rescored = fudge_rescore(lm_dist, [9], 0, small_disc, k_f=4, control_lambda=0)
    expected = lm_dist[candidates] / lm_dist[candidates].sum()
    assert torch.allclose(rescored[candidates], expected, atol=1e-12)


def test_fudge_rescore_hand_arithmetic():
    lm_dist = torch.tensor([0.5, 0.5, 0.0, 0.0], dtype=torch.float64)
    disc = MagicMock(spec=DiscriminatorModel)
    disc.candidate_distributions.return_value = torch.tensor([[0.1, 0.9], [0.9, 0.1]], dtype=torch.float64)
    rescored = fudge_rescore(lm_dist, [], 1, disc, k_f=2, control_lambda=1.0)
    assert rescored.tolist() == pytest.approx([0.9, 0.1, 0.0, 0.0], abs=1e-12)
    assert disc.candidate_distributions.call_args.args[1].tolist() == [0, 1]


@pytest.mark.parametrize('control_lambda', [0.5, 1.0, 4.0])
def test_uniform_discriminator_keeps_lm_ranking(small_disc, tiny_vocab, control_lambda):
    with torch.no_grad():
        for param in small_disc.parameters():
            torch.nn.init.zeros_(param)
    lm_dist = torch.softmax(torch.linspace(-1, 1, len(tiny_vocab), dtype=torch.float64), dim=-1)
    candidates = top_candidates(lm_dist, 5)
    rescored = fudge_rescore(lm_dist, [9, 10], 2, small_disc, k_f=5, control_lambda=control_lambda)
    assert torch.allclose(rescored[candidates], lm_dist[candidates] / lm_dist[candidates].sum(), atol=1e-12)
    assert top_candidates(rescored, 5).tolist() == candidates.tolist()


def test_fudge_prefers_discriminator_strategy(small_disc, tiny_vocab):
    lm_dist = torch.full((len(tiny_vocab),), 1 / len(tiny_vocab), dtype=torch.float64)
    strategy = 3
    with torch.no_grad():
        disc_probs = small_disc.candidate_distributions(None, torch.arange(len(tiny_vocab)))[:, strategy]
    rescored = fudge_rescore(lm_dist, [], strategy, small_disc, k_f=len(tiny_vocab), control_lambda=8.0)
    assert int(rescored.argmax()) == int(disc_probs.argmax())


def test_decode_identity_without_control(small_lm, small_disc, ctx, tiny_vocab):
    plain = decode_utterance(ctx, 1, small_lm, None, DecodingConfig(max_length=8))
    controlled = decode_utterance(ctx, 1, small_lm, small_disc,
                                  DecodingConfig(max_length=8, control_lambda=0, fudge_candidates=len(tiny_vocab)))
    assert plain.tokens == controlled.tokens


def test_decode_respects_max_length(small_lm, ctx):
    result = decode_utterance(ctx, 0, small_lm, cfg=DecodingConfig(max_length=3))
    assert len(result.tokens) <= 3
    assert EOS_ID not in result.tokens
    assert result.strategy_used == 0
    assert result.per_step_log is None


def test_decode_sampling_is_seeded(small_lm, small_disc, ctx):
    cfg = DecodingConfig(mode='top_k_sample', sample_k=5, max_length=6, fudge_candidates=6)
    first = decode_utterance(ctx, 2, small_lm, small_disc, cfg, torch.Generator().manual_seed(turn_seed(1, 'a', 1)))
    second = decode_utterance(ctx, 2, small_lm, small_disc, cfg, torch.Generator().manual_seed(turn_seed(1, 'a', 1)))
    assert first == second


def test_decode_trace(small_lm, small_disc, ctx):
    result = decode_utterance(ctx, 4, small_lm, small_disc, DecodingConfig(max_length=4, fudge_candidates=3,
                                                                           trace=True))
    assert 1 <= len(result.per_step_log) <= 5
    for step in result.per_step_log:
        assert len(step.candidates) == len(step.lm_probs) == len(step.disc_probs) == len(step.final_probs) == 3
        assert step.chosen in step.candidates
        assert sum(step.final_probs) == pytest.approx(1.0)


def test_decode_rejects_unknown_strategy(small_lm, ctx):
    with pytest.raises(ValueError):
        decode_utterance(ctx, 8, small_lm)


def test_batch_generate_oracle(small_lm, tiny_dialogues, tiny_vocab):
    rows = batch_generate(tiny_dialogues, StrategyPredictor('oracle'), small_lm, tiny_vocab,
                          DecodingConfig(max_length=4, seed=3))
    assert [(r.dialogue_id, r.turn_index) for r in rows] == [('d1', 1), ('d1', 3), ('d2', 1)]
    assert all(r.result.strategy_used == r.gold_strategy for r in rows)
    assert rows[0].reference == 'i am sorry you lost your job .'


def test_batch_generate_parallel_matches_serial(small_lm, small_disc, tiny_dialogues, tiny_vocab):
    cfg = DecodingConfig(mode='top_k_sample', sample_k=4, max_length=5, fudge_candidates=6, seed=11)
    predictor = StrategyPredictor('joint', lm=small_lm)
    serial = batch_generate(tiny_dialogues, predictor, small_lm, tiny_vocab, cfg, small_disc)
    parallel = batch_generate(tiny_dialogues, predictor, small_lm, tiny_vocab, cfg, small_disc, workers=3)
    assert serial == parallel


def test_batch_generate_with_knowledge(small_lm, tiny_dialogues, tiny_vocab):
    knowledge = {'d2': [['As a result, PersonX feels lonely.'], []]}
    rows = batch_generate(tiny_dialogues[1:], StrategyPredictor('oracle'), small_lm, tiny_vocab,
                          DecodingConfig(max_length=3), knowledge=knowledge)
    assert len(rows) == 1


def test_batch_generate_error_names_dialogue(small_lm, tiny_dialogues, tiny_vocab):
    predictor = StrategyPredictor('oracle')

    def predict(history, gold=None, ctx=None):
        raise MissingGold('no gold')

    predictor.predict = predict
    with pytest.raises(MissingGold, match="dialogue 'd1'"):
        batch_generate(tiny_dialogues, predictor, small_lm, tiny_vocab, DecodingConfig(max_length=2))


def test_write_generations(tmp_path, tiny_vocab):
    sorry = tuple(tiny_vocab.id_of(w) for w in ('i', 'am', 'sorry'))
    rows = [GenerationRow('d1', 1, GenerationResult(sorry, 0), 'i am so sorry .', 2)]
    path = write_generations(rows, tmp_path / 'gen.jsonl', tiny_vocab)
    assert json.loads(path.read_text()) == {
        'dialogue_id': 'd1', 'turn_index': 1, 'strategy_used': 'Question', 'text': 'i am sorry',
        'reference': 'i am so sorry .', 'gold_strategy': 'Reflection of feelings',
    }


def test_write_step_logs(tmp_path, small_lm, small_disc, ctx):
    result = decode_utterance(ctx, 0, small_lm, small_disc, DecodingConfig(max_length=2, fudge_candidates=2,
                                                                           trace=True))
    path = write_step_logs([GenerationRow('d1', 1, result, 'ref', 0)], tmp_path / 'steps.jsonl')
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert [line['step'] for line in lines] == list(range(len(result.per_step_log)))
    assert set(lines[0]) == {'dialogue_id', 'turn_index', 'step', 'candidates', 'lm_probs', 'disc_probs',
                             'final_probs', 'chosen'}
