import json
import random

import pytest

from steerdial.commonsense import CacheBackend, Relation
from steerdial.configer import load_run_config
from steerdial.corpus import StrategySet, load_dataset
from steerdial.fixtures import FIXTURE_STRATEGIES, OPENERS, generate_fixture, make_dialogue


@pytest.fixture
def fixture_paths(tmp_path):
    return generate_fixture(tmp_path / 'fx', seed=5, dialogues=50)


def _marked(text):
    return any(f' {marker} ' in f' {text} ' for marker, _, _ in FIXTURE_STRATEGIES.values())


def test_split_sizes(fixture_paths):
    strategies = StrategySet(tuple(FIXTURE_STRATEGIES))
    sizes = {split: len(load_dataset(fixture_paths[split], strategies)) for split in ('train', 'dev', 'test')}
    assert sizes == {'train': 40, 'dev': 5, 'test': 5}


def test_default_split_sizes(tmp_path):
    paths = generate_fixture(tmp_path)
    assert [len(paths[split].read_text().splitlines()) for split in ('train', 'dev', 'test')] == [160, 20, 20]


def test_fixture_is_deterministic(tmp_path):
    first = generate_fixture(tmp_path / 'a', seed=9, dialogues=30)
    second = generate_fixture(tmp_path / 'b', seed=9, dialogues=30)
    for name in first:
        assert first[name].read_bytes() == second[name].read_bytes(), name
    other = generate_fixture(tmp_path / 'c', seed=10, dialogues=30)
    assert other['train'].read_bytes() != first['train'].read_bytes()


def test_held_out_turns_carry_markers(fixture_paths):
    strategies = StrategySet(tuple(FIXTURE_STRATEGIES))
    for split in ('dev', 'test'):
        for dialogue in load_dataset(fixture_paths[split], strategies):
            for index in dialogue.helper_turns:
                utterance = dialogue.utterances[index]
                marker = FIXTURE_STRATEGIES[strategies.name(utterance.strategy)][0]
                assert marker in utterance.text.split()


def test_train_marker_rate(tmp_path):
    paths = generate_fixture(tmp_path, seed=1, dialogues=200, train_marker_rate=0.3)
    helpers = [u['text'] for line in paths['train'].read_text().splitlines()
               for u in json.loads(line)['utterances'] if u['role'] == 'helper']
    rate = sum(_marked(text) for text in helpers) / len(helpers)
    assert 0.2 < rate < 0.4


def test_cache_covers_every_utterance(fixture_paths):
    cache = CacheBackend(fixture_paths['cache'])
    strategies = StrategySet(tuple(FIXTURE_STRATEGIES))
    for split in ('train', 'dev', 'test'):
        for dialogue in load_dataset(fixture_paths[split], strategies):
            for utterance in dialogue.utterances:
                tuples = cache.generate_tuples(utterance.text)
                assert [t.relation for t in tuples] == list(Relation.canonical())


def test_config_loads(fixture_paths):
    config = load_run_config(fixture_paths['config'])
    assert config.strategies.labels == tuple(FIXTURE_STRATEGIES)
    assert config.markers == {name: marker for name, (marker, _, _) in FIXTURE_STRATEGIES.items()}
    assert config.data.train == fixture_paths['train'].resolve()
    assert config.commonsense.enabled
    assert config.seed == 5
    assert config.out_dir == fixture_paths['config'].resolve().parent / 'run'


def test_config_seed_override(tmp_path):
    paths = generate_fixture(tmp_path, seed=5, dialogues=10, config_seed=99)
    assert load_run_config(paths['config']).seed == 99


def test_make_dialogue_shape():
    cache = {}
    dialogue = make_dialogue(random.Random(0), 'x-0001', 1.0, cache)
    roles = [u['role'] for u in dialogue['utterances']]
    assert roles == ['seeker', 'helper', 'seeker', 'helper']
    for utterance in dialogue['utterances'][1::2]:
        marker, tail, _ = FIXTURE_STRATEGIES[utterance['strategy']]
        assert utterance['text'].endswith(f'{marker} {tail} .')
        assert any(utterance['text'].startswith(opener) for opener in OPENERS)
    assert len(cache) >= 2


def test_too_few_dialogues(tmp_path):
    with pytest.raises(ValueError):
        generate_fixture(tmp_path, dialogues=9)
