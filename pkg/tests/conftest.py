from pathlib import Path

import pytest

from steerdial.configer import load_run_config
from steerdial.corpus import StrategySet, build_examples, build_vocabulary, load_dataset, tokenize_dialogue
from steerdial.lm import ModelConfig, SteerLM
from steerdial.strategy import DiscriminatorConfig, DiscriminatorModel

DATA_DIR = Path(__file__).parent / 'data'


@pytest.fixture
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture
def strategies() -> StrategySet:
    return StrategySet()


@pytest.fixture
def tiny_dialogues(strategies):
    return load_dataset(DATA_DIR / 'tiny-corpus.jsonl', strategies)


@pytest.fixture
def tiny_vocab(tiny_dialogues, strategies):
    return build_vocabulary(tiny_dialogues, min_count=2, strategy_set=strategies)


@pytest.fixture
def tiny_examples(tiny_dialogues, tiny_vocab):
    return [e for d in tiny_dialogues for e in build_examples(tokenize_dialogue(d, tiny_vocab), tiny_vocab)]


@pytest.fixture
def tiny_config(tmp_path):
    return load_run_config(DATA_DIR / 'tiny-config.yaml', {'out_dir': tmp_path / 'run'})


@pytest.fixture
def small_lm(tiny_vocab):
    config = ModelConfig(vocab_size=len(tiny_vocab), embedding_dim=6, hidden_dim=5,
                         strategy_count=tiny_vocab.strategies.size, seed=3)
    return SteerLM(config)


@pytest.fixture
def small_disc(tiny_vocab):
    config = DiscriminatorConfig(vocab_size=len(tiny_vocab), embedding_dim=6, hidden_dim=5,
                                 strategy_count=tiny_vocab.strategies.size, seed=4)
    return DiscriminatorModel(config)
