"""Seeded synthetic emotional-support corpus with a marker vocabulary per strategy

Every helper turn starts with a neutral opener. A "marked" turn continues with its strategy's marker word and tail
word, so the strategy of a marked turn is readable from the text. Train turns are marked at `train_marker_rate`;
dev and test turns are always marked, so held-out splits measure how well decoding is steered.
The seeker turn before each helper turn carries a cue word for the helper's strategy.
"""
from __future__ import annotations

import json
import random
from pathlib import Path
from typing import Optional

from . import log
from .commonsense import CommonsenseTuple, Relation
from .configer import dump_yaml

FIXTURE_STRATEGIES = {
    # name: (marker word, tail word, seeker cue word)
    'Question': ('wonder', 'why', 'somehow'),
    'Reflection of feelings': ('sounds', 'heavy', 'inside'),
    'Self-disclosure': ('myself', 'too', 'alone'),
    'Providing Suggestions': ('try', 'walking', 'stuck'),
}
EMOTIONS = ('sad', 'anxious', 'angry', 'lonely', 'tired')
TOPICS = ('job', 'family', 'friend', 'exam', 'partner')
OPENERS = ('i hear you', 'i see', 'that is hard')
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
TRAIN_MARKER_RATE = 0.3
FIXTURE_FILES = {
    'train': 'train.jsonl',
    'dev': 'dev.jsonl',
    'test': 'test.jsonl',
    'cache': 'commonsense-cache.jsonl',
    'config': 'config.yaml',
}


def seeker_tuples(emotion: str, topic: str) -> list[CommonsenseTuple]:
    entailments = {
        Relation.O_EFFECT: 'listen',
        Relation.O_REACT: 'concerned',
        Relation.O_WANT: 'to help',
        Relation.X_ATTR: emotion,
        Relation.X_EFFECT: 'sighs',
        Relation.X_INTENT: 'to be heard',
        Relation.X_NEED: f'to think about the {topic}',
        Relation.X_REACT: emotion,
        Relation.X_REASON: f'the {topic} is hard',
        Relation.X_WANT: f'to fix the {topic}',
    }
    return [CommonsenseTuple(relation, entailments[relation]) for relation in Relation.canonical()]


def helper_tuples() -> list[CommonsenseTuple]:
    entailments = {
        Relation.O_EFFECT: 'feel supported',
        Relation.O_REACT: 'grateful',
        Relation.O_WANT: 'to talk more',
        Relation.X_ATTR: 'caring',
        Relation.X_EFFECT: 'listens',
        Relation.X_INTENT: 'to comfort',
        Relation.X_NEED: 'to listen',
        Relation.X_REACT: 'kind',
        Relation.X_REASON: 'they care',
        Relation.X_WANT: 'to support',
    }
    return [CommonsenseTuple(relation, entailments[relation]) for relation in Relation.canonical()]


def _helper_text(rng: random.Random, strategy: str, marked: bool) -> str:
    marker, tail, _ = FIXTURE_STRATEGIES[strategy]
    opener = rng.choice(OPENERS)
    return f'{opener} {marker} {tail} .' if marked else f'{opener} .'


def make_dialogue(rng: random.Random, dialogue_id: str, marker_rate: float,
                  cache: dict[str, list[CommonsenseTuple]]) -> dict:
    """[seeker, helper, seeker, helper] dialogue; fills `cache` with tuples for every utterance text"""
    names = list(FIXTURE_STRATEGIES)
    emotion, topic = rng.choice(EMOTIONS), rng.choice(TOPICS)
    utterances = []
    for _ in range(2):
        strategy = rng.choice(names)
        turn_emotion = rng.choice(EMOTIONS)
        seeker = f'my {topic} makes me {turn_emotion} {FIXTURE_STRATEGIES[strategy][2]} .'
        helper = _helper_text(rng, strategy, rng.random() < marker_rate)
        cache.setdefault(seeker, seeker_tuples(turn_emotion, topic))
        cache.setdefault(helper, helper_tuples())
        utterances.append({'role': 'seeker', 'text': seeker})
        utterances.append({'role': 'helper', 'text': helper, 'strategy': strategy})
    return {'id': dialogue_id, 'situation': f'i feel {emotion} about my {topic} .', 'utterances': utterances}


def fixture_config(seed: int) -> dict:
    """Run config for the fixture corpus, paths relative to the fixture directory"""
    return {
        'seed': seed,
        'out_dir': 'run',
        'data': {'train': FIXTURE_FILES['train'], 'dev': FIXTURE_FILES['dev'], 'test': FIXTURE_FILES['test'],
                 'min_count': 2},
        'strategies': {
            'labels': list(FIXTURE_STRATEGIES),
            'markers': {name: marker for name, (marker, _, _) in FIXTURE_STRATEGIES.items()},
        },
        'commonsense': {
            'enabled': True,
            'backend': 'cache',
            'cache_path': FIXTURE_FILES['cache'],
            'relations': ['xReact', 'xWant'],
        },
        'lm': {'embedding_dim': 32, 'hidden_dim': 64},
        'classifier': {'embedding_dim': 32, 'hidden_dim': 32},
        'discriminator': {'embedding_dim': 32, 'hidden_dim': 32},
        'training': {
            'lm': {'optimizer': 'adam', 'learning_rate': 0.01, 'epochs': 15, 'batch_size': 16, 'alpha': 1.0},
            'classifier': {'optimizer': 'adam', 'learning_rate': 0.02, 'epochs': 15, 'batch_size': 16},
            'discriminator': {'optimizer': 'adam', 'learning_rate': 0.01, 'epochs': 10, 'batch_size': 16},
        },
        'decoding': {'mode': 'greedy', 'fudge_candidates': 32, 'control_lambda': 4.0, 'max_length': 16},
        'generate': {'strategy_source': 'oracle', 'fudge': False},
    }


def generate_fixture(out_dir: str | Path, seed: int = 13, dialogues: int = 200,
                     train_marker_rate: float = TRAIN_MARKER_RATE, config_seed: Optional[int] = None) -> dict[str, Path]:
    """Write the synthetic corpus, its commonsense cache and a ready-to-use config.yaml

    :param out_dir: destination directory
    :param seed: corpus RNG seed. Output is byte-identical for a given seed
    :param dialogues: total dialogues, split 80/10/10 into train/dev/test
    :param train_marker_rate: fraction of marked helper turns in train
    :param config_seed: run seed written to config.yaml, defaults to `seed`
    :return: {'train'|'dev'|'test'|'cache'|'config': path}
    """
    if dialogues < 10:
        raise ValueError(f'need at least 10 dialogues for a train/dev/test split, got {dialogues}')
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    cache: dict[str, list[CommonsenseTuple]] = {}
    train_count = int(dialogues * SPLIT_FRACTIONS[0])
    dev_count = int(dialogues * SPLIT_FRACTIONS[1])
    counts = {'train': train_count, 'dev': dev_count, 'test': dialogues - train_count - dev_count}
    paths = {name: out_dir / file_name for name, file_name in FIXTURE_FILES.items()}
    index = 0
    for split, count in counts.items():
        marker_rate = train_marker_rate if split == 'train' else 1.0
        with paths[split].open('w', encoding='utf-8') as f:
            for _ in range(count):
                f.write(json.dumps(make_dialogue(rng, f'{split}-{index:04d}', marker_rate, cache)) + '\n')
                index += 1
    with paths['cache'].open('w', encoding='utf-8') as f:
        for text in sorted(cache):
            f.write(json.dumps({'text': text, 'tuples': [t.to_dict() for t in cache[text]]}) + '\n')
    paths['config'].write_text(dump_yaml(fixture_config(seed if config_seed is None else config_seed)),
                               encoding='utf-8')
    log.get_logger().info(f'Wrote fixture corpus ({counts}) to {out_dir}')
    return paths
