"""Run configuration: one YAML (or JSON) file parsed into frozen, self-validating dataclasses

Relative paths resolve against the config file's directory. Command-line overrides replace file values.
The global seed fans out as: LM = seed, classifier = seed + 1, discriminator = seed + 2, decoding = seed.
"""
from __future__ import annotations

import dataclasses
import io
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .commonsense import Relation, TemplateTable
from .consts import (
    DEFAULT_STRATEGIES,
    KNOWLEDGE_SCOPES,
    MIN_COUNT_DEFAULT,
    SERVICE_RETRIES_DEFAULT,
    SERVICE_TIMEOUT_DEFAULT,
    SPLITS,
    STRATEGY_SOURCES,
    RunFiles,
)
from .corpus import StrategySet
from .decoding import DecodingConfig
from .exceptions import ConfigError, IoError
from .lm import ModelConfig
from .strategy import ClassifierConfig, DiscriminatorConfig
from .training import TrainingConfig

COMMONSENSE_BACKENDS = ('cache', 'remote')
LM_VARIANTS = ('lm', 'lm_joint')
COMPONENT_SEED_OFFSETS = {'lm': 0, 'lm_joint': 0, 'classifier': 1, 'discriminator': 2}
TRAINING_SECTIONS = ('lm', 'classifier', 'discriminator')  # lm_joint trains with the lm section


@dataclass(frozen=True)
class DataConfig:
    train: Optional[Path] = None
    dev: Optional[Path] = None
    test: Optional[Path] = None
    min_count: int = MIN_COUNT_DEFAULT

    def __post_init__(self):
        if self.min_count < 1:
            raise ConfigError(f'data.min_count must be >= 1, got {self.min_count}')

    def split_path(self, split: str) -> Optional[Path]:
        return getattr(self, split)


@dataclass(frozen=True)
class CommonsenseConfig:
    enabled: bool = False
    backend: str = COMMONSENSE_BACKENDS[0]
    cache_path: Optional[Path] = None
    endpoint: Optional[str] = None
    timeout: float = SERVICE_TIMEOUT_DEFAULT
    retries: int = SERVICE_RETRIES_DEFAULT
    relations: tuple[str, ...] = ('xReact', 'xWant')
    scope: str = KNOWLEDGE_SCOPES[0]
    templates: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.backend not in COMMONSENSE_BACKENDS:
            raise ConfigError(f'Unsupported commonsense backend {self.backend}. Options: {COMMONSENSE_BACKENDS}')
        if self.scope not in KNOWLEDGE_SCOPES:
            raise ConfigError(f'Unsupported knowledge scope {self.scope}. Options: {KNOWLEDGE_SCOPES}')
        try:
            relations = tuple(r.value for r in Relation.parse(self.relations))
        except ValueError as e:
            raise ConfigError(f'commonsense.relations: {e}')
        object.__setattr__(self, 'relations', relations)
        if self.enabled and self.backend == 'cache' and self.cache_path is None:
            raise ConfigError('commonsense.cache_path is required for the cache backend')
        if self.enabled and self.backend == 'remote' and not self.endpoint:
            raise ConfigError('commonsense.endpoint is required for the remote backend')
        if self.timeout <= 0 or self.retries < 1:
            raise ConfigError('commonsense.timeout must be > 0 and commonsense.retries >= 1')
        self.template_table()

    def template_table(self) -> TemplateTable:
        try:
            return TemplateTable({**TemplateTable().templates, **{Relation(k): v for k, v in self.templates.items()}})
        except ValueError as e:
            raise ConfigError(f'commonsense.templates: {e}')


@dataclass(frozen=True)
class GenerateConfig:
    strategy_source: str = 'joint'
    fudge: bool = False
    lm_variant: str = LM_VARIANTS[0]  # LM checkpoint used by non-joint sources
    workers: int = 1

    def __post_init__(self):
        if self.strategy_source not in STRATEGY_SOURCES:
            raise ConfigError(f'Unsupported strategy source {self.strategy_source}. Options: {STRATEGY_SOURCES}')
        if self.lm_variant not in LM_VARIANTS:
            raise ConfigError(f'Unsupported lm_variant {self.lm_variant}. Options: {LM_VARIANTS}')
        if self.workers < 1:
            raise ConfigError(f'generate.workers must be >= 1, got {self.workers}')

    @property
    def lm_target(self) -> str:
        return 'lm_joint' if self.strategy_source == 'joint' else self.lm_variant


@dataclass(frozen=True)
class RunConfig:
    out_dir: Path
    seed: int = 0
    threads: int = 1
    config_path: Optional[Path] = None
    data: DataConfig = field(default_factory=DataConfig)
    strategies: StrategySet = field(default_factory=StrategySet)
    markers: Mapping[str, str] = field(default_factory=dict)  # strategy name -> marker word, for consistency
    commonsense: CommonsenseConfig = field(default_factory=CommonsenseConfig)
    lm: ModelConfig = field(default_factory=ModelConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    training: Mapping[str, TrainingConfig] = field(
        default_factory=lambda: {name: TrainingConfig() for name in TRAINING_SECTIONS})
    decoding: DecodingConfig = field(default_factory=DecodingConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError(f'threads must be >= 1, got {self.threads}')
        if unknown := [name for name in self.markers if name not in self.strategies.labels]:
            raise ConfigError(f'markers name unknown strategies: {unknown}')

    def component_seed(self, component: str) -> int:
        return self.seed + COMPONENT_SEED_OFFSETS[component]

    def training_config(self, component: str) -> TrainingConfig:
        section = 'lm' if component == 'lm_joint' else component
        return dataclasses.replace(self.training[section], seed=self.component_seed(component))

    def decoding_config(self) -> DecodingConfig:
        return dataclasses.replace(self.decoding, seed=self.seed)

    def path(self, name: str, **kwargs) -> Path:
        """Path of a run file inside out_dir, e.g. path(RunFiles.CHECKPOINT, target='lm')"""
        return self.out_dir / name.format(**kwargs)

    def require_paths(self, *paths: Optional[Path]) -> None:
        """Referenced inputs must exist when a command starts
        :raises IoError: naming the first missing path
        """
        for path in paths:
            if path is None or not Path(path).exists():
                raise IoError(path or '<unset>', 'not found')

    def to_dict(self) -> dict:
        def plain(value: Any) -> Any:
            if isinstance(value, Path):
                return str(value)
            if isinstance(value, StrategySet):
                return list(value.labels)
            if dataclasses.is_dataclass(value):
                return {f.name: plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
            if isinstance(value, Mapping):
                return {str(k): plain(v) for k, v in value.items()}
            if isinstance(value, (list, tuple)):
                return [plain(v) for v in value]
            return value
        data = plain(self)
        data.pop('config_path')
        data['strategies'] = {'labels': data['strategies'], 'markers': data.pop('markers')}
        return data


def _resolve(base: Path, value: Optional[str | Path]) -> Optional[Path]:
    if value in (None, ''):
        return None
    path = Path(value).expanduser()
    return path if path.is_absolute() else base / path


def _build(cls: type, section: Any, name: str, **extra):
    if section is None:
        section = {}
    if not isinstance(section, Mapping):
        raise ConfigError(f'{name} must be a mapping')
    allowed = {f.name for f in dataclasses.fields(cls)}
    if unknown := sorted(set(section) - allowed):
        raise ConfigError(f'{name}: unknown keys {unknown}')
    try:
        return cls(**{**section, **extra})
    except TypeError as e:
        raise ConfigError(f'{name}: {e}')


def load_yaml(path: str | Path) -> dict:
    """Safe-load a YAML or JSON mapping
    :raises IoError: unreadable file
    :raises ConfigError: not a mapping or not parsable
    """
    import ruyaml as yaml
    from ruyaml.error import YAMLError
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise IoError(path, e.strerror or 'unreadable')
    except UnicodeDecodeError as e:
        raise IoError(path, f'not valid UTF-8 ({e.reason})')
    try:
        data = yaml.YAML(typ='safe', pure=True).load(text)
    except YAMLError as e:
        raise ConfigError(f'{path}: {e}')
    if not isinstance(data, Mapping):
        raise ConfigError(f'{path}: top level must be a mapping')
    return dict(data)


RUN_KEYS = ('seed', 'threads', 'out_dir', 'data', 'strategies', 'commonsense', 'lm', 'classifier', 'discriminator',
            'training', 'decoding', 'generate')


def from_mapping(raw: Mapping, base_dir: str | Path = '.', config_path: Optional[Path] = None) -> RunConfig:
    """Build a RunConfig from a parsed mapping"""
    base = Path(base_dir)
    if unknown := sorted(set(raw) - set(RUN_KEYS)):
        raise ConfigError(f'unknown top-level keys {unknown}. Options: {RUN_KEYS}')
    data = dict(raw.get('data') or {})
    for split in SPLITS:
        data[split] = _resolve(base, data.get(split))
    strategies_raw = raw.get('strategies') or {}
    if not isinstance(strategies_raw, Mapping):
        strategies_raw = {'labels': strategies_raw}
    try:
        strategies = StrategySet(tuple(strategies_raw.get('labels') or DEFAULT_STRATEGIES))
    except ValueError as e:
        raise ConfigError(f'strategies: {e}')
    commonsense = dict(raw.get('commonsense') or {})
    commonsense['cache_path'] = _resolve(base, commonsense.get('cache_path'))
    if 'relations' in commonsense:
        commonsense['relations'] = tuple(commonsense['relations'] or ())
    training_raw = raw.get('training') or {}
    if unknown := sorted(set(training_raw) - set(TRAINING_SECTIONS)):
        raise ConfigError(f'training: unknown sections {unknown}. Options: {TRAINING_SECTIONS}')
    size = {'strategy_count': strategies.size}
    return RunConfig(
        out_dir=_resolve(base, raw.get('out_dir') or 'run'),
        seed=int(raw.get('seed', 0)),
        threads=int(raw.get('threads', 1)),
        config_path=config_path,
        data=_build(DataConfig, data, 'data'),
        strategies=strategies,
        markers=dict(strategies_raw.get('markers') or {}),
        commonsense=_build(CommonsenseConfig, commonsense, 'commonsense'),
        lm=_build(ModelConfig, raw.get('lm'), 'lm', **size),
        classifier=_build(ClassifierConfig, raw.get('classifier'), 'classifier', **size),
        discriminator=_build(DiscriminatorConfig, raw.get('discriminator'), 'discriminator', **size),
        training={name: _build(TrainingConfig, training_raw.get(name), f'training.{name}')
                  for name in TRAINING_SECTIONS},
        decoding=_build(DecodingConfig, raw.get('decoding'), 'decoding'),
        generate=_build(GenerateConfig, raw.get('generate'), 'generate'),
    )


def load_run_config(path: str | Path, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Load a run config file and apply command-line overrides

    :param path: YAML or JSON config
    :param overrides: flag values; None entries are ignored. Supported: seed, out_dir, strategy_source, fudge,
        control_lambda, threads
    :return: validated config
    :raises ConfigError: invalid values or unknown keys
    """
    path = Path(path).resolve()
    raw = load_yaml(path)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    for key in ('seed', 'threads'):
        if key in overrides:
            raw[key] = overrides[key]
    if 'out_dir' in overrides:
        raw['out_dir'] = str(Path(overrides['out_dir']).resolve())
    generate = dict(raw.get('generate') or {})
    for key in ('strategy_source', 'fudge'):
        if key in overrides:
            generate[key] = overrides[key]
    raw['generate'] = generate
    if 'control_lambda' in overrides:
        raw['decoding'] = {**(raw.get('decoding') or {}), 'control_lambda': overrides['control_lambda']}
    return from_mapping(raw, path.parent, path)


def dump_yaml(data: Mapping) -> str:
    import ruyaml as yaml
    yaml_instance = yaml.YAML(typ='safe', pure=True)
    yaml_instance.default_flow_style = False
    stream = io.StringIO()
    yaml_instance.dump(dict(data), stream)
    return stream.getvalue()


def write_snapshot(config: RunConfig) -> Path:
    """Write the resolved config to {out_dir}/run-config.yaml
    :return: snapshot path
    """
    config.out_dir.mkdir(parents=True, exist_ok=True)
    path = config.path(RunFiles.CONFIG_SNAPSHOT)
    path.write_text(dump_yaml(config.to_dict()), encoding='utf-8')
    return path
