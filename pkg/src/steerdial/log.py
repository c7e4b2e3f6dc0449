"""Process-wide rich logging

Loggers are keyed by style name: 'short' (time of day), 'long' (full timestamp) and 'plain' (message only, used
for reports and pretty-printed structures). Every handler masks service credentials before rendering.
Set STEERDIAL_WRITE_LOG_TO_FILE=1 to mirror output to STEERDIAL_LOG_PATH (default ~/steerdial.log).
"""
from __future__ import annotations

import io
import json
import logging
import os
import re
import shutil
from collections.abc import Mapping
from functools import partial
from numbers import Number
from typing import Callable, Optional, TextIO

import rich
from rich import box, console, table, theme
from rich.logging import RichHandler

from .consts import TOKEN_ENV_VAR

LOGGERS: set[str] = set()
LOG_FILE_NAME_DEFAULT = 'steerdial.log'
LOG_MASK = '********'
TERMINAL_SIZE_FALLBACK = (140, 24)  # cron and CI have no terminal


def is_yes(input_: Optional[str | Number]) -> bool:
    """True for 'y', 'yes', 'true', '1' (any case) and non-zero numbers"""
    if input_ is None:
        return False
    if isinstance(input_, Number):
        return bool(input_)
    return input_.lower() in ('y', 'yes', 'true', '1')


def _writes_to_file() -> bool:
    return is_yes(os.environ.get('STEERDIAL_WRITE_LOG_TO_FILE'))


_width = shutil.get_terminal_size(fallback=TERMINAL_SIZE_FALLBACK).columns
rich.reconfigure(
    width=_width,
    theme=theme.Theme({'logging.level.warning': 'bold yellow', 'logging.warning': 'yellow'}),
    force_terminal=not is_yes(os.environ.get('NO_COLOR')),
    soft_wrap=True,
)

Table = partial(table.Table, header_style='bold magenta', box=box.MARKDOWN, show_edge=False)

SECRET_PATTERNS = (
    re.compile(r'(Bearer\s+)\S+', re.IGNORECASE),
    re.compile(r"""(["']?Authorization["']?\s*[:=]\s*["']?)[^"',}]+""", re.IGNORECASE),
    re.compile(r'((?:--)?(?:token|api-key|api_key)[ =])\S+', re.IGNORECASE),
    re.compile(rf'({re.escape(TOKEN_ENV_VAR)}=)\S+'),
)


def mask_secrets(text: str) -> str:
    for pattern in SECRET_PATTERNS:
        text = pattern.sub(r'\1' + LOG_MASK, text)
    return text


class MaskingFilter(logging.Filter):
    """Masks credentials in the rendered message. Args are folded in first so no formatter sees the raw value"""
    def filter(self, record: logging.LogRecord) -> bool:
        record.msg = mask_secrets(record.getMessage())
        record.args = ()
        return True


class _StyledHandler(RichHandler):
    time_format = '%X'

    def __init__(self, *args, **kwargs):
        kwargs.setdefault('log_time_format', self.time_format)
        # utterances carry square brackets, e.g. '[Question] ...'
        super().__init__(*args, show_path=False, markup=False, **kwargs)
        self.setFormatter(logging.Formatter('%(message)s'))
        self.addFilter(MaskingFilter())


class ShortRichHandler(_StyledHandler):
    """15:30:27 INFO     lm epoch 3/20 loss=1.2034"""


class LongRichHandler(_StyledHandler):
    """2026-10-01 15:30:27 INFO     lm epoch 3/20 loss=1.2034"""
    time_format = '%Y-%m-%d %H:%M:%S'


class PlainRichHandler(_StyledHandler):
    """Message only, no time or level column"""
    def emit(self, record: logging.LogRecord) -> None:
        self.console.print(self.format(record), markup=False, highlight=False)


SUPPORTED_LOGGERS = {
    'short': ShortRichHandler,
    'long': LongRichHandler,
    'plain': PlainRichHandler,
}


def name_to_handler(name: str, *args, **kwargs) -> logging.Handler:
    """Handler instance for a logger style
    :raises ValueError: unknown style
    """
    if name not in SUPPORTED_LOGGERS:
        raise ValueError(f'Unsupported logger name: {name}. Supported names are: {list(SUPPORTED_LOGGERS)}')
    return SUPPORTED_LOGGERS[name](*args, **kwargs)


def log_path() -> str:
    log_dir = os.environ.setdefault('STEERDIAL_LOG_DIR', os.path.expanduser('~'))
    path = os.environ.setdefault('STEERDIAL_LOG_PATH', os.path.join(log_dir, LOG_FILE_NAME_DEFAULT))
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    return path


def _file_console(file: TextIO) -> console.Console:
    return console.Console(width=_width, force_terminal=False, soft_wrap=True, file=file)


def _current_level() -> int:
    if not LOGGERS:
        return logging.INFO
    return logging.getLogger(next(iter(LOGGERS))).getEffectiveLevel()


def get_logger(name: Optional[str] = None, level: Optional[str | int] = None) -> logging.Logger:
    """Retrieve or create a process-wide logger

    :param name: style, one of SUPPORTED_LOGGERS. Default 'short'
    :param level: level name or number. None keeps the level of the loggers created so far, INFO for the first
    :return: configured logger
    """
    name = name or 'short'
    logger = logging.getLogger(name)
    level = level if level is not None else _current_level()
    logger.setLevel(level.upper() if isinstance(level, str) else level)
    if name in LOGGERS:
        return logger
    logger.addHandler(name_to_handler(name))
    if _writes_to_file():
        mirror = _file_console(open(log_path(), 'a', encoding='utf-8', errors='replace'))
        logger.addHandler(name_to_handler(name, console=mirror, rich_tracebacks=True))
    LOGGERS.add(name)
    return logger


def set_level(level: str | int) -> None:
    """Apply a level to every logger created so far"""
    for name in LOGGERS:
        get_logger(name, level)


def print_table(table_: table.Table) -> None:
    rich.print(table_)
    if _writes_to_file():
        with open(log_path(), 'a', encoding='utf-8', errors='replace') as f:
            _file_console(f).print(table_)


def _render(syntax: str, data: Mapping | str, yaml_default_flow_style: Optional[bool]) -> str:
    if syntax == 'json':
        return json.dumps(data if isinstance(data, Mapping) else json.loads(data), sort_keys=True, indent=2)
    if syntax == 'yaml':
        import ruyaml as yaml
        yaml_instance = yaml.YAML(typ='safe', pure=True)
        yaml_instance.default_flow_style = yaml_default_flow_style
        stream = io.StringIO()
        yaml_instance.dump(dict(data) if isinstance(data, Mapping) else yaml_instance.load(data), stream)
        return stream.getvalue()
    raise NotImplementedError(f'Printing data as {syntax} is not implemented')


def log_as(syntax: str, data: Optional[Mapping | str] = None, printer: Optional[Callable] = None,
           yaml_default_flow_style: Optional[bool] = False) -> None:
    """Pretty-print a mapping, or a JSON/YAML string, through a logger

    :param syntax: 'json' or 'yaml'
    :param data: nothing is printed when empty
    :param printer: defaults to the plain logger's info
    :param yaml_default_flow_style: True for flow style, False for block style
    :raises NotImplementedError: other syntaxes
    """
    if not data:
        return
    (printer or get_logger('plain').info)(_render(syntax, data, yaml_default_flow_style))
