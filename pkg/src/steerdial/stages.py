from __future__ import annotations

import logging
import time
from abc import ABC, abstractmethod
from datetime import timedelta
from functools import wraps
from typing import Any, Callable, Optional

from . import log
from .exceptions import SteerDialError

PHASES = ('require', 'execute', 'validate')


def timedelta_to_human_readable(td: timedelta, rjust: tuple[int, str] = (6, ' ')) -> str:
    """Convert a timedelta object to a human-readable string
    :param td: timedelta object
    :param rjust: params for rjust on result. Str must be of length 1. Specify (0, ' ') for nop
    :return: human-readable string of the timedelta in the format of 'XhYmZs' or 'Nms'
    """
    total_seconds = int(td.total_seconds())
    hours, remainder = divmod(total_seconds, 3600)
    minutes, seconds = divmod(remainder, 60)

    parts = []
    if hours:
        parts.append(f'{hours}h')
    if minutes:
        parts.append(f'{minutes}m')
    if seconds and not hours:
        parts.append(f'{seconds}s')
    if not parts:
        parts.append(f'{td.microseconds // 1000}ms')
    return ''.join(parts).rjust(*rjust)


def monitor(func: Callable) -> Callable:
    """Decorator for stage phases: sets the phase, logs start/end banners with the duration, and records the
    status. Steerdial errors pass through unchanged so the CLI can map them to exit codes
    """
    @wraps(func)
    def wrapper(self: Stage, *args, **kwargs):
        self.phase = func.__name__
        banner_pattern = f'### {self.name} {self.phase}' + ' {} ###'
        self.logger.debug(banner_pattern.format('started'))
        start_time = time.monotonic()
        try:
            result = func(self, *args, **kwargs)
        except SteerDialError:
            self.status = 'failed'
            self.logger.debug(banner_pattern.format(self.status))
            raise
        except KeyboardInterrupt:
            self.status = 'aborted'
            self.logger.warning(f'{self.name} interrupted in {self.phase}')
            raise
        self.status = 'succeeded'
        duration = timedelta_to_human_readable(timedelta(seconds=time.monotonic() - start_time), rjust=(0, ' '))
        self.durations[self.phase] = duration
        self.logger.debug(banner_pattern.format(f'{self.status} in {duration}'))
        return result
    return wrapper


class Stage(ABC):
    """One pipeline command run as require -> execute -> validate

    `require` checks inputs exist before any work starts. `execute` returns the stage result, which `validate`
    receives to check outputs
    """
    def __init__(self, name: str, logger: Optional[logging.Logger] = None):
        self.name = name
        self.logger = logger or log.get_logger()
        self.phase = 'created'
        self.status = 'pending'
        self.durations: dict[str, str] = {}

    def require(self) -> None:
        return

    @abstractmethod
    def execute(self) -> Any:
        ...

    def validate(self, result: Any) -> None:
        return

    def run(self) -> Any:
        """Run all phases in order
        :return: result of the execute phase
        """
        self.logger.info(f'### {self.name} ###')
        start_time = time.monotonic()
        monitor(type(self).require)(self)
        result = monitor(type(self).execute)(self)
        monitor(type(self).validate)(self, result)
        duration = timedelta_to_human_readable(timedelta(seconds=time.monotonic() - start_time), rjust=(0, ' '))
        self.logger.info(f'### {self.name} {self.status} in {duration} ###')
        return result
