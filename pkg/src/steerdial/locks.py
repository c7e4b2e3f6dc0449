from __future__ import annotations

import contextlib
import fcntl
import os
from pathlib import Path
from typing import Iterator

from . import log
from .consts import RunFiles
from .exceptions import RunLockedError


@contextlib.contextmanager
def output_lock(out_dir: str | Path) -> Iterator[Path]:
    """Exclusive lock on a run output directory. Two commands writing to the same directory would interleave
    checkpoints and generation files, so the second one fails fast instead of waiting

    Lock file is at {out_dir}/.steerdial.lock and is removed on release

    :param out_dir: run output directory, created if missing
    :return: path to the lock file
    :raises RunLockedError: if another process holds the lock
    """
    logger = log.get_logger()
    os.makedirs(out_dir, exist_ok=True)
    lock_file_path = Path(out_dir) / RunFiles.LOCK
    logger.debug(f'Lock file path: {lock_file_path}')
    with open(lock_file_path, 'w') as lock_file:
        try:
            fcntl.flock(lock_file, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            raise RunLockedError(f'{out_dir} is in use by another steerdial process')
        try:
            yield lock_file_path
        finally:
            fcntl.flock(lock_file, fcntl.LOCK_UN)
            try:  # try/except to handle the critical section
                os.remove(lock_file_path)
            except FileNotFoundError:
                pass
