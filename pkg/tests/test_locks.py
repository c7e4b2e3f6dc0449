import threading

import pytest

from steerdial.exceptions import RunLockedError
from steerdial.locks import output_lock


def test_lock_and_release(tmp_path):
    out_dir = tmp_path / 'run'
    with output_lock(out_dir) as lock_path:
        assert lock_path == out_dir / '.steerdial.lock'
        assert lock_path.exists()
    assert not lock_path.exists()
    with output_lock(out_dir):
        pass


def test_second_holder_fails_fast(tmp_path):
    acquired, release = threading.Event(), threading.Event()

    def hold():
        with output_lock(tmp_path):
            acquired.set()
            release.wait(5)

    thread = threading.Thread(target=hold)
    thread.start()
    try:
        assert acquired.wait(5)
        with pytest.raises(RunLockedError, match='in use'):
            with output_lock(tmp_path):
                pass
    finally:
        release.set()
        thread.join()
    with output_lock(tmp_path):
        pass


def test_lock_released_on_error(tmp_path):
    with pytest.raises(ValueError):
        with output_lock(tmp_path):
            raise ValueError('boom')
    with output_lock(tmp_path):
        pass
