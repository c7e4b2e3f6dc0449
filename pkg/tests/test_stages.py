from datetime import timedelta

import pytest

from steerdial.exceptions import MissingData
from steerdial.stages import Stage, timedelta_to_human_readable


class RecordingStage(Stage):
    def __init__(self, fail_in=None):
        super().__init__('recording')
        self.calls = []
        self.fail_in = fail_in

    def _visit(self, phase):
        self.calls.append(phase)
        if phase == self.fail_in:
            raise MissingData(f'{phase} failed')

    def require(self):
        self._visit('require')

    def execute(self):
        self._visit('execute')
        return 42

    def validate(self, result):
        self._visit('validate')
        assert result == 42


def test_stage_runs_phases_in_order():
    stage = RecordingStage()
    assert stage.run() == 42
    assert stage.calls == ['require', 'execute', 'validate']
    assert stage.status == 'succeeded'
    assert set(stage.durations) == {'require', 'execute', 'validate'}


@pytest.mark.parametrize('fail_in, calls', [
    ('require', ['require']),
    ('execute', ['require', 'execute']),
    ('validate', ['require', 'execute', 'validate']),
])
def test_stage_stops_at_failure(fail_in, calls):
    stage = RecordingStage(fail_in)
    with pytest.raises(MissingData, match=f'{fail_in} failed'):
        stage.run()
    assert stage.calls == calls
    assert stage.status == 'failed'
    assert stage.phase == fail_in


def test_stage_banner(caplog):
    stage = RecordingStage()
    with caplog.at_level('INFO', logger=stage.logger.name):
        stage.run()
    assert '### recording ###' in caplog.text
    assert '### recording succeeded in' in caplog.text


@pytest.mark.parametrize('td, string', [
    (timedelta(hours=1, minutes=5, seconds=3), '1h5m'),
    (timedelta(minutes=2, seconds=7), '2m7s'),
    (timedelta(seconds=45), '45s'),
    (timedelta(milliseconds=12), '12ms'),
    (timedelta(), '0ms'),
])
def test_timedelta_to_human_readable(td, string):
    assert timedelta_to_human_readable(td).strip() == string
    assert len(timedelta_to_human_readable(td)) >= 6
