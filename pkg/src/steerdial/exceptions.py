from __future__ import annotations

from typing import Optional

from .consts import ExitCodes


class SteerDialError(Exception):
    """Base error. `code` is the machine-parsable prefix printed by the CLI, `exit_code` the process exit status"""
    code = 'ERROR'
    exit_code = ExitCodes.DATA

    def __init__(self, message: str):
        self.message = message
        self.context = ''
        super().__init__(message)

    def with_context(self, context: str) -> SteerDialError:
        """Attach where the error happened, e.g. the dialogue being processed
        :param context: short location description
        :return: self, to allow `raise e.with_context(...)`
        """
        self.context = f'{context}: {self.context}' if self.context else context
        return self

    def __str__(self):
        return f'{self.context}: {self.message}' if self.context else self.message


class ConfigError(SteerDialError):
    """Invalid run configuration"""
    code = 'CONFIG'
    exit_code = ExitCodes.USAGE


class RunLockedError(SteerDialError):
    """Another steerdial process holds the output directory"""
    code = 'LOCKED'
    exit_code = ExitCodes.USAGE


# ### Data errors ###
class IoError(SteerDialError):
    """Path missing or unreadable"""
    code = 'IO'

    def __init__(self, path, reason: str = 'unreadable'):
        self.path = str(path)
        super().__init__(f'{self.path}: {reason}')


class ParseError(SteerDialError):
    """Malformed JSON line"""
    code = 'PARSE'

    def __init__(self, line: int, path: Optional[str] = None, reason: str = ''):
        self.line = line
        self.path = path
        where = f'{path}:{line}' if path else f'line {line}'
        super().__init__(f'{where}: malformed JSON' + (f' ({reason})' if reason else ''))


class ValidationError(SteerDialError):
    """Dialogue violates the corpus data model"""
    code = 'VALIDATION'

    def __init__(self, dialogue_id: str, utterance_index: Optional[int], reason: str):
        self.dialogue_id = dialogue_id
        self.utterance_index = utterance_index
        where = f'dialogue {dialogue_id!r}' + (f' utterance {utterance_index}' if utterance_index is not None else '')
        super().__init__(f'{where}: {reason}')


class EmptyCorpus(SteerDialError):
    """No dialogues to build a vocabulary from"""
    code = 'EMPTY_CORPUS'


class EmptyInput(SteerDialError):
    """Nothing to compute a metric over"""
    code = 'EMPTY_INPUT'


class LengthMismatch(SteerDialError):
    """Paired lists differ in length"""
    code = 'LENGTH_MISMATCH'

    def __init__(self, left: int, right: int):
        super().__init__(f'paired inputs differ in length: {left} != {right}')


class MissingEntailment(SteerDialError):
    """Commonsense cache has no entry for a text"""
    code = 'MISSING_ENTAILMENT'

    def __init__(self, text: str, reason: str = 'no cached entailments'):
        self.text = text
        super().__init__(f'{reason} for text {text!r}')


class MissingData(SteerDialError):
    """Prepared data absent from the run directory"""
    code = 'MISSING_DATA'


# ### Model errors ###
class InvalidToken(SteerDialError):
    """Token id outside the vocabulary, or a sequence missing its required leading token"""
    code = 'INVALID_TOKEN'
    exit_code = ExitCodes.MODEL


class DivergedError(SteerDialError):
    """Training loss became non-finite"""
    code = 'DIVERGED'
    exit_code = ExitCodes.MODEL

    def __init__(self, component: str, epoch: int, loss: float):
        self.epoch = epoch
        super().__init__(f'{component} loss became non-finite ({loss}) in epoch {epoch}')


class FormatError(SteerDialError):
    """Checkpoint file truncated, corrupt, of another kind or of another format version"""
    code = 'FORMAT'
    exit_code = ExitCodes.MODEL


class ConfigMismatch(SteerDialError):
    """Checkpoint built for another vocabulary or strategy set"""
    code = 'CONFIG_MISMATCH'
    exit_code = ExitCodes.MODEL


class MissingGold(SteerDialError):
    """Oracle strategy requested without a gold label"""
    code = 'MISSING_GOLD'
    exit_code = ExitCodes.MODEL


class MissingCheckpoint(SteerDialError):
    """A required component has not been trained"""
    code = 'MISSING_CHECKPOINT'
    exit_code = ExitCodes.MODEL

    def __init__(self, component: str, path):
        self.component = component
        super().__init__(f'{component} checkpoint not found at {path}. Run `steerdial train` for it first')


# ### Service errors ###
class ServiceError(SteerDialError):
    """Remote commonsense service failed"""
    code = 'SERVICE'
    exit_code = ExitCodes.SERVICE

    def __init__(self, status: Optional[int] = None, reason: str = ''):
        self.status = status
        super().__init__(f'commonsense service {"HTTP " + str(status) if status else "unavailable"}'
                         + (f': {reason}' if reason else ''))
