from steerdial import __version__ as package_version


class ConstMeta(type):
    """Metaclass for creating immutable classes

    Inheriting from this class will prevent setting and deleting attributes. This differs from the frozen class in
    dataclasses in that it ensures immutability of the class itself, and not just the instances of the class.

    Usage example:
        class ExitCodes(metaclass=ConstMeta):
            OK = 0
            USAGE = 2
    """
    def __setattr__(cls, key, value):
        if key in cls.__dict__:
            raise AttributeError(f"Class {cls.__name__} immutable! Cannot modify constant attribute '{key}'")
        super().__setattr__(key, value)

    def __delattr__(cls, key):
        if key in cls.__dict__:
            raise AttributeError(f"Class {cls.__name__} immutable! Cannot delete constant attribute '{key}'")
        super().__delattr__(key)


##############################################################################################################
# ### Process ###
class ExitCodes(metaclass=ConstMeta):
    """Process exit codes of the steerdial CLI"""
    OK = 0
    USAGE = 2
    DATA = 3
    MODEL = 4
    SERVICE = 5


##############################################################################################################
# ### Vocabulary ###
class ReservedTokens(metaclass=ConstMeta):
    """Reserved tokens. They occupy the lowest ids in exactly this order, followed by one marker per strategy"""
    PAD = '[PAD]'
    BOS = '[BOS]'
    EOS = '[EOS]'
    UNK = '[UNK]'
    CLS = '[CLS]'
    SEP = '[SEP]'
    ORDER = (PAD, BOS, EOS, UNK, CLS, SEP)


PAD_ID, BOS_ID, EOS_ID, UNK_ID, CLS_ID, SEP_ID = range(len(ReservedTokens.ORDER))
MARKER_OFFSET = len(ReservedTokens.ORDER)  # id of the first strategy marker
MARKER_PATTERN = '[{}]'  # the tokenizer splits brackets, so corpus tokens never collide with markers
MIN_COUNT_DEFAULT = 2

DEFAULT_STRATEGIES = (
    'Question',
    'Restatement or Paraphrasing',
    'Reflection of feelings',
    'Self-disclosure',
    'Affirmation and Reassurance',
    'Providing Suggestions',
    'Information',
    'Others',
)

##############################################################################################################
# ### Commonsense ###
# canonical relation order; index in this tuple is the relation's ordering index
RELATIONS = ('oEffect', 'oReact', 'oWant', 'xAttr', 'xEffect', 'xIntent', 'xNeed', 'xReact', 'xReason', 'xWant')

DEFAULT_TEMPLATES = {
    'oEffect': 'As a result, others {}.',
    'oReact': 'As a result, others feel {}.',
    'oWant': 'As a result, others want {}.',
    'xAttr': 'PersonX is seen as {}.',
    'xEffect': 'As a result, PersonX {}.',
    'xIntent': 'Because PersonX wanted {}.',
    'xNeed': 'Before, PersonX needed {}.',
    'xReact': 'As a result, PersonX feels {}.',
    'xReason': 'Because {}.',
    'xWant': 'As a result, PersonX wants {}.',
}
HISTORY_SEPARATOR = ' [SEP] '
KNOWLEDGE_SCOPES = ('last_seeker', 'all')  # KNOWLEDGE_SCOPES[0] is the default
ENTAIL_ROUTE = '/entail'
SERVICE_TIMEOUT_DEFAULT = 30.0
SERVICE_RETRIES_DEFAULT = 3
TOKEN_ENV_VAR = 'STEERDIAL_COMMONSENSE_TOKEN'  # nosec B105: env var name, not a secret

##############################################################################################################
# ### Models ###
CHECKPOINT_FORMAT_VERSION = 1
INIT_SCALE_DEFAULT = 0.08
PROB_FLOOR = 1e-12
ALPHA_DEFAULT = 1.0


class CheckpointKinds(metaclass=ConstMeta):
    """Checkpoint kinds sharing the versioned container format"""
    LM = 'lm'
    CLASSIFIER = 'classifier'
    DISCRIMINATOR = 'discriminator'


##############################################################################################################
# ### Decoding ###
DECODING_MODES = ('greedy', 'top_k_sample')  # DECODING_MODES[0] is the default
FUDGE_CANDIDATES_DEFAULT = 32
CONTROL_LAMBDA_DEFAULT = 1.0
SAMPLE_K_DEFAULT = 10
MAX_LENGTH_DEFAULT = 64

STRATEGY_SOURCES = ('joint', 'classifier', 'oracle', 'lm')
TRAIN_TARGETS = ('lm', 'lm_joint', 'classifier', 'discriminator')

##############################################################################################################
# ### Run layout ###
class RunFiles(metaclass=ConstMeta):
    """File names inside a run output directory"""
    CONFIG_SNAPSHOT = 'run-config.yaml'
    LOCK = '.steerdial.lock'
    VOCAB = 'vocab.json'
    EXAMPLES = '{split}.examples.jsonl'
    PREPARE_SUMMARY = 'prepare-summary.json'
    CHECKPOINT = '{target}.ckpt.json'
    TRACE = '{target}-trace.jsonl'
    GENERATIONS = 'generations-{source}{fudge}.jsonl'
    REPORT = '{stem}.report.json'
    TRANSCRIPT = 'chat-transcript.jsonl'


SPLITS = ('train', 'dev', 'test')
DEFAULT_LABELS = {'steerdial/version': package_version}
