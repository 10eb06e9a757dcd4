from enum import Enum, unique


@unique
class Experiment(Enum):
    MODEL_ASYMPTOTICS = "model-asymptotics"
    DEGENERATE = "degenerate"
    CROSSINGS = "crossings"
    SWEEP = "sweep"
    VERIFY_FORMS = "verify-forms"


@unique
class FormKind(Enum):
    Q = "q"
    A_MODEL = "a"
    B_COUPLING = "b"
    A_DOT = "a_dot"
    Q_DOT = "q_dot"
    A_TILDE = "a_tilde"
    # unrenormalized form of a (c, w) triangle
    Q_MODULI = "q_cw"


@unique
class ExitCode(Enum):
    OK = 0
    CONFIG_ERROR = 2
    NUMERICAL_FAILURE = 3


UNCLASSIFIED = -1

# environment keys read by the CLI
THREADS_ENV = "CUSPBRANCH_THREADS"
OUTPUT_ENV = "CUSPBRANCH_OUT"
