# =============================================================================
#           HADES TOOLKIT - ERROR TYPES AND EXIT CODES
# =============================================================================


class HadesError(Exception):
    """Base class for every error raised by the toolkit"""
    exit_code = 1


class ConfigError(HadesError, ValueError):
    """Invalid configuration, unknown keys or violated constraints"""
    exit_code = 2


class MissingInputError(HadesError, FileNotFoundError):
    """A checkpoint, config or input file does not exist"""
    exit_code = 3


class CheckpointError(HadesError):
    """Malformed checkpoint: bad magic, version, truncation or directory"""
    exit_code = 3


class ShapeError(HadesError, ValueError):
    """Tensor dimensions disagree with the configuration"""
    exit_code = 4


class NumericalError(HadesError, ArithmeticError):
    """A non-finite value reached a public tensor"""
    exit_code = 4

    def __init__(self, tensor_name, detail=""):
        self.tensor_name = tensor_name
        message = f"non-finite values in '{tensor_name}'"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class DegenerateInputError(HadesError, ValueError):
    """Input carries no energy or variance for the requested analysis"""
    exit_code = 4


class GradcheckError(HadesError):
    """Analytic gradients disagree with finite differences"""
    exit_code = 5
