"""Exception types shared across the package."""


class HarmonyError(Exception):
    """Base type; lets callers catch any failure raised by this package."""


class ShapeError(HarmonyError, ValueError):
    """Operands have incompatible shapes."""


class ContractError(HarmonyError, ValueError):
    """A call violated an operation's precondition."""


class ConfigError(HarmonyError, ValueError):
    """A configuration value is out of its legal range."""


class SequenceError(HarmonyError, ValueError):
    """A token sequence is malformed (e.g. broken image span)."""


class VocabularyError(HarmonyError, ValueError):
    """Text contains a character not present in the vocabulary."""


class CheckpointError(HarmonyError, RuntimeError):
    """A checkpoint payload does not match its manifest."""


class TrainingDiverged(HarmonyError, RuntimeError):
    """Training hit a non-finite loss; carries the component values."""

    def __init__(self, message, components=None):
        super().__init__(message)
        self.components = dict(components or {})
