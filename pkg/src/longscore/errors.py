"""Exception hierarchy shared by every longscore module."""


class LongscoreError(Exception):
    """Base class; ``category`` is what the CLI prints on failure."""

    category = "error"


class DimensionError(LongscoreError, ValueError):
    category = "dimension"


class ConfigurationError(LongscoreError, ValueError):
    category = "configuration"


class VocabularyError(LongscoreError, IndexError):
    category = "vocabulary"

    def __init__(self, token_id, size):
        super().__init__(f"token id {token_id} outside vocabulary of size {size}")
        self.token_id = token_id


class LabelError(LongscoreError, ValueError):
    category = "label"


class ContractError(LongscoreError, RuntimeError):
    category = "contract"


class InputError(LongscoreError, ValueError):
    category = "input"


class SchemaError(LongscoreError, ValueError):
    category = "schema"


class UndefinedKappaError(LongscoreError, ZeroDivisionError):
    category = "undefined-kappa"


class TrainingAborted(LongscoreError, FloatingPointError):
    category = "training"
