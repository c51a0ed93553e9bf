"""Long-context sequence layers and essay-scoring fine-tuning on numpy."""

from .autograd import Tape, Tensor, backward
from .errors import (ConfigurationError, ContractError, DimensionError, InputError, LabelError,
                     LongscoreError, SchemaError, TrainingAborted, UndefinedKappaError,
                     VocabularyError)

__version__ = "0.1.0"
