"""Class-aware sounding object localization from audiovisual correspondence."""
from .errors import (CorruptFileError, EnumerationTooLargeError, InvalidInputError, NoBoxError,
                     PartitionError, SchemaError, ShapeMismatchError, SoundLocError,
                     UntrainedHeadError, VersionMismatchError)

__version__ = "0.1.0"
