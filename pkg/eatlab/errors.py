"""
Exception hierarchy for eatlab.

Every error raised on purpose by the package derives from EatlabError so the
CLI can turn it into a one-line message and a non-zero exit status.
"""

from typing import Optional


class EatlabError(Exception):
    """Base class for all eatlab errors"""


class InvalidPoseError(EatlabError, ValueError):
    """Rotation is not orthonormal with determinant +1, or translation is not finite"""


class PcaFitError(EatlabError, ValueError):
    """PCA cannot be fit (too few samples or dimension out of range)"""


class AlignmentError(EatlabError, ValueError):
    """Waveform length does not align with the 640-sample hop, or paired sequences differ in length"""


class ConfigError(EatlabError, ValueError):
    """Invalid or inconsistent configuration"""


class UsageError(EatlabError, ValueError):
    """An API was called in a mode it does not support"""


class UnknownSiteError(EatlabError, LookupError):
    """EAM insertion site was never registered"""


class UnknownEmotionError(EatlabError, ValueError):
    """Emotion label or emotion word is not part of the vocabulary"""


class MetricModelMissingError(EatlabError):
    """A metric model (sync net, classifier, embedder) is required but not loaded"""


class StorageError(EatlabError):
    """Reading or writing an on-disk container failed"""

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        if path is not None:
            message = f"{message} [{path}]"
        super().__init__(message)


class ProvenanceError(EatlabError):
    """Checkpoint hash chain does not match"""


class TrainingDivergedError(EatlabError):
    """Loss became non-finite; a diagnostic dump was written"""

    def __init__(self, message: str, dump_path: Optional[str] = None):
        self.dump_path = dump_path
        if dump_path is not None:
            message = f"{message} (diagnostic dump: {dump_path})"
        super().__init__(message)
