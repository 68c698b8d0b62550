"""Exception and warning types shared across the package.

Every error carries a stable ``code`` so the CLI can emit machine-readable
error records.
"""


class TalkingHeadError(Exception):
    code = "error"

    def to_dict(self):
        return {"error": self.code, "message": str(self)}


class ZeroQuaternion(TalkingHeadError, ValueError):
    code = "zero_quaternion"


class NotNormalized(TalkingHeadError, ValueError):
    code = "not_normalized"


class DegenerateConfiguration(TalkingHeadError, ValueError):
    code = "degenerate_configuration"


class ShapeMismatch(TalkingHeadError, ValueError):
    code = "shape_mismatch"


class BadShape(ShapeMismatch):
    code = "bad_shape"


class TooShort(TalkingHeadError, ValueError):
    code = "too_short"


class BatchMismatch(TalkingHeadError, ValueError):
    code = "batch_mismatch"


class LengthMismatch(TalkingHeadError, ValueError):
    code = "length_mismatch"


class EmptyCorpus(TalkingHeadError, ValueError):
    code = "empty_corpus"


class EmptyText(TalkingHeadError, ValueError):
    code = "empty_text"


class UnknownToken(TalkingHeadError, KeyError):
    code = "unknown_token"

    def __init__(self, token):
        super().__init__(token)
        self.token = token

    def __str__(self):
        return f"unknown token {self.token!r}"


class MissingPrerequisite(TalkingHeadError, RuntimeError):
    code = "missing_prerequisite"


class CorpusNotFound(TalkingHeadError, FileNotFoundError):
    code = "corpus_not_found"


class ConfigHashMismatch(TalkingHeadError, RuntimeError):
    code = "config_hash_mismatch"


class InvalidConfig(TalkingHeadError, ValueError):
    code = "invalid_config"


class BlobFormatError(TalkingHeadError, ValueError):
    code = "blob_format"


class NoStopWarning(UserWarning):
    """Autoregressive decoding hit ``max_frames`` without a stop token."""


class DegeneratePolygonWarning(UserWarning):
    """Mouth polygon is self-intersecting or has collapsed."""


class ClippedLandmarksWarning(UserWarning):
    """Landmarks fell outside the [-1, 1] face box and were clipped."""
