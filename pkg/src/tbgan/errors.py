"""Exception hierarchy shared by all tbgan modules."""


class TBGANError(Exception):
    """Base class for library errors."""


class InputError(TBGANError, ValueError):
    """Invalid arguments or inconsistent inputs."""


class AlignmentDegenerateError(InputError):
    """Procrustes alignment of a collinear or coincident point set."""


class NormalizationDegenerateError(InputError):
    """Scale normalization of an all-zero corpus."""


class UnwrapFoldError(TBGANError):
    """A triangle straddles the cylindrical seam."""


class ConfigError(TBGANError, ValueError):
    """Invalid architecture, training or run configuration."""


class ContractError(TBGANError, ValueError):
    """Shapes or resolutions disagree with a model or layout contract."""


class DivergenceError(TBGANError, FloatingPointError):
    """Non-finite values appeared during training.

    ``checkpoint`` names the last good checkpoint directory, if any.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class BundleIOError(TBGANError, IOError):
    """Base class for container read/write failures."""


class FormatVersionError(BundleIOError):
    pass


class TruncatedFileError(BundleIOError):
    pass


class ChecksumError(BundleIOError):
    pass


class ContainerParseError(BundleIOError):
    """meta.json is malformed; ``field`` names the offending entry."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
