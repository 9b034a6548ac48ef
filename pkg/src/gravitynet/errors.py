"""Exception hierarchy. Every error carries a short category slug the CLI maps to an exit code."""


class GravityNetError(Exception):
    category = "error"


class InvalidGeometryError(GravityNetError):
    category = "invalid-geometry"


class NonSquareGridError(GravityNetError):
    category = "non-square-grid"


class InvalidStepError(GravityNetError):
    category = "invalid-step"


class ConfigMismatchError(GravityNetError):
    category = "configuration-mismatch"


class InvalidInputError(GravityNetError):
    category = "invalid-input"


class InvalidInputShapeError(InvalidInputError):
    category = "invalid-input-shape"


class InvalidMaskError(GravityNetError):
    category = "invalid-mask"


class DataIOError(GravityNetError):
    category = "io-error"


class AnnotationError(GravityNetError):
    category = "annotation-error"


class PlacementError(GravityNetError):
    category = "placement-error"


class ComparisonError(GravityNetError):
    category = "invalid-comparison"


class UndefinedTprError(GravityNetError):
    category = "undefined-tpr"


class NumericError(GravityNetError):
    category = "numeric-failure"
