"""Exception hierarchy shared by all splitreg modules.

Every error carries a stable machine-readable ``code`` so the CLI can emit
structured error JSON without string matching.
"""

from __future__ import annotations


class SplitregError(Exception):
    """Base class; ``code`` is stable across releases."""

    code = "ERROR"


class GridMismatch(SplitregError):
    code = "GRID_MISMATCH"


class LabelNotFound(SplitregError):
    code = "LABEL_NOT_FOUND"

    def __init__(self, label: int, message: str | None = None):
        self.label = int(label)
        super().__init__(message or f"label {label} not present in label map")


class BoxOutOfRange(SplitregError):
    code = "BOX_OUT_OF_RANGE"


class ParseError(SplitregError):
    """Malformed file content; ``line`` is 1-based."""

    code = "PARSE_ERROR"

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnsupportedField(SplitregError):
    """A header field outside the supported subset; never silently coerced."""

    code = "UNSUPPORTED_FIELD"

    def __init__(self, field: str, message: str | None = None):
        self.field = field
        super().__init__(message or f"unsupported header field: {field!r}")


class MissingRegionField(SplitregError):
    code = "MISSING_REGION_FIELD"

    def __init__(self, label: int):
        self.label = int(label)
        super().__init__(f"no displacement field supplied for region label {label}")


class DuplicateLabel(SplitregError):
    code = "DUPLICATE_LABEL"

    def __init__(self, label: int):
        self.label = int(label)
        super().__init__(f"region label {label} supplied more than once")


class AllVoxelsFolded(SplitregError):
    code = "ALL_VOXELS_FOLDED"


class EmptyRoi(SplitregError):
    code = "EMPTY_ROI"


class MissingInput(SplitregError):
    code = "MISSING_INPUT"


class NonFiniteLoss(SplitregError):
    """Optimization diverged; reports the level and iteration index."""

    code = "NON_FINITE_LOSS"

    def __init__(self, level: int, iteration: int):
        self.level = level
        self.iteration = iteration
        super().__init__(
            f"loss became non-finite at level {level}, iteration {iteration}"
        )


class EmptyRegion(SplitregError):
    code = "EMPTY_REGION"

    def __init__(self, label: int, side: str = ""):
        self.label = int(label)
        side = f" ({side})" if side else ""
        super().__init__(f"region label {label} has an empty support{side}")


class LabelSetMismatch(SplitregError):
    code = "LABEL_SET_MISMATCH"

    def __init__(self, only_moving: set[int], only_fixed: set[int]):
        self.only_moving = sorted(int(v) for v in only_moving)
        self.only_fixed = sorted(int(v) for v in only_fixed)
        super().__init__(
            "label sets differ: "
            f"only in moving {self.only_moving}, only in fixed {self.only_fixed}"
        )


class UnmappedLabel(SplitregError):
    code = "UNMAPPED_LABEL"

    def __init__(self, label: int):
        self.label = int(label)
        super().__init__(f"merge mapping does not cover label {label}")


class TargetUnreachable(SplitregError):
    code = "TARGET_UNREACHABLE"


class EmptySurface(SplitregError):
    code = "EMPTY_SURFACE"

    def __init__(self, side: str, label: int):
        self.side = side
        self.label = int(label)
        super().__init__(f"label {label} has no surface voxels in the {side} map")


class SpecInfeasible(SplitregError):
    code = "SPEC_INFEASIBLE"
