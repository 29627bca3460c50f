"""Exception hierarchy shared by every module."""


class LiftAdaptError(Exception):
    """Base class for all library errors."""


class UsageError(LiftAdaptError, ValueError):
    """Invalid input or configuration; CLI maps these to exit code 2."""


class RuntimeFailure(LiftAdaptError, RuntimeError):
    """Failure during a run; CLI maps these to exit code 1."""


# geometry
class DepthBehindCamera(UsageError):
    pass


class DegenerateTarget(UsageError):
    pass


class DegenerateSource(UsageError):
    pass


# skeleton
class ZeroBone(UsageError):
    pass


class DegenerateDirection(UsageError):
    pass


class NonPositiveRatio(UsageError):
    pass


class BadRange(UsageError):
    pass


class SkeletonError(UsageError):
    pass


# nn
class DimMismatch(UsageError):
    pass


class TapeMismatch(UsageError):
    pass


class BadClip(UsageError):
    pass


class CheckpointError(UsageError):
    pass


# augment
class EmptyBatch(UsageError):
    pass


# data
class SchemaViolation(UsageError):
    def __init__(self, message, line_no=None, field=None):
        self.line_no = line_no
        self.field = field
        where = []
        if line_no is not None:
            where.append(f"line {line_no}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class ParseError(UsageError):
    def __init__(self, message, line_no):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class BadConfig(UsageError):
    pass


class EmptyDataset(UsageError):
    pass


class EmptyFile(SchemaViolation, EmptyDataset):
    """A dataset file with no records: both a schema and an emptiness failure."""


class MissingLabels(UsageError):
    pass


class LabelLeak(UsageError):
    """Target data handed to adaptation still carries 3D labels."""


class MissingSidecar(UsageError):
    pass


# pipeline
class NanDetected(RuntimeFailure):
    def __init__(self, message, dump_path=None):
        self.dump_path = dump_path
        if dump_path is not None:
            message = f"{message} (state dumped to {dump_path})"
        super().__init__(message)


# metrics
class DegenerateConfiguration(UsageError):
    pass
