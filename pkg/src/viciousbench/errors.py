"""Exception hierarchy.

Every error carries a ``category`` and an ``exit_code`` so the command line
front end can map failures onto stable process exit codes.
"""


class BenchError(Exception):
    category = "internal"
    exit_code = 1


class ArgumentError(BenchError, ValueError):
    category = "argument"
    exit_code = 2


class ConfigError(ArgumentError):
    category = "config"
    exit_code = 2


class UnsupportedDatasetError(BenchError, KeyError):
    category = "dataset"
    exit_code = 3

    def __str__(self):
        return str(self.args[0]) if self.args else "unsupported dataset"


class IngestionError(BenchError, OSError):
    category = "dataset"
    exit_code = 3


class DegenerateAttributeError(ArgumentError):
    category = "dataset"
    exit_code = 3


class ConstructionError(BenchError, ValueError):
    category = "model"
    exit_code = 4


class CheckpointFormatError(BenchError, ValueError):
    category = "io"
    exit_code = 4


class IllConditionedError(BenchError, ArithmeticError):
    category = "numerics"
    exit_code = 5


class TrainingDivergedError(BenchError, FloatingPointError):
    category = "training"
    exit_code = 6

    def __init__(self, epoch, batch, components):
        self.epoch = epoch
        self.batch = batch
        self.components = dict(components)
        detail = ", ".join(f"{k}={v!r}" for k, v in self.components.items())
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")


class EvaluationError(BenchError, RuntimeError):
    category = "evaluation"
    exit_code = 7


class RunExistsError(BenchError, FileExistsError):
    category = "io"
    exit_code = 8


class ReportError(BenchError, RuntimeError):
    category = "report"
    exit_code = 8


class PartialFailure(BenchError):
    category = "partial"
    exit_code = 9
