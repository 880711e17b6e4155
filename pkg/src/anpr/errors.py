"""Exception types raised across the pipeline.

Everything derives from :class:`AnprError`. Errors caused by bad input data
(annotations, images, prediction files) additionally derive from
:class:`DataError` so the CLI can map them to exit code 2.
"""


class AnprError(Exception):
    pass


class DataError(AnprError):
    pass


# annotation_io
class MalformedXml(DataError):
    pass


class MissingField(DataError):
    pass


class DegenerateBox(DataError, ValueError):
    pass


class InvalidRecord(DataError, ValueError):
    pass


class GrammarError(DataError, ValueError):
    pass


class IndexOutOfVocab(DataError, ValueError):
    pass


class InvalidLead(DataError, ValueError):
    pass


class InvalidTailChar(DataError, ValueError):
    pass


class WrongLength(DataError, ValueError):
    pass


# geometry
class NonPositiveImageSize(DataError, ValueError):
    pass


class EmptyDataset(DataError):
    pass


# preprocess
class SizeMismatch(DataError, ValueError):
    pass


class NonInvertiblePlan(AnprError, ValueError):
    pass


class BoxLost(DataError):
    pass


# network
class ShapeMismatch(AnprError, ValueError):
    pass


class InvalidBox(AnprError, ValueError):
    pass


class LengthMismatch(AnprError, ValueError):
    pass


# train_eval
class InvalidAnnotation(DataError):
    def __init__(self, problems):
        self.problems = list(problems)
        lines = "\n".join(f"  {path}: {msg}" for path, msg in self.problems)
        super().__init__(f"{len(self.problems)} invalid annotation(s):\n{lines}")


class MissingDetectorCheckpoint(AnprError):
    pass


class SchemaMismatch(DataError):
    pass


class MissingPrediction(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


# synthgen
class InfeasibleSpec(AnprError, ValueError):
    pass


class IoFailure(DataError, OSError):
    pass
