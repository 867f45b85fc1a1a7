"""Exception hierarchy shared across the pipeline.

Every module raises subclasses of MedcascadeError so the CLI can map
failures to exit codes and a single machine-parseable category line.
UserError covers bad inputs/configuration (exit 1); anything else that
escapes is an internal error (exit 2).
"""


class MedcascadeError(Exception):
    """Base class for all pipeline errors."""

    @property
    def category(self) -> str:
        return type(self).__name__


class UserError(MedcascadeError):
    """Errors caused by bad inputs, files, or configuration."""


# corpus
class MalformedRecord(UserError):
    def __init__(self, line_no, field, detail=""):
        self.line_no = line_no
        self.field = field
        super().__init__(f"line {line_no}: bad field {field!r}" + (f": {detail}" if detail else ""))


class UnknownLabel(UserError):
    def __init__(self, record_id, task, label):
        self.record_id = record_id
        self.task = task
        self.label = label
        super().__init__(f"record {record_id!r}: label {label!r} not in {task} vocabulary")


class DuplicateId(UserError):
    def __init__(self, record_id):
        self.record_id = record_id
        super().__init__(f"duplicate record id {record_id!r}")


class ClassTooSmall(UserError):
    def __init__(self, class_name, count, minimum):
        self.class_name = class_name
        super().__init__(f"class {class_name!r} has {count} records, needs >= {minimum}")


# gateway
class BackendUnavailable(MedcascadeError):
    pass


class AuthError(UserError):
    pass


class ResponseEmpty(MedcascadeError):
    pass


class UnknownSentinel(UserError):
    pass


class UnknownBackend(UserError):
    pass


# preprocess
class RefusalDetected(MedcascadeError):
    pass


class ParseFailure(MedcascadeError):
    pass


class EmptySourceText(UserError):
    pass


# variants
class MissingBundle(UserError):
    def __init__(self, record_id):
        self.record_id = record_id
        super().__init__(f"no preprocess bundle for record {record_id!r}")


# adapter / trainer
class RankTooLarge(UserError):
    pass


class ShapeMismatch(UserError):
    pass


class EmptyClass(UserError):
    pass


class IndexOutOfVocab(UserError):
    pass


class NonFiniteLoss(MedcascadeError):
    def __init__(self, batch_id, value):
        self.batch_id = batch_id
        super().__init__(f"non-finite loss {value!r} at batch {batch_id}")


class VocabMismatch(UserError):
    pass


class EncoderUnavailable(UserError):
    pass


# evaluator
class LengthMismatch(UserError):
    pass


class EmptyInput(UserError):
    pass


# cli
class ConfigInvalid(UserError):
    pass


class MissingUpstreamArtifact(UserError):
    pass
