"""Exception and warning types shared across the package."""


class SchemaError(ValueError):
    """A required source column is missing from the input header."""


class SplitInfeasibleError(ValueError):
    """The dataset cannot support a stratified split (too few of a label)."""


class PlanInfeasibleError(ValueError):
    """A shot plan cannot be built from the given training pool."""


class LadderTruncatedWarning(UserWarning):
    """The shot ladder was cut short because the training pool ran out."""


class TemplateError(ValueError):
    """A prompt template does not contain exactly one ``{input}`` slot."""


class SequenceTooLongError(ValueError):
    """Encoded text exceeds the fixed sequence length."""

    def __init__(self, measured: int, limit: int):
        self.measured = measured
        self.limit = limit
        super().__init__(f"encoded length {measured} exceeds limit {limit}")


class NumericalError(ArithmeticError):
    """An operation produced NaN or Inf values."""

    def __init__(self, op: str, step: int | None = None):
        self.op = op
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite values produced by op '{op}'{where}")


class PretrainDataMissingError(ValueError):
    """No common-tissue examples were supplied for pretraining."""


class MetricUndefinedError(ValueError):
    """A ranking metric is undefined for the given label composition."""


class EmptyTrainingSetError(ValueError):
    """A training file was requested for zero examples."""


class UnparseableAnswerWarning(UserWarning):
    """A remote completion matched neither answer word."""


class RemoteError(RuntimeError):
    """Base class for remote fine-tune service failures."""

    def __init__(self, message: str, last_response: str = ""):
        self.last_response = last_response
        super().__init__(message)


class AuthenticationError(RemoteError):
    """The service rejected the supplied credentials."""


class RateLimitExceededError(RemoteError):
    """The service kept rate-limiting past the retry budget."""


class RemoteTimeoutError(RemoteError):
    """A job did not reach a terminal state within the deadline."""


class RemoteServerError(RemoteError):
    """The service reported an unrecoverable failure."""
