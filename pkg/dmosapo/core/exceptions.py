class DMOException(Exception):
    """Base exception for all package exceptions.

    ``exit_code`` is what the CLI returns when the exception escapes a stage:
    1 for validation problems, 2 for runtime aborts.
    """

    exit_code: int = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ValidationFailure(DMOException):
    exit_code = 1


class RuntimeAbort(DMOException):
    exit_code = 2


# ==========================================
# VALIDATION FAILURES (exit 1)
# ==========================================

class ShapeMismatchError(ValidationFailure):
    def __init__(self, op: str, left: tuple, right: tuple):
        super().__init__(f"Shape mismatch in '{op}': {tuple(left)} vs {tuple(right)}")
        self.op = op
        self.shapes = (tuple(left), tuple(right))


class NonScalarRootError(ValidationFailure):
    def __init__(self, shape: tuple, operation: str = "backward()"):
        super().__init__(f"{operation} needs a scalar, got shape {tuple(shape)}")


class InsufficientDataError(ValidationFailure):
    def __init__(self, required: int, available: int, what: str = "transitions"):
        super().__init__(f"Need at least {required} {what}, dataset has {available}")


class ContextTooShortError(ValidationFailure):
    def __init__(self, required: int, got: int):
        super().__init__(
            f"Context window has {got} frames but the model consumes {required}. "
            f"Prefill the rollout handle with a longer history."
        )


class NoGoalSegmentsError(ValidationFailure):
    def __init__(self, n_segments: int, tolerance: float):
        super().__init__(
            f"None of the {n_segments} intent segments ends within {tolerance:.3f} of the goal; "
            f"collect with the scripted policy or raise reward.goal_tolerance"
        )


class DegenerateLabelsError(ValidationFailure):
    def __init__(self, positive_fraction: float):
        super().__init__(
            f"Intent labels are all {'one' if positive_fraction >= 1.0 else 'zero'}; "
            f"a reward head cannot be trained from a single class"
        )


class SchemaMismatchError(ValidationFailure):
    def __init__(self, message: str = "Metric files do not share a schema"):
        super().__init__(message)


class CheckpointFormatError(ValidationFailure):
    def __init__(self, message: str = "Invalid checkpoint"):
        super().__init__(message)


class ConfigValidationError(ValidationFailure):
    def __init__(self, message: str = "Invalid configuration"):
        super().__init__(message)


class UnknownComponentError(ValidationFailure):
    def __init__(self, kind: str, name: str, choices):
        super().__init__(f"Unknown {kind} '{name}'. Choices: {', '.join(sorted(choices))}")


# ==========================================
# RUNTIME ABORTS (exit 2)
# ==========================================

class TrainingDivergedError(RuntimeAbort):
    def __init__(self, stage: str, diagnostics: dict | None = None):
        diagnostics = diagnostics or {}
        summary = ", ".join(f"{k}={v}" for k, v in diagnostics.items())
        super().__init__(f"Training diverged in '{stage}'" + (f" ({summary})" if summary else ""))
        self.stage = stage
        self.diagnostics = diagnostics


class NonFiniteLatentError(RuntimeAbort):
    def __init__(self, step: int):
        super().__init__(f"Non-finite latent produced at imagination step {step}")
        self.step = step


class GradientCheckFailedError(RuntimeAbort):
    def __init__(self, failed: list):
        super().__init__(f"Gradient checks over tolerance: {', '.join(failed)}")
        self.failed = failed


# structural contracts of the decoupled update

class GradientLeakError(RuntimeAbort):
    def __init__(self, module: str):
        super().__init__(f"{module} accumulated a policy gradient")
        self.module = module


class UnrollLimitError(RuntimeAbort):
    def __init__(self, unrolled: int):
        super().__init__(f"Local-model loss unrolled {unrolled} transitions, expected 1")
        self.unrolled = unrolled


class EmptyReplayBufferError(RuntimeAbort):
    def __init__(self, consumer: str = "a minibatch"):
        super().__init__(f"Cannot sample for {consumer}: the rollout buffer is empty")
