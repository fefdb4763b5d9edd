"""errors.py — exception hierarchy shared by every driftmle module.

The CLI maps these to exit codes: ConfigError -> 1, AssumptionFailure -> 2,
any other DriftMLEError -> 3.
"""


class DriftMLEError(Exception):
    """Base class for every error raised by driftmle."""

    exit_code = 3

    def to_record(self):
        """Structured form used by --json-errors and the errors.log writer."""
        return {"error_type": type(self).__name__, "error_msg": str(self)}


# ── Expressions ──────────────────────────────────────────────────────────────

class ExprError(DriftMLEError):
    pass


class ExprSyntaxError(ExprError):
    """Malformed coefficient text. `offset` is a byte offset into the source."""

    def __init__(self, message, offset, expected=()):
        self.offset = offset
        self.expected = tuple(sorted(expected))
        detail = f" (expected one of: {', '.join(self.expected)})" if self.expected else ""
        super().__init__(f"{message} at byte {offset}{detail}")

    def to_record(self):
        rec = super().to_record()
        rec["offset"] = self.offset
        rec["expected"] = list(self.expected)
        return rec


class UnknownIdentifier(ExprError):
    def __init__(self, name, offset=None):
        self.name = name
        self.offset = offset
        where = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"unknown identifier '{name}'{where}")


class DomainError(ExprError):
    """Evaluation left the domain of an elementary function (ln(-1), 1/0, ...)."""

    def __init__(self, node, value=None, reason=""):
        self.node = node
        self.value = value
        text = reason or "domain error"
        super().__init__(f"{text} in '{node}'"
                         + (f" at argument {value!r}" if value is not None else ""))


# ── Quadrature ───────────────────────────────────────────────────────────────

class QuadratureError(DriftMLEError):
    pass


class BudgetExceeded(QuadratureError):
    def __init__(self, result):
        self.result = result
        super().__init__(f"evaluation budget exhausted after {result.evaluations} "
                         f"evaluations (value={result.value:.12g}, "
                         f"err={result.abs_error_estimate:.3g})")


class NonFiniteValue(QuadratureError):
    def __init__(self, x, fx):
        self.x = x
        self.fx = fx
        super().__init__(f"integrand returned {fx!r} at x={x!r}")


class SuspectedDivergent(QuadratureError):
    def __init__(self, result, reason=""):
        self.result = result
        self.radius = result.radius
        super().__init__(f"integral suspected divergent at R={result.radius:g}"
                         + (f": {reason}" if reason else ""))


# ── Model ────────────────────────────────────────────────────────────────────

class ModelError(DriftMLEError):
    pass


class DegenerateDiffusion(ModelError):
    def __init__(self, x):
        self.x = x
        super().__init__(f"diffusion coefficient b vanishes at x={x!r}")


class NonPositiveInfo(ModelError):
    def __init__(self, info):
        self.info = info
        super().__init__(f"E d(xi) = {info!r} is not positive; "
                         "the drift coefficient looks identically zero (A6)")


class AssumptionFailure(ModelError):
    exit_code = 2

    def __init__(self, report, failed):
        self.report = report
        self.failed = tuple(failed)
        super().__init__(f"assumption check failed: {', '.join(self.failed)} "
                         "(use --force to run anyway)")

    def to_record(self):
        rec = super().to_record()
        rec["failed"] = list(self.failed)
        if self.report is not None:
            rec["report"] = self.report.to_dict()
        return rec


# ── Simulation / estimation / experiments ────────────────────────────────────

class InvalidScheme(DriftMLEError):
    pass


class NumericalBlowup(DriftMLEError):
    def __init__(self, step, value):
        self.step = step
        self.value = value
        super().__init__(f"|X| exceeded blowup threshold at step {step} (X={value!r})")


class DegenerateDenominator(DriftMLEError):
    def __init__(self, denominator):
        self.denominator = denominator
        super().__init__(f"estimator denominator {denominator!r} is not positive; "
                         "a(x) vanishes along the path (A6)")


class AllReplicatesFailed(DriftMLEError):
    def __init__(self, n, alpha, failures):
        self.n = n
        self.alpha = alpha
        self.failures = failures
        super().__init__(f"all {failures} replicates failed in cell n={n}, alpha={alpha}")


class ConfigError(DriftMLEError):
    exit_code = 1

    def __init__(self, message, field_path=""):
        self.field_path = field_path
        where = f"{field_path}: " if field_path else ""
        super().__init__(f"{where}{message}")

    def to_record(self):
        rec = super().to_record()
        rec["field"] = self.field_path
        return rec
