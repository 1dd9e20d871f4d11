"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """A caller broke a precondition (shapes, ranges, missing inputs)."""


class NumericFailure(FloatingPointError):
    """A computation produced or would produce a non-finite value."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"numeric failure in {op}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class FormatError(ValueError):
    """A persisted file failed validation (magic, version, checksum, truncation)."""
