"""Exception hierarchy shared by every rangeseg module."""


class RangeSegError(Exception):
    pass


class MalformedScanError(RangeSegError, ValueError):
    pass


class MalformedLabelError(RangeSegError, ValueError):
    pass


class UnknownDatasetError(RangeSegError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown dataset"


class DegeneratePointError(RangeSegError, ValueError):
    pass


class DimensionError(RangeSegError, ValueError):
    pass


class ParameterError(RangeSegError, ValueError):
    pass


class NumericInstabilityError(RangeSegError, FloatingPointError):
    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite values produced by {op}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class EmptyGroupError(RangeSegError, ValueError):
    pass


class ConfigError(RangeSegError, ValueError):
    pass


class FormatError(RangeSegError, ValueError):
    pass


class LabelError(RangeSegError, ValueError):
    def __init__(self, msg: str, index: int | None = None):
        self.index = index
        super().__init__(msg)


class ParamMismatchError(RangeSegError, ValueError):
    """Weights do not match the tensors a model config expects."""

    def __init__(self, name: str, detail: str):
        self.name = name
        super().__init__(f"{name}: {detail}")
