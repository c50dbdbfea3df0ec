"""Exception hierarchy shared by all treelm modules."""


class TreeLmError(Exception):
    """Base class for all errors raised by this package."""


class DataError(TreeLmError):
    """Malformed or inconsistent input data (CLI exit code 3)."""


class ConllError(DataError):
    """Unparseable CoNLL input; carries the offending line or block."""

    def __init__(self, message, line=None, block=None):
        ctx = []
        if line is not None:
            ctx.append(f"line {line}")
        if block is not None:
            ctx.append(f"block {block}")
        if ctx:
            message = f"{message} ({', '.join(ctx)})"
        super().__init__(message)
        self.line = line
        self.block = block


class TreeStructureError(DataError):
    """Token rows do not form a valid single-rooted dependency tree."""


class ReconstructionError(DataError):
    """A path set cannot be assembled back into a tree."""


class NumericFault(TreeLmError):
    """Non-finite values in model computation (CLI exit code 4)."""
