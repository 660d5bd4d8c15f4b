"""Exception hierarchy shared by every sparsecl module."""


class SparseCLError(Exception):
    """Base class for all errors raised by sparsecl."""


class InputShapeError(SparseCLError, ValueError):
    pass


class NumericStateError(SparseCLError, FloatingPointError):
    pass


class LabelDomainError(SparseCLError, ValueError):
    pass


class ConsistencyError(SparseCLError, ValueError):
    pass


class CapacityError(SparseCLError, ValueError):
    pass


class CapacityExhaustedError(CapacityError):
    """Not enough non-fixed neurons left in a layer of the fixed-capacity model."""

    def __init__(self, layer, requested, available):
        self.layer = layer
        self.requested = requested
        self.available = available
        super().__init__(
            f"capacity exhausted in layer {layer}: requested {requested} "
            f"non-fixed neurons, only {available} available"
        )


class EmptyDatasetError(SparseCLError, ValueError):
    pass


class ConstraintError(SparseCLError, ValueError):
    """An allocation plan or config violates a class-ambiguity constraint."""

    def __init__(self, rule, message):
        self.rule = rule
        super().__init__(f"rule ({rule}): {message}")


class StalenessError(SparseCLError, RuntimeError):
    pass


class DivergenceError(SparseCLError, FloatingPointError):
    def __init__(self, message, last_good_epoch):
        self.last_good_epoch = last_good_epoch
        super().__init__(f"{message} (last good epoch: {last_good_epoch})")


class FormatError(SparseCLError, ValueError):
    pass


class LengthError(FormatError):
    pass


class DependencyError(SparseCLError, FileNotFoundError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing dataset files: " + ", ".join(map(str, self.missing)))


class ArtifactNotFoundError(SparseCLError, FileNotFoundError):
    pass


class GroupingError(SparseCLError, ValueError):
    pass


class DomainError(SparseCLError, ValueError):
    pass


class ConfigError(SparseCLError, ValueError):
    """Config validation failure; ``errors`` holds ``(field, message)`` pairs."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{f}: {m}" for f, m in self.errors))
