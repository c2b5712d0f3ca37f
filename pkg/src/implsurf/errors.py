"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage errors -> 1, data errors -> 2,
numeric failures -> 3.
"""


class ImplsurfError(Exception):
    """Base class for all package errors."""


class InvalidArgument(ImplsurfError, ValueError):
    """An argument violates an operation's precondition."""


class DegenerateInput(ImplsurfError, ValueError):
    """Input is structurally valid but degenerate (constant volume, all background...)."""


class TopologyError(ImplsurfError, ValueError):
    """A mesh does not have the topology an operation requires (e.g. not closed)."""


class ConfigError(ImplsurfError, ValueError):
    """Configuration mismatch, e.g. loading a checkpoint into a different architecture."""


class LabelConflict(ImplsurfError, ValueError):
    """A query point carries labels that the requested loss cannot represent."""


class LayoutError(ImplsurfError, RuntimeError):
    """Internal patch-layout invariant broken; indicates a bug, not bad input."""


class SceneSpecError(ImplsurfError, ValueError):
    """A synthetic scene specification violates its invariants."""


class NumericFailure(ImplsurfError, RuntimeError):
    """A numeric guard tripped (NaN loss, failed gradient check)."""
