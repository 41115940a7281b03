"""Exception types shared across the package."""

from __future__ import annotations


class BackboneLensError(Exception):
    """Base class for all errors raised by backbone_lens."""


class SpecError(BackboneLensError, ValueError):
    """Malformed or inconsistent model specification."""


class GraphError(BackboneLensError):
    """Structural problem in a primitive graph (cycle, dangling input, bad shortcut)."""


class ShapeError(BackboneLensError, ValueError):
    """Tensor shapes that cannot be combined, or a spatial dim that collapsed."""


class NodeError(BackboneLensError):
    """An error raised while processing a specific graph node."""

    def __init__(self, node_id: str, cause: Exception):
        self.node_id = node_id
        self.cause = cause
        super().__init__(f"node {node_id!r}: {cause}")
