"""Uniform periodic lattice on the flat torus [0, 2*pi)^n.

Fields live on the grid as numpy arrays whose first ``dim`` axes are the
spatial axes (each of length ``resolution``); any trailing axes are tensor
component slots.  All derivative operators wrap periodically via ``np.roll``,
so central-difference stencils commute exactly and constants differentiate
to exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi

# central-difference coefficients, offset -> weight (divided by h below)
_STENCILS = {
    2: {1: 0.5, -1: -0.5},
    4: {2: -1.0 / 12.0, 1: 8.0 / 12.0, -1: -8.0 / 12.0, -2: 1.0 / 12.0},
}


def _shift(values: np.ndarray, shift: int, axis: int) -> np.ndarray:
    """Periodic shift along one axis (like np.roll, minus its overhead)."""
    n = values.shape[axis]
    shift %= n
    out = np.empty_like(values)
    head = [slice(None)] * values.ndim
    tail = [slice(None)] * values.ndim
    head[axis], tail[axis] = slice(0, shift), slice(shift, None)
    src_head = [slice(None)] * values.ndim
    src_tail = [slice(None)] * values.ndim
    src_head[axis], src_tail[axis] = slice(n - shift, None), slice(0, n - shift)
    out[tuple(head)] = values[tuple(src_head)]
    out[tuple(tail)] = values[tuple(src_tail)]
    return out


@dataclass(frozen=True)
class Grid:
    """Isotropic periodic grid: ``resolution`` points per axis, spacing 2*pi/N."""

    dim: int
    resolution: int
    spacing: float = field(init=False)

    def __post_init__(self):
        if self.dim not in (2, 3, 4):
            raise ValueError(f"dim must be 2, 3 or 4, got {self.dim}")
        if self.resolution < 8:
            raise ValueError(f"resolution must be >= 8, got {self.resolution}")
        object.__setattr__(self, "spacing", TWO_PI / self.resolution)

    @property
    def shape(self):
        return (self.resolution,) * self.dim

    def coordinates(self):
        """Meshgrid of coordinate arrays x^0 .. x^{dim-1}, 'ij' indexing."""
        axis = np.arange(self.resolution) * self.spacing
        return np.meshgrid(*([axis] * self.dim), indexing="ij")

    def scalar_field(self, fn):
        """Sample fn(x0, ..., x_{dim-1}) on the grid."""
        return np.asarray(fn(*self.coordinates()), dtype=float)

    def partial(self, values, axis, stencil_order=4):
        """Central-difference d/dx^axis of a field, periodic wrap.

        ``values`` may carry trailing component axes; differentiation acts on
        spatial axis ``axis`` only.  Global truncation error O(h^stencil_order).
        """
        if not 0 <= axis < self.dim:
            raise ValueError(f"axis {axis} out of range for dim {self.dim}")
        if stencil_order not in _STENCILS:
            raise ValueError(f"stencil_order must be 2 or 4, got {stencil_order}")
        values = np.asarray(values, dtype=float)
        out = None
        for offset, weight in _STENCILS[stencil_order].items():
            # shift by -offset so out[i] picks up values[i + offset]
            term = _shift(values, -offset, axis)
            term *= weight / self.spacing
            if out is None:
                out = term
            else:
                out += term
        return out

    def sup_norm(self, values):
        """Max of pointwise |values| over all grid nodes (and component slots)."""
        values = np.asarray(values)
        if values.size == 0:
            raise ValueError("sup_norm of empty field")
        return float(np.max(np.abs(values)))
