"""Dense tensor fields with variance tracking.

A :class:`TensorField` stores components as a numpy array whose leading axes
are the spatial grid axes and whose trailing axes (one per slot, each of
length ``dim``) are the tensor indices.  Variance is an explicit string of
``'u'`` (upper) / ``'l'`` (lower) per slot; raising and lowering contract
against the metric inverse / metric pointwise.

Storage is dense and uncompressed: symmetries are verified by tests, not
exploited.
"""

from __future__ import annotations

import math
import string
from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .grid import Grid

MAX_RANK = 6  # deepest object formed: second covariant derivative of Rm

DET_FLOOR = 1e-14
COND_CEILING = 1e12


class MetricDegenerationError(RuntimeError):
    """Metric lost positive definiteness / invertibility; flow has degenerated."""


@dataclass(frozen=True)
class TensorField:
    grid: Grid
    variance: str  # e.g. 'lll' for a 3-form, '' for a scalar field
    data: np.ndarray

    def __post_init__(self):
        if not all(c in "ul" for c in self.variance):
            raise ValueError(f"variance must be a string over 'u'/'l': {self.variance!r}")
        if len(self.variance) > MAX_RANK:
            raise ValueError(f"rank {len(self.variance)} exceeds supported maximum {MAX_RANK}")
        expected = self.grid.shape + (self.grid.dim,) * len(self.variance)
        if self.data.shape != expected:
            raise ValueError(f"component shape {self.data.shape} != expected {expected}")

    @property
    def rank(self):
        return len(self.variance)

    @classmethod
    def zeros(cls, grid, variance):
        shape = grid.shape + (grid.dim,) * len(variance)
        return cls(grid, variance, np.zeros(shape))

    def map_data(self, fn):
        return TensorField(self.grid, self.variance, fn(self.data))

    def __add__(self, other):
        _check_compatible(self, other)
        return TensorField(self.grid, self.variance, self.data + other.data)

    def __sub__(self, other):
        _check_compatible(self, other)
        return TensorField(self.grid, self.variance, self.data - other.data)

    def __mul__(self, scalar):
        return TensorField(self.grid, self.variance, self.data * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return TensorField(self.grid, self.variance, -self.data)


def _check_compatible(a, b):
    if a.grid != b.grid or a.variance != b.variance:
        raise ValueError(
            f"incompatible tensors: variance {a.variance!r} vs {b.variance!r}"
        )


@dataclass(frozen=True)
class MetricField:
    """Riemannian metric: rank-2 lower symmetric positive-definite tensor field.

    Carries the pointwise inverse and determinant; construction refuses
    degenerate or ill-conditioned metrics instead of silently continuing.
    """

    value: TensorField  # g_ij, variance 'll'
    inverse: TensorField  # g^ij, variance 'uu'
    det: np.ndarray  # scalar field

    @property
    def grid(self):
        return self.value.grid

    @classmethod
    def from_components(cls, grid, components):
        components = np.asarray(components, dtype=float)
        expected = grid.shape + (grid.dim, grid.dim)
        if components.shape != expected:
            raise ValueError(f"metric shape {components.shape} != expected {expected}")
        asym = np.max(np.abs(components - np.swapaxes(components, -1, -2)))
        scale = max(1.0, float(np.max(np.abs(components))))
        if asym > 1e-12 * scale:
            raise ValueError(f"metric not symmetric: max asymmetry {asym:.3e}")
        components = 0.5 * (components + np.swapaxes(components, -1, -2))

        det = _sym_det(components)
        if np.min(det) <= DET_FLOOR:
            raise MetricDegenerationError(
                f"metric determinant {np.min(det):.3e} <= {DET_FLOOR:.0e}"
            )
        # positive definiteness via Sylvester's criterion (leading minors);
        # the eigensolve runs only on the error path, for the report
        for k in range(1, grid.dim + 1):
            minors = _sym_det(components[..., :k, :k])
            if np.min(minors) <= 0.0:
                eigs = np.linalg.eigvalsh(components)
                node = np.unravel_index(int(np.argmin(eigs[..., 0])), grid.shape)
                raise MetricDegenerationError(
                    f"metric not positive definite: min eigenvalue "
                    f"{np.min(eigs):.3e} at node {node}"
                )
        inverse = _sym_inverse(components, det)
        # Frobenius bound |g|_F |g^-1|_F >= cond(g); cheap and adequate here
        cond_bound = np.max(
            np.sqrt(np.sum(components**2, axis=(-2, -1))
                    * np.sum(inverse**2, axis=(-2, -1)))
        )
        if cond_bound > COND_CEILING:
            raise MetricDegenerationError(
                f"metric condition bound {cond_bound:.3e} > {COND_CEILING:.0e}"
            )
        return cls(
            value=TensorField(grid, "ll", components),
            inverse=TensorField(grid, "uu", inverse),
            det=det,
        )

    @classmethod
    def flat(cls, grid, scale=1.0):
        eye = np.broadcast_to(
            np.eye(grid.dim) * scale, grid.shape + (grid.dim, grid.dim)
        ).copy()
        return cls.from_components(grid, eye)

    def min_eigenvalue(self):
        return float(np.min(np.linalg.eigvalsh(self.value.data)))


def _sym_det(a):
    """Determinant of stacked small symmetric matrices, closed form for d <= 3."""
    d = a.shape[-1]
    if d == 1:
        return a[..., 0, 0].copy()
    if d == 2:
        return a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    if d == 3:
        return (
            a[..., 0, 0] * (a[..., 1, 1] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 1])
            - a[..., 0, 1] * (a[..., 1, 0] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 0])
            + a[..., 0, 2] * (a[..., 1, 0] * a[..., 2, 1] - a[..., 1, 1] * a[..., 2, 0])
        )
    return np.linalg.det(a)


def _sym_inverse(a, det):
    """Inverse of stacked symmetric matrices; adjugate form for d <= 3."""
    d = a.shape[-1]
    if d == 1:
        return 1.0 / a
    if d == 2:
        inv = np.empty_like(a)
        inv[..., 0, 0] = a[..., 1, 1]
        inv[..., 1, 1] = a[..., 0, 0]
        inv[..., 0, 1] = -a[..., 0, 1]
        inv[..., 1, 0] = -a[..., 1, 0]
        return inv / det[..., None, None]
    if d == 3:
        inv = np.empty_like(a)
        for i in range(3):
            for j in range(i, 3):
                r = [k for k in range(3) if k != j]
                c = [k for k in range(3) if k != i]
                cof = (
                    a[..., r[0], c[0]] * a[..., r[1], c[1]]
                    - a[..., r[0], c[1]] * a[..., r[1], c[0]]
                )
                val = cof if (i + j) % 2 == 0 else -cof
                inv[..., i, j] = val
                inv[..., j, i] = val
        return inv / det[..., None, None]
    inv = np.linalg.inv(a)
    return 0.5 * (inv + np.swapaxes(inv, -1, -2))


# ---------------------------------------------------------------------------
# index algebra


def _slot_letters(rank):
    return string.ascii_lowercase[:rank]


def _contract_slot(data, matrix, slot, rank):
    """Contract component slot ``slot`` of ``data`` against a pointwise matrix.

    out[..., z at slot] = matrix[..., z, p] * data[..., p at slot], realized
    as a batched matmul over the flattened remaining component slots.
    """
    gdim = data.ndim - rank
    axis = gdim + slot
    d = data.shape[-1]
    moved = np.ascontiguousarray(np.moveaxis(data, axis, -1))
    lead = moved.shape[:gdim]
    rest = moved.shape[gdim:-1]
    flat = moved.reshape(lead + (-1, d))
    out = np.matmul(flat, np.swapaxes(matrix, -1, -2))
    out = out.reshape(lead + rest + (d,))
    return np.ascontiguousarray(np.moveaxis(out, -1, axis))


def raise_index(t: TensorField, slot: int, g: MetricField) -> TensorField:
    """Raise a lower slot with g^{-1}."""
    if not 0 <= slot < t.rank:
        raise ValueError(f"slot {slot} out of range for rank {t.rank}")
    if t.variance[slot] != "l":
        raise ValueError(f"slot {slot} is already upper")
    data = _contract_slot(t.data, g.inverse.data, slot, t.rank)
    variance = t.variance[:slot] + "u" + t.variance[slot + 1 :]
    return TensorField(t.grid, variance, data)


def lower_index(t: TensorField, slot: int, g: MetricField) -> TensorField:
    """Lower an upper slot with g."""
    if not 0 <= slot < t.rank:
        raise ValueError(f"slot {slot} out of range for rank {t.rank}")
    if t.variance[slot] != "u":
        raise ValueError(f"slot {slot} is already lower")
    data = _contract_slot(t.data, g.value.data, slot, t.rank)
    variance = t.variance[:slot] + "l" + t.variance[slot + 1 :]
    return TensorField(t.grid, variance, data)


def inner(t: TensorField, u: TensorField, g: MetricField) -> np.ndarray:
    """Pointwise full metric contraction <T, U>; inner(T, T) is |T|^2."""
    _check_compatible(t, u)
    flipped = u.data
    for slot, var in enumerate(u.variance):
        matrix = g.inverse.data if var == "l" else g.value.data
        flipped = _contract_slot(flipped, matrix, slot, u.rank)
    axes = tuple(range(t.grid.dim, t.grid.dim + t.rank))
    if not axes:
        return t.data * flipped
    return np.sum(t.data * flipped, axis=axes)


def norm_squared(t: TensorField, g: MetricField) -> np.ndarray:
    return inner(t, t, g)


def contract(t: TensorField, slot_a: int, slot_b: int) -> TensorField:
    """Einstein summation over an upper/lower slot pair; rank drops by 2."""
    rank = t.rank
    for s in (slot_a, slot_b):
        if not 0 <= s < rank:
            raise ValueError(f"slot {s} out of range for rank {rank}")
    if slot_a == slot_b:
        raise ValueError("cannot contract a slot with itself")
    if {t.variance[slot_a], t.variance[slot_b]} != {"u", "l"}:
        raise ValueError(
            f"contraction needs one upper and one lower slot, got "
            f"{t.variance[slot_a]!r} and {t.variance[slot_b]!r}"
        )
    letters = _slot_letters(rank)
    paired = letters.replace(letters[slot_b], letters[slot_a])
    kept = "".join(
        c for i, c in enumerate(letters) if i not in (slot_a, slot_b)
    )
    data = np.einsum(f"...{paired}->...{kept}", t.data)
    variance = "".join(
        v for i, v in enumerate(t.variance) if i not in (slot_a, slot_b)
    )
    return TensorField(t.grid, variance, data)


def kronecker(grid: Grid) -> TensorField:
    data = np.broadcast_to(np.eye(grid.dim), grid.shape + (grid.dim, grid.dim)).copy()
    return TensorField(grid, "ul", data)


# ---------------------------------------------------------------------------
# (anti)symmetry helpers


def antisymmetrize(t: TensorField) -> TensorField:
    """Full antisymmetrization over all slots (1/p! alternating sum)."""
    rank = t.rank
    if rank < 2:
        return t
    letters = _slot_letters(rank)
    acc = np.zeros_like(t.data)
    for perm in permutations(range(rank)):
        sign = _permutation_sign(perm)
        target = "".join(letters[p] for p in perm)
        acc += sign * np.einsum(f"...{letters}->...{target}", t.data)
    return TensorField(t.grid, t.variance, acc / math.factorial(rank))


def _permutation_sign(perm):
    sign = 1
    seen = [False] * len(perm)
    for i in range(len(perm)):
        if seen[i]:
            continue
        j, length = i, 0
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            length += 1
        if length % 2 == 0:
            sign = -sign
    return sign


def antisymmetry_defect(t: TensorField) -> float:
    """Sup deviation from antisymmetry over adjacent slot swaps.

    Zero exactly when the tensor is fully antisymmetric (adjacent
    transpositions generate the symmetric group); much cheaper than
    comparing against the full antisymmetrization.
    """
    if t.rank < 2:
        return 0.0
    gdim = t.grid.dim
    worst = 0.0
    for s in range(t.rank - 1):
        swapped = np.swapaxes(t.data, gdim + s, gdim + s + 1)
        worst = max(worst, float(np.max(np.abs(t.data + swapped))))
    return worst


def require_antisymmetric(t: TensorField, tol=1e-10, what="form"):
    defect = antisymmetry_defect(t)
    scale = max(1.0, float(np.max(np.abs(t.data))))
    if defect > tol * scale:
        raise ValueError(f"{what} is not antisymmetric: defect {defect:.3e}")
