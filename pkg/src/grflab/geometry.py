"""Differential-geometric operators on tensor fields.

Conventions
-----------
Curvature is built from ``Riem^l_ijk = d_i Gamma^l_jk - d_j Gamma^l_ik
+ Gamma^l_ip Gamma^p_jk - Gamma^l_jp Gamma^p_ik`` and lowered as
``R_ijkl = -g_lm Riem^m_ijk``.  The overall sign is fixed so that
``Ric_ij = g^kl R_ikjl`` and the conformal 2-torus metric ``exp(2u) delta``
has scalar curvature ``-2 exp(-2u) Lap(u)`` (positive where u is concave),
i.e. positively curved spaces have positive scalar curvature.

The codifferential is ``(d* w)_{i...} = -g^{jk} cov_j w_{k i...}`` and the
form Laplacian is ``box = -(d d* + d* d)``.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .grid import Grid
from .tensor import (
    MetricField,
    TensorField,
    _contract_slot,
    antisymmetrize,
    inner,
    require_antisymmetric,
)

_L = string.ascii_lowercase


def _grad(grid: Grid, data: np.ndarray, order: int) -> np.ndarray:
    """Stack of partials: output axis grid.dim holds the derivative direction."""
    return np.stack(
        [grid.partial(data, axis, order) for axis in range(grid.dim)],
        axis=grid.dim,
    )


def _tperm(data: np.ndarray, gdim: int, perm: tuple) -> np.ndarray:
    """View with the trailing component axes permuted by ``perm``."""
    axes = tuple(range(gdim)) + tuple(gdim + p for p in perm)
    return np.transpose(data, axes)


def _bmm(a: np.ndarray, b: np.ndarray, lead: tuple, out_comps: tuple) -> np.ndarray:
    """Batched matmul over flattened component blocks, reshaped to out_comps."""
    return np.matmul(a, b).reshape(lead + out_comps)


@dataclass(frozen=True)
class GeometryCache:
    """Christoffels and curvature tensors of one metric at one stencil order."""

    metric: MetricField
    stencil_order: int
    christoffel: TensorField  # Gamma^k_ij, variance 'ull'
    riemann: TensorField  # R_ijkl, fully lower
    ricci: TensorField  # R_ij
    scalar: np.ndarray  # scalar curvature field

    @property
    def grid(self):
        return self.metric.grid

    @cached_property
    def _gamma_lower_mat(self):
        """[p, (z, s)] matrix of G^p_zs, for lower-slot connection terms."""
        d = self.grid.dim
        lead = self.grid.shape
        zsp = np.ascontiguousarray(np.moveaxis(self.christoffel.data, d, d + 2))
        return np.swapaxes(zsp.reshape(lead + (d * d, d)), -1, -2)

    @cached_property
    def _gamma_upper_mat(self):
        """[p, (z, k)] matrix of G^k_zp, for upper-slot connection terms."""
        d = self.grid.dim
        lead = self.grid.shape
        zkp = np.ascontiguousarray(np.swapaxes(self.christoffel.data, -3, -2))
        return np.swapaxes(zkp.reshape(lead + (d * d, d)), -1, -2)

    def sym_tolerance(self):
        """Discretization tolerance for curvature symmetry checks.

        Scales with h^order times the magnitude of second metric derivatives;
        a small absolute floor covers pure round-off on flat metrics.
        """
        grid = self.grid
        g = self.metric.value.data
        d2_scale = 0.0
        for a in range(grid.dim):
            da = grid.partial(g, a, self.stencil_order)
            for b in range(a, grid.dim):
                d2 = grid.partial(da, b, self.stencil_order)
                d2_scale = max(d2_scale, float(np.max(np.abs(d2))))
        floor = 1e-11 * max(1.0, float(np.max(np.abs(g))))
        return 10.0 * grid.spacing**self.stencil_order * max(1.0, d2_scale) + floor


def christoffel(g: MetricField, stencil_order: int = 4) -> TensorField:
    """Levi-Civita connection coefficients Gamma^k_ij of the metric."""
    grid = g.grid
    d = grid.dim
    lead = grid.shape
    dg = _grad(grid, g.value.data, stencil_order)  # dg[..., a, i, j] = d_a g_ij
    # d_i g_jl + d_j g_il - d_l g_ij, slots (i, j, l)
    bracket = dg + _tperm(dg, d, (1, 0, 2)) - np.moveaxis(dg, d, d + 2)
    # gamma[k, i, j] = 1/2 g^{kl} bracket[i, j, l]
    tmp = _bmm(bracket.reshape(lead + (d * d, d)), g.inverse.data, lead, (d, d, d))
    gamma = 0.5 * np.ascontiguousarray(np.moveaxis(tmp, -1, d))
    return TensorField(grid, "ull", gamma)


def curvature(g: MetricField, stencil_order: int = 4) -> GeometryCache:
    """Full curvature package of a metric: Gamma, Rm (lower), Ric, scalar."""
    grid = g.grid
    d = grid.dim
    lead = grid.shape
    gamma = christoffel(g, stencil_order)
    dgamma = _grad(grid, gamma.data, stencil_order)  # [..., a, l, j, k] = d_a G^l_jk
    # quad[l, i, j, k] = G^l_ip G^p_jk (gamma is stored as [k, i, j] = G^k_ij)
    quad = _bmm(
        gamma.data.reshape(lead + (d * d, d)),
        gamma.data.reshape(lead + (d, d * d)),
        lead, (d, d, d, d),
    )
    riem_up = (
        _tperm(dgamma, d, (1, 0, 2, 3))  # d_i G^l_jk at [l, i, j, k]
        - _tperm(dgamma, d, (1, 2, 0, 3))  # d_j G^l_ik
        + quad
        - _tperm(quad, d, (0, 2, 1, 3))  # G^l_jp G^p_ik
    )
    # sign convention pinned by the conformal-torus oracle (see module docstring)
    # riem[i, j, k, l] = -g_{lm} riem_up[m, i, j, k]
    lowered = _bmm(g.value.data, riem_up.reshape(lead + (d, d * d * d)),
                   lead, (d, d, d, d))
    riem = -np.ascontiguousarray(np.moveaxis(lowered, d, d + 3))
    # ricci[i, j] = g^{kl} riem[i, k, j, l]
    rperm = np.ascontiguousarray(_tperm(riem, d, (0, 2, 1, 3)))
    ricci = _bmm(rperm.reshape(lead + (d * d, d * d)),
                 g.inverse.data.reshape(lead + (d * d, 1)), lead, (d, d))
    scalar = np.sum(g.inverse.data * ricci, axis=(-2, -1))
    return GeometryCache(
        metric=g,
        stencil_order=stencil_order,
        christoffel=gamma,
        riemann=TensorField(grid, "llll", riem),
        ricci=TensorField(grid, "ll", ricci),
        scalar=scalar,
    )


def covariant_derivative(t: TensorField, geom: GeometryCache) -> TensorField:
    """Covariant derivative; the new derivative slot is the first (lower) slot."""
    if t.rank >= 6:
        raise ValueError(f"rank {t.rank} tensor cannot be differentiated (cap 6)")
    grid = geom.grid
    d = grid.dim
    lead = grid.shape
    out = _grad(grid, t.data, geom.stencil_order)  # slots (z, i1..ir)
    if t.rank == 0:
        return TensorField(grid, "l", out)
    # correction term per slot s: contract gamma against slot s of t, batched
    # as matmul over the remaining (flattened) slots
    for slot, var in enumerate(t.variance):
        moved = np.ascontiguousarray(np.moveaxis(t.data, d + slot, -1))
        flat = moved.reshape(lead + (-1, d))  # [rest, p]
        mat = geom._gamma_lower_mat if var == "l" else geom._gamma_upper_mat
        term = np.matmul(flat, mat).reshape(moved.shape[:-1] + (d, d))
        # term layout: [rest..., z, slot-index]; restore (z, slots...) order
        term = np.moveaxis(np.moveaxis(term, -2, d), -1, d + 1 + slot)
        if var == "l":
            out -= term
        else:
            out += term
    return TensorField(grid, "l" + t.variance, out)


def second_covariant_derivative(t: TensorField, geom: GeometryCache) -> TensorField:
    return covariant_derivative(covariant_derivative(t, geom), geom)


def iterated_covariant_derivative(t: TensorField, geom: GeometryCache, m: int) -> TensorField:
    for _ in range(m):
        t = covariant_derivative(t, geom)
    return t


def rough_laplacian(t: TensorField, geom: GeometryCache) -> TensorField:
    """Trace of the second covariant derivative against the inverse metric."""
    dd = second_covariant_derivative(t, geom)
    data = _trace_leading_pair(dd.data, geom.metric.inverse.data, geom.grid, t.rank)
    return TensorField(geom.grid, t.variance, data)


def _trace_leading_pair(data: np.ndarray, ginv: np.ndarray, grid: Grid,
                        rest_rank: int) -> np.ndarray:
    """Contract the two leading component slots of ``data`` against g^{ab}."""
    d = grid.dim
    lead = grid.shape
    rest = data.shape[grid.dim + 2:]
    flat = data.reshape(lead + (d * d, -1))
    out = np.matmul(ginv.reshape(lead + (1, d * d)), flat)
    return out.reshape(lead + rest)


# ---------------------------------------------------------------------------
# exterior calculus


def exterior_derivative(omega: TensorField, stencil_order: int = 4,
                        check: bool = True) -> TensorField:
    """Metric-independent d: alternating sum of partial derivatives.

    (dw)_{a0..ap} = sum_s (-1)^s  d_{a_s} w_{a0.. a_s omitted ..ap},
    valid because w is (required to be) antisymmetric.
    """
    p = omega.rank
    grid = omega.grid
    if p >= grid.dim:
        raise ValueError(f"exterior derivative of a {p}-form needs p < dim={grid.dim}")
    if p > 0:
        if check:
            require_antisymmetric(omega, what=f"{p}-form")
        if set(omega.variance) != {"l"}:
            raise ValueError("forms must be fully lower")
    partial = _grad(grid, omega.data, stencil_order)  # axis grid.dim = d_a
    out = partial.copy()
    for s in range(1, p + 1):
        term = np.moveaxis(partial, grid.dim, grid.dim + s)
        if s % 2 == 1:
            out -= term
        else:
            out += term
    return TensorField(grid, "l" * (p + 1), out)


def codifferential(omega: TensorField, geom: GeometryCache,
                   check: bool = True) -> TensorField:
    """(d* w)_{i1..i_{p-1}} = -g^{jk} cov_j w_{k i1..i_{p-1}}."""
    p = omega.rank
    if p == 0:
        raise ValueError("codifferential of a 0-form is undefined")
    if check:
        require_antisymmetric(omega, what=f"{p}-form")
    grad = covariant_derivative(omega, geom)  # slots (j, k, i1..)
    data = -_trace_leading_pair(grad.data, geom.metric.inverse.data,
                                geom.grid, p - 1)
    return TensorField(geom.grid, "l" * (p - 1), data)


def hodge_laplacian(omega: TensorField, geom: GeometryCache,
                    check: bool = True) -> TensorField:
    """Form Laplacian box = -(d d* + d* d); negative semidefinite."""
    p = omega.rank
    grid = geom.grid
    order = geom.stencil_order
    if check and p > 0:
        require_antisymmetric(omega, what=f"{p}-form")
    terms = []
    if p >= 1:
        terms.append(
            exterior_derivative(codifferential(omega, geom, check=False),
                                order, check=False)
        )
    if p < grid.dim:
        terms.append(
            codifferential(exterior_derivative(omega, order, check=False),
                           geom, check=False)
        )
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return -1.0 * total


# ---------------------------------------------------------------------------
# quadratic form products and the Weitzenboeck correction


def h_tensor(h3: TensorField, g: MetricField, check: bool = True) -> TensorField:
    """Symmetric 2-tensor H_ikl H_jpq g^kp g^lq built from a 3-form."""
    if check:
        require_antisymmetric(h3, what="3-form")
    grid = g.grid
    d = grid.dim
    lead = grid.shape
    up = _contract_slot(h3.data, g.inverse.data, 2, 3)
    up = _contract_slot(up, g.inverse.data, 1, 3)  # H_i^{kl}
    data = _bmm(
        h3.data.reshape(lead + (d, d * d)),
        np.swapaxes(up.reshape(lead + (d, d * d)), -1, -2),
        lead, (d, d),
    )
    return TensorField(grid, "ll", data)


def f_tensor(f2: TensorField, g: MetricField, check: bool = True) -> TensorField:
    """Symmetric 2-tensor F_ik F_jl g^kl built from a 2-form."""
    if check:
        require_antisymmetric(f2, what="2-form")
    # F_ik F_j{}^k = F g^{-1} F^T pointwise
    data = np.matmul(np.matmul(f2.data, g.inverse.data),
                     np.swapaxes(f2.data, -1, -2))
    return TensorField(g.grid, "ll", data)


def form_norm_squared(omega: TensorField, g: MetricField) -> np.ndarray:
    """|w|^2 with all slots contracted by the inverse metric (no 1/p!)."""
    return inner(omega, omega, g)


def weitzenboeck_term(omega: TensorField, geom: GeometryCache) -> TensorField:
    """Curvature correction q(R)w with box w = rough_laplacian(w) - q(R)w.

    For a p-form: sum_s Ric-contraction on slot s minus sum over ordered
    slot pairs (s, t) of the Riemann contraction R^k_{i_s}{}^l_{i_t} w_{..k..l..}.
    """
    p = omega.rank
    g = geom.metric
    ric_up = np.einsum("...ab,...bj->...aj", g.inverse.data, geom.ricci.data)
    # R^k_i{}^l_j = g^ka g^lb R_{a i b j}
    riem_upmix = np.einsum(
        "...ka,...lb,...aibj->...kilj",
        g.inverse.data, g.inverse.data, geom.riemann.data, optimize=True,
    )
    letters = _L[:p]
    out = np.zeros_like(omega.data)
    for s in range(p):
        repl = letters.replace(letters[s], "z")
        out += np.einsum(f"...z{letters[s]},...{repl}->...{letters}",
                         ric_up, omega.data)
    for s in range(p):
        for t in range(p):
            if s == t:
                continue
            repl = letters.replace(letters[s], "y").replace(letters[t], "z")
            out -= np.einsum(
                f"...y{letters[s]}z{letters[t]},...{repl}->...{letters}",
                riem_upmix, omega.data,
            )
    return TensorField(geom.grid, omega.variance, out)
