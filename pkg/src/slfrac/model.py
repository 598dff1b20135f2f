"""Energy functional of the strain-limiting phase-field model.

The total energy of a displacement/damage pair ``(u, v)`` is

    J(u, v) = int  |T|^2 / (2 (1 + beta^alpha |T|^(2 alpha))^(1/alpha))
                 + rho |grad v|^2 + delta (1 - v)  dx,

with ``T = sqrt((1-kappa) v^2 + kappa) grad u``.  The bulk density is
bounded (stress saturates for large strain), the surface part is the
linear-in-(1-v) regularization with normalization ``c_w = 8/3``.

Discrete fields are P1 on a :class:`~slfrac.mesh.Mesh`; the mass-lumped
variant replaces products of nodal fields inside the integrals by their
vertex interpolant.  All operations here are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Degree-2 rule on the triangle: 3 interior points, weights sum to 1.
TRI_LAMBDA = np.array([
    [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
    [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
    [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0],
])
TRI_WEIGHTS = np.full(3, 1.0 / 3.0)

# 3-point Gauss-Legendre on [0, 1] (degree 5) for edge integrals.
_g = 0.5 * np.sqrt(3.0 / 5.0)
EDGE_POINTS = np.array([0.5 - _g, 0.5, 0.5 + _g])
EDGE_WEIGHTS = np.array([5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0])


class ModelError(ValueError):
    """Parameter or field-binding violation."""


@dataclass(frozen=True)
class ModelParams:
    """Fixed constants of the energy functional.

    ``rho = lambda_c * epsilon / c_w`` and ``delta = lambda_c / (c_w *
    epsilon)`` are derived on construction.  ``beta = 0`` reduces the
    bulk term to linear elasticity with coefficient ``(1-kappa) v^2 +
    kappa``; ``kappa = 0`` is tolerated for closed-form tests.
    """

    alpha: float = 1.0
    beta: float = 1.0
    kappa: float = 1e-10
    epsilon: float = 1.0
    lambda_c: float = 2.7
    c_w: float = 8.0 / 3.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ModelError("alpha must be positive")
        if self.beta < 0:
            raise ModelError("beta must be nonnegative")
        if not (0.0 <= self.kappa < 1.0):
            raise ModelError("kappa must lie in [0, 1)")
        if self.epsilon <= 0 or self.lambda_c <= 0 or self.c_w <= 0:
            raise ModelError("epsilon, lambda_c and c_w must be positive")

    @property
    def rho(self):
        return self.lambda_c * self.epsilon / self.c_w

    @property
    def delta(self):
        return self.lambda_c / (self.c_w * self.epsilon)


@dataclass(frozen=True)
class NodalField:
    """P1 coefficient vector bound to one mesh instance."""

    values: np.ndarray
    mesh_id: int

    def __post_init__(self):
        vals = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class EnergySplit:
    bulk: float
    surface: float

    @property
    def total(self):
        return self.bulk + self.surface


def field(mesh, values):
    """Bind a value vector (or scalar fill) to a mesh."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        values = np.full(mesh.n_vertices, float(values))
    if len(values) != mesh.n_vertices:
        raise ModelError("field length does not match vertex count")
    return NodalField(values, mesh.uid)


def check_bound(f, mesh):
    if f.mesh_id != mesh.uid or len(f.values) != mesh.n_vertices:
        raise ModelError("field is not bound to this mesh")


def stress_coefficient(v_val, grad_u, p):
    """Diffusion coefficient of the displacement operator.

    ``a = ((1-kappa) v^2 + kappa) / (1 + beta^alpha |T|^(2 alpha))^(1/alpha + 1)``
    with ``|T|^2 = ((1-kappa) v^2 + kappa) |grad u|^2``.  Always in (0, 1]
    for v in [0, 1].  Vectorized over leading axes.
    """
    v_val = np.asarray(v_val, dtype=np.float64)
    grad_u = np.asarray(grad_u, dtype=np.float64)
    w = (1.0 - p.kappa) * v_val**2 + p.kappa
    s = np.sum(grad_u**2, axis=-1)
    t_sq = w * s
    denom = (1.0 + p.beta**p.alpha * t_sq**p.alpha) ** (1.0 / p.alpha + 1.0)
    out = w / denom
    return out if out.ndim else float(out)


def _element_gradients(mesh, values):
    return np.einsum("eik,ei->ek", mesh.grads, values[mesh.elements])


def _quad_values(mesh, values):
    # field values at the 3 interior quadrature points, shape (ne, 3)
    return values[mesh.elements] @ TRI_LAMBDA.T


def _w_at_quad(mesh, v_values, p, lumped):
    if lumped:
        vsq_q = _quad_values(mesh, v_values**2)
    else:
        vsq_q = _quad_values(mesh, v_values) ** 2
    return (1.0 - p.kappa) * vsq_q + p.kappa


def total_energy(u, v, mesh, p, lumped=True):
    """Split of J(u, v) into bulk and surface parts.

    With ``lumped`` the squared phase field inside ``T`` is replaced by
    the vertex interpolant of ``v^2``; the linear ``(1 - v)`` term is P1
    already, so lumping leaves the surface part unchanged.
    """
    check_bound(u, mesh)
    check_bound(v, mesh)
    gu = _element_gradients(mesh, u.values)
    gv = _element_gradients(mesh, v.values)
    s = np.sum(gu**2, axis=1)

    w_q = _w_at_quad(mesh, v.values, p, lumped)
    t_sq = w_q * s[:, None]
    denom = (1.0 + p.beta**p.alpha * t_sq**p.alpha) ** (1.0 / p.alpha)
    bulk_q = t_sq / (2.0 * denom)
    bulk = float(np.sum(mesh.areas * (bulk_q @ TRI_WEIGHTS)))

    one_minus_v_q = _quad_values(mesh, 1.0 - v.values)
    surf_q = p.delta * one_minus_v_q @ TRI_WEIGHTS
    surface = float(np.sum(mesh.areas * (p.rho * np.sum(gv**2, axis=1) + surf_q)))
    return EnergySplit(bulk=bulk, surface=surface)


def dir_derivative_u(v, u, psi, mesh, p, lumped=True):
    """Derivative of J in the displacement direction ``psi``.

    ``psi`` must vanish on Dirichlet vertices.  Returns
    ``int a(x) grad u . grad psi dx`` with the coefficient of
    :func:`stress_coefficient` (lumped variant uses the interpolant of
    ``v^2``).
    """
    check_bound(u, mesh)
    check_bound(v, mesh)
    check_bound(psi, mesh)
    bad = mesh.dirichlet_vertices()
    if len(bad) and np.max(np.abs(psi.values[bad])) > 1e-12:
        raise ModelError("test direction does not vanish on Dirichlet vertices")
    return _dir_derivative_u_raw(v.values, u.values, psi.values, mesh, p, lumped)


def _dir_derivative_u_raw(v_vals, u_vals, psi_vals, mesh, p, lumped):
    gu = _element_gradients(mesh, u_vals)
    gpsi = _element_gradients(mesh, psi_vals)
    s = np.sum(gu**2, axis=1)
    w_q = _w_at_quad(mesh, v_vals, p, lumped)
    t_sq = w_q * s[:, None]
    denom = (1.0 + p.beta**p.alpha * t_sq**p.alpha) ** (1.0 / p.alpha + 1.0)
    coef = (w_q / denom) @ TRI_WEIGHTS
    return float(np.sum(mesh.areas * coef * np.sum(gu * gpsi, axis=1)))


def dir_derivative_v(u, v, phi, mesh, p, lumped=True, constrained=None):
    """Derivative of J in the phase-field direction ``phi``.

    ``phi`` must vanish on the constrained (crack) vertices when a
    constrained set is given.  The lumped variant interpolates ``phi``
    and ``v * phi`` at the vertices; for P1 fields only the product term
    differs from the plain form.
    """
    check_bound(u, mesh)
    check_bound(v, mesh)
    check_bound(phi, mesh)
    if constrained is not None and len(constrained):
        idx = np.asarray(sorted(constrained), dtype=np.int64)
        if np.max(np.abs(phi.values[idx])) > 1e-12:
            raise ModelError("test direction does not vanish on the crack set")
    return _dir_derivative_v_raw(u.values, v.values, phi.values, mesh, p, lumped)


def _dir_derivative_v_raw(u_vals, v_vals, phi_vals, mesh, p, lumped):
    gu = _element_gradients(mesh, u_vals)
    gv = _element_gradients(mesh, v_vals)
    gphi = _element_gradients(mesh, phi_vals)
    s = np.sum(gu**2, axis=1)
    w_q = _w_at_quad(mesh, v_vals, p, lumped)
    t_sq = w_q * s[:, None]
    denom = (1.0 + p.beta**p.alpha * t_sq**p.alpha) ** (1.0 / p.alpha + 1.0)
    if lumped:
        vphi_q = _quad_values(mesh, v_vals * phi_vals)
    else:
        vphi_q = _quad_values(mesh, v_vals) * _quad_values(mesh, phi_vals)
    phi_q = _quad_values(mesh, phi_vals)  # P1: interpolation is exact
    reaction = ((1.0 - p.kappa) * s[:, None] / denom * vphi_q) @ TRI_WEIGHTS
    source = p.delta * phi_q @ TRI_WEIGHTS
    grad_term = 2.0 * p.rho * np.sum(gv * gphi, axis=1)
    return float(np.sum(mesh.areas * (grad_term - source + reaction)))


def nodal_interpolate(g, *fields):
    """Vertexwise application of ``g`` to one or more fields.

    Returns the P1 coefficient field of ``g(f1, f2, ...)``.  For convex
    ``g`` the interpolant dominates ``g`` of the interpolants pointwise
    on every element.
    """
    if not fields:
        raise ModelError("at least one field required")
    mesh_id = fields[0].mesh_id
    for f in fields:
        if f.mesh_id != mesh_id:
            raise ModelError("fields bound to different meshes")
    values = g(*(f.values for f in fields))
    return NodalField(np.asarray(values, dtype=np.float64), mesh_id)


def evaluate_p1(mesh, values, points):
    """Evaluate a P1 field at arbitrary points (brute-force element lookup)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    out = np.empty(len(points))
    p0 = mesh.vertices[mesh.elements[:, 0]]
    for i, pt in enumerate(points):
        d = pt - p0
        lam1 = np.einsum("ek,ek->e", mesh.grads[:, 1], d)
        lam2 = np.einsum("ek,ek->e", mesh.grads[:, 2], d)
        lam0 = 1.0 - lam1 - lam2
        ok = (lam0 >= -1e-12) & (lam1 >= -1e-12) & (lam2 >= -1e-12)
        e = int(np.flatnonzero(ok)[0])
        lam = np.array([lam0[e], lam1[e], lam2[e]])
        out[i] = lam @ values[mesh.elements[e]]
    return out if len(out) > 1 else float(out[0])
