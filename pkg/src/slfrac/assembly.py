"""Sparse P1 assembly and solvers for the two Picard-lagged subproblems.

The displacement step freezes the nonlinear diffusion coefficient at the
previous iterate; the phase-field step freezes the denominator of the
reaction coefficient at the previous alternating iterate, so each step
is one symmetric positive definite solve.  Both linearizations minimize
a convex tangent majorizer of the energy, which is what makes the outer
alternation monotone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .model import (
    TRI_LAMBDA,
    TRI_WEIGHTS,
    NodalField,
    check_bound,
    field as make_field,
)


class AssemblyError(ValueError):
    pass


class SingularSystemError(RuntimeError):
    """Pure-Neumann phase-field system with vanishing reaction."""


class SolveError(RuntimeError):
    """Linear solver failed to reach the requested residual."""


class PicardError(RuntimeError):
    """Fixed-point iteration exhausted its budget."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


class ConstraintSet:
    """Vertex -> prescribed value map with conflict detection."""

    def __init__(self, pairs=None):
        self._map = {}
        for vertex, value in (pairs or {}).items() if isinstance(pairs, dict) else (pairs or []):
            self.add(vertex, value)

    def add(self, vertex, value):
        vertex = int(vertex)
        value = float(value)
        old = self._map.get(vertex)
        if old is not None and old != value:
            raise AssemblyError(f"vertex {vertex} constrained to both {old} and {value}")
        self._map[vertex] = value

    def __len__(self):
        return len(self._map)

    def __contains__(self, vertex):
        return int(vertex) in self._map

    def arrays(self):
        if not self._map:
            return np.empty(0, dtype=np.int64), np.empty(0)
        idx = np.array(sorted(self._map), dtype=np.int64)
        return idx, np.array([self._map[int(i)] for i in idx])


@dataclass
class SparseSystem:
    """Symmetric CSR system with constraints already eliminated."""

    matrix: sparse.csr_matrix
    rhs: np.ndarray
    constrained_idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    constrained_vals: np.ndarray = field(default_factory=lambda: np.empty(0))


def _scatter(mesh, local):
    """Sum (ne, 3, 3) local matrices into a global CSR matrix."""
    ne = mesh.n_elements
    rows = np.repeat(mesh.elements, 3, axis=1).reshape(ne, 3, 3)
    cols = np.tile(mesh.elements, (1, 3)).reshape(ne, 3, 3)
    mat = sparse.coo_matrix(
        (local.ravel(), (rows.ravel(), cols.ravel())),
        shape=(mesh.n_vertices, mesh.n_vertices),
    )
    return mat.tocsr()


def _eliminate(matrix, rhs, cons):
    idx, vals = cons.arrays()
    if len(idx) == 0:
        return SparseSystem(matrix.tocsr(), rhs, idx, vals)
    n = matrix.shape[0]
    x_c = np.zeros(n)
    x_c[idx] = vals
    rhs = rhs - matrix @ x_c
    rhs[idx] = vals
    keep = np.ones(n)
    keep[idx] = 0.0
    proj = sparse.diags(keep)
    pinned = sparse.diags(1.0 - keep)
    mat = (proj @ matrix @ proj + pinned).tocsr()
    mat.eliminate_zeros()
    return SparseSystem(mat, rhs, idx, vals)


def _frozen_coefficient(mesh, v_vals, u_lag_vals, p, lumped=True):
    """Diffusion coefficient at the quadrature points, frozen at the lag pair."""
    if lumped:
        vsq_q = (v_vals**2)[mesh.elements] @ TRI_LAMBDA.T
    else:
        vsq_q = (v_vals[mesh.elements] @ TRI_LAMBDA.T) ** 2
    w_q = (1.0 - p.kappa) * vsq_q + p.kappa
    gu = np.einsum("eik,ei->ek", mesh.grads, u_lag_vals[mesh.elements])
    s = np.sum(gu**2, axis=1)
    t_sq = w_q * s[:, None]
    denom = (1.0 + p.beta**p.alpha * t_sq**p.alpha) ** (1.0 / p.alpha + 1.0)
    return w_q / denom


def assemble_u_system(mesh, v, u_lag, bc, p, lumped=True):
    """Stiffness system of the displacement step with frozen coefficient.

    Dirichlet rows and columns are eliminated symmetrically (identity
    row with the prescribed value on the right-hand side), preserving
    positive definiteness for conjugate gradients.
    """
    check_bound(v, mesh)
    check_bound(u_lag, mesh)
    a_q = _frozen_coefficient(mesh, v.values, u_lag.values, p, lumped)
    coef = mesh.areas * (a_q @ TRI_WEIGHTS)
    gradgram = np.einsum("eik,ejk->eij", mesh.grads, mesh.grads)
    matrix = _scatter(mesh, gradgram * coef[:, None, None])
    rhs = np.zeros(mesh.n_vertices)
    return _eliminate(matrix, rhs, bc)


def assemble_v_system(mesh, u, v_lag, cons, p):
    """Phase-field step: diffusion + lumped reaction against a constant source.

    The nonlinear denominator is frozen at ``(u, v_lag)``.  Mass lumping
    makes the reaction block diagonal, so positivity of the reaction
    coefficient is inherited entrywise.  Raises
    :class:`SingularSystemError` when the reaction vanishes identically
    and no constraints pin the kernel of the Neumann Laplacian.
    """
    check_bound(u, mesh)
    check_bound(v_lag, mesh)
    gu = np.einsum("eik,ei->ek", mesh.grads, u.values[mesh.elements])
    s = np.sum(gu**2, axis=1)
    if len(cons) == 0 and float(s.max(initial=0.0)) == 0.0:
        raise SingularSystemError(
            "phase-field system is pure Neumann with zero reaction")
    vsq_q = (v_lag.values**2)[mesh.elements] @ TRI_LAMBDA.T
    w_q = (1.0 - p.kappa) * vsq_q + p.kappa
    t_sq = w_q * s[:, None]
    denom = (1.0 + p.beta**p.alpha * t_sq**p.alpha) ** (1.0 / p.alpha + 1.0)
    c_q = (1.0 - p.kappa) * s[:, None] / denom

    gradgram = np.einsum("eik,ejk->eij", mesh.grads, mesh.grads)
    local = gradgram * (2.0 * p.rho * mesh.areas)[:, None, None]
    # reaction: int_tau c(x) lambda_i dx on the diagonal
    diag = mesh.areas[:, None] * np.einsum("eq,q,qi->ei", c_q, TRI_WEIGHTS, TRI_LAMBDA)
    ii = np.arange(3)
    local[:, ii, ii] += diag
    matrix = _scatter(mesh, local)

    rhs = np.zeros(mesh.n_vertices)
    np.add.at(rhs, mesh.elements.ravel(),
              np.repeat(p.delta * mesh.areas / 3.0, 3))
    return _eliminate(matrix, rhs, cons)


def solve_sparse(system, tol_lin=1e-10, max_iter=None, x0=None):
    """Jacobi-preconditioned conjugate gradients.

    Stops when the residual drops below ``tol_lin * ||rhs||``; raises
    :class:`SolveError` on breakdown or iteration exhaustion.
    """
    A = system.matrix
    b = system.rhs
    n = len(b)
    if max_iter is None:
        max_iter = max(200, 10 * n)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros(n)
    x = np.array(x0, dtype=np.float64) if x0 is not None else np.zeros(n)
    if len(system.constrained_idx):
        x[system.constrained_idx] = system.constrained_vals
    r = b - A @ x
    diag = A.diagonal()
    if np.any(diag <= 0):
        raise SolveError("matrix has non-positive diagonal entries")
    minv = 1.0 / diag
    z = minv * r
    d = z.copy()
    rz = float(r @ z)
    target = tol_lin * bnorm
    for _ in range(max_iter):
        if np.linalg.norm(r) <= target:
            break
        Ad = A @ d
        dAd = float(d @ Ad)
        if dAd <= 0.0:
            raise SolveError("conjugate gradient breakdown (matrix not SPD?)")
        step = rz / dAd
        x += step * d
        r -= step * Ad
        z = minv * r
        rz_new = float(r @ z)
        d = z + (rz_new / rz) * d
        rz = rz_new
    else:
        if np.linalg.norm(r) > target:
            raise SolveError(
                f"CG stalled at relative residual {np.linalg.norm(r) / bnorm:.3e}")
    if len(system.constrained_idx):
        x[system.constrained_idx] = system.constrained_vals
    return x


def solve_u_picard(mesh, v, bc, p, tol_picard=1e-8, max_iter=200,
                   tol_lin=1e-10, u0=None, omega0=1.0):
    """Fixed-point iteration on the frozen-coefficient displacement solve.

    Each sweep solves the linear system assembled at the previous
    iterate; convergence is declared when consecutive iterates differ by
    at most ``tol_picard`` in the max norm.  The update is damped
    (``omega`` halved) whenever the increment grows.  With ``beta = 0``
    the problem is linear and a single solve is returned.

    Returns ``(u, iterations, residual_history)``.
    """
    check_bound(v, mesh)
    idx, vals = bc.arrays()
    if u0 is not None:
        check_bound(u0, mesh)
        current = np.array(u0.values)
    else:
        current = np.zeros(mesh.n_vertices)
    if len(idx):
        current[idx] = vals

    history = []
    omega = omega0
    if p.beta == 0.0:
        system = assemble_u_system(mesh, v, make_field(mesh, current), bc, p)
        new = solve_sparse(system, tol_lin, x0=current)
        history.append(float(np.max(np.abs(new - current))) if len(new) else 0.0)
        return make_field(mesh, new), 1, history

    for it in range(1, max_iter + 1):
        system = assemble_u_system(mesh, v, make_field(mesh, current), bc, p)
        new = solve_sparse(system, tol_lin, x0=current)
        diff = float(np.max(np.abs(new - current)))
        history.append(diff)
        if diff <= tol_picard:
            return make_field(mesh, new), it, history
        if len(history) > 1 and diff > history[-2]:
            omega = max(omega / 2.0, 1.0 / 64.0)
        current = omega * new + (1.0 - omega) * current
    raise PicardError(
        f"Picard iteration did not converge in {max_iter} sweeps "
        f"(last increment {history[-1]:.3e})", history)


def clamp_v(v, xi_v=1e-4):
    """Project a phase field into the box: values <= xi_v drop to 0,
    values >= 1 cap at 1."""
    vals = np.array(v.values)
    vals[vals <= xi_v] = 0.0
    vals[vals >= 1.0] = 1.0
    return NodalField(vals, v.mesh_id)
