"""Projected gradient descent with Armijo backtracking.

Iterates stay in the admissible space: each of ``u`` and ``z`` has zero mean
and zero mean antisymmetric gradient, which removes the infinitesimal rigid
motions the energy does not see.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import fem
from .errors import InvalidParameterError, LineSearchError
from .fem import DisplacementState

log = logging.getLogger(__name__)

__all__ = ["OptimizerConfig", "SolveReport", "rigid_fields", "project_admissible", "minimize"]


METRICS = ("GaussNewton", "H1", "L2Lumped")


@dataclass(frozen=True)
class OptimizerConfig:
    """Descent parameters.

    ``metric_refresh`` only affects the ``GaussNewton`` metric: it is rebuilt
    at the current ``z`` every that many iterations (0 keeps the initial one).
    """

    rho: float = 0.25
    g_tol: float = 1e-6
    max_iters: int = 20000
    max_backtracks: int = 40
    metric: str = "GaussNewton"
    cg_tol: float = 1e-10
    metric_refresh: int = 100

    def __post_init__(self):
        if not 0 < self.rho < 0.5:
            raise InvalidParameterError(f"rho must lie in (0, 1/2), got {self.rho}")
        if not self.g_tol > 0:
            raise InvalidParameterError(f"g_tol must be positive, got {self.g_tol}")
        if self.max_iters < 0 or self.max_backtracks < 1:
            raise InvalidParameterError("max_iters must be >= 0 and max_backtracks >= 1")
        if self.metric not in METRICS:
            raise InvalidParameterError(f"unknown metric {self.metric!r}; expected one of {METRICS}")
        if not self.cg_tol > 0:
            raise InvalidParameterError("cg_tol must be positive")
        if self.metric_refresh < 0:
            raise InvalidParameterError("metric_refresh must be >= 0")


@dataclass
class SolveReport:
    iterations: int = 0
    energies: List[float] = field(default_factory=list)
    step_sizes: List[float] = field(default_factory=list)
    step_norms: List[float] = field(default_factory=list)
    final_gradient_norm: float = np.inf
    final_curl_l2: float = np.nan
    converged: bool = False
    termination_reason: str = ""
    metric_rebuilds: List[int] = field(default_factory=list)


def rigid_fields(mesh):
    """Constant unit translations and the rotation ``(-x2, x1)`` as ``(3, n_nodes, 2)``."""
    x = mesh.nodes
    out = np.zeros((3, mesh.n_nodes, 2))
    out[0, :, 0] = 1.0
    out[1, :, 1] = 1.0
    out[2, :, 0] = -x[:, 1]
    out[2, :, 1] = x[:, 0]
    return out


def _constraint_rows(mesh):
    """``(3, n_nodes, 2)`` weights with ``rows[k] . w`` = (mean w1, mean w2, mean rotation)."""
    rows = getattr(mesh, "_constraint_rows", None)
    if rows is None:
        n = mesh.n_nodes
        rows = np.zeros((3, n, 2))
        rows[0, :, 0] = rows[1, :, 1] = mesh.node_weights / mesh.area
        # mean of (d1 w2 - d2 w1) / 2 is linear in the nodal values
        D1, D2 = mesh.grad_ops
        rows[2, :, 0] = -0.5 * (D2.T @ mesh.areas) / mesh.area
        rows[2, :, 1] = 0.5 * (D1.T @ mesh.areas) / mesh.area
        R = rigid_fields(mesh)
        A = np.einsum("knc,jnc->kj", rows, R)
        mesh._constraint_rows = rows
        mesh._rigid_system = (R, A)
    return rows


def _constraint_values(mesh, w):
    """Mean and mean antisymmetric gradient of a P1 vector field ``(n_nodes, 2)``."""
    return np.einsum("knc,nc->k", _constraint_rows(mesh), w)


def _remove_rigid(mesh, w):
    _constraint_rows(mesh)
    R, A = mesh._rigid_system
    coef = np.linalg.solve(A, _constraint_values(mesh, w))
    return w - np.tensordot(coef, R, axes=(0, 0))


def project_admissible(mesh, state: DisplacementState, gram=None) -> DisplacementState:
    """Subtract from ``u`` and ``z`` separately the rigid field carrying their mean and rotation.

    The result satisfies the constraints exactly up to rounding.  ``gram`` is
    accepted for interface symmetry and not used: the subtraction is the same
    in every metric.
    """
    return DisplacementState(_remove_rigid(mesh, state.u), _remove_rigid(mesh, state.z))


class _OrthogonalProjector:
    """Gram-orthogonal projection onto the admissible subspace.

    The six constraint functionals are ``L w``; with ``Y = G^{-1} L^T`` the
    projection is ``d - Y (L Y)^{-1} L d``.  Applied to the Riesz
    representative of the gradient this gives a direction ``p`` with
    ``dJ(p) = -(p, p)``.
    """

    def __init__(self, mesh, gram, cg_tol):
        n = mesh.n_nodes
        rows = _constraint_rows(mesh)
        L = np.zeros((6, n, 4))
        L[:3, :, :2] = rows
        L[3:, :, 2:] = rows
        Y = np.stack([fem.riesz_solve(gram, row, tol=cg_tol) for row in L])
        self.L = L.reshape(6, -1)
        self.Y = Y.reshape(6, -1)
        self.S = self.L @ self.Y.T

    def __call__(self, d):
        flat = d.ravel()
        lam = np.linalg.solve(self.S, self.L @ flat)
        return (flat - self.Y.T @ lam).reshape(d.shape)


def minimize(mesh, em, theta, mu_eps, init: DisplacementState, cfg: Optional[OptimizerConfig] = None,
             gram=None, callback=None):
    """Minimise the discrete energy by projected gradient descent.

    Each iteration solves for the Riesz representative ``d`` of ``-dJ``,
    projects it onto the admissible subspace and takes the largest step
    ``alpha = 2^-k`` meeting ``J(w + alpha p) <= J(w) - rho alpha |p|^2``.
    A ``gram`` passed in overrides ``cfg.metric`` and is never rebuilt.

    ``callback(it, w, J, gram, alpha, p)`` is called after every accepted step
    with the new iterate, the scalar product that measured ``p`` and the step
    ``w - w_old = alpha p``.

    Returns ``(state, report)``.  Raises :class:`LineSearchError` when no step
    is accepted within ``cfg.max_backtracks`` halvings.
    """
    cfg = cfg or OptimizerConfig()
    fixed = gram is not None
    state = project_admissible(mesh, init)
    w = state.to_array()
    J = fem.energy(mesh, em, theta, state, mu_eps)
    report = SolveReport(energies=[J])

    def build(it):
        report.metric_rebuilds.append(it)
        if cfg.metric == "GaussNewton":
            return fem.gauss_newton_gram(mesh, em, theta, mu_eps, w[:, 2:])
        return fem.gram(mesh, cfg.metric)

    if not fixed:
        gram = build(0)
    project = _OrthogonalProjector(mesh, gram, cfg.cg_tol)

    def finish(reason, converged):
        report.termination_reason = reason
        report.converged = converged
        report.final_curl_l2 = fem.curl_l2(mesh, w[:, 2:])
        return DisplacementState.from_array(w), report

    for it in range(cfg.max_iters + 1):
        if (not fixed and cfg.metric == "GaussNewton" and cfg.metric_refresh
                and it > 0 and it % cfg.metric_refresh == 0):
            gram = build(it)
            project = _OrthogonalProjector(mesh, gram, cfg.cg_tol)
        g = fem.gradient(mesh, em, theta, DisplacementState.from_array(w), mu_eps)
        d = -fem.riesz_solve(gram, g, tol=cfg.cg_tol)
        p = project_admissible(mesh, DisplacementState.from_array(project(d))).to_array()
        pnorm2 = gram.inner(p, p)
        report.final_gradient_norm = float(np.sqrt(max(pnorm2, 0.0)))
        if report.final_gradient_norm <= cfg.g_tol:
            return finish("gradient norm below g_tol", True)
        if it == cfg.max_iters:
            return finish("max_iters reached", False)

        alpha = 1.0
        for _ in range(cfg.max_backtracks):
            trial = w + alpha * p
            Jt = fem.energy(mesh, em, theta, DisplacementState.from_array(trial), mu_eps)
            if Jt <= J - cfg.rho * alpha * pnorm2:
                break
            alpha *= 0.5
        else:
            report.termination_reason = "line search stalled"
            report.final_curl_l2 = fem.curl_l2(mesh, w[:, 2:])
            raise LineSearchError(
                f"no Armijo step after {cfg.max_backtracks} halvings at iteration {it} "
                f"(|p| = {report.final_gradient_norm:.3e})",
                report=report,
                state=DisplacementState.from_array(w),
            )
        w, J = trial, Jt
        report.iterations += 1
        report.energies.append(J)
        report.step_sizes.append(alpha)
        report.step_norms.append(pnorm2)
        if callback is not None:
            callback(it, w, J, gram, alpha, p)
        if it % 1000 == 0:
            log.debug("iter %d  J=%.12g  |p|=%.3e  alpha=%g", it, J, np.sqrt(pnorm2), alpha)
