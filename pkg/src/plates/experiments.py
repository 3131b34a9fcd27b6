"""Initial conditions, symmetry diagnostics, theta sweeps and the small-theta reference."""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import fem
from .errors import InvalidParameterError, MeshFormatError, PlatesError
from .fem import DisplacementState
from .moduli import vec_to_sym
from .solver import OptimizerConfig, minimize, project_admissible

log = logging.getLogger(__name__)

__all__ = [
    "InitialCondition",
    "SweepRecord",
    "SmallThetaReference",
    "initial_state",
    "perturb",
    "mean_bending_strain",
    "symmetry_ratio",
    "strain_eigs",
    "theta_sweep",
    "detect_transition",
    "small_theta_reference",
    "save_state",
    "load_state",
]

STATE_HEADER = "plates-state v1"
INIT_KINDS = ("flat", "paraboloid", "file")


@dataclass(frozen=True)
class InitialCondition:
    """Starting configuration of a run.

    ``flat``: everything zero.  ``paraboloid``: ``z = (a x1, b x2)``, the
    gradient of ``(a x1^2 + b x2^2) / 2``.  ``file``: a saved state.  When
    ``amplitude > 0`` every dof receives uniform noise in ``[-amplitude, amplitude]``
    drawn from a generator seeded with ``seed``.
    """

    kind: str = "flat"
    a: float = 1.3
    b: float = 0.7
    path: Optional[str] = None
    seed: int = 0
    amplitude: float = 0.0

    def __post_init__(self):
        if self.kind not in INIT_KINDS:
            raise InvalidParameterError(f"unknown initial condition {self.kind!r}; expected one of {INIT_KINDS}")
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise InvalidParameterError("paraboloid curvatures must be finite")
        if not (np.isfinite(self.amplitude) and self.amplitude >= 0):
            raise InvalidParameterError(f"perturbation amplitude must be >= 0, got {self.amplitude}")
        if self.kind == "file" and not self.path:
            raise InvalidParameterError("a file initial condition needs a path")


def perturb(state: DisplacementState, ic: InitialCondition, index=0) -> DisplacementState:
    """Add the seeded noise of ``ic``; ``index`` selects an independent stream per sweep step."""
    if ic.amplitude == 0:
        return state
    rng = np.random.default_rng([ic.seed, index])
    w = state.to_array()
    return DisplacementState.from_array(w + rng.uniform(-ic.amplitude, ic.amplitude, w.shape))


def initial_state(mesh, ic: InitialCondition) -> DisplacementState:
    if ic.kind == "flat":
        state = DisplacementState.zeros(mesh.n_nodes)
    elif ic.kind == "paraboloid":
        x = mesh.nodes
        state = DisplacementState(np.zeros_like(x), np.column_stack([ic.a * x[:, 0], ic.b * x[:, 1]]))
    else:
        state = load_state(ic.path)
        if state.n_nodes != mesh.n_nodes:
            raise MeshFormatError(
                f"state file {ic.path} has {state.n_nodes} nodes, the mesh has {mesh.n_nodes}"
            )
    return perturb(state, ic)


def mean_bending_strain(mesh, z):
    """Domain average of ``sym grad z`` as a symmetric 2x2 array."""
    Gz = fem.element_gradients(mesh, np.asarray(z, dtype=float))
    G = np.tensordot(mesh.areas, Gz, axes=(0, 0)) / mesh.area
    return 0.5 * (G + G.T)


def strain_eigs(strain):
    """Eigenvalues ordered ``(largest, smallest)`` by absolute value."""
    S = np.asarray(strain, dtype=float)
    if S.shape == (3,):
        S = vec_to_sym(S)
    ev = np.linalg.eigvalsh(S)
    ev = ev[np.argsort(-np.abs(ev), kind="stable")]
    return float(ev[0]), float(ev[1])


def symmetry_ratio(strain):
    """``|smaller eigenvalue| / |larger eigenvalue|``; 1 for a (numerically) zero tensor."""
    big, small = strain_eigs(strain)
    if abs(big) < 1e-12:
        return 1.0
    return abs(small) / abs(big)


@dataclass
class SweepRecord:
    theta: float
    energy: float
    mean_strain: np.ndarray  # symmetric 2x2
    strain_eigs: tuple
    symmetry_ratio: float
    curl_l2: float
    iterations: int
    converged: bool
    grad_norm: float = np.nan
    wall_time: float = 0.0
    message: str = ""
    failed: bool = False  # the solver raised rather than stopping normally
    report: object = field(default=None, repr=False, compare=False)
    state: Optional[DisplacementState] = field(default=None, repr=False, compare=False)


def _record(mesh, em, theta, mu_eps, state, report, wall, message=""):
    S = mean_bending_strain(mesh, state.z)
    return SweepRecord(
        theta=float(theta),
        energy=fem.energy(mesh, em, theta, state, mu_eps),
        mean_strain=S,
        strain_eigs=strain_eigs(S),
        symmetry_ratio=symmetry_ratio(S),
        curl_l2=fem.curl_l2(mesh, state.z),
        iterations=report.iterations if report is not None else 0,
        converged=bool(report is not None and report.converged),
        grad_norm=report.final_gradient_norm if report is not None else np.nan,
        wall_time=wall,
        message=message or (report.termination_reason if report is not None else ""),
        report=report,
        state=state,
    )


def _failed_record(theta, wall, message):
    nan = float("nan")
    return SweepRecord(
        theta=float(theta), energy=nan, mean_strain=np.full((2, 2), nan), strain_eigs=(nan, nan),
        symmetry_ratio=nan, curl_l2=nan, iterations=0, converged=False, wall_time=wall, message=message,
    )


def _solve_one(mesh, em, theta, mu_eps, cfg, start, callback=None):
    t0 = time.perf_counter()
    cb = None if callback is None else (lambda *a: callback(theta, *a))
    try:
        state, report = minimize(mesh, em, theta, mu_eps, start, cfg, callback=cb)
        return _record(mesh, em, theta, mu_eps, state, report, time.perf_counter() - t0)
    except PlatesError as exc:
        wall = time.perf_counter() - t0
        log.warning("theta=%g failed: %s", theta, exc)
        state, report = getattr(exc, "state", None), getattr(exc, "report", None)
        if state is not None:
            rec = _record(mesh, em, theta, mu_eps, state, report, wall, message=str(exc))
        else:
            rec = _failed_record(theta, wall, str(exc))
        rec.failed = True
        return rec


def theta_sweep(mesh, em, thetas, mu_eps, cfg: Optional[OptimizerConfig] = None,
                ic: Optional[InitialCondition] = None, warm_start=True, workers=1,
                callback=None) -> List[SweepRecord]:
    """Minimise for each theta in ascending order.

    With ``warm_start`` each run starts from the previous minimiser, with the
    initial condition's perturbation applied again (fresh stream per step) so
    a symmetric branch that has become unstable can be left.  Otherwise each
    run starts from ``ic``; these cold runs use up to ``workers`` threads.
    Solver failures are stored in the record with ``converged=False``.
    ``callback(theta, it, w, J, gram, alpha, p)`` is forwarded to every minimisation.
    """
    thetas = [float(t) for t in thetas]
    if any(t < 0 or not np.isfinite(t) for t in thetas):
        raise InvalidParameterError("thetas must be finite and non-negative")
    if any(b < a for a, b in zip(thetas, thetas[1:])):
        raise InvalidParameterError("thetas must be ascending")
    cfg = cfg or OptimizerConfig()
    ic = ic or InitialCondition()
    start = initial_state(mesh, ic)
    if not warm_start:
        if workers > 1 and len(thetas) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                return list(pool.map(lambda t: _solve_one(mesh, em, t, mu_eps, cfg, start, callback), thetas))
        return [_solve_one(mesh, em, t, mu_eps, cfg, start, callback) for t in thetas]
    records = []
    for k, theta in enumerate(thetas):
        rec = _solve_one(mesh, em, theta, mu_eps, cfg, start, callback)
        log.info("theta=%g  iters=%d  ratio=%.4f  converged=%s", theta, rec.iterations,
                 rec.symmetry_ratio, rec.converged)
        records.append(rec)
        if rec.state is not None:
            start = perturb(rec.state, ic, k + 1)
    return records


def detect_transition(records, threshold=0.5):
    """Theta where the symmetry ratio first drops below ``threshold``.

    Linear interpolation inside the first interval whose left end is at or
    above the threshold and whose right end is below it.  ``records`` may be
    :class:`SweepRecord` objects or ``(theta, ratio)`` pairs.  Returns
    ``None`` if no such interval exists.
    """
    pts = [(r.theta, r.symmetry_ratio) if isinstance(r, SweepRecord) else tuple(r) for r in records]
    pts = [(t, q) for t, q in pts if np.isfinite(q)]
    for (t0, q0), (t1, q1) in zip(pts, pts[1:]):
        if q0 >= threshold > q1:
            return t0 + (q0 - threshold) / (q0 - q1) * (t1 - t0)
    return None


@dataclass
class SmallThetaReference:
    u0: np.ndarray
    v0: np.ndarray
    z0: np.ndarray
    c0: float
    membrane_energy: float

    def state(self):
        return DisplacementState(self.u0, self.z0)


def small_theta_reference(mesh, em, tol=1e-12) -> SmallThetaReference:
    """Spherical profile and its optimal in-plane displacement.

    ``v0 = |x|^2 / 2 - c0`` with ``c0`` the domain mean of ``|x|^2 / 2``,
    ``z0 = x``, and ``u0`` minimises the discrete membrane energy at ``z0``
    over the admissible fields.  ``membrane_energy`` is that minimum, so the
    full energy of ``(u0, z0)`` at small theta is ``theta * membrane_energy``
    plus the bending part.
    """
    x = mesh.nodes
    c0 = 0.5 * np.trace(mesh.second_moments()) / mesh.area
    v0 = 0.5 * np.sum(x**2, axis=1) - c0
    z0 = x.copy()
    zeros = np.zeros_like(x)

    def grad_u(u):
        return fem.gradient(mesh, em, 1.0, DisplacementState(u, z0), 0.0)[:, :2]

    g0 = grad_u(zeros)
    D1, D2 = mesh.grad_ops
    # diagonal of the membrane stiffness, for Jacobi preconditioning
    a = mesh.areas
    d1 = D1.multiply(D1).T @ a
    d2 = D2.multiply(D2).T @ a
    M0 = em.M0
    diag = np.column_stack([M0[0, 0] * d1 + M0[2, 2] * d2 / 4, M0[1, 1] * d2 + M0[2, 2] * d1 / 4])
    diag = np.where(diag > 0, diag, 1.0).ravel()
    # the operator couples u1 and u2, so CG runs on the flattened vector
    u0 = fem.conjugate_gradient(lambda v: (grad_u(v.reshape(-1, 2)) - g0).reshape(v.shape),
                                -g0.ravel(), lambda r: r / diag[:, None], tol=tol)
    u0 = u0.reshape(-1, 2)
    u0 = project_admissible(mesh, DisplacementState(u0, zeros)).u
    e = fem.energy_terms(mesh, em, 1.0, DisplacementState(u0, z0), 0.0)[0]
    bend = fem.energy_terms(mesh, em, 0.0, DisplacementState(u0, z0), 0.0)[0]
    return SmallThetaReference(u0=u0, v0=v0, z0=z0, c0=float(c0), membrane_energy=max(e - bend, 0.0))


def save_state(state: DisplacementState, path):
    lines = [STATE_HEADER, str(state.n_nodes)]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in state.to_array()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_state(path) -> DisplacementState:
    text = Path(path).read_text().split("\n")
    if text and text[-1] == "":
        text = text[:-1]
    if not text or text[0].strip() != STATE_HEADER:
        raise MeshFormatError(f"expected header {STATE_HEADER!r}", 1)
    try:
        n = int(text[1])
    except (IndexError, ValueError):
        raise MeshFormatError("expected the node count", 2) from None
    if n < 1 or len(text) != 2 + n:
        raise MeshFormatError(f"expected {n} node rows after the count, found {len(text) - 2}", len(text))
    w = np.empty((n, 4))
    for i in range(n):
        parts = text[2 + i].split()
        if len(parts) != 4:
            raise MeshFormatError("expected four values u1 u2 z1 z2", 3 + i)
        try:
            w[i] = [float(s) for s in parts]
        except ValueError:
            raise MeshFormatError("malformed number", 3 + i) from None
        if not np.isfinite(w[i]).all():
            raise MeshFormatError("non-finite value", 3 + i)
    return DisplacementState.from_array(w)
