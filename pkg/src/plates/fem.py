"""P1 discretisation of the penalised von Karman energy.

A state holds two P1 vector fields on the mesh nodes: the in-plane
displacement ``u`` and a gradient surrogate ``z`` standing in for ``grad v``.
State-shaped vectors are ``(n_nodes, 4)`` arrays with columns
``u1, u2, z1, z2``.

The membrane part of the energy is integrated after element-wise nodal
interpolation: on each triangle the integrand is sampled at the three vertices
(using the nodal value of ``z``) and averaged, which is exact for the
interpolant.  Bending and curl terms are element-wise constant.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverError
from .mesh import TriMesh
from .moduli import EffectiveModuli, quadratic, qbar2, qbar2_grad

__all__ = [
    "DisplacementState",
    "element_gradients",
    "energy",
    "energy_terms",
    "energy_prototypical",
    "gradient",
    "curl_l2",
    "interpolation_defect",
    "Gram",
    "gram",
    "gauss_newton_gram",
    "conjugate_gradient",
    "riesz_solve",
    "reconstruct_v",
    "mean_fields",
]


@dataclass
class DisplacementState:
    """In-plane displacement ``u`` and gradient surrogate ``z``, each ``(n_nodes, 2)``."""

    u: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        self.u = np.array(self.u, dtype=float)
        self.z = np.array(self.z, dtype=float)
        if self.u.shape != self.z.shape or self.u.ndim != 2 or self.u.shape[1] != 2:
            raise ValueError(f"u and z must both be (n, 2); got {self.u.shape}, {self.z.shape}")

    @property
    def n_nodes(self):
        return self.u.shape[0]

    @classmethod
    def zeros(cls, n_nodes):
        return cls(np.zeros((n_nodes, 2)), np.zeros((n_nodes, 2)))

    @classmethod
    def from_array(cls, w):
        w = np.asarray(w, dtype=float)
        return cls(w[:, :2], w[:, 2:])

    def to_array(self):
        return np.hstack([self.u, self.z])

    def copy(self):
        return DisplacementState(self.u.copy(), self.z.copy())


def _check(mesh: TriMesh, state: DisplacementState):
    if state.n_nodes != mesh.n_nodes:
        raise ValueError(
            f"state has {state.n_nodes} nodes but the mesh has {mesh.n_nodes}; "
            "fields must live on the mesh they are evaluated on"
        )


def element_gradients(mesh: TriMesh, field):
    """Constant per-element gradient of a P1 field.

    ``field`` of shape ``(n_nodes,)`` gives ``(T, 2)``; shape ``(n_nodes, k)``
    gives ``(T, k, 2)`` with ``out[t, a, b] = d field_a / d x_b``.
    """
    D1, D2 = mesh.grad_ops
    return np.stack([D1 @ field, D2 @ field], axis=-1)


def _sym_vec(G):
    return np.stack([G[:, 0, 0], G[:, 1, 1], 0.5 * (G[:, 0, 1] + G[:, 1, 0])], axis=-1)


def _kinematics(mesh, em, theta, state):
    Gu = element_gradients(mesh, state.u)
    Gz = element_gradients(mesh, state.z)
    zv = state.z[mesh.tris]  # (T, 3, 2) nodal values per vertex
    zz = np.stack([zv[..., 0] ** 2, zv[..., 1] ** 2, zv[..., 0] * zv[..., 1]], axis=-1)
    root = np.sqrt(theta)
    e = root * (_sym_vec(Gu)[:, None, :] + 0.5 * zz)  # (T, 3, 3) membrane strain at vertices
    f = -_sym_vec(Gz)  # (T, 3) curvature slot
    curl = Gz[:, 1, 0] - Gz[:, 0, 1]
    return e, f, curl, zv


def energy_terms(mesh, em: EffectiveModuli, theta, state, mu_eps):
    """Return ``(effective, curl_penalty)``; :func:`energy` is their sum."""
    _check(mesh, state)
    if theta < 0 or mu_eps < 0:
        raise ValueError("theta and mu_eps must be non-negative")
    e, f, curl, _ = _kinematics(mesh, em, theta, state)
    q = qbar2(em, e, f[:, None, :])  # (T, 3)
    effective = 0.5 * np.sum(mesh.areas * q.mean(axis=1))
    penalty = mu_eps * np.sum(mesh.areas * curl**2)
    return float(effective), float(penalty)


def energy(mesh, em: EffectiveModuli, theta, state, mu_eps):
    """Discrete penalised energy, including the constant ``gamma |omega| / 2``."""
    a, b = energy_terms(mesh, em, theta, state, mu_eps)
    return a + b


def energy_prototypical(mesh, stiffness, theta, state, mu_eps):
    """Energy of a homogeneous plate with pre-strain ``t I``, assembled term by term.

    ``theta/2 <Q2(sym grad u + z z / 2)> + 1/24 <Q2(grad z - I)> + mu |curl z|^2``,
    where the first average uses the vertex rule.  Independent of
    :mod:`plates.moduli` homogenisation, for cross-checking :func:`energy`.
    """
    _check(mesh, state)
    Gu = element_gradients(mesh, state.u)
    Gz = element_gradients(mesh, state.z)
    zv = state.z[mesh.tris]
    total = 0.0
    for k in range(3):
        M = Gu + 0.5 * np.einsum("ta,tb->tab", zv[:, k], zv[:, k])
        total += theta / 2 * np.sum(mesh.areas / 3 * quadratic(stiffness, _sym_vec(M)))
    bend = _sym_vec(Gz) - np.array([1.0, 1.0, 0.0])
    total += np.sum(mesh.areas * quadratic(stiffness, bend)) / 24
    curl = Gz[:, 1, 0] - Gz[:, 0, 1]
    total += mu_eps * np.sum(mesh.areas * curl**2)
    return float(total)


def gradient(mesh, em: EffectiveModuli, theta, state, mu_eps, *, term_weights=(1.0, 1.0, 1.0)):
    """Derivative of :func:`energy` with respect to every nodal dof, shape ``(n_nodes, 4)``.

    ``term_weights`` scales the (membrane, bending, curl) contributions; it
    exists only to inject faults when testing the verification suite.
    """
    _check(mesh, state)
    w_mem, w_bend, w_curl = term_weights
    e, f, curl, zv = _kinematics(mesh, em, theta, state)
    ge, gf = qbar2_grad(em, e, f[:, None, :])  # (T, 3, 3) each
    wt = 0.5 * mesh.areas / 3.0  # energy weight per vertex sample
    root = np.sqrt(theta)
    D1, D2 = mesh.grad_ops

    # membrane through sym grad u; a symmetric stress s pairs with grad phi as
    # (s0 d1 + s2/2 d2, s2/2 d1 + s1 d2)
    S = w_mem * root * wt[:, None] * ge.sum(axis=1)
    du = D1.T @ np.column_stack([S[:, 0], 0.5 * S[:, 2]]) + D2.T @ np.column_stack(
        [0.5 * S[:, 2], S[:, 1]]
    )
    # membrane through the nodal value z(p): d(z z / 2) = sym(z (x) dz)
    gp = (w_mem * root) * wt[:, None, None] * ge
    dz_nodal = np.stack(
        [gp[..., 0] * zv[..., 0] + 0.5 * gp[..., 2] * zv[..., 1],
         gp[..., 1] * zv[..., 1] + 0.5 * gp[..., 2] * zv[..., 0]],
        axis=-1,
    )
    dz = mesh.scatter_op @ dz_nodal.reshape(-1, 2)
    # bending through f = -sym grad z, and the curl penalty
    B = w_bend * wt[:, None] * gf.sum(axis=1)
    c = w_curl * 2.0 * mu_eps * mesh.areas * curl
    dz += D1.T @ np.column_stack([-B[:, 0], -0.5 * B[:, 2] + c]) + D2.T @ np.column_stack(
        [-0.5 * B[:, 2] - c, -B[:, 1]]
    )
    return np.hstack([du, dz])


def interpolation_defect(mesh, em: EffectiveModuli, theta, state, n_gauss=6):
    """``L1`` distance between the effective integrand and its element-wise nodal interpolant.

    On each triangle the integrand ``Qbar2[sqrt(theta)(sym grad u + z z / 2), -sym grad z]``
    is compared with the affine function matching it at the vertices.  The
    integral of the absolute difference uses a collapsed Gauss-Legendre rule
    with ``n_gauss^2`` points.
    """
    _check(mesh, state)
    e, f, _, zv = _kinematics(mesh, em, theta, state)
    q_vert = qbar2(em, e, f[:, None, :])  # (T, 3)
    x, w = np.polynomial.legendre.leggauss(n_gauss)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    s, t = np.meshgrid(x, x, indexing="ij")
    l1 = s.ravel()
    l2 = (t * (1.0 - s)).ravel()
    lam = np.column_stack([1.0 - l1 - l2, l1, l2])  # (P, 3)
    weight = (w[:, None] * w[None, :] * (1.0 - s)).ravel()  # sums to 1/2
    zq = np.einsum("pi,tic->tpc", lam, zv)
    zz = np.stack([zq[..., 0] ** 2, zq[..., 1] ** 2, zq[..., 0] * zq[..., 1]], axis=-1)
    Gu = element_gradients(mesh, state.u)
    eq = np.sqrt(theta) * (_sym_vec(Gu)[:, None, :] + 0.5 * zz)
    q = qbar2(em, eq, f[:, None, :])  # (T, P)
    interp = q_vert @ lam.T
    return float(np.sum(2.0 * mesh.areas * (np.abs(interp - q) @ weight)))


def curl_l2(mesh, z):
    """``L2`` norm of ``d1 z2 - d2 z1``; exact for P1 fields."""
    Gz = element_gradients(mesh, np.asarray(z, dtype=float))
    curl = Gz[:, 1, 0] - Gz[:, 0, 1]
    return float(np.sqrt(np.sum(mesh.areas * curl**2)))


def _scalar_matrices(mesh):
    rows = np.repeat(mesh.tris, 3, axis=1).ravel()
    cols = np.tile(mesh.tris, (1, 3)).ravel()
    local_mass = (np.ones((3, 3)) + np.eye(3)) / 12.0
    mass = (mesh.areas[:, None, None] * local_mass).ravel()
    stiff = (mesh.areas[:, None, None] * np.einsum("tib,tjb->tij", mesh.grads, mesh.grads)).ravel()
    n = mesh.n_nodes
    M = sp.csr_matrix((mass, (rows, cols)), shape=(n, n))
    K = sp.csr_matrix((stiff, (rows, cols)), shape=(n, n))
    return M, K


class Gram:
    """Scalar product on state-shaped ``(n_nodes, 4)`` vectors.

    With ``coupled=False`` the ``(n_nodes, n_nodes)`` matrix acts identically
    on each column.  With ``coupled=True`` it is a ``(4 n_nodes, 4 n_nodes)``
    matrix acting on the node-major flattening ``x.ravel()``.

    ``preconditioner`` selects what CG uses in :func:`riesz_solve`:
    ``"factorized"`` (a cached sparse LU, so CG converges in one or two
    steps) or ``"jacobi"``.
    """

    def __init__(self, matrix, kind, preconditioner="factorized", coupled=False):
        self.matrix = sp.csr_matrix(matrix)
        self.kind = kind
        self.coupled = coupled
        self.diagonal = self.matrix.diagonal()
        if preconditioner not in ("factorized", "jacobi"):
            raise ValueError(f"unknown preconditioner {preconditioner!r}")
        self.preconditioner = preconditioner
        self._lu = None

    def _flat(self, x, fn):
        if not self.coupled:
            return fn(x)
        return fn(x.reshape(self.matrix.shape[0], -1)).reshape(x.shape)

    def matvec(self, x):
        if self.kind == "L2Lumped":
            return self.diagonal.reshape((-1,) + (1,) * (x.ndim - 1)) * x
        return self._flat(x, lambda y: self.matrix @ y)

    def inner(self, a, b):
        return float(np.sum(a * self.matvec(b)))

    def norm(self, a):
        return np.sqrt(max(self.inner(a, a), 0.0))

    def precondition(self, r):
        if self.preconditioner == "jacobi" or self.kind == "L2Lumped":
            return self._flat(r, lambda y: y / self.diagonal.reshape((-1,) + (1,) * (y.ndim - 1)))
        if self._lu is None:
            # symmetric minimum-degree ordering roughly halves the fill of the default
            self._lu = spla.splu(self.matrix.tocsc(), permc_spec="MMD_AT_PLUS_A",
                                 diag_pivot_thresh=0.0, options={"SymmetricMode": True})
        return self._flat(r, lambda y: self._lu.solve(np.ascontiguousarray(y)))

    def dense(self, n_cols=4):
        """Full matrix acting on ``x.ravel()`` for ``x`` of shape ``(n_nodes, n_cols)``."""
        if self.coupled:
            return self.matrix.toarray()
        return np.kron(self.matrix.toarray(), np.eye(n_cols))


def gram(mesh, metric="H1", preconditioner="factorized"):
    """``H1`` (mass + stiffness) or ``L2Lumped`` (row-sum lumped mass) Gram operator.

    The state-dependent ``GaussNewton`` metric is built by :func:`gauss_newton_gram`.
    """
    M, K = _scalar_matrices(mesh)
    if metric == "H1":
        return Gram(M + K, "H1", preconditioner)
    if metric == "L2Lumped":
        return Gram(sp.diags(np.asarray(M.sum(axis=1)).ravel()), "L2Lumped", preconditioner)
    raise ValueError(f"unknown metric {metric!r}; expected 'H1' or 'L2Lumped'")


def gauss_newton_gram(mesh, em: EffectiveModuli, theta, mu_eps, z_ref, preconditioner="factorized"):
    """Second variation of the energy with the membrane strain linearised at ``z_ref``.

    Each vertex sample contributes ``(area/3) [e; f]^T [[M0, M1], [M1, M2]] [e; f]``
    with ``e = sqrt(theta) (sym grad du + sym(z_ref (x) dz))`` and ``f = -sym grad dz``,
    plus the curl penalty and a mass term of weight ``theta tr(M0) / 2``
    (``tr(M0) / 2`` if ``theta = 0``) on ``u`` and ``tr(M2) / 2`` on ``z``.  The quadratic form is positive
    semi-definite, so the mass makes it a scalar product for any ``z_ref``.
    """
    z_ref = np.asarray(z_ref, dtype=float)
    if z_ref.shape != (mesh.n_nodes, 2):
        raise ValueError(f"z_ref must have shape ({mesh.n_nodes}, 2), got {z_ref.shape}")
    T = mesh.n_tris
    b = mesh.grads
    # local dof i*4 + c for vertex i and column c of the state
    Bu = np.zeros((T, 3, 12))
    Bz = np.zeros((T, 3, 12))
    C = np.zeros((T, 12))
    for i in range(3):
        for off, B in ((0, Bu), (2, Bz)):
            B[:, 0, 4 * i + off] = b[:, i, 0]
            B[:, 1, 4 * i + off + 1] = b[:, i, 1]
            B[:, 2, 4 * i + off] = 0.5 * b[:, i, 1]
            B[:, 2, 4 * i + off + 1] = 0.5 * b[:, i, 0]
        C[:, 4 * i + 2] = -b[:, i, 1]
        C[:, 4 * i + 3] = b[:, i, 0]
    moduli = np.block([[em.M0, em.M1], [em.M1, em.M2]])
    root = np.sqrt(theta)
    zt = z_ref[mesh.tris]
    local = np.zeros((T, 12, 12))
    for p in range(3):
        E = Bu.copy()
        z1, z2 = zt[:, p, 0], zt[:, p, 1]
        E[:, 0, 4 * p + 2] += z1
        E[:, 1, 4 * p + 3] += z2
        E[:, 2, 4 * p + 2] += 0.5 * z2
        E[:, 2, 4 * p + 3] += 0.5 * z1
        L = np.concatenate([root * E, -Bz], axis=1)
        local += (mesh.areas / 3)[:, None, None] * (np.swapaxes(L, 1, 2) @ moduli @ L)
    local += 2 * mu_eps * mesh.areas[:, None, None] * C[:, :, None] * C[:, None, :]
    # u only enters through theta; at theta = 0 any positive weight will do
    u_scale = theta if theta > 0 else 1.0
    weights = np.array([u_scale * np.trace(em.M0) / 2] * 2 + [np.trace(em.M2) / 2] * 2)
    local_mass = (np.ones((3, 3)) + np.eye(3)) / 12.0
    local += mesh.areas[:, None, None] * np.kron(local_mass, np.diag(weights))
    loc = (mesh.tris[:, :, None] * 4 + np.arange(4)).reshape(T, 12)
    n = 4 * mesh.n_nodes
    A = sp.csr_matrix(
        (local.ravel(), (np.repeat(loc, 12, axis=1).ravel(), np.tile(loc, (1, 12)).ravel())),
        shape=(n, n),
    )
    return Gram(A, "GaussNewton", preconditioner, coupled=True)


def conjugate_gradient(apply, rhs, precondition=None, tol=1e-10, maxiter=None):
    """Preconditioned CG, column-wise for 2-D right-hand sides.

    Each column is an independent system sharing ``apply``.  Stops when every
    column satisfies ``|r| <= tol |rhs|``.  Raises :class:`SolverError` after
    ``maxiter`` iterations (default ``10 * rhs.size``).
    """
    b = np.asarray(rhs, dtype=float)
    squeeze = b.ndim == 1
    if squeeze:
        b = b[:, None]
    if maxiter is None:
        maxiter = 10 * b.size
    if precondition is None:
        precondition = np.copy
    x = np.zeros_like(b)
    r = b.copy()
    bnorm = np.linalg.norm(b, axis=0)
    target = tol * np.where(bnorm > 0, bnorm, 1.0)
    p = rz = None
    for it in range(maxiter + 1):
        rnorm = np.linalg.norm(r, axis=0)
        if np.all(rnorm <= target):
            return x[:, 0] if squeeze else x
        if it == maxiter:
            break
        active = rnorm > target
        z = precondition(r)
        rz_new = np.sum(r * z, axis=0)
        if p is None:
            p = z
        else:
            beta = np.where(active & (rz > 0), rz_new / np.where(rz > 0, rz, 1.0), 0.0)
            p = z + beta * p
        rz = rz_new
        Ap = apply(p)
        pAp = np.sum(p * Ap, axis=0)
        alpha = np.where(active & (pAp > 0), rz / np.where(pAp > 0, pAp, 1.0), 0.0)
        x += alpha * p
        r -= alpha * Ap
    raise SolverError(
        f"CG did not reach relative residual {tol:g} in {maxiter} iterations "
        f"(worst column residual {np.max(rnorm / np.where(bnorm > 0, bnorm, 1.0)):.3e})"
    )


def riesz_solve(g: Gram, rhs, tol=1e-10):
    """Solve ``(d, xi) = rhs(xi)`` for ``d``: the Riesz representative of a dual vector."""
    rhs = np.asarray(rhs, dtype=float)
    if g.kind == "L2Lumped":
        return rhs / g.diagonal.reshape((-1,) + (1,) * (rhs.ndim - 1))
    if g.coupled:
        x = conjugate_gradient(lambda y: g.matvec(y.reshape(rhs.shape)).reshape(-1, 1),
                               rhs.reshape(-1, 1),
                               lambda y: g.precondition(y.reshape(rhs.shape)).reshape(-1, 1),
                               tol=tol, maxiter=10 * rhs.size)
        return x.reshape(rhs.shape)
    return conjugate_gradient(g.matvec, rhs, g.precondition, tol=tol, maxiter=10 * rhs.size)


def reconstruct_v(mesh, z, tol=1e-12):
    """Least-squares potential of ``z``.

    Minimises ``int |grad v - z|^2`` over P1 scalars with zero mean.  Returns
    ``(v, residual)`` where ``residual`` is the attained ``L2`` misfit.
    """
    z = np.asarray(z, dtype=float)
    _, K = _scalar_matrices(mesh)
    zbar = z[mesh.tris].mean(axis=1)  # element means of the P1 field
    local = mesh.areas[:, None] * np.einsum("tib,tb->ti", mesh.grads, zbar)
    rhs = np.bincount(mesh.tris.ravel(), weights=local.ravel(), minlength=mesh.n_nodes)
    w = mesh.node_weights / mesh.area

    def apply(x):
        return K @ x + np.outer(w, w @ x) * mesh.area

    diag = K.diagonal() + w * w * mesh.area
    v = conjugate_gradient(apply, rhs, lambda r: r / diag[:, None], tol=tol)
    v = v - w @ v
    # exact L2 misfit: |grad v|^2 area - 2 grad v . int z + int |z|^2
    Gv = element_gradients(mesh, v)
    zv = z[mesh.tris]
    int_z2 = mesh.areas * (np.einsum("tia,tia->t", zv, zv) + np.einsum("ta,ta->t", 3 * zbar, 3 * zbar)) / 12
    res2 = np.sum(mesh.areas * np.sum(Gv**2, axis=1) - 2 * mesh.areas * np.sum(Gv * zbar, axis=1) + int_z2)
    return v, float(np.sqrt(max(res2, 0.0)))


def mean_fields(mesh, state: DisplacementState):
    """Exact domain averages used by the admissibility constraints.

    Antisymmetric parts are reported as the scalar ``(d1 w2 - d2 w1) / 2``.
    """
    _check(mesh, state)
    A = mesh.area
    w = mesh.node_weights
    Gu = element_gradients(mesh, state.u)
    Gz = element_gradients(mesh, state.z)

    def avg(per_elem):
        return np.tensordot(mesh.areas, per_elem, axes=(0, 0)) / A

    return {
        "mean_u": w @ state.u / A,
        "mean_antisym_grad_u": float(avg(0.5 * (Gu[:, 1, 0] - Gu[:, 0, 1]))),
        "mean_z": w @ state.z / A,
        "mean_antisym_grad_z": float(avg(0.5 * (Gz[:, 1, 0] - Gz[:, 0, 1]))),
        "mean_symgrad_z": avg(_sym_vec(Gz)),
    }
