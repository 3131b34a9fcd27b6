"""Homogenised moduli of pre-strained multilayer plates.

Symmetric 2x2 matrices are stored as 3-vectors ``(A11, A22, A12)`` so that a
quadratic form on strains is a 3x3 symmetric array ``M`` with
``Q(A) = a @ M @ a``.  The thickness coordinate ``t`` ranges over
``(-1/2, 1/2)``; each layer carries a constant stiffness and a pre-strain
that is affine in ``t``.

Sign convention: ``F`` denotes the curvature slot of the effective form, which
the von Karman energy evaluates at ``-Hess(v)``.  The spontaneous curvature is
``K0 = -F0`` and is the Hessian of the optimal out-of-plane displacement.
"""

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .errors import InvalidParameterError, NumericalDegeneracyError

__all__ = [
    "sym_to_vec",
    "vec_to_sym",
    "quadratic",
    "isotropic_reduced_stiffness",
    "Layer",
    "LayerStack",
    "EffectiveModuli",
    "compute_moments",
    "qbar2",
    "qbar2_grad",
    "qbar2_integral",
    "qbar2_star",
    "lvk_minimizer",
    "CylindricalMinimizer",
    "LkiMinimizerSet",
    "cylindrical_minimizers",
    "lki_minimizer_set",
]


def sym_to_vec(A):
    """Map ``(..., 2, 2)`` matrices to ``(..., 3)`` vectors of their symmetric part."""
    A = np.asarray(A, dtype=float)
    return np.stack(
        [A[..., 0, 0], A[..., 1, 1], 0.5 * (A[..., 0, 1] + A[..., 1, 0])], axis=-1
    )


def vec_to_sym(a):
    """Inverse of :func:`sym_to_vec` on symmetric matrices."""
    a = np.asarray(a, dtype=float)
    out = np.empty(a.shape[:-1] + (2, 2))
    out[..., 0, 0] = a[..., 0]
    out[..., 1, 1] = a[..., 1]
    out[..., 0, 1] = out[..., 1, 0] = a[..., 2]
    return out


def _as_vec(A):
    A = np.asarray(A, dtype=float)
    if A.ndim >= 2 and A.shape[-2:] == (2, 2):
        return sym_to_vec(A)
    if A.shape[-1:] != (3,):
        raise ValueError(f"expected (..., 3) vector or (..., 2, 2) matrix, got {A.shape}")
    return A


def quadratic(M, a, b=None):
    """Evaluate ``a @ M @ b`` (``b = a`` by default) over leading axes."""
    if b is None:
        b = a
    return np.einsum("...i,ij,...j->...", a, M, b)


def _check_spd(M, what):
    M = np.asarray(M, dtype=float)
    if M.shape != (3, 3):
        raise InvalidParameterError(f"{what}: expected a 3x3 form, got shape {M.shape}")
    if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max())):
        raise InvalidParameterError(f"{what}: form is not symmetric")
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    if w[0] <= 1e-12 * max(abs(w[-1]), 1e-300):
        raise InvalidParameterError(f"{what}: form is not positive definite (eigenvalues {w})")
    return 0.5 * (M + M.T)


def isotropic_reduced_stiffness(mu, lam):
    """Plane-stress form of an isotropic material with Lame constants ``mu``, ``lam``.

    Returns the coefficient array of
    ``Q2(G) = 2 mu |sym G|^2 + 2 mu lam / (2 mu + lam) (tr G)^2``.
    """
    if not mu > 0:
        raise InvalidParameterError(f"shear modulus must be positive, got {mu}")
    if not lam >= 0:
        raise InvalidParameterError(f"first Lame constant must be non-negative, got {lam}")
    lp = 2.0 * mu * lam / (2.0 * mu + lam)
    return np.array(
        [[2 * mu + lp, lp, 0.0], [lp, 2 * mu + lp, 0.0], [0.0, 0.0, 4 * mu]]
    )


@dataclass(frozen=True, eq=False)
class Layer:
    """One layer ``t_lo < t < t_hi`` with pre-strain ``prestrain_const + t * prestrain_lin``."""

    t_lo: float
    t_hi: float
    stiffness: np.ndarray
    prestrain_const: np.ndarray = field(default_factory=lambda: np.zeros(3))
    prestrain_lin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "stiffness", np.array(self.stiffness, dtype=float))
        object.__setattr__(self, "prestrain_const", _as_vec(self.prestrain_const).copy())
        object.__setattr__(self, "prestrain_lin", _as_vec(self.prestrain_lin).copy())

    def prestrain(self, t):
        return self.prestrain_const + np.multiply.outer(t, self.prestrain_lin)


class LayerStack:
    """Ordered layers partitioning the thickness interval ``(-1/2, 1/2)``."""

    def __init__(self, layers: Sequence[Layer]):
        layers = sorted(layers, key=lambda layer: layer.t_lo)
        if not layers:
            raise InvalidParameterError("a layer stack needs at least one layer")
        tol = 1e-12
        if abs(layers[0].t_lo + 0.5) > tol or abs(layers[-1].t_hi - 0.5) > tol:
            raise InvalidParameterError("layers must cover exactly (-1/2, 1/2)")
        for i, layer in enumerate(layers):
            if not layer.t_lo < layer.t_hi:
                raise InvalidParameterError(f"layer {i}: t_lo must be below t_hi")
            if i and abs(layer.t_lo - layers[i - 1].t_hi) > tol:
                raise InvalidParameterError(f"layer {i}: gap or overlap with previous layer")
            object.__setattr__(layer, "stiffness", _check_spd(layer.stiffness, f"layer {i}"))
        self.layers: List[Layer] = list(layers)

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    @classmethod
    def homogeneous(cls, stiffness, prestrain_const=(0, 0, 0), prestrain_lin=(0, 0, 0)):
        return cls([Layer(-0.5, 0.5, stiffness, prestrain_const, prestrain_lin)])

    @classmethod
    def prototypical(cls, stiffness):
        """Homogeneous material with pre-strain ``B(t) = t I``."""
        return cls.homogeneous(stiffness, prestrain_lin=(1.0, 1.0, 0.0))

    @classmethod
    def bimetal(cls, stiffness, beta1, beta2):
        """Two halves with isotropic constant pre-strains ``beta1 I`` (bottom) and ``beta2 I``."""
        return cls(
            [
                Layer(-0.5, 0.0, stiffness, (beta1, beta1, 0.0)),
                Layer(0.0, 0.5, stiffness, (beta2, beta2, 0.0)),
            ]
        )

    def scaled(self, c):
        """Copy with every stiffness multiplied by ``c``."""
        return LayerStack(
            [
                Layer(l.t_lo, l.t_hi, c * l.stiffness, l.prestrain_const, l.prestrain_lin)
                for l in self.layers
            ]
        )


@dataclass(frozen=True, eq=False)
class EffectiveModuli:
    """Moments of the layer stiffness and the derived completed-square data.

    All symmetric-matrix quantities are in vector form.
    """

    M0: np.ndarray
    M1: np.ndarray
    M2: np.ndarray
    Mstar: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    beta0: float
    gamma: float
    E0: np.ndarray
    F0: np.ndarray
    K0: np.ndarray
    # M0^{-1} M1, used by the completed square
    coupling: np.ndarray

    def as_dict(self):
        d = {}
        for name in ("M0", "M1", "M2", "Mstar", "b1", "b2", "E0", "F0", "K0"):
            d[name] = np.asarray(getattr(self, name)).tolist()
        d["beta0"] = float(self.beta0)
        d["gamma"] = float(self.gamma)
        return d


def _monomial_integrals(lo, hi, kmax):
    return np.array([(hi ** (k + 1) - lo ** (k + 1)) / (k + 1) for k in range(kmax + 1)])


def _solve(A, b, what):
    try:
        cond = np.linalg.cond(A)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e14:
        raise NumericalDegeneracyError(f"{what} is singular (condition number {cond:.3g})")
    return np.linalg.solve(A, b)


def compute_moments(stack: LayerStack) -> EffectiveModuli:
    """Integrate the layer data exactly and complete the square of the effective form."""
    M0 = np.zeros((3, 3))
    M1 = np.zeros((3, 3))
    M2 = np.zeros((3, 3))
    b1 = np.zeros(3)
    b2 = np.zeros(3)
    beta0 = 0.0
    for layer in stack:
        I = _monomial_integrals(layer.t_lo, layer.t_hi, 2)
        M, c, l = layer.stiffness, layer.prestrain_const, layer.prestrain_lin
        M0 += I[0] * M
        M1 += I[1] * M
        M2 += I[2] * M
        b1 += M @ (I[0] * c + I[1] * l)
        b2 += M @ (I[1] * c + I[2] * l)
        beta0 += I[0] * c @ M @ c + 2 * I[1] * c @ M @ l + I[2] * l @ M @ l

    coupling = _solve(M0, M1, "M0")
    Mstar = M2 - M1 @ coupling
    Mstar = 0.5 * (Mstar + Mstar.T)
    E0 = _solve(M0, b1, "M0")
    shift = b2 - M1 @ E0
    F0 = -_solve(Mstar, shift, "Mstar")
    gamma = beta0 - b1 @ E0 - shift @ (-F0)
    return EffectiveModuli(
        M0=M0,
        M1=M1,
        M2=M2,
        Mstar=Mstar,
        b1=b1,
        b2=b2,
        beta0=float(beta0),
        gamma=float(gamma),
        E0=E0,
        F0=F0,
        K0=-F0,
        coupling=coupling,
    )


def qbar2(em: EffectiveModuli, E, F):
    """Effective form ``Qbar2[E, F]`` via its completed square.

    ``gamma + Q0(E + M0^{-1} M1 F + E0) + Q*(F - F0)``.  Accepts vectors or
    2x2 matrices, broadcasting over leading axes.
    """
    e, f = _as_vec(E), _as_vec(F)
    r0 = e + f @ em.coupling.T + em.E0
    r1 = f - em.F0
    return em.gamma + quadratic(em.M0, r0) + quadratic(em.Mstar, r1)


def qbar2_grad(em: EffectiveModuli, e, f):
    """Partial derivatives ``(dQ/de, dQ/df)`` of :func:`qbar2` in vector form."""
    ge = 2.0 * (e @ em.M0 + f @ em.M1 + em.b1)
    gf = 2.0 * (f @ em.M2 + e @ em.M1 + em.b2)
    return ge, gf


def qbar2_integral(stack: LayerStack, E, F):
    """Defining integral ``int Q2(t, E + t F + B(t)) dt``, integrated layer by layer."""
    e, f = _as_vec(E), _as_vec(F)
    total = 0.0
    for layer in stack:
        I = _monomial_integrals(layer.t_lo, layer.t_hi, 2)
        c0 = e + layer.prestrain_const
        c1 = f + layer.prestrain_lin
        M = layer.stiffness
        total = total + (
            I[0] * quadratic(M, c0) + 2 * I[1] * quadratic(M, c0, c1) + I[2] * quadratic(M, c1)
        )
    return total


def qbar2_star(em: EffectiveModuli, F):
    """Relaxed form ``min_E Qbar2[E, F] = gamma + Q*(F - F0)``."""
    return em.gamma + quadratic(em.Mstar, _as_vec(F) - em.F0)


def lvk_minimizer(em: EffectiveModuli):
    """Optimal ``(sym grad u, Hess v)`` of the linearised von Karman energy.

    The Hessian is the spontaneous curvature ``K0``; the in-plane strain is the
    one zeroing the first square of :func:`qbar2` at ``F = -K0 = F0``.  Both
    are returned as vectors.  The energy of the pair is ``gamma |omega| / 2``.
    """
    K = em.K0.copy()
    Esym = -(em.coupling @ em.F0 + em.E0)
    return Esym, K


@dataclass(frozen=True)
class CylindricalMinimizer:
    """``K = magnitude * e(angle) (x) e(angle)`` with value ``Q*(K - K0)``."""

    angle: float
    magnitude: float
    value: float

    @property
    def curvature(self):
        c, s = np.cos(self.angle), np.sin(self.angle)
        return self.magnitude * np.array([c * c, s * s, c * s])


@dataclass(frozen=True)
class LkiMinimizerSet:
    minimizers: List[CylindricalMinimizer]
    kind: str  # "point", "pair" or "ellipse"
    constant: bool

    @property
    def value(self):
        return min(m.value for m in self.minimizers)


def _rank_one(phi):
    c, s = np.cos(phi), np.sin(phi)
    return np.stack([c * c, s * s, c * s], axis=-1)


def _profile(mstar, k0, phi):
    n = _rank_one(phi)
    nn = quadratic(mstar, n)
    nk = n @ (mstar @ k0)
    s = nk / nn
    value = k0 @ mstar @ k0 - nk * nk / nn
    return s, value


def _golden(fun, a, b, tol):
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fun(c), fun(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fun(d)
    return 0.5 * (a + b)


def cylindrical_minimizers(mstar, k0, n_angles=360, tol=1e-10) -> LkiMinimizerSet:
    """Minimise ``Q*(K - K0)`` over rank-deficient symmetric ``K``.

    ``K = s e(phi) (x) e(phi)``; for each angle the optimal ``s`` is explicit,
    leaving a one-dimensional profile in ``phi`` that is scanned on a grid and
    refined by golden-section search.
    """
    if n_angles < 8:
        raise InvalidParameterError("n_angles must be at least 8")
    mstar = np.asarray(mstar, dtype=float)
    k0 = _as_vec(k0)
    grid = np.arange(n_angles) * np.pi / n_angles
    s_grid, v_grid = _profile(mstar, k0, grid)
    scale = 1.0 + abs(k0 @ mstar @ k0)

    if np.ptp(v_grid) <= 1e-9 * scale:
        if np.all(np.abs(s_grid) <= 1e-12 * (1.0 + np.abs(k0).max())):
            m = CylindricalMinimizer(0.0, 0.0, float(v_grid.min()))
            return LkiMinimizerSet([m], "point", True)
        found = [
            CylindricalMinimizer(float(p), float(s), float(v))
            for p, s, v in zip(grid, s_grid, v_grid)
        ]
        return LkiMinimizerSet(found, "ellipse", True)

    h = np.pi / n_angles
    prev, nxt = np.roll(v_grid, 1), np.roll(v_grid, -1)
    candidates = np.flatnonzero((v_grid <= prev) & (v_grid <= nxt))
    refined = []
    for k in candidates:
        phi = _golden(lambda p: _profile(mstar, k0, p)[1], grid[k] - h, grid[k] + h, tol)
        phi = phi % np.pi
        s, v = _profile(mstar, k0, phi)
        refined.append(CylindricalMinimizer(float(phi), float(s), float(v)))

    best = min(m.value for m in refined)
    keep = []
    for m in sorted(refined, key=lambda m: m.angle):
        if m.value > best + 1e-9 * scale:
            continue
        K = m.curvature
        if any(np.abs(K - o.curvature).max() <= 1e-6 * scale for o in keep):
            continue
        keep.append(m)
    kind = "point" if len(keep) == 1 else "pair" if len(keep) == 2 else "ellipse"
    return LkiMinimizerSet(keep, kind, False)


def lki_minimizer_set(em: EffectiveModuli, n_angles=360) -> LkiMinimizerSet:
    """Optimal cylindrical curvatures of the linearised Kirchhoff regime."""
    return cylindrical_minimizers(em.Mstar, em.K0, n_angles)
