import numpy as np
import pytest

from plates import moduli
from plates.mesh import disk_mesh


@pytest.fixture(scope="session")
def iso():
    return moduli.isotropic_reduced_stiffness(1.0, 1.0)


@pytest.fixture(scope="session")
def proto_em(iso):
    return moduli.compute_moments(moduli.LayerStack.prototypical(iso))


@pytest.fixture(scope="session")
def mesh2():
    return disk_mesh(1.0, 2)


@pytest.fixture(scope="session")
def mesh3():
    return disk_mesh(1.0, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_spd(rng, n=3, cond=20.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    ev = np.exp(rng.uniform(0, np.log(cond), n))
    return Q @ np.diag(ev) @ Q.T


def random_stack(rng, max_layers=3):
    k = int(rng.integers(1, max_layers + 1))
    cuts = np.sort(rng.uniform(-0.5, 0.5, k - 1))
    edges = np.concatenate([[-0.5], cuts, [0.5]])
    layers = [
        moduli.Layer(lo, hi, random_spd(rng), rng.standard_normal(3), rng.standard_normal(3))
        for lo, hi in zip(edges[:-1], edges[1:])
    ]
    return moduli.LayerStack(layers)


def gl_qbar2(stack, E, F, n=8):
    """Gauss-Legendre t-integral of Q2(t, E + t F + B(t)); exact for these quadratics."""
    x, w = np.polynomial.legendre.leggauss(n)
    total = 0.0
    for layer in stack:
        lo, hi = layer.t_lo, layer.t_hi
        t = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
        for ti, wi in zip(t, w):
            a = np.asarray(E) + ti * np.asarray(F) + layer.prestrain_const + ti * layer.prestrain_lin
            total += 0.5 * (hi - lo) * wi * a @ layer.stiffness @ a
    return total
