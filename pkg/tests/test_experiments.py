import numpy as np
import pytest

from plates import fem
from plates.errors import InvalidParameterError, MeshFormatError
from plates.experiments import (
    InitialCondition,
    SweepRecord,
    detect_transition,
    initial_state,
    load_state,
    mean_bending_strain,
    perturb,
    save_state,
    small_theta_reference,
    strain_eigs,
    symmetry_ratio,
    theta_sweep,
)
from plates.fem import DisplacementState
from plates.solver import OptimizerConfig, minimize, project_admissible


def test_initial_condition_validation():
    with pytest.raises(InvalidParameterError):
        InitialCondition(kind="saddle")
    with pytest.raises(InvalidParameterError):
        InitialCondition(amplitude=-1.0)
    with pytest.raises(InvalidParameterError):
        InitialCondition(kind="file")


def test_initial_states(mesh2):
    x = mesh2.nodes
    assert np.all(initial_state(mesh2, InitialCondition()).to_array() == 0)
    par = initial_state(mesh2, InitialCondition(kind="paraboloid", a=2.0, b=0.5))
    assert np.allclose(par.z, np.column_stack([2 * x[:, 0], 0.5 * x[:, 1]]))
    assert np.all(par.u == 0)


def test_perturbation_reproducible_and_bounded(mesh2):
    ic = InitialCondition(amplitude=1e-3, seed=7)
    a = initial_state(mesh2, ic).to_array()
    b = initial_state(mesh2, ic).to_array()
    assert np.array_equal(a, b)
    assert 0 < np.abs(a).max() <= 1e-3
    c = perturb(DisplacementState.zeros(mesh2.n_nodes), ic, index=1).to_array()
    assert not np.array_equal(a, c)
    d = initial_state(mesh2, InitialCondition(amplitude=1e-3, seed=8)).to_array()
    assert not np.array_equal(a, d)


def test_file_initial_condition(mesh2, tmp_path, rng):
    st = DisplacementState(rng.standard_normal((mesh2.n_nodes, 2)), rng.standard_normal((mesh2.n_nodes, 2)))
    path = tmp_path / "s.txt"
    save_state(st, path)
    back = initial_state(mesh2, InitialCondition(kind="file", path=str(path)))
    assert np.array_equal(back.to_array(), st.to_array())
    save_state(DisplacementState.zeros(3), path)
    with pytest.raises(MeshFormatError):
        initial_state(mesh2, InitialCondition(kind="file", path=str(path)))


@pytest.mark.parametrize(
    "S, expected",
    [(np.eye(2), 1.0), (np.diag([1.0, 0.0]), 0.0), (np.diag([2.0, 1.0]), 0.5),
     (np.diag([-2.0, 1.0]), 0.5), (np.zeros((2, 2)), 1.0)],
)
def test_symmetry_ratio_examples(S, expected):
    assert symmetry_ratio(S) == pytest.approx(expected, abs=1e-15)


def test_strain_eigs_order_by_magnitude():
    assert strain_eigs(np.diag([0.5, -3.0])) == (-3.0, 0.5)
    assert strain_eigs(np.array([1.0, 2.0, 0.0])) == (2.0, 1.0)


def test_symmetry_ratio_rotation_invariant(rng):
    for _ in range(20):
        A = rng.standard_normal((2, 2))
        S = A + A.T
        c, s = np.cos(rng.uniform(0, 2 * np.pi)), np.sin(rng.uniform(0, 2 * np.pi))
        R = np.array([[c, -s], [s, c]])
        assert symmetry_ratio(R @ S @ R.T) == pytest.approx(symmetry_ratio(S), rel=1e-12)


def test_mean_bending_strain_examples(mesh2):
    x = mesh2.nodes
    assert np.allclose(mean_bending_strain(mesh2, x), np.eye(2), atol=1e-14)
    z = np.column_stack([x[:, 0], np.zeros(len(x))])
    assert np.allclose(mean_bending_strain(mesh2, z), np.diag([1.0, 0.0]), atol=1e-14)
    z = np.column_stack([x[:, 1], np.zeros(len(x))])
    assert np.allclose(mean_bending_strain(mesh2, z), [[0, 0.5], [0.5, 0]], atol=1e-14)


def test_mean_bending_strain_matches_element_loop(mesh2, rng):
    z = rng.standard_normal((mesh2.n_nodes, 2))
    acc = np.zeros((2, 2))
    for t, area in zip(mesh2.tris, mesh2.areas):
        p = mesh2.nodes[t]
        B = np.column_stack([p[1] - p[0], p[2] - p[0]])
        G = np.column_stack([z[t[1]] - z[t[0]], z[t[2]] - z[t[0]]]) @ np.linalg.inv(B)
        acc += area * 0.5 * (G + G.T)
    assert np.allclose(mean_bending_strain(mesh2, z), acc / mesh2.area, atol=1e-12)


def test_detect_transition_interpolates():
    assert detect_transition([(10, 1.0), (20, 0.9), (30, 0.4)]) == pytest.approx(28.0)
    assert detect_transition([(10, 1.0), (20, 0.5), (30, 0.4)]) == pytest.approx(20.0)
    assert detect_transition([(10, 1.0), (20, 0.9)]) is None
    assert detect_transition([(10, 0.3), (20, 0.2)]) is None
    assert detect_transition([(10, 1.0), (20, float("nan")), (30, 0.0)]) == pytest.approx(20.0)


def test_detect_transition_accepts_records():
    recs = [SweepRecord(theta=t, energy=0.0, mean_strain=np.eye(2), strain_eigs=(1, q), symmetry_ratio=q,
                        curl_l2=0.0, iterations=0, converged=True)
            for t, q in [(1, 0.8), (2, 0.2)]]
    assert detect_transition(recs) == pytest.approx(1.5)


def test_sweep_validation(mesh2, proto_em):
    with pytest.raises(InvalidParameterError):
        theta_sweep(mesh2, proto_em, [2, 1], 1.0)
    with pytest.raises(InvalidParameterError):
        theta_sweep(mesh2, proto_em, [-1, 1], 1.0)


def test_sweep_at_zero_is_spherical(mesh3, proto_em):
    (rec,) = theta_sweep(mesh3, proto_em, [0.0], mesh3.eps**-0.5, OptimizerConfig(g_tol=1e-8))
    assert rec.converged and not rec.failed
    assert rec.symmetry_ratio >= 0.99
    assert np.allclose(rec.mean_strain, np.eye(2), atol=0.02)


def test_warm_and_cold_agree_at_small_theta(mesh2, proto_em):
    mu = mesh2.eps**-0.5
    cfg = OptimizerConfig(g_tol=1e-10)
    thetas = [0.0, 0.01, 0.1]
    warm = theta_sweep(mesh2, proto_em, thetas, mu, cfg)
    cold = theta_sweep(mesh2, proto_em, thetas, mu, cfg, warm_start=False)
    for a, b in zip(warm, cold):
        assert a.energy == pytest.approx(b.energy, rel=1e-6)
        assert np.allclose(a.mean_strain, b.mean_strain, atol=1e-6)


def test_minimum_energy_increases_with_theta(mesh2, proto_em):
    recs = theta_sweep(mesh2, proto_em, np.linspace(0, 1, 6), mesh2.eps**-0.5, OptimizerConfig(g_tol=1e-9))
    E = [r.energy for r in recs]
    assert all(b >= a - 1e-12 for a, b in zip(E, E[1:]))


def test_threaded_cold_sweep_matches_sequential(mesh2, proto_em):
    mu = mesh2.eps**-0.5
    cfg = OptimizerConfig(max_iters=40)
    seq = theta_sweep(mesh2, proto_em, [0.5, 1, 2, 4], mu, cfg, warm_start=False, workers=1)
    par = theta_sweep(mesh2, proto_em, [0.5, 1, 2, 4], mu, cfg, warm_start=False, workers=2)
    for a, b in zip(seq, par):
        assert np.array_equal(a.state.to_array(), b.state.to_array())
        assert a.energy == b.energy


def test_solver_failure_is_recorded(mesh2, proto_em):
    cfg = OptimizerConfig(metric="L2Lumped", max_backtracks=1)
    recs = theta_sweep(mesh2, proto_em, [1.0, 100.0], 1.0, cfg)
    assert recs[-1].failed and not recs[-1].converged
    assert "Armijo" in recs[-1].message
    assert np.isfinite(recs[-1].energy)


def test_small_theta_reference_properties(mesh3, proto_em):
    ref = small_theta_reference(mesh3, proto_em)
    assert ref.membrane_energy >= 0
    assert np.allclose(ref.z0, mesh3.nodes)
    # edge-midpoint quadrature is exact for the quadratic |x|^2 / 2
    P = mesh3.nodes[mesh3.tris]
    mids = (P + np.roll(P, -1, axis=1)) / 2
    mean = np.sum(mesh3.areas * np.mean(0.5 * np.sum(mids**2, axis=2), axis=1)) / mesh3.area
    assert ref.c0 == pytest.approx(mean, rel=1e-12)
    assert ref.c0 == pytest.approx(0.25, rel=0.02)
    mf = fem.mean_fields(mesh3, ref.state())
    assert np.abs(mf["mean_u"]).max() <= 1e-10 and abs(mf["mean_antisym_grad_u"]) <= 1e-10
    # u0 is a membrane minimiser at z0
    g = fem.gradient(mesh3, proto_em, 1.0, ref.state(), 0.0)[:, :2]
    gp = project_admissible(mesh3, DisplacementState(g, np.zeros_like(g))).u
    assert np.abs(gp).max() <= 1e-8 * mesh3.areas.mean()


def test_small_theta_self_consistency_scales_linearly(mesh3, proto_em):
    ref = small_theta_reference(mesh3, proto_em)
    mu = mesh3.eps**-0.5
    rel = []
    for theta in (1e-3, 1e-4):
        J0 = fem.energy(mesh3, proto_em, theta, ref.state(), mu)
        _, rep = minimize(mesh3, proto_em, theta, mu, ref.state(), OptimizerConfig(g_tol=1e-12))
        rel.append((J0 - rep.energies[-1]) / J0)
    assert all(r >= 0 for r in rel)
    # the minimiser moves away from the reference by O(theta)
    assert 0.05 <= rel[1] / rel[0] <= 0.2
    assert rel[0] <= 1e-3


def test_state_round_trip(tmp_path, rng):
    st = DisplacementState(rng.standard_normal((5, 2)), rng.standard_normal((5, 2)))
    path = tmp_path / "s.txt"
    save_state(st, path)
    assert np.array_equal(load_state(path).to_array(), st.to_array())


@pytest.mark.parametrize(
    "text, line",
    [("bogus\n", 1), ("plates-state v1\nx\n", 2), ("plates-state v1\n2\n1 2 3 4\n", 3),
     ("plates-state v1\n2\n1 2 3 4\n1 2 3\n", 4), ("plates-state v1\n1\n1 2 nan 4\n", 3),
     ("plates-state v1\n1\n1 2 a 4\n", 3)],
)
def test_state_format_errors(tmp_path, text, line):
    path = tmp_path / "bad.txt"
    path.write_text(text)
    with pytest.raises(MeshFormatError) as info:
        load_state(path)
    assert info.value.line == line
