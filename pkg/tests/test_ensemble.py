import numpy as np
import pytest
from scipy.optimize import nnls as scipy_nnls

from replica_cutoff.dynamics import fock_state, run_trajectories
from replica_cutoff.ensemble import (
    build_ensemble,
    enforce_psd_nullspace,
    fit_weights,
    haar_unitary,
    load_ensemble,
    nnls_activeset,
    sample_gaussian_state,
    save_ensemble,
    stabilized_estimate,
)
from replica_cutoff.fock import (
    build_hamiltonian,
    build_measurement_operator,
    build_sector,
    number_operator,
    transfer_operator,
)
from replica_cutoff.symspace import (
    ReplicaState,
    build_symmetric_basis,
    embed_state,
    partial_trace_replicas,
    project_state,
    ProjectedState,
)
from replica_cutoff.transfer import build_transfer_map, lift


@pytest.fixture(scope="module")
def sector():
    return build_sector(4, 2)


@pytest.fixture(scope="module")
def maps(sector):
    return {3: build_transfer_map(sector.dim, 2, 3), 4: build_transfer_map(sector.dim, 2, 4)}


@pytest.fixture(scope="module")
def small_ensemble(sector, maps):
    return build_ensemble(sector, size=120, seed=7, maps=maps)


def _projected_r2(sector, maps, psis, weights=None):
    n = psis.shape[0]
    weights = np.full(n, 1.0 / n) if weights is None else weights
    basis2 = maps[3].basis_N
    rho = 0.0
    for w, psi in zip(weights, psis):
        rho1 = np.outer(psi, psi.conj())
        rho = rho + w * np.kron(rho1, rho1)
    return project_state(rho, basis2)


def test_haar_unitary_is_unitary():
    rng = np.random.default_rng(0)
    U = haar_unitary(4, rng)
    assert np.linalg.norm(U @ U.conj().T - np.eye(4)) < 1e-12


def test_identity_unitary_fills_lowest_sites(sector, monkeypatch):
    import replica_cutoff.ensemble as ens

    monkeypatch.setattr(ens, "haar_unitary", lambda L, rng: np.eye(L, dtype=complex))
    rng = np.random.default_rng(1)
    psi = sample_gaussian_state(sector, rng)
    expected = fock_state(sector, "1100")
    assert np.linalg.norm(psi - expected) < 1e-14


def test_gaussian_state_number_and_wick(sector):
    rng = np.random.default_rng(3)
    n_ops = [number_operator(sector, x).matrix for x in range(1, 5)]
    for _ in range(4):
        psi = sample_gaussian_state(sector, rng)
        total = sum((psi.conj() @ n @ psi).real for n in n_ops)
        assert abs(total - sector.n_particles) < 1e-12
        # Wick's theorem for Slater determinants:
        # <n_x n_y> - <n_x><n_y> + |<c^dag_x c_y>|^2 = 0 for x != y
        for x in range(1, 5):
            for y in range(x + 1, 5):
                nx, ny = n_ops[x - 1], n_ops[y - 1]
                nn = (psi.conj() @ nx @ ny @ psi).real
                hop = psi.conj() @ transfer_operator(sector, x, y).matrix @ psi
                val = nn - (psi.conj() @ nx @ psi).real * (psi.conj() @ ny @ psi).real + abs(hop) ** 2
                assert abs(val) < 1e-10


def test_build_ensemble_deterministic(sector, maps):
    a = build_ensemble(sector, size=10, seed=42, maps=maps)
    b = build_ensemble(sector, size=10, seed=42, maps=maps)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.features[4], b.features[4])


def test_feature_dimensions_and_storage_logged(small_ensemble, maps):
    s2 = maps[3].s_n
    assert small_ensemble.features[3].shape == (120, s2)
    assert small_ensemble.features[4].shape == (120, s2)
    assert small_ensemble.features[2].shape == (120, s2)
    assert small_ensemble.storage_bytes() > 0


def test_features_match_direct_projection(sector, maps, small_ensemble):
    # recomputation oracle: project (psi psi)^{tensor M} and read coefficients
    for M in (3, 4):
        tmap = maps[M]
        for idx in (0, 17, 63):
            psi = small_ensemble.states[idx]
            phi = psi
            for _ in range(M - 1):
                phi = np.kron(phi, psi)
            r = project_state(np.outer(phi, phi.conj()), tmap.basis_M).r
            direct = tmap.coeffs_M(r)
            assert np.linalg.norm(direct - small_ensemble.features[M][idx]) < 1e-12


def test_snapshot_ensemble_features(sector, maps):
    H = build_hamiltonian(sector, V=0.4).matrix
    O_list = [build_measurement_operator(sector, x).matrix for x in range(1, 5)]
    batch = run_trajectories(fock_state(sector, "1010"), H, O_list, 0.5, T=0.2, dt=0.01, n_traj=6, seed=11)
    snap = build_ensemble(sector, size=6, seed=None, maps=maps, kind="trajectory-snapshot", states=batch.psis[:, -1, :])
    tmap = maps[3]
    psi = snap.states[2]
    phi = np.kron(np.kron(psi, psi), psi)
    r = project_state(np.outer(phi, phi.conj()), tmap.basis_M).r
    assert np.linalg.norm(tmap.coeffs_M(r) - snap.features[3][2]) < 1e-12


def test_nnls_matches_scipy_oracle():
    rng = np.random.default_rng(5)
    for _ in range(8):
        A = rng.normal(size=(12, 7))
        b = rng.normal(size=12)
        x_ref, r_ref = scipy_nnls(A, b)
        x, r = nnls_activeset(A, b)
        assert np.linalg.norm(x - x_ref) < 1e-8
        assert abs(r - r_ref) < 1e-8


def test_nnls_warm_start_consistent():
    rng = np.random.default_rng(6)
    A = rng.normal(size=(30, 50))
    b = rng.normal(size=30)
    x_cold, r_cold = nnls_activeset(A, b)
    x_warm, r_warm = nnls_activeset(A, b, warm_start=x_cold)
    assert np.linalg.norm(x_warm - x_cold) < 1e-9
    assert abs(r_cold - r_warm) < 1e-10


def test_fit_weights_planted_solution(sector, maps, small_ensemble):
    rng = np.random.default_rng(9)
    w_true = np.zeros(small_ensemble.size)
    support = rng.choice(small_ensemble.size, size=5, replace=False)
    w_true[support] = rng.random(5)
    w_true /= w_true.sum()
    target = _projected_r2(sector, maps, small_ensemble.states, None)
    # build the target exactly as the planted mixture
    rho = 0.0
    for i in support:
        psi = small_ensemble.states[i]
        rho1 = np.outer(psi, psi.conj())
        rho = rho + w_true[i] * np.kron(rho1, rho1)
    target = project_state(rho, maps[3].basis_N)
    fit = fit_weights(target, small_ensemble, M=3)
    assert fit.residual <= 1e-8
    assert abs(fit.w.sum() - 1.0) < 1e-10
    assert np.all(fit.w >= 0)


def test_fit_weights_single_member(sector, maps, small_ensemble):
    psi = small_ensemble.states[3]
    rho1 = np.outer(psi, psi.conj())
    target = project_state(np.kron(rho1, rho1), maps[3].basis_N)
    fit = fit_weights(target, small_ensemble, M=3)
    assert fit.residual <= 1e-10
    assert fit.w[3] > 0.99 or fit.residual < 1e-10  # exact member recovered (up to degeneracy)


def test_fit_weights_interacting_target_nonzero_residual(sector, maps, small_ensemble):
    H = build_hamiltonian(sector, V=0.4).matrix
    O_list = [build_measurement_operator(sector, x).matrix for x in range(1, 5)]
    batch = run_trajectories(fock_state(sector, "1010"), H, O_list, 0.5, T=1.0, dt=0.01, n_traj=40, seed=13)
    target = _projected_r2(sector, maps, batch.psis[:, -1, :])
    fit = fit_weights(target, small_ensemble, M=3)
    assert fit.residual > 1e-6  # free-fermion ensemble cannot match exactly
    # downstream transposition still restores the reduction exactly
    est = stabilized_estimate(target, small_ensemble, M=3, weights=fit.w)
    full = embed_state(ProjectedState(r=est.r, basis=maps[3].basis_M))
    red = partial_trace_replicas(ReplicaState(matrix=full, order=3, d=sector.dim), 1)
    assert np.linalg.norm(red.matrix - embed_state(target)) < 1e-10


def test_stabilized_estimate_psd_before_transpose(sector, maps, small_ensemble):
    H = build_hamiltonian(sector, V=0.4).matrix
    O_list = [build_measurement_operator(sector, x).matrix for x in range(1, 5)]
    batch = run_trajectories(fock_state(sector, "1010"), H, O_list, 0.5, T=0.6, dt=0.01, n_traj=30, seed=17)
    target = _projected_r2(sector, maps, batch.psis[:, -1, :])
    for M in (3, 4):
        est = stabilized_estimate(target, small_ensemble, M=M)
        assert est.provenance["min_eigenvalue_pre_transpose"] >= -1e-10
        full = embed_state(ProjectedState(r=est.r, basis=maps[M].basis_M))
        red = partial_trace_replicas(ReplicaState(matrix=full, order=M, d=sector.dim), M - 2)
        assert np.linalg.norm(red.matrix - embed_state(target)) < 1e-10


def test_enforce_psd_returns_unchanged_when_already_psd(sector, maps, small_ensemble):
    psi = small_ensemble.states[0]
    rho1 = np.outer(psi, psi.conj())
    target = project_state(np.kron(rho1, rho1), maps[3].basis_N)
    est = stabilized_estimate(target, small_ensemble, M=3)
    if est.min_eigenvalue >= -1e-8:
        out = enforce_psd_nullspace(est, maps[3])
        assert out.provenance["iterations"] == 0
        assert np.array_equal(out.r, est.r)


def test_enforce_psd_repairs_lift(sector, maps):
    rng = np.random.default_rng(19)
    psis = np.stack([sample_gaussian_state(sector, rng) for _ in range(40)])
    target = _projected_r2(sector, maps, psis)
    tmap = maps[3]
    est = lift(target, tmap)
    assert est.min_eigenvalue < -1e-8
    out = enforce_psd_nullspace(est, tmap, tol=1e-8, max_iter=800)
    assert out.provenance["min_eigenvalue"] >= -1e-8
    # leading block unchanged: reduction still exact
    c_before = tmap.Q_M.T @ _vec(est.r)
    c_after = tmap.Q_M.T @ _vec(out.r)
    assert np.linalg.norm(c_before - c_after) < 1e-10
    # the change lives in the partial-trace null space
    full_delta = _embed(out.r - est.r, tmap.basis_M)
    red = partial_trace_replicas(ReplicaState(matrix=full_delta, order=3, d=sector.dim), 1)
    assert np.linalg.norm(red.matrix) < 1e-8


def _vec(X):
    from replica_cutoff.transfer import vec_h

    return vec_h(X)


def _embed(r, basis):
    V = basis.vectors
    return V @ r @ V.conj().T


def test_save_load_roundtrip_and_sector_guard(tmp_path, sector, maps, small_ensemble):
    path = tmp_path / "ens.npz"
    save_ensemble(path, small_ensemble)
    back = load_ensemble(path, sector, maps)
    assert np.array_equal(back.states, small_ensemble.states)
    assert np.allclose(back.features[4], small_ensemble.features[4])
    other = build_sector(4, 1)
    with pytest.raises(ValueError):
        load_ensemble(path, other, maps)
