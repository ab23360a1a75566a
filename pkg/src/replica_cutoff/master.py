"""Two-replica master equation with trace-preserving closures.

The generator acting on rho^{R_2} is

    d rho = L1(rho) + L2(rho)
          + gamma sum_i {O_i^(1), {O_i^(2), rho}}
          - 2 gamma sum_i {O_i^(1) + O_i^(2), X_i}
          + 4 gamma Y,

where X_i and Y are the 2-replica moments carrying third and fourth
replica-order information.  Closures:

* exact/ensemble: X_i = Tr_(3)[O_i^(3) rho_E^{R_3}],
  Y = sum_i Tr_(3,4)[O_i^(3) O_i^(4) rho_E^{R_4}].  When the two estimates
  are permutation symmetric, chain consistent (Tr_(4) rho_E^{R_4} =
  rho_E^{R_3}) and reduce exactly to rho^{R_2}, the generator is traceless
  and its single-replica reduction is exactly the GKSL generator.
* mean field: X_i -> <O_i> rho, Y -> sum_i <O_i^(1) O_i^(2)> rho, plus the
  compensation -8 gamma Cbar rho with
  Cbar = sum_i (<O_i^(1) O_i^(2)> - <O_i>^2), which restores trace
  preservation (partial traces are not preserved, deliberately).

The ensemble closure fits one weight vector per step and reuses it at both
orders 3 and 4; together with the per-order transposition of the exact
rho^{R_2} data this makes the pair chain consistent to machine precision,
which is what keeps the reduction residual at the 1e-10 level over thousands
of steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import DensityTimeSeries, lindblad_rhs, trajectory_rng, _sse_update
from .ensemble import PureEnsemble, build_ensemble, enforce_psd_nullspace, fit_weights
from .fock import build_hamiltonian, build_measurement_operator
from .symspace import ReplicaState, build_symmetric_basis, lowering_maps
from .transfer import TransferMap, build_transfer_map, transpose_exact

__all__ = [
    "ClosureMode",
    "ClosureTerms",
    "closure_terms_exact",
    "closure_terms_meanfield",
    "replica_rhs",
    "evolve_replica",
]


@dataclass
class ClosureMode:
    """Which closure feeds the 2-replica master equation.

    With ``psd_repair`` on (default), the transposed order-4 estimate is
    pushed back toward the PSD cone inside the partial-trace null space each
    step (warm-started from the previous step), and the order-3 estimate is
    its exact single-replica reduction.  That keeps the estimate pair chain
    consistent, which the generator-level reduction identity needs, while
    removing the large negative eigenvalues that otherwise distort the
    higher-moment closure terms during strongly non-Gaussian transients.
    """

    tag: str  # "meanfield" | "ensemble" | "trajectory-hybrid"
    ensemble: PureEnsemble | None = None
    n_traj: int = 100
    seed: int | None = None
    refit_stride: int = 1
    fit_order: int = 4
    psd_repair: bool = True
    psd_tol: float = 1e-7
    psd_max_iter: int = 20

    def __post_init__(self):
        if self.tag not in ("meanfield", "ensemble", "trajectory-hybrid"):
            raise ValueError(f"unknown closure tag {self.tag!r}")
        if self.tag == "ensemble" and self.ensemble is None:
            raise ValueError("ensemble closure needs a PureEnsemble")


@dataclass
class ClosureTerms:
    """X_i and Y moments entering the master equation (2-replica matrices)."""

    X: list
    Y: np.ndarray
    cbar: float | None = None  # set only by the mean-field closure


def _trace_out_last(rho: np.ndarray, d: int, n: int, k: int = 1) -> np.ndarray:
    out = rho
    for j in range(k):
        rest = d ** (n - j - 1)
        out = np.einsum("aibi->ab", out.reshape(rest, d, rest, d))
    return out


def closure_terms_exact(rhoE3, rhoE4, O_list, tol: float = 1e-8) -> ClosureTerms:
    """Closure moments from explicit order-3 and order-4 replica states.

    Validates that both inputs are permutation symmetric and reduce to the
    same 2-replica state before contracting.
    """
    rho3 = rhoE3.matrix if isinstance(rhoE3, ReplicaState) else np.asarray(rhoE3)
    rho4 = rhoE4.matrix if isinstance(rhoE4, ReplicaState) else np.asarray(rhoE4)
    O_list = [O.matrix if hasattr(O, "matrix") else np.asarray(O) for O in O_list]
    d = O_list[0].shape[0]

    swap3 = rho3.reshape((d,) * 6).transpose(1, 0, 2, 4, 3, 5).reshape(d**3, d**3)
    if np.linalg.norm(swap3 - rho3) > tol * max(1.0, np.linalg.norm(rho3)):
        raise ValueError("rho_E^{R_3} is not permutation symmetric within tolerance")
    red3 = _trace_out_last(rho3, d, 3, 1)
    red4 = _trace_out_last(rho4, d, 4, 2)
    if np.linalg.norm(red3 - red4) > tol:
        raise ValueError(
            f"order-3 and order-4 estimates reduce inconsistently "
            f"(|Tr_3 rho3 - Tr_34 rho4| = {np.linalg.norm(red3 - red4):.3e})"
        )

    T3 = rho3.reshape((d,) * 6)
    X = [np.einsum("ce,abefgc->abfg", O, T3).reshape(d * d, d * d) for O in O_list]
    T4 = rho4.reshape((d,) * 8)
    Y = np.zeros((d * d, d * d), dtype=complex)
    for O in O_list:
        Y += np.einsum("ce,dh,abehfgcd->abfg", O, O, T4).reshape(d * d, d * d)
    return ClosureTerms(X=X, Y=Y, cbar=None)


def closure_terms_meanfield(rho_R2: np.ndarray, O_list) -> ClosureTerms:
    """Mean-field decoupled moments built from rho^{R_2} alone."""
    rho = np.asarray(rho_R2)
    O_list = [O.matrix if hasattr(O, "matrix") else np.asarray(O) for O in O_list]
    d = O_list[0].shape[0]
    rho1 = _trace_out_last(rho, d, 2, 1)
    X = []
    Y = np.zeros_like(rho)
    cbar = 0.0
    for O in O_list:
        expect = np.trace(O @ rho1).real
        both = np.trace(np.kron(O, O) @ rho).real
        X.append(expect * rho)
        Y = Y + both * rho
        cbar += both - expect**2
    return ClosureTerms(X=X, Y=Y, cbar=float(cbar))


def replica_rhs(rho_R2: np.ndarray, H, O_list, gamma: float, terms: ClosureTerms) -> np.ndarray:
    """Right-hand side of the 2-replica master equation for given moments.

    For the mean-field closure the -8 gamma Cbar rho compensation makes the
    update trace preserving (the coefficient is fixed by the trace identity,
    twice the naive reading of the decoupled equation).
    """
    H = H.matrix if hasattr(H, "matrix") else np.asarray(H)
    O_list = [O.matrix if hasattr(O, "matrix") else np.asarray(O) for O in O_list]
    d = H.shape[0]
    rho = np.asarray(rho_R2)
    eye = np.eye(d)

    H_sum = np.kron(H, eye) + np.kron(eye, H)
    out = -1j * (H_sum @ rho - rho @ H_sum)
    for O, X in zip(O_list, terms.X):
        S = np.kron(O, eye) + np.kron(eye, O)
        K = np.kron(O, O)
        out += gamma * (S @ rho @ S + K @ rho + rho @ K - 2.0 * rho)
        out -= 2.0 * gamma * (S @ X + X @ S)
    out += 4.0 * gamma * terms.Y
    if terms.cbar is not None:
        out -= 8.0 * gamma * terms.cbar * rho
    return out


@dataclass
class _ClosureEngine:
    """Per-run precomputed machinery for the in-subspace exact closure."""

    sector: object
    maps: dict
    O_list: list
    V2: np.ndarray = field(init=False)
    low3: list = field(init=False)
    pair_maps: np.ndarray = field(init=False)
    o_diag: np.ndarray = field(init=False)
    G: np.ndarray = field(init=False)

    def __post_init__(self):
        d = self.sector.dim
        self.V2 = self.maps[3].basis_N.vectors
        self.low3 = lowering_maps(d, 3)
        self.low4 = lowering_maps(d, 4)
        self.pair_maps = np.array([[a3 @ a4 for a4 in self.low4] for a3 in self.low3])
        self.o_diag = np.stack([np.real(np.diag(O)) for O in self.O_list])
        self.G = self.o_diag.T @ self.o_diag

    def reduce4(self, rE4: np.ndarray) -> np.ndarray:
        """Exact single-replica reduction of an order-4 projected estimate."""
        return sum(A @ rE4 @ A.T for A in self.low4) / 4.0

    def terms(self, rE3: np.ndarray, rE4: np.ndarray) -> ClosureTerms:
        """X_i and Y contracted inside the symmetric subspaces.

        Single-slot contraction of an embedded symmetric operator is
        (1/M) sum_mu A_mu r A_mu^dag; with diagonal O the weighting by
        O-eigenvalues rides along the mode index mu.
        """
        d = self.sector.dim
        E = [A @ rE3 @ A.T for A in self.low3]
        X = []
        for signs in self.o_diag:
            x = sum(signs[mu] * E[mu] for mu in range(d)) / 3.0
            X.append(self.V2 @ x @ self.V2.conj().T)
        Dm = [[self.pair_maps[mu, nu] @ rE4 @ self.pair_maps[mu, nu].conj().T for nu in range(d)] for mu in range(d)]
        y = np.zeros_like(Dm[0][0])
        for mu in range(d):
            for nu in range(d):
                y = y + self.G[mu, nu] * Dm[mu][nu]
        y = y / 12.0
        Y = self.V2 @ y @ self.V2.conj().T
        return ClosureTerms(X=X, Y=Y, cbar=None)


def _hermitize_project(rho: np.ndarray, P2: np.ndarray) -> np.ndarray:
    rho = 0.5 * (rho + rho.conj().T)
    rho = P2 @ rho @ P2
    return rho / np.trace(rho).real


def evolve_replica(
    rho0_R2: np.ndarray,
    mode: ClosureMode,
    sector,
    gamma: float,
    V: float,
    T: float,
    dt: float,
    maps: dict | None = None,
    boundary: str = "open",
    method: str = "euler",
    stride: int = 1,
    check_stride: int = 100,
    abort_threshold: float | None = None,
) -> DensityTimeSeries:
    """Integrate the closed 2-replica master equation.

    A single-copy Lindblad state is co-evolved with the identical stepper;
    the recorded ``reduction_residual`` is the Frobenius distance between it
    and the partial trace of rho^{R_2}.  Ensemble and trajectory-hybrid
    closures rebuild the stabilized order-3/4 estimates every step (weights
    refitted every ``mode.refit_stride`` steps, warm-started); the mean-field
    closure is closed form.  Per step the state is re-hermitized, projected
    back onto the symmetric subspace, and trace renormalized.

    meta arrays: min_eig3/min_eig4 (post-transposition smallest eigenvalues),
    fit_residual, reduction_residual, all sampled at the output stride.
    """
    if method not in ("euler", "rk4"):
        raise ValueError(f"unknown method {method!r}")
    d = sector.dim
    H = build_hamiltonian(sector, V=V, boundary=boundary).matrix
    O_list = [build_measurement_operator(sector, x).matrix for x in range(1, sector.L + 1)]

    needs_maps = mode.tag in ("ensemble", "trajectory-hybrid")
    if needs_maps:
        if maps is None:
            maps = {3: build_transfer_map(d, 2, 3), 4: build_transfer_map(d, 2, 4)}
        engine = _ClosureEngine(sector=sector, maps=maps, O_list=O_list)
        basis2 = maps[3].basis_N
    else:
        engine = None
        basis2 = build_symmetric_basis(d, 2)
    V2 = basis2.vectors
    P2 = V2 @ V2.conj().T

    rho = np.asarray(rho0_R2, dtype=complex).copy()
    if np.linalg.norm(rho - rho.conj().T) > 1e-10:
        raise ValueError("initial replica state is not Hermitian")
    rho = _hermitize_project(rho, P2)
    rho_lind = _trace_out_last(rho, d, 2, 1)

    n_steps = int(round(T / dt))
    weights = None
    hybrid_noise = None
    hybrid_psis = None
    if mode.tag == "trajectory-hybrid":
        evals, evecs = np.linalg.eigh(_trace_out_last(rho, d, 2, 1))
        psi0 = evecs[:, -1]  # dominant pure component as the trajectory seed
        hybrid_psis = np.tile(psi0, (mode.n_traj, 1))
        scale = np.sqrt(gamma * dt)
        hybrid_noise = np.empty((mode.n_traj, n_steps, sector.L))
        seed = 0 if mode.seed is None else mode.seed
        for c in range(mode.n_traj):
            hybrid_noise[c] = trajectory_rng(seed, c).normal(0.0, scale, size=(n_steps, sector.L))

    times = [0.0]
    states = [rho.copy()]
    diag: dict[str, list] = {"min_eig3": [], "min_eig4": [], "fit_residual": [], "reduction_residual": []}

    def snapshot_ensemble() -> PureEnsemble:
        return build_ensemble(sector, size=hybrid_psis.shape[0], seed=None, maps=maps,
                              kind="trajectory-snapshot", states=hybrid_psis)

    def closure_for(rho_now: np.ndarray, ens: PureEnsemble | None, refit: bool, carry: bool = False):
        nonlocal weights
        if mode.tag == "meanfield":
            return closure_terms_meanfield(rho_now, O_list), np.nan, np.nan, np.nan
        r2 = V2.conj().T @ rho_now @ V2
        fit_resid = np.nan
        if refit or weights is None:
            fit = fit_weights(r2, ens, M=mode.fit_order, warm_start=weights)
            weights = fit.w
            fit_resid = fit.residual
        active = np.nonzero(weights)[0]
        wa = weights[active]
        v4 = ens.sym_vectors[4][active]
        r4_ens = (v4.conj().T * wa) @ v4
        rE4 = transpose_exact(r4_ens, r2, maps[4]).r
        if mode.psd_repair:
            # repaired cold every step: the PSD mixture stays the anchor, so
            # no null-space content is dragged along between steps
            rE4 = enforce_psd_nullspace(rE4, maps[4], tol=mode.psd_tol, max_iter=mode.psd_max_iter).r
        else:
            v3 = ens.sym_vectors[3][active]
            r3_ens = (v3.conj().T * wa) @ v3
        # the reduction of the order-4 estimate keeps the pair chain consistent
        rE3 = engine.reduce4(rE4) if mode.psd_repair else transpose_exact(r3_ens, r2, maps[3]).r
        terms = engine.terms(rE3, rE4)
        return terms, fit_resid, float(np.linalg.eigvalsh(rE3)[0]), float(np.linalg.eigvalsh(rE4)[0])

    ens = mode.ensemble if mode.tag == "ensemble" else None
    last = {"fit_resid": np.nan, "me3": np.nan, "me4": np.nan}
    for k in range(n_steps):
        if mode.tag == "trajectory-hybrid":
            ens = snapshot_ensemble()
        terms, fit_resid, me3, me4 = closure_for(rho, ens, refit=(k % mode.refit_stride == 0), carry=True)
        if not np.isnan(fit_resid):
            last["fit_resid"] = fit_resid
        if not np.isnan(me3):
            last["me3"], last["me4"] = me3, me4
        if method == "euler":
            rho = rho + dt * replica_rhs(rho, H, O_list, gamma, terms)
            rho_lind = rho_lind + dt * lindblad_rhs(rho_lind, H, O_list, gamma)
        else:
            k1 = replica_rhs(rho, H, O_list, gamma, terms)

            def stage(r):
                return closure_for(r, ens, refit=False)[0]

            k2 = replica_rhs(rho + 0.5 * dt * k1, H, O_list, gamma, stage(rho + 0.5 * dt * k1))
            k3 = replica_rhs(rho + 0.5 * dt * k2, H, O_list, gamma, stage(rho + 0.5 * dt * k2))
            k4 = replica_rhs(rho + dt * k3, H, O_list, gamma, stage(rho + dt * k3))
            rho = rho + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            l1 = lindblad_rhs(rho_lind, H, O_list, gamma)
            l2 = lindblad_rhs(rho_lind + 0.5 * dt * l1, H, O_list, gamma)
            l3 = lindblad_rhs(rho_lind + 0.5 * dt * l2, H, O_list, gamma)
            l4 = lindblad_rhs(rho_lind + dt * l3, H, O_list, gamma)
            rho_lind = rho_lind + (dt / 6.0) * (l1 + 2 * l2 + 2 * l3 + l4)
        rho = _hermitize_project(rho, P2)
        rho_lind = 0.5 * (rho_lind + rho_lind.conj().T)
        rho_lind /= np.trace(rho_lind).real

        if mode.tag == "trajectory-hybrid":
            hybrid_psis = _sse_update(hybrid_psis, H, np.stack(O_list), gamma, dt, hybrid_noise[:, k, :])

        resid = np.linalg.norm(_trace_out_last(rho, d, 2, 1) - rho_lind)
        if abort_threshold is not None and (k + 1) % check_stride == 0 and resid > abort_threshold:
            raise RuntimeError(
                f"reduction consistency failed at t={(k + 1) * dt:.3f}: residual {resid:.3e}"
            )
        if (k + 1) % stride == 0 or k == n_steps - 1:
            times.append((k + 1) * dt)
            states.append(rho.copy())
            diag["fit_residual"].append(last["fit_resid"])
            diag["min_eig3"].append(last["me3"])
            diag["min_eig4"].append(last["me4"])
            diag["reduction_residual"].append(resid)

    meta = {
        "mode": f"replica-{mode.tag}",
        "gamma": gamma,
        "V": V,
        "dt": dt,
        "T": T,
        "method": method,
        "boundary": boundary,
        "min_eig3": np.array(diag["min_eig3"]),
        "min_eig4": np.array(diag["min_eig4"]),
        "fit_residual": np.array(diag["fit_residual"]),
        "reduction_residual": np.array(diag["reduction_residual"]),
        "lindblad_reference": rho_lind,
    }
    return DensityTimeSeries(times=np.array(times), states=np.array(states), meta=meta)
