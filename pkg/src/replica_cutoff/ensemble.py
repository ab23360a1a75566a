"""Pre-calculated pure-state ensembles and PSD stabilization of lifts.

A fixed stochastic ensemble of sector pure states (random Slater determinants
by default) is prepared once; for each member the coefficients of
(|psi><psi|)^{tensor M} in the orthonormalized projected-operator basis of a
TransferMap are precomputed.  Because those operators are products of
single-copy basis elements, each feature is just a product of single-copy
expectation values, so building features is cheap even for thousands of
states.

At run time, nonnegative weights summing to one are fitted so the weighted
ensemble reproduces the lower-replica coefficients of the current state
(active-set NNLS with the sum constraint as a heavily weighted extra row).
The resulting convex mixture of symmetric product states is PSD by
construction; transposing the exact lower-replica data back onto it restores
the partial-trace property bit-exactly while only moving the estimate inside
the trace null space.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial
from pathlib import Path

import numpy as np

from .symspace import ProjectedState
from .transfer import LiftedEstimate, TransferMap, hermitian_basis, transpose_exact, vec_h

__all__ = [
    "sample_gaussian_state",
    "haar_unitary",
    "PureEnsemble",
    "build_ensemble",
    "WeightFit",
    "nnls_activeset",
    "fit_weights",
    "stabilized_estimate",
    "enforce_psd_nullspace",
    "save_ensemble",
    "load_ensemble",
]

ENSEMBLE_FORMAT_VERSION = 1
SUM_CONSTRAINT_WEIGHT = 1e6


def haar_unitary(L: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed unitary via QR of a complex Ginibre matrix."""
    Z = (rng.normal(size=(L, L)) + 1j * rng.normal(size=(L, L))) / np.sqrt(2)
    Q, R = np.linalg.qr(Z)
    phases = np.diag(R) / np.abs(np.diag(R))
    return Q * phases


def sample_gaussian_state(sector, rng: np.random.Generator) -> np.ndarray:
    """Random Slater determinant expanded into sector Fock amplitudes.

    Occupies the first n_particles columns of a Haar-random single-particle
    unitary; the amplitude on a Fock state is the determinant of the
    corresponding row submatrix.
    """
    U = haar_unitary(sector.L, rng)
    orbitals = U[:, : sector.n_particles]
    psi = np.empty(sector.dim, dtype=complex)
    for a, bits in enumerate(sector.states):
        rows = [x for x in range(sector.L) if (bits >> x) & 1]
        psi[a] = np.linalg.det(orbitals[rows, :])
    return psi / np.linalg.norm(psi)


def _symmetric_product_vector(psis: np.ndarray, basis_sym) -> np.ndarray:
    """<V_m | psi^{tensor M}> for a batch of states, via the closed form
    sqrt(M!/prod n_mu!) * prod_mu psi_mu^{n_mu}."""
    occ = basis_sym.occupations  # (D, d)
    M = basis_sym.N
    coef = np.sqrt(
        np.array([factorial(M) / np.prod([factorial(int(c)) for c in row]) for row in occ])
    )
    # prod over modes of psi_mu^{n_mu}, vectorized over states and columns
    powers = psis[:, None, :] ** occ[None, :, :]
    return coef[None, :] * np.prod(powers, axis=2)


def _single_copy_expectations(psis: np.ndarray, d: int) -> np.ndarray:
    """m[s, a] = <psi_s| h_a |psi_s> for the Hermitian single-copy basis."""
    H_stack = np.stack(hermitian_basis(d))
    return np.einsum("sd,ade,se->sa", psis.conj(), H_stack, psis).real


def _coefficient_features(e_products: np.ndarray, tmap: TransferMap, order: int) -> np.ndarray:
    """Orthonormal-basis coefficients at ``order`` from bare expectation products."""
    from scipy.linalg import solve_triangular

    if order == tmap.M:
        R = tmap.R_M
        scales = tmap.expectation_scales()
    elif order == tmap.N:
        R = tmap.R_N
        scales = np.array([tmap.d ** (-(tmap.N - len(lab)) / 2) for lab in tmap.labels])
    else:
        raise ValueError(f"map covers orders {tmap.N} and {tmap.M}, not {order}")
    return solve_triangular(R.T, (e_products * scales[None, :]).T, lower=True).T


@dataclass
class PureEnsemble:
    """Weighted-mixture candidate states with precomputed replica features."""

    states: np.ndarray
    kind: str
    seed: int | None
    L: int
    n_particles: int
    d: int
    maps: dict = field(repr=False, default_factory=dict)
    features: dict = field(repr=False, default_factory=dict)
    sym_vectors: dict = field(repr=False, default_factory=dict)

    @property
    def size(self) -> int:
        return self.states.shape[0]

    def storage_bytes(self) -> int:
        total = self.states.nbytes
        total += sum(f.nbytes for f in self.features.values())
        total += sum(v.nbytes for v in self.sym_vectors.values())
        return total


def _compute_features(states: np.ndarray, maps: dict) -> tuple[dict, dict]:
    d = states.shape[1]
    e_cache: dict[tuple, np.ndarray] = {}
    m_single = _single_copy_expectations(states, d)

    features: dict[int, np.ndarray] = {}
    sym_vectors: dict[int, np.ndarray] = {}
    for M, tmap in sorted(maps.items()):
        key = tmap.labels
        if key not in e_cache:
            e = np.empty((states.shape[0], len(key)))
            for j, lab in enumerate(key):
                col = np.ones(states.shape[0])
                for a in lab:
                    col = col * m_single[:, a]
                e[:, j] = col
            e_cache[key] = e
        features[M] = _coefficient_features(e_cache[key], tmap, M)
        sym_vectors[M] = _symmetric_product_vector(states, tmap.basis_M)
        if tmap.N not in features:
            features[tmap.N] = _coefficient_features(e_cache[key], tmap, tmap.N)
            sym_vectors[tmap.N] = _symmetric_product_vector(states, tmap.basis_N)
    return features, sym_vectors


def build_ensemble(
    sector,
    size: int,
    seed: int | None,
    maps: dict,
    kind: str = "gaussian",
    states: np.ndarray | None = None,
) -> PureEnsemble:
    """Draw (or wrap) an ensemble and precompute its replica features.

    ``maps`` is {target_order: TransferMap}; features are stored for every
    target order plus the common source order.  kind="gaussian" samples
    random Slater determinants; "trajectory-snapshot" and "custom" wrap the
    provided states.
    """
    if kind == "gaussian":
        if size < 1:
            raise ValueError("need size >= 1")
        rng = np.random.default_rng(seed)
        states = np.stack([sample_gaussian_state(sector, rng) for _ in range(size)])
    else:
        if states is None:
            raise ValueError(f"kind={kind!r} requires explicit states")
        states = np.asarray(states, dtype=complex)
        norms = np.linalg.norm(states, axis=1)
        states = states / norms[:, None]
    if states.shape[1] != sector.dim:
        raise ValueError("states do not live in the given sector")

    est_bytes = sum(states.shape[0] * tm.basis_M.dim * 24 for tm in maps.values())
    if est_bytes > 2_000_000_000:
        raise MemoryError(f"feature storage estimate {est_bytes/1e9:.1f} GB exceeds budget")

    features, sym_vectors = _compute_features(states, maps)
    return PureEnsemble(
        states=states,
        kind=kind,
        seed=seed,
        L=sector.L,
        n_particles=sector.n_particles,
        d=sector.dim,
        maps=dict(maps),
        features=features,
        sym_vectors=sym_vectors,
    )


@dataclass
class WeightFit:
    w: np.ndarray
    residual: float
    active_set_size: int
    converged: bool = True

    def active_indices(self) -> np.ndarray:
        return np.nonzero(self.w)[0]


def nnls_activeset(
    A: np.ndarray,
    b: np.ndarray,
    max_iter: int | None = None,
    warm_start: np.ndarray | None = None,
    tol: float = 1e-11,
) -> tuple[np.ndarray, float]:
    """Lawson-Hanson nonnegative least squares with optional warm start.

    Deterministic given its inputs; the warm start is a passive-set guess
    (indices with positive weight) that is repaired before the main loop.
    """
    m, n = A.shape
    if max_iter is None:
        max_iter = 6 * max(m, n)
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)

    def solve_passive():
        cols = np.nonzero(passive)[0]
        z = np.zeros(n)
        if cols.size:
            sol, *_ = np.linalg.lstsq(A[:, cols], b, rcond=None)
            z[cols] = sol
        return z

    if warm_start is not None:
        passive[np.nonzero(warm_start > 0)[0]] = True
        z = solve_passive()
        while np.any(passive & (z <= 0)):
            passive &= z > 0
            z = solve_passive()
        x = z

    for _ in range(max_iter):
        resid = b - A @ x
        grad = A.T @ resid
        grad[passive] = -np.inf
        j = int(np.argmax(grad))
        # scale the optimality test by the current residual so a heavily
        # weighted constraint row cannot swamp the threshold
        if grad[j] <= tol * (1.0 + np.linalg.norm(resid)):
            break
        passive[j] = True
        z = solve_passive()
        while np.any(passive & (z <= 0)):
            neg = passive & (z <= 0)
            diff = x[neg] - z[neg]
            ratios = np.where(diff > 0, x[neg] / np.where(diff > 0, diff, 1.0), 0.0)
            alpha = np.min(ratios)
            x = x + alpha * (z - x)
            passive &= x > 1e-15
            z = solve_passive()
        x = z
    return x, float(np.linalg.norm(b - A @ x))


def _solve_sum_active(F: np.ndarray, c: np.ndarray, lam: float, cols: np.ndarray) -> np.ndarray:
    """Least squares on the augmented system restricted to the given columns."""
    A = np.vstack([F[cols].T, lam * np.ones((1, cols.size))])
    b = np.concatenate([c, [lam]])
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    return sol


def _nnls_sum_constrained(
    F: np.ndarray,
    c: np.ndarray,
    lam: float = SUM_CONSTRAINT_WEIGHT,
    warm_start: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 400,
) -> tuple[np.ndarray, int]:
    """Active-set NNLS for min ||F^T w - c||^2 + lam^2 (sum w - 1)^2, w >= 0.

    The gradient splits into a physical part phi = F (c - F^T w) and a
    constraint part lam^2 (1 - sum w) that is identical for every candidate,
    so selection and the optimality test compare phi against the passive-set
    stationarity level; this keeps the heavily weighted constraint row from
    swamping the physical tolerance.  Solves happen on the (small) active
    column set only, which with warm starting makes per-step refits cheap.
    """
    n = F.shape[0]
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)

    def feasible_solve(x_cur):
        nonlocal passive
        z_full = np.zeros(n)
        while True:
            cols = np.nonzero(passive)[0]
            if cols.size == 0:
                return np.zeros(n)
            z = _solve_sum_active(F, c, lam, cols)
            if np.all(z > 0):
                z_full[:] = 0.0
                z_full[cols] = z
                return z_full
            z_all = np.zeros(n)
            z_all[cols] = z
            neg = passive & (z_all <= 0)
            diff = x_cur[neg] - z_all[neg]
            ratios = np.where(diff > 0, x_cur[neg] / np.where(diff > 0, diff, 1.0), 0.0)
            alpha = float(np.min(ratios))
            x_cur = x_cur + alpha * (z_all - x_cur)
            passive &= x_cur > 1e-14

    if warm_start is not None and np.any(warm_start > 0):
        passive[warm_start > 0] = True
        x = feasible_solve(np.clip(warm_start, 0.0, None))

    scale = 1.0 + np.linalg.norm(c)
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        phi = F @ (c - F.T @ x)
        if passive.any():
            level = float(np.max(phi[passive]))
        else:
            level = -lam * lam * (1.0 - float(x.sum()))
        cand = np.where(~passive, phi, -np.inf)
        j = int(np.argmax(cand))
        if not np.isfinite(cand[j]) or cand[j] <= level + tol * scale:
            break
        passive[j] = True
        x = feasible_solve(x)
        if not passive[j] and np.count_nonzero(passive) == 0:
            break
    return x, iterations


def fit_weights(
    target: ProjectedState | np.ndarray,
    ensemble: PureEnsemble,
    M: int,
    warm_start: np.ndarray | None = None,
) -> WeightFit:
    """Nonnegative, sum-one weights matching the lower-replica coefficients.

    Solves min_w || F_M^T w - c_target ||_2 with w >= 0 and sum w = 1, the
    constraint carried by an augmentation row of weight 1e6; the returned
    weights are exactly renormalized afterwards.
    """
    tmap = ensemble.maps[M]
    r = target.r if isinstance(target, ProjectedState) else np.asarray(target)
    c_target = tmap.lift_coeffs(tmap.coeffs_N(r))
    F = ensemble.features[M]
    w, _ = _nnls_sum_constrained(F, c_target, warm_start=warm_start)
    total = w.sum()
    converged = total > 0
    if converged:
        w = w / total
    residual = float(np.linalg.norm(F.T @ w - c_target))
    return WeightFit(w=w, residual=residual, active_set_size=int(np.count_nonzero(w)), converged=converged)


def stabilized_estimate(
    rho_R2: ProjectedState | np.ndarray,
    ensemble: PureEnsemble,
    M: int,
    weights: np.ndarray | None = None,
) -> LiftedEstimate:
    """PSD ensemble mixture at order M with the exact order-N data transposed on.

    The convex mixture of |psi_i^{tensor M}> projectors is PSD by
    construction; transpose_exact then restores the partial-trace property,
    which may push the smallest eigenvalue weakly negative (reported in the
    provenance, not treated as an error).
    """
    tmap = ensemble.maps[M]
    r = rho_R2.r if isinstance(rho_R2, ProjectedState) else np.asarray(rho_R2)
    if weights is None:
        fit = fit_weights(r, ensemble, M)
        weights = fit.w
        fit_info = {"fit_residual": fit.residual, "active_set_size": fit.active_set_size}
    else:
        fit_info = {"fit_residual": None, "active_set_size": int(np.count_nonzero(weights))}

    V = ensemble.sym_vectors[M]
    active = np.nonzero(weights)[0]
    Va = V[active]
    r_ens = (Va.conj().T * weights[active]) @ Va
    pre_min = float(np.linalg.eigvalsh(r_ens)[0])
    est = transpose_exact(r_ens, r, tmap)
    est.provenance.update(fit_info)
    est.provenance["min_eigenvalue_pre_transpose"] = pre_min
    est.provenance["method"] = "ensemble"
    est.provenance["weights"] = weights
    return est


def enforce_psd_nullspace(
    estimate: LiftedEstimate | np.ndarray,
    tmap: TransferMap,
    tol: float = 1e-8,
    max_iter: int = 500,
    carry: dict | None = None,
) -> LiftedEstimate:
    """Alternate PSD-cone and exact-data projections until feasible.

    Each sweep clips negative eigenvalues and restores the leading
    orthonormal coefficients; a Douglas-Rachford running correction couples
    the two projections, which converges orders of magnitude faster than the
    bare alternation at these dimensions.  Iteration stops once the smallest
    eigenvalue clears -tol (or at max_iter, flagged in the provenance); the
    output always ends on the affine projection, so the leading coefficients
    are exact.

    ``carry`` (a mutable dict) persists the running correction across calls;
    warm-started this way, a slowly drifting sequence of estimates is
    repaired in a few sweeps each.
    """
    from .transfer import unvec_h

    r = estimate.r if isinstance(estimate, LiftedEstimate) else np.asarray(estimate)
    D = tmap.basis_M.dim
    c_lead = tmap.Q_M.T @ vec_h(r)

    def project_affine(X):
        v = vec_h(X)
        return unvec_h(v + tmap.Q_M @ (c_lead - tmap.Q_M.T @ v), D)

    # Douglas-Rachford pass; convergence is read off the clip spectrum (one
    # eigendecomposition per iteration), the affine projection always runs
    # last so the leading coefficients of the output are exact.
    current = r.copy()
    correction = None if carry is None else carry.get("correction")
    warm = correction is not None
    correction = np.zeros_like(current) if correction is None else correction.copy()
    iterations = 0
    converged = not warm and bool(np.linalg.eigvalsh(current)[0] >= -tol)
    while not converged and iterations < max_iter:
        w, V = np.linalg.eigh(current + correction)
        if w[0] >= -tol and (iterations > 0 or warm):
            converged = True
            break
        neg = w < 0
        Vn = V[:, neg]
        clipped = (current + correction) - (Vn * w[neg]) @ Vn.conj().T
        current = project_affine(clipped - correction)
        correction = correction + current - clipped
        iterations += 1
    if iterations > 0 or warm:
        current = project_affine(current)
    if carry is not None:
        carry["correction"] = correction
    out = LiftedEstimate(r=current, N=tmap.N, M=tmap.M)
    out.provenance = {
        "method": "psd_nullspace",
        "iterations": iterations,
        "converged": converged or bool(np.linalg.eigvalsh(current)[0] >= -tol),
        "min_eigenvalue": float(np.linalg.eigvalsh(current)[0]),
    }
    return out


def save_ensemble(path, ensemble: PureEnsemble) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        path,
        format_version=ENSEMBLE_FORMAT_VERSION,
        L=ensemble.L,
        n_particles=ensemble.n_particles,
        kind=ensemble.kind,
        size=ensemble.size,
        seed=-1 if ensemble.seed is None else ensemble.seed,
        states=ensemble.states,
    )


def load_ensemble(path, sector, maps: dict) -> PureEnsemble:
    """Load amplitudes and recompute features; refuses sector mismatches."""
    data = np.load(Path(path))
    if int(data["format_version"]) != ENSEMBLE_FORMAT_VERSION:
        raise ValueError(f"unsupported ensemble format version {int(data['format_version'])}")
    if int(data["L"]) != sector.L or int(data["n_particles"]) != sector.n_particles:
        raise ValueError(
            f"ensemble sector (L={int(data['L'])}, n={int(data['n_particles'])}) does not match "
            f"(L={sector.L}, n={sector.n_particles})"
        )
    seed = int(data["seed"])
    features, sym_vectors = _compute_features(data["states"], maps)
    return PureEnsemble(
        states=data["states"],
        kind=str(data["kind"]),
        seed=None if seed == -1 else seed,
        L=sector.L,
        n_particles=sector.n_particles,
        d=sector.dim,
        maps=dict(maps),
        features=features,
        sym_vectors=sym_vectors,
    )
