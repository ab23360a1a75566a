"""Tomographic information transfer between replica orders.

A graded pool of Hermitian product operators (identity-padded, unit
Hilbert-Schmidt norm, ordered by replica support size) is projected onto the
permutation-symmetric subspace at order N.  A greedy rank-revealing pass
selects an independent subset; QR-orthonormalizing its projections at orders
N and M yields the overlap matrices C_N, C_M whose leading blocks drive the
lift

    c_M = [C_M^{S_N}]^{-1} C_N c_N,

with all coefficients beyond the leading S_N block set to zero.  Because
operators supported on at most N replicas are Hilbert-Schmidt orthogonal to
the kernel of the (M - N)-fold partial trace, the orthogonal complement of
the leading block is exactly that kernel: overwriting the leading
coefficients of any order-M estimate (``transpose_exact``) restores the
reduction to the order-N state, and null-block perturbations never disturb
it.

Hermitian matrices are handled through a real isometric vectorization so
every orthonormalized basis element is itself Hermitian and all C-matrices
are real.  The Hilbert-Schmidt convention is (A|B) = Tr(A^dag B) with pool
operators pre-normalized to unit norm.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from .symspace import ProjectedState, SymmetricBasis, build_symmetric_basis

__all__ = [
    "hermitian_basis",
    "vec_h",
    "unvec_h",
    "OperatorPool",
    "build_operator_pool",
    "Selection",
    "select_independent",
    "TransferMap",
    "build_transfer_map",
    "LiftedEstimate",
    "lift",
    "transpose_exact",
    "null_perturbation",
]

RANK_TOL = 1e-9
CACHE_FORMAT_VERSION = 1


def hermitian_basis(d: int) -> list[np.ndarray]:
    """Orthonormal Hermitian basis of d x d matrices, identity first.

    Order: I/sqrt(d), traceless diagonal (Gell-Mann style), then the
    symmetric and antisymmetric off-diagonal pairs.
    """
    ops = [np.eye(d, dtype=complex) / np.sqrt(d)]
    for k in range(1, d):
        diag = np.zeros(d)
        diag[:k] = 1.0
        diag[k] = -k
        ops.append(np.diag(diag).astype(complex) / np.sqrt(k * (k + 1)))
    for i in range(d):
        for j in range(i + 1, d):
            sym = np.zeros((d, d), dtype=complex)
            sym[i, j] = sym[j, i] = 1.0 / np.sqrt(2)
            ops.append(sym)
            asym = np.zeros((d, d), dtype=complex)
            asym[i, j] = 1j / np.sqrt(2)
            asym[j, i] = -1j / np.sqrt(2)
            ops.append(asym)
    return ops


def vec_h(X: np.ndarray) -> np.ndarray:
    """Isometric real vectorization of a Hermitian matrix (HS inner product)."""
    d = X.shape[-1]
    iu = np.triu_indices(d, 1)
    diag = np.real(X[..., np.arange(d), np.arange(d)])
    off = X[..., iu[0], iu[1]]
    return np.concatenate(
        [diag, np.sqrt(2) * np.real(off), np.sqrt(2) * np.imag(off)], axis=-1
    )


def unvec_h(v: np.ndarray, d: int) -> np.ndarray:
    iu = np.triu_indices(d, 1)
    n_off = len(iu[0])
    X = np.zeros((d, d), dtype=complex)
    X[np.arange(d), np.arange(d)] = v[:d]
    off = (v[d : d + n_off] + 1j * v[d + n_off :]) / np.sqrt(2)
    X[iu] = off
    X[iu[1], iu[0]] = off.conj()
    return X


@dataclass
class OperatorPool:
    """Lazy graded pool of Hermitian product operators at replica order M.

    The full pool consists of all (d^2)^M label tuples over the single-copy
    basis (label 0 = normalized identity), graded by support size.  Because
    projections onto the symmetric subspace are invariant under the placement
    of the non-identity factors, rank selection only ever needs one canonical
    representative per support multiset.
    """

    d: int
    M: int
    basis: list[np.ndarray] = field(repr=False)

    @property
    def size(self) -> int:
        return (self.d**2) ** self.M

    def iter_labels_graded(self):
        """All label tuples, ordered by support size (full pool)."""
        tuples = itertools.product(range(self.d**2), repeat=self.M)
        yield from sorted(tuples, key=lambda t: (sum(1 for a in t if a != 0), t))

    def full_operator(self, labels: tuple[int, ...]) -> np.ndarray:
        op = np.eye(1, dtype=complex)
        for a in labels:
            op = np.kron(op, self.basis[a])
        return op

    def iter_canonical(self, max_support: int | None = None):
        """Sorted non-identity multisets (support-graded), identity padded."""
        cap = self.M if max_support is None else min(max_support, self.M)
        for k in range(cap + 1):
            yield from itertools.combinations_with_replacement(range(1, self.d**2), k)

    def projected(self, labels: tuple[int, ...], basis_sym: SymmetricBasis) -> np.ndarray:
        """Project the canonical operator for ``labels`` at the basis order.

        Non-identity factors occupy the leading replica slots; the remaining
        slots carry I/sqrt(d), which contributes a scalar d^{-(M-k)/2}.
        """
        d, M = self.d, basis_sym.N
        k = len(labels)
        if k > M:
            raise ValueError(f"support {k} exceeds replica order {M}")
        W = basis_sym.vectors.reshape((d,) * M + (basis_sym.dim,))
        for slot, a in enumerate(labels):
            W = np.moveaxis(np.tensordot(self.basis[a], W, axes=([1], [slot])), 0, slot)
        W = W.reshape(d**M, basis_sym.dim)
        out = basis_sym.vectors.conj().T @ W
        return out * d ** (-(M - k) / 2)


def build_operator_pool(sector_or_dim, M: int) -> OperatorPool:
    d = sector_or_dim if isinstance(sector_or_dim, int) else sector_or_dim.dim
    if not 1 <= M <= 4:
        raise ValueError(f"replica order must be in 1..4, got {M}")
    return OperatorPool(d=d, M=M, basis=hermitian_basis(d))


@dataclass
class Selection:
    """Outcome of the greedy rank-revealing pass at order N."""

    labels: tuple[tuple[int, ...], ...]
    s_n: int
    sigma_max: float
    projected_vecs: np.ndarray = field(repr=False, default=None)


def _candidate_matrix(pool: OperatorPool, basis_N: SymmetricBasis, max_support: int):
    labels = list(pool.iter_canonical(max_support))
    vecs = np.empty((len(labels), basis_N.dim**2))
    for i, lab in enumerate(labels):
        vecs[i] = vec_h(pool.projected(lab, basis_N))
    return labels, vecs


def select_independent(pool: OperatorPool, basis_N: SymmetricBasis, tol: float = RANK_TOL) -> Selection:
    """Greedy graded pass keeping operators that stay independent after
    projection; singular directions below tol * sigma_max count as zero."""
    labels, vecs = _candidate_matrix(pool, basis_N, basis_N.N)
    sigma_max = np.linalg.svd(vecs, compute_uv=False)[0]
    thresh = tol * sigma_max

    dim = basis_N.dim**2
    Q = np.empty((dim, min(dim, len(labels))))
    chosen: list[int] = []
    for i, v in enumerate(vecs):
        r = v.copy()
        if chosen:
            Qc = Q[:, : len(chosen)]
            r -= Qc @ (Qc.T @ r)
            r -= Qc @ (Qc.T @ r)
        nrm = np.linalg.norm(r)
        if nrm > thresh:
            Q[:, len(chosen)] = r / nrm
            chosen.append(i)
        if len(chosen) == dim:
            break
    sel_labels = tuple(labels[i] for i in chosen)
    return Selection(
        labels=sel_labels,
        s_n=len(chosen),
        sigma_max=float(sigma_max),
        projected_vecs=vecs[chosen],
    )


def _qr_positive(A: np.ndarray):
    Q, R = np.linalg.qr(A)
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs, R * signs[:, None]


@dataclass
class TransferMap:
    """Precomputed N -> M lift data for one sector dimension."""

    N: int
    M: int
    d: int
    labels: tuple[tuple[int, ...], ...]
    s_n: int
    basis_N: SymmetricBasis = field(repr=False)
    basis_M: SymmetricBasis = field(repr=False)
    Q_N: np.ndarray = field(repr=False)
    R_N: np.ndarray = field(repr=False)
    Q_M: np.ndarray = field(repr=False)
    R_M: np.ndarray = field(repr=False)
    cond_N: float = 0.0
    cond_M: float = 0.0

    # C-matrices in the paper's sense: C_{ij} = (o_i | otilde_j) = R^T.
    @property
    def C_N(self) -> np.ndarray:
        return self.R_N.T

    @property
    def C_M_leading(self) -> np.ndarray:
        return self.R_M.T

    def coeffs_N(self, r_N: np.ndarray) -> np.ndarray:
        return self.Q_N.T @ vec_h(r_N)

    def coeffs_M(self, r_M: np.ndarray) -> np.ndarray:
        return self.Q_M.T @ vec_h(r_M)

    def lift_coeffs(self, c_N: np.ndarray) -> np.ndarray:
        # Pool expectations at the two orders differ by the normalization of
        # the identity padding: (O_j^{(M)}|rho^M) = (O_j^{(N)}|rho^N) / d^{(M-N)/2}.
        e_M = self.R_N.T @ c_N * self.d ** (-(self.M - self.N) / 2)
        return solve_triangular(self.R_M.T, e_M, lower=True)

    def reconstruct_M(self, c: np.ndarray) -> np.ndarray:
        return unvec_h(self.Q_M @ c, self.basis_M.dim)

    def expectation_scales(self) -> np.ndarray:
        """Scale turning bare products of single-copy expectations into
        (O_j | rho) values at order M (identity-padding normalization)."""
        return np.array([self.d ** (-(self.M - len(lab)) / 2) for lab in self.labels])


def build_transfer_map(sector_or_dim, N: int, M: int, tol: float = RANK_TOL, cache_dir=None) -> TransferMap:
    """Construct (or load from cache) the order N -> M transfer map."""
    d = sector_or_dim if isinstance(sector_or_dim, int) else sector_or_dim.dim
    if not 1 <= N < M <= 4:
        raise ValueError(f"need 1 <= N < M <= 4, got N={N}, M={M}")
    if cache_dir is not None:
        cached = _load_cache(cache_dir, d, N, M, tol)
        if cached is not None:
            return cached

    basis_N = build_symmetric_basis(d, N)
    basis_M = build_symmetric_basis(d, M)
    pool = build_operator_pool(d, M)
    sel = select_independent(pool, basis_N, tol=tol)

    Q_N, R_N = _qr_positive(sel.projected_vecs.T)
    vecs_M = np.empty((sel.s_n, basis_M.dim**2))
    for i, lab in enumerate(sel.labels):
        vecs_M[i] = vec_h(pool.projected(lab, basis_M))
    Q_M, R_M = _qr_positive(vecs_M.T)

    diag = np.abs(np.diag(R_M))
    if diag.min() <= tol * diag.max():
        raise ValueError(
            "leading block of C_M is rank deficient: "
            f"min/max diagonal {diag.min():.3e}/{diag.max():.3e}"
        )
    tmap = TransferMap(
        N=N,
        M=M,
        d=d,
        labels=sel.labels,
        s_n=sel.s_n,
        basis_N=basis_N,
        basis_M=basis_M,
        Q_N=Q_N,
        R_N=R_N,
        Q_M=Q_M,
        R_M=R_M,
        cond_N=float(np.linalg.cond(R_N)),
        cond_M=float(np.linalg.cond(R_M)),
    )
    if cache_dir is not None:
        _save_cache(cache_dir, tmap, tol)
    return tmap


@dataclass
class LiftedEstimate:
    """Order-M Hermitian estimate plus provenance of how it was produced."""

    r: np.ndarray
    N: int
    M: int
    provenance: dict = field(default_factory=dict)

    @property
    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.r)[0])


def _as_matrix(r) -> np.ndarray:
    if isinstance(r, ProjectedState):
        return r.r
    if isinstance(r, LiftedEstimate):
        return r.r
    return np.asarray(r)


def lift(r_N, tmap: TransferMap) -> LiftedEstimate:
    """Lift an order-N projected state to order M with zero null coefficients.

    The result reproduces every order-N expectation value exactly; it is not
    generally positive semi-definite, which is reported, not raised.
    """
    r_mat = _as_matrix(r_N)
    c_N = tmap.coeffs_N(r_mat)
    r_E = tmap.reconstruct_M(tmap.lift_coeffs(c_N))
    est = LiftedEstimate(r=r_E, N=tmap.N, M=tmap.M)
    est.provenance = {"method": "lift", "min_eigenvalue": est.min_eigenvalue}
    return est


def transpose_exact(r_E, r_N, tmap: TransferMap) -> LiftedEstimate:
    """Overwrite the leading S_N orthonormal coefficients with exact values.

    Coefficients in the partial-trace null space (beyond the leading block)
    are left untouched, so a PSD-stabilized estimate keeps its null-space
    content while its reduction to order N becomes exact again.
    """
    base = _as_matrix(r_E)
    before = float(np.linalg.eigvalsh(base)[0])
    c_exact = tmap.lift_coeffs(tmap.coeffs_N(_as_matrix(r_N)))
    v = vec_h(base)
    v = v + tmap.Q_M @ (c_exact - tmap.Q_M.T @ v)
    out = LiftedEstimate(r=unvec_h(v, tmap.basis_M.dim), N=tmap.N, M=tmap.M)
    out.provenance = {
        "method": "transpose_exact",
        "min_eigenvalue": out.min_eigenvalue,
        "min_eigenvalue_before": before,
    }
    return out


def null_perturbation(tmap: TransferMap, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """A random Hermitian direction inside the partial-trace null space."""
    D = tmap.basis_M.dim
    G = rng.normal(size=(D, D)) + 1j * rng.normal(size=(D, D))
    G = G + G.conj().T
    v = vec_h(G)
    v -= tmap.Q_M @ (tmap.Q_M.T @ v)
    nrm = np.linalg.norm(v)
    if nrm == 0:
        return np.zeros((D, D), dtype=complex)
    return unvec_h(v * (scale / nrm), D)


def _cache_path(cache_dir, d, N, M, tol) -> Path:
    return Path(cache_dir) / f"tmap_d{d}_N{N}_M{M}_tol{tol:.0e}_v{CACHE_FORMAT_VERSION}.npz"


def _save_cache(cache_dir, tmap: TransferMap, tol: float) -> None:
    path = _cache_path(cache_dir, tmap.d, tmap.N, tmap.M, tol)
    path.parent.mkdir(parents=True, exist_ok=True)
    flat = np.array([len(lab) for lab in tmap.labels])
    packed = np.concatenate([np.array(lab, dtype=np.int64) for lab in tmap.labels] or [np.array([], dtype=np.int64)])
    np.savez_compressed(
        path,
        format_version=CACHE_FORMAT_VERSION,
        d=tmap.d,
        N=tmap.N,
        M=tmap.M,
        tol=tol,
        label_lengths=flat,
        label_data=packed,
        Q_N=tmap.Q_N,
        R_N=tmap.R_N,
        Q_M=tmap.Q_M,
        R_M=tmap.R_M,
        cond_N=tmap.cond_N,
        cond_M=tmap.cond_M,
    )


def _load_cache(cache_dir, d, N, M, tol):
    path = _cache_path(cache_dir, d, N, M, tol)
    if not path.exists():
        return None
    data = np.load(path)
    header = {k: int(data[k]) for k in ("format_version", "d", "N", "M")}
    if header != {"format_version": CACHE_FORMAT_VERSION, "d": d, "N": N, "M": M} or float(data["tol"]) != tol:
        raise ValueError(f"transfer map cache {path} does not match the requested key")
    labels = []
    pos = 0
    for ln in data["label_lengths"]:
        labels.append(tuple(int(x) for x in data["label_data"][pos : pos + ln]))
        pos += ln
    return TransferMap(
        N=N,
        M=M,
        d=d,
        labels=tuple(labels),
        s_n=len(labels),
        basis_N=build_symmetric_basis(d, N),
        basis_M=build_symmetric_basis(d, M),
        Q_N=data["Q_N"],
        R_N=data["R_N"],
        Q_M=data["Q_M"],
        R_M=data["R_M"],
        cond_N=float(data["cond_N"]),
        cond_M=float(data["cond_M"]),
    )
