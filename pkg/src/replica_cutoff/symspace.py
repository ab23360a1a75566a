"""Permutation-symmetric subspaces of replicated sectors.

An order-N replica space is the N-fold tensor power of a d-dimensional
single-copy sector.  Replica-averaged states live entirely inside its
symmetric subspace, whose orthonormal basis vectors are indexed by multisets
of single-copy basis labels; the subspace dimension is
D_N = binomial(d + N - 1, N).  Tensor factors are ordered so that replica 1
is the most significant index (matching repeated ``np.kron``), and partial
traces over "the last k replicas" contract the least significant factors.

The same multisets admit a bosonic reading (occupation vectors over d modes),
which gives cheap in-subspace reductions: tracing one replica of an embedded
operator V r V^dag equals V' [(1/N) sum_mu A_mu r A_mu^dag] V'^dag with the
standard lowering matrices A_mu.  Full-space reshape contractions remain the
reference implementation and the two routes are cross-checked in the tests.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import comb, factorial

import numpy as np

__all__ = [
    "SymmetryError",
    "ReplicaState",
    "SymmetricBasis",
    "ProjectedState",
    "build_symmetric_basis",
    "project_state",
    "embed_state",
    "project_operator",
    "partial_trace_replicas",
    "partial_trace_subset",
    "lowering_maps",
    "reduce_projected",
]

_MAX_FULL_DIM = 2_000_000


class SymmetryError(ValueError):
    """Raised when an input violates a required permutation symmetry."""


@dataclass
class ReplicaState:
    """Dense Hermitian matrix on the n-fold tensor power of a d-dim sector."""

    matrix: np.ndarray
    order: int
    d: int

    def __post_init__(self):
        expect = self.d**self.order
        if self.matrix.shape != (expect, expect):
            raise ValueError(f"matrix shape {self.matrix.shape} != ({expect}, {expect})")

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix).real)

    def hermiticity_residual(self) -> float:
        return float(np.linalg.norm(self.matrix - self.matrix.conj().T))


@dataclass
class SymmetricBasis:
    """Orthonormal symmetric basis of an order-N replica space.

    ``vectors`` has shape (d**N, D_N); column i is the normalized sum over the
    distinct arrangements of the label multiset ``index_map[i]``.
    """

    N: int
    d: int
    vectors: np.ndarray
    index_map: tuple[tuple[int, ...], ...]
    occupations: np.ndarray = field(repr=False, default=None)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def projector(self) -> np.ndarray:
        return self.vectors @ self.vectors.conj().T


@dataclass
class ProjectedState:
    """Hermitian matrix r_ij = <V_i| rho |V_j> on a symmetric basis."""

    r: np.ndarray
    basis: SymmetricBasis

    @property
    def trace(self) -> float:
        return float(np.trace(self.r).real)


def build_symmetric_basis(sector_or_dim, N: int) -> SymmetricBasis:
    """Build the orthonormal permutation-symmetric basis at replica order N."""
    d = sector_or_dim if isinstance(sector_or_dim, int) else sector_or_dim.dim
    if not 1 <= N <= 4:
        raise ValueError(f"replica order must be in 1..4, got {N}")
    if d**N > _MAX_FULL_DIM:
        raise MemoryError(f"full replica space dim {d**N} exceeds budget {_MAX_FULL_DIM}")

    multisets = tuple(itertools.combinations_with_replacement(range(d), N))
    D = len(multisets)
    assert D == comb(d + N - 1, N)
    col_of = {m: i for i, m in enumerate(multisets)}

    # Each arrangement (digit tuple) belongs to exactly one multiset, so V has
    # one nonzero per row.
    counts = np.zeros((D, d), dtype=np.int64)
    for i, m in enumerate(multisets):
        for mu in m:
            counts[i, mu] += 1
    n_arr = np.array(
        [factorial(N) // int(np.prod([factorial(c) for c in counts[i]])) for i in range(D)],
        dtype=np.int64,
    )

    vectors = np.zeros((d**N, D), dtype=complex)
    for labels in itertools.product(range(d), repeat=N):
        row = 0
        for lab in labels:
            row = row * d + lab
        col = col_of[tuple(sorted(labels))]
        vectors[row, col] = 1.0 / np.sqrt(n_arr[col])
    return SymmetricBasis(N=N, d=d, vectors=vectors, index_map=multisets, occupations=counts)


def project_state(rho_full: np.ndarray, basis: SymmetricBasis, tol: float = 1e-8) -> ProjectedState:
    """Project a permutation-symmetric density matrix onto the symmetric basis.

    Inputs whose relative residual outside the symmetric subspace exceeds
    ``tol`` are rejected rather than symmetrized silently.
    """
    V = basis.vectors
    r = V.conj().T @ rho_full @ V
    back = V @ r @ V.conj().T
    scale = np.linalg.norm(rho_full)
    resid = np.linalg.norm(rho_full - back)
    if scale > 0 and resid > tol * scale:
        raise SymmetryError(
            f"input not supported on the symmetric subspace: relative residual {resid / scale:.3e}"
        )
    return ProjectedState(r=r, basis=basis)


def embed_state(projected: ProjectedState) -> np.ndarray:
    """Exact left inverse of project_state on the symmetric subspace."""
    V = projected.basis.vectors
    return V @ projected.r @ V.conj().T


def project_operator(O_full: np.ndarray, basis: SymmetricBasis) -> np.ndarray:
    """Compress an operator to the symmetric subspace, o_ij = <V_i|O|V_j>."""
    V = basis.vectors
    return V.conj().T @ O_full @ V


def _trace_last(matrix: np.ndarray, d: int, n: int) -> np.ndarray:
    rest = d ** (n - 1)
    return np.einsum("aibi->ab", matrix.reshape(rest, d, rest, d))


def partial_trace_replicas(state: ReplicaState, k: int) -> ReplicaState:
    """Trace out the last k replica factors by index contraction."""
    if not 1 <= k < state.order:
        raise ValueError(f"need 1 <= k < order, got k={k}, order={state.order}")
    mat = state.matrix
    for j in range(k):
        mat = _trace_last(mat, state.d, state.order - j)
    return ReplicaState(matrix=mat, order=state.order - k, d=state.d)


def partial_trace_subset(matrix: np.ndarray, d: int, n: int, traced: tuple[int, ...]) -> np.ndarray:
    """Trace out an arbitrary subset of replica indices (1-based)."""
    traced = tuple(sorted(traced))
    if any(not 1 <= t <= n for t in traced) or len(set(traced)) != len(traced):
        raise ValueError(f"bad traced index set {traced} for order {n}")
    keep = [i for i in range(n) if (i + 1) not in traced]
    perm = keep + [t - 1 for t in traced]
    tens = matrix.reshape((d,) * (2 * n))
    tens = tens.transpose([*perm, *[n + p for p in perm]])
    out = tens.reshape(d ** len(perm), d ** len(perm))
    for j in range(len(traced)):
        out = _trace_last(out, d, n - j)
    return out


def lowering_maps(d: int, M: int) -> list[np.ndarray]:
    """Bosonic lowering matrices A_mu: order-M symmetric space -> order M-1.

    A_mu |n> = sqrt(n_mu) |n - e_mu> in the occupation labelling of the
    multiset basis.
    """
    hi = build_symmetric_basis(d, M) if M > 1 else None
    if M == 1:
        raise ValueError("lowering maps need M >= 2")
    lo = build_symmetric_basis(d, M - 1)
    lo_col = {m: i for i, m in enumerate(lo.index_map)}
    maps = [np.zeros((lo.dim, hi.dim)) for _ in range(d)]
    for j, m in enumerate(hi.index_map):
        occ = hi.occupations[j]
        for mu in set(m):
            lowered = list(m)
            lowered.remove(mu)
            maps[mu][lo_col[tuple(lowered)], j] = np.sqrt(occ[mu])
    return maps


def reduce_projected(r: np.ndarray, maps: list[np.ndarray], M: int) -> np.ndarray:
    """Single-replica reduction carried out inside the symmetric subspaces."""
    out = np.zeros((maps[0].shape[0], maps[0].shape[0]), dtype=complex)
    for A in maps:
        out += A @ r @ A.T
    return out / M
