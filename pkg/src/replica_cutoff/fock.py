"""Number-conserving fermionic Fock sectors and single-copy operators.

Sites are labelled 1..L.  A basis state is stored as an integer bitstring in
which site x corresponds to bit (x-1), i.e. site 1 is the least significant
bit.  Creation/annihilation operators follow the Jordan-Wigner convention in
that ordering: acting with c_x on a bitstring picks up the sign
(-1)^(number of occupied sites y < x).  With this choice a nearest-neighbour
hop c^dag_x c_{x+1} between adjacent sites has matrix element +1 (no string
crossing); the periodic boundary hop does cross the string and carries the
usual parity sign.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb

import numpy as np

__all__ = [
    "FockSector",
    "SectorOperator",
    "build_sector",
    "build_hamiltonian",
    "build_measurement_operator",
    "number_operator",
    "transfer_operator",
]


@dataclass(frozen=True)
class FockSector:
    """An (L, n)-particle number sector with a canonically ordered basis."""

    L: int
    n_particles: int
    states: tuple[int, ...]
    dim: int
    _index: dict = field(repr=False, hash=False, compare=False, default=None)

    def index_of(self, bits: int) -> int:
        return self._index[bits]

    def occupations(self) -> np.ndarray:
        """(dim, L) array of 0/1 occupations, column x-1 is site x."""
        occ = np.zeros((self.dim, self.L), dtype=np.int64)
        for a, bits in enumerate(self.states):
            for x in range(self.L):
                occ[a, x] = (bits >> x) & 1
        return occ


@dataclass(frozen=True)
class SectorOperator:
    """A dense operator on a single Fock sector."""

    matrix: np.ndarray
    label: str

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def build_sector(L: int, n_particles: int) -> FockSector:
    """Enumerate the n-particle sector of an L-site chain.

    States are sorted by their integer bitstring value, which fixes the basis
    ordering used everywhere else in the package.
    """
    if not (0 <= n_particles <= L <= 12):
        raise ValueError(f"need 0 <= n_particles <= L <= 12, got L={L}, n={n_particles}")
    states = tuple(bits for bits in range(1 << L) if bin(bits).count("1") == n_particles)
    index = {bits: a for a, bits in enumerate(states)}
    sector = FockSector(L=L, n_particles=n_particles, states=states, dim=len(states), _index=index)
    assert sector.dim == comb(L, n_particles)
    return sector


def _jw_sign(bits: int, x: int) -> int:
    """Parity of occupied sites strictly below site x (1-based)."""
    mask = (1 << (x - 1)) - 1
    return -1 if bin(bits & mask).count("1") & 1 else 1


def transfer_operator(sector: FockSector, x: int, y: int) -> SectorOperator:
    """Matrix of c^dag_x c_y on the sector, with Jordan-Wigner signs."""
    for site in (x, y):
        if not 1 <= site <= sector.L:
            raise ValueError(f"site {site} outside 1..{sector.L}")
    mat = np.zeros((sector.dim, sector.dim), dtype=complex)
    for a, bits in enumerate(sector.states):
        if not (bits >> (y - 1)) & 1:
            continue
        sign = _jw_sign(bits, y)
        bits1 = bits & ~(1 << (y - 1))
        if (bits1 >> (x - 1)) & 1:
            continue
        sign *= _jw_sign(bits1, x)
        bits2 = bits1 | (1 << (x - 1))
        mat[sector.index_of(bits2), a] = sign
    return SectorOperator(matrix=mat, label=f"c+_{x} c_{y}")


def number_operator(sector: FockSector, site: int) -> SectorOperator:
    if not 1 <= site <= sector.L:
        raise ValueError(f"site {site} outside 1..{sector.L}")
    occ = np.array([(bits >> (site - 1)) & 1 for bits in sector.states], dtype=float)
    return SectorOperator(matrix=np.diag(occ).astype(complex), label=f"n_{site}")


def build_measurement_operator(sector: FockSector, site: int) -> SectorOperator:
    """Diagonal O_site = 1 - 2 n_site, entries +1 (empty) / -1 (occupied)."""
    n = number_operator(sector, site)
    mat = np.eye(sector.dim, dtype=complex) - 2.0 * n.matrix
    return SectorOperator(matrix=mat, label=f"O_{site}")


def build_hamiltonian(sector: FockSector, V: float, boundary: str = "open") -> SectorOperator:
    """Tight-binding chain with nearest-neighbour density-density coupling.

    H = -sum_x (c^dag_x c_{x+1} + h.c.) + V sum_{x=1}^{L-1} (n_x - 1/2)(n_{x+1} - 1/2)

    The kinetic sum runs over x = 1..L-1 for ``boundary="open"`` and adds the
    wrap-around bond (L, 1) for ``boundary="periodic"``.  The interaction term
    is always open, matching its explicit x = 1..L-1 range.
    """
    if boundary not in ("open", "periodic"):
        raise ValueError(f"boundary must be 'open' or 'periodic', got {boundary!r}")
    L = sector.L
    H = np.zeros((sector.dim, sector.dim), dtype=complex)
    bonds = [(x, x + 1) for x in range(1, L)]
    if boundary == "periodic" and L > 2:
        bonds.append((L, 1))
    for x, y in bonds:
        hop = transfer_operator(sector, x, y).matrix
        H -= hop + hop.conj().T
    occ = sector.occupations().astype(float)
    for x in range(L - 1):
        H += np.diag(V * (occ[:, x] - 0.5) * (occ[:, x + 1] - 0.5))
    return SectorOperator(matrix=H, label=f"H(V={V}, {boundary})")
