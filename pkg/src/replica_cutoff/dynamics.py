"""Single-copy dynamics: GKSL (Lindblad) integration and SSE trajectories.

The unraveling uses measurement operators M_i = O_i - <O_i>_t with Gaussian
increments dW_i of variance gamma*dt (Ito convention), integrated by
Euler-Maruyama with per-step renormalization.  The deterministic Lindblad
equation defaults to RK4 but can be stepped with plain Euler so that replica
and single-copy runs can share an identical stepper.

Trajectory randomness comes from counter-based Philox streams, one per
trajectory, derived from (seed, trajectory_index).  Trajectory c is therefore
reproducible independently of how many trajectories run alongside it and of
any batching.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .symspace import ReplicaState

__all__ = [
    "TrajectoryState",
    "DensityTimeSeries",
    "TrajectoryBatch",
    "fock_state",
    "lindblad_rhs",
    "lindblad_evolve",
    "sse_step",
    "trajectory_rng",
    "run_trajectories",
    "trajectory_replica_average",
]


def _mat(op) -> np.ndarray:
    return op.matrix if hasattr(op, "matrix") else np.asarray(op)


def fock_state(sector, occupations: str) -> np.ndarray:
    """Unit vector for a basis occupation string, first character = site 1."""
    if len(occupations) != sector.L or set(occupations) - {"0", "1"}:
        raise ValueError(f"bad occupation string {occupations!r} for L={sector.L}")
    bits = 0
    for x, ch in enumerate(occupations):
        if ch == "1":
            bits |= 1 << x
    psi = np.zeros(sector.dim, dtype=complex)
    psi[sector.index_of(bits)] = 1.0
    return psi


@dataclass
class TrajectoryState:
    """A pure conditional state together with its private noise stream."""

    psi: np.ndarray
    time: float
    rng: np.random.Generator


@dataclass
class DensityTimeSeries:
    """Time series of Hermitian matrices plus the run metadata."""

    times: np.ndarray
    states: np.ndarray
    meta: dict = field(default_factory=dict)

    def validate(self, trace_tol: float = 1e-10, herm_tol: float = 1e-12) -> None:
        for rho in self.states:
            if abs(np.trace(rho).real - 1.0) > trace_tol:
                raise ValueError(f"trace deviates by {abs(np.trace(rho).real - 1.0):.3e}")
            if np.linalg.norm(rho - rho.conj().T) > herm_tol:
                raise ValueError("state is not Hermitian within tolerance")


@dataclass
class TrajectoryBatch:
    """Stacked pure-state trajectories: psis[c, k] is trajectory c at times[k]."""

    times: np.ndarray
    psis: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_traj(self) -> int:
        return self.psis.shape[0]

    def trajectory(self, c: int) -> tuple[np.ndarray, np.ndarray]:
        return self.times, self.psis[c]


def lindblad_rhs(rho: np.ndarray, H, O_list, gamma: float) -> np.ndarray:
    """GKSL generator for Hermitian involutive jump operators.

    Returns -i[H, rho] + gamma * sum_i (O_i rho O_i - rho), the dissipator
    already simplified with O_i^2 = 1.
    """
    H = _mat(H)
    rho = np.asarray(rho)
    if rho.shape != H.shape:
        raise ValueError(f"shape mismatch rho {rho.shape} vs H {H.shape}")
    out = -1j * (H @ rho - rho @ H)
    for O in O_list:
        O = _mat(O)
        out += gamma * (O @ rho @ O - rho)
    return out


def lindblad_evolve(
    rho0: np.ndarray,
    H,
    O_list,
    gamma: float,
    T: float,
    dt: float,
    method: str = "rk4",
    stride: int = 1,
) -> DensityTimeSeries:
    """Fixed-step integration of the GKSL equation.

    Each accepted step is re-hermitized and trace-renormalized; outputs are
    recorded every ``stride`` steps (the initial state is always included).
    """
    if dt <= 0 or T < dt:
        raise ValueError(f"need dt > 0 and T >= dt, got dt={dt}, T={T}")
    if method not in ("rk4", "euler"):
        raise ValueError(f"unknown method {method!r}")
    rho0 = np.asarray(rho0, dtype=complex)
    if np.linalg.norm(rho0 - rho0.conj().T) > 1e-10:
        raise ValueError("initial state is not Hermitian")
    H = _mat(H)
    O_list = [_mat(O) for O in O_list]

    n_steps = int(round(T / dt))
    rho = rho0.copy()
    times = [0.0]
    states = [rho.copy()]
    for k in range(n_steps):
        if method == "rk4":
            k1 = lindblad_rhs(rho, H, O_list, gamma)
            k2 = lindblad_rhs(rho + 0.5 * dt * k1, H, O_list, gamma)
            k3 = lindblad_rhs(rho + 0.5 * dt * k2, H, O_list, gamma)
            k4 = lindblad_rhs(rho + dt * k3, H, O_list, gamma)
            rho = rho + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        else:
            rho = rho + dt * lindblad_rhs(rho, H, O_list, gamma)
        rho = 0.5 * (rho + rho.conj().T)
        rho /= np.trace(rho).real
        if (k + 1) % stride == 0 or k == n_steps - 1:
            times.append((k + 1) * dt)
            states.append(rho.copy())
    meta = {"gamma": gamma, "dt": dt, "T": T, "method": method, "mode": "lindblad"}
    return DensityTimeSeries(times=np.array(times), states=np.array(states), meta=meta)


def _sse_update(psis: np.ndarray, H: np.ndarray, O_stack: np.ndarray, gamma: float, dt: float, dW: np.ndarray) -> np.ndarray:
    """One Euler-Maruyama step applied to a batch of unit vectors.

    psis: (n, dim); dW: (n, n_ops) Gaussian increments with variance gamma*dt.
    The expectations inside M_i = O_i - <O_i> are taken on the pre-step state.
    """
    OPsi = np.einsum("ide,ce->cid", O_stack, psis)
    expect = np.einsum("cd,cid->ci", psis.conj(), OPsi).real
    MPsi = OPsi - expect[:, :, None] * psis[:, None, :]
    OMPsi = np.einsum("ide,cie->cid", O_stack, MPsi)
    M2Psi = OMPsi - expect[:, :, None] * MPsi
    drift = -1j * dt * psis @ H.T - 0.5 * gamma * dt * M2Psi.sum(axis=1)
    noise = np.einsum("ci,cid->cd", dW, MPsi)
    out = psis + drift + noise
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def sse_step(state: TrajectoryState, H, O_list, gamma: float, dt: float) -> TrajectoryState:
    """Advance one trajectory by a single SSE step, drawing dW from its stream."""
    H = _mat(H)
    O_stack = np.stack([_mat(O) for O in O_list])
    dW = state.rng.normal(0.0, np.sqrt(gamma * dt), size=len(O_list))
    psi = _sse_update(state.psi[None, :], H, O_stack, gamma, dt, dW[None, :])[0]
    return TrajectoryState(psi=psi, time=state.time + dt, rng=state.rng)


def trajectory_rng(seed: int, c: int) -> np.random.Generator:
    """Counter-based stream for trajectory c of a run with the given seed."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(c,))))


def run_trajectories(
    psi0: np.ndarray,
    H,
    O_list,
    gamma: float,
    T: float,
    dt: float,
    n_traj: int,
    seed: int,
    stride: int = 1,
) -> TrajectoryBatch:
    """Propagate n_traj independent SSE trajectories from a common state."""
    if n_traj < 1:
        raise ValueError("need n_traj >= 1")
    H = _mat(H)
    O_stack = np.stack([_mat(O) for O in O_list])
    n_ops = O_stack.shape[0]
    n_steps = int(round(T / dt))
    psi0 = np.asarray(psi0, dtype=complex)
    psi0 = psi0 / np.linalg.norm(psi0)

    # Pre-draw every increment from the per-trajectory streams so the batched
    # update consumes exactly the same noise as stepping each trajectory alone.
    scale = np.sqrt(gamma * dt)
    noise = np.empty((n_traj, n_steps, n_ops))
    for c in range(n_traj):
        noise[c] = trajectory_rng(seed, c).normal(0.0, scale, size=(n_steps, n_ops))

    psis = np.tile(psi0, (n_traj, 1))
    rec_times = [0.0]
    rec = [psis.copy()]
    for k in range(n_steps):
        psis = _sse_update(psis, H, O_stack, gamma, dt, noise[:, k, :])
        if (k + 1) % stride == 0 or k == n_steps - 1:
            rec_times.append((k + 1) * dt)
            rec.append(psis.copy())
    meta = {"gamma": gamma, "dt": dt, "T": T, "seed": seed, "n_traj": n_traj, "mode": "trajectories"}
    return TrajectoryBatch(times=np.array(rec_times), psis=np.stack(rec, axis=1), meta=meta)


def trajectory_replica_average(batch: TrajectoryBatch, n: int, t_index: int) -> ReplicaState:
    """Average of n-fold tensor powers of the conditional pure states."""
    if not 1 <= n <= 4:
        raise ValueError(f"replica order must be in 1..4, got {n}")
    psis = batch.psis[:, t_index, :]
    n_traj, d = psis.shape
    if (d**n) ** 2 * n_traj > 5_000_000_000:
        raise MemoryError(f"replica average at order {n} exceeds the memory budget")
    phi = psis
    for _ in range(n - 1):
        phi = np.einsum("ca,cb->cab", phi, psis).reshape(n_traj, -1)
    rho = phi.T @ phi.conj() / n_traj
    return ReplicaState(matrix=rho, order=n, d=d)
