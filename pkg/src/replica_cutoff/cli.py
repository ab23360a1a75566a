"""Experiment harness: configuration, orchestration, CSV/manifest export.

Usage:
    replica-cutoff <mode> --config <path> [--seed S] [--out DIR]
    replica-cutoff compare --a run_a.csv --b run_b.csv [--config spec] [--force]

Modes: lindblad | trajectories | replica-meanfield | replica-ensemble |
replica-hybrid | nullspace-verify | ensemble-build.  Config files are flat
"key = value" text with # comments.  Every run writes <label>.csv (17
significant digits, first line carries the manifest hash) plus
<label>.manifest.json with the resolved configuration, package version and
seeds.  Exit codes: 0 success, 2 validation failure, 1 error.

REPLICA_CUTOFF_THREADS caps BLAS/OpenMP parallelism; it must be honored
before numpy is first imported, hence the environment fiddling at module
import time.
"""

from __future__ import annotations

import os

if os.environ.get("REPLICA_CUTOFF_THREADS"):
    _n = os.environ["REPLICA_CUTOFF_THREADS"]
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _n)

import argparse
import hashlib
import json
import sys
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import fock_state, lindblad_evolve, run_trajectories
from .ensemble import build_ensemble, load_ensemble, save_ensemble
from .fock import build_hamiltonian, build_measurement_operator, build_sector
from .master import ClosureMode, evolve_replica
from .nullspace import (
    ab_partial_trace,
    catalog_null_operators,
    compute_null_space,
    verify_catalog,
)
from .observables import (
    Partition,
    bootstrap_bands,
    cross_correlator,
    purity_average,
    renyi2_trajectory_average,
    site_density,
    trajectory_purity_average,
)
from .transfer import build_transfer_map

MODES = (
    "lindblad",
    "trajectories",
    "replica-meanfield",
    "replica-ensemble",
    "replica-hybrid",
    "nullspace-verify",
    "ensemble-build",
)


@dataclass
class RunConfig:
    mode: str
    L: int = 4
    n_particles: int = 2
    V: float = 0.0
    gamma: float = 0.5
    dt: float = 0.01
    T: float = 1.0
    n_traj: int = 100
    ensemble_size: int = 4000
    seed: int = 1234
    boundary: str = "open"
    method: str = "euler"
    stride: int = 1
    refit_stride: int = 1
    initial: str = ""
    partition: tuple = ()
    observables: tuple = ()
    output_path: str = "."
    label: str = ""
    ensemble_file: str = ""
    cache_dir: str = ""

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if not 0 <= self.n_particles <= self.L <= 12:
            raise ValueError("need 0 <= n_particles <= L <= 12")
        if self.dt <= 0 or (self.mode != "nullspace-verify" and self.T < self.dt):
            raise ValueError("need dt > 0 and T >= dt")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.boundary not in ("open", "periodic"):
            raise ValueError("boundary must be open or periodic")
        if self.mode in ("trajectories", "replica-hybrid") and self.n_traj < 1:
            raise ValueError("need n_traj >= 1")
        if self.mode in ("replica-ensemble", "ensemble-build") and self.ensemble_size < 1:
            raise ValueError("need ensemble_size >= 1")
        if self.initial and (len(self.initial) != self.L or set(self.initial) - {"0", "1"}):
            raise ValueError(f"initial occupation string must be {self.L} characters of 0/1")
        if self.initial and self.initial.count("1") != self.n_particles:
            raise ValueError("initial occupation does not match n_particles")

    def default_initial(self) -> str:
        if self.initial:
            return self.initial
        # Néel-type filling from site 1
        out = ["0"] * self.L
        for k in range(self.n_particles):
            out[(2 * k) % self.L] = "1"
        return "".join(out)

    def partition_or_half(self) -> Partition:
        if self.partition:
            return Partition(A=tuple(self.partition), L=self.L)
        return Partition.half_chain(self.L)


_TUPLE_FIELDS = {"partition": int, "observables": str}


def parse_config(path, mode: str | None = None) -> RunConfig:
    """Read a flat key=value file (with # comments) into a RunConfig."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        raw[key] = value
    if mode is not None:
        raw["mode"] = mode
    if "mode" not in raw:
        raise ValueError("config does not define a mode")

    kwargs = {}
    valid = {f.name: f for f in fields(RunConfig)}
    for key, value in raw.items():
        if key not in valid:
            raise ValueError(f"unknown config key {key!r}")
        if key in _TUPLE_FIELDS:
            conv = _TUPLE_FIELDS[key]
            kwargs[key] = tuple(conv(v.strip()) for v in value.split(",") if v.strip())
        else:
            target = valid[key].type
            if target in ("int", int):
                kwargs[key] = int(value)
            elif target in ("float", float):
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def _manifest(cfg: RunConfig, extra: dict | None = None) -> dict:
    body = {
        "config": {f.name: (list(v) if isinstance(v := getattr(cfg, f.name), tuple) else v) for f in fields(cfg)},
        "version": __version__,
        "seed": cfg.seed,
    }
    if extra:
        body.update(extra)
    digest = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]
    body["manifest_hash"] = digest
    return body


def _write_csv(path: Path, columns: dict[str, np.ndarray], manifest_hash: str) -> None:
    names = list(columns)
    n_rows = len(next(iter(columns.values())))
    with open(path, "w") as fh:
        fh.write(f"# manifest={manifest_hash}\n")
        fh.write(",".join(names) + "\n")
        for k in range(n_rows):
            fh.write(",".join(f"{float(columns[name][k]):.17g}" for name in names) + "\n")


def read_csv(path) -> tuple[str, dict[str, np.ndarray]]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# manifest="):
        raise ValueError(f"{path}: missing manifest line")
    manifest_hash = lines[0].split("=", 1)[1]
    names = lines[1].split(",")
    data = np.array([[float(v) for v in line.split(",")] for line in lines[2:]])
    return manifest_hash, {name: data[:, k] for k, name in enumerate(names)}


def _filter_columns(columns: dict, wanted: tuple) -> dict:
    if not wanted:
        return columns
    keep = {"t", *wanted}
    return {k: v for k, v in columns.items() if k in keep}


def _setup(cfg: RunConfig):
    sector = build_sector(cfg.L, cfg.n_particles)
    H = build_hamiltonian(sector, V=cfg.V, boundary=cfg.boundary).matrix
    O_list = [build_measurement_operator(sector, x).matrix for x in range(1, cfg.L + 1)]
    psi0 = fock_state(sector, cfg.default_initial())
    return sector, H, O_list, psi0


def _run_lindblad(cfg: RunConfig) -> dict[str, np.ndarray]:
    sector, H, O_list, psi0 = _setup(cfg)
    rho0 = np.outer(psi0, psi0.conj())
    series = lindblad_evolve(rho0, H, O_list, cfg.gamma, cfg.T, cfg.dt, method=cfg.method, stride=cfg.stride)
    from .fock import number_operator

    n_ops = [number_operator(sector, x).matrix for x in range(1, cfg.L + 1)]
    cols: dict[str, np.ndarray] = {"t": series.times}
    for x in range(1, cfg.L + 1):
        cols[f"n_{x}"] = np.array([np.trace(n_ops[x - 1] @ s).real for s in series.states])
    cols["purity1"] = np.array([np.trace(s @ s).real for s in series.states])
    return cols


def _trajectory_samples(psis_t, sector, O_list, part):
    """Per-trajectory samples of C_ij, purity and subsystem R2 at one time."""
    L = sector.L
    n_traj = psis_t.shape[0]
    expect = np.stack([np.einsum("cd,de,ce->c", psis_t.conj(), O, psis_t).real for O in O_list])
    pair = {}
    for i in range(L):
        for j in range(L):
            OiOj = O_list[i] @ O_list[j]
            both = np.einsum("cd,de,ce->c", psis_t.conj(), OiOj, psis_t).real
            pair[(i + 1, j + 1)] = 2.0 * (both - expect[i] * expect[j])
    purity = np.array([trajectory_purity_average(psi[None, :], part, sector) for psi in psis_t])
    return pair, purity


def _run_trajectories(cfg: RunConfig) -> dict[str, np.ndarray]:
    sector, H, O_list, psi0 = _setup(cfg)
    batch = run_trajectories(psi0, H, O_list, cfg.gamma, cfg.T, cfg.dt, cfg.n_traj, cfg.seed, stride=cfg.stride)
    part = cfg.partition_or_half()
    L = cfg.L
    n_times = batch.times.size
    cols: dict[str, np.ndarray] = {"t": batch.times}
    for x in range(1, L + 1):
        cols[f"n_{x}"] = np.zeros(n_times)
    for i in range(1, L + 1):
        for j in range(1, L + 1):
            for suffix in ("", "_lo", "_hi"):
                cols[f"C_{i}{j}{suffix}"] = np.zeros(n_times)
    for name in ("purity", "purity_lo", "purity_hi", "S2"):
        cols[name] = np.zeros(n_times)

    from .fock import number_operator

    n_ops = [number_operator(sector, x).matrix for x in range(1, L + 1)]
    keys = [(i, j) for i in range(1, L + 1) for j in range(1, L + 1)]
    for k in range(n_times):
        psis_t = batch.psis[:, k, :]
        for x in range(1, L + 1):
            cols[f"n_{x}"][k] = np.einsum("cd,de,ce->", psis_t.conj(), n_ops[x - 1], psis_t).real / cfg.n_traj
        pair, purity = _trajectory_samples(psis_t, sector, O_list, part)
        stacked = np.column_stack([pair[key] for key in keys] + [purity])
        lo, hi = bootstrap_bands(stacked, n_boot=1000, seed=cfg.seed + k)
        for col, (i, j) in enumerate(keys):
            cols[f"C_{i}{j}"][k] = pair[(i, j)].mean()
            cols[f"C_{i}{j}_lo"][k], cols[f"C_{i}{j}_hi"][k] = lo[col], hi[col]
        cols["purity"][k] = purity.mean()
        cols["purity_lo"][k], cols["purity_hi"][k] = lo[-1], hi[-1]
        cols["S2"][k] = renyi2_trajectory_average(psis_t, part, sector)
    return cols


def _load_or_build_ensemble(cfg: RunConfig, sector, maps):
    if cfg.ensemble_file and Path(cfg.ensemble_file).exists():
        return load_ensemble(cfg.ensemble_file, sector, maps)
    return build_ensemble(sector, cfg.ensemble_size, cfg.seed, maps)


def _run_replica(cfg: RunConfig) -> dict[str, np.ndarray]:
    sector, H, O_list, psi0 = _setup(cfg)
    rho1 = np.outer(psi0, psi0.conj())
    rho0 = np.kron(rho1, rho1)
    tag = cfg.mode.split("-", 1)[1]

    maps = None
    mode_kwargs = {"tag": tag, "refit_stride": cfg.refit_stride}
    if tag in ("ensemble", "hybrid"):
        cache = cfg.cache_dir or None
        maps = {
            3: build_transfer_map(sector.dim, 2, 3, cache_dir=cache),
            4: build_transfer_map(sector.dim, 2, 4, cache_dir=cache),
        }
    if tag == "ensemble":
        mode_kwargs["ensemble"] = _load_or_build_ensemble(cfg, sector, maps)
    if tag == "hybrid":
        mode_kwargs["tag"] = "trajectory-hybrid"
        mode_kwargs["n_traj"] = cfg.n_traj
        mode_kwargs["seed"] = cfg.seed
    mode = ClosureMode(**mode_kwargs)

    series = evolve_replica(
        rho0, mode, sector, gamma=cfg.gamma, V=cfg.V, T=cfg.T, dt=cfg.dt,
        maps=maps, boundary=cfg.boundary, method=cfg.method, stride=cfg.stride,
    )
    part = cfg.partition_or_half()
    L = cfg.L
    cols: dict[str, np.ndarray] = {"t": series.times}
    for i in range(1, L + 1):
        for j in range(1, L + 1):
            cols[f"C_{i}{j}"] = np.array([cross_correlator(s, i, j, O_list) for s in series.states])
    for x in range(1, L + 1):
        cols[f"n_{x}"] = np.array([site_density(s, x, sector) for s in series.states])
    cols["purity"] = np.array([purity_average(s, part, sector) for s in series.states])
    pad = np.concatenate([[np.nan], series.meta["min_eig3"]])
    cols["minEig3"] = pad
    cols["minEig4"] = np.concatenate([[np.nan], series.meta["min_eig4"]])
    cols["reductionResidual"] = np.concatenate([[0.0], series.meta["reduction_residual"]])
    return cols


def _run_nullspace_verify(cfg: RunConfig, out_dir: Path) -> tuple[dict, list[str]]:
    lines = []
    ok = True
    for m_from, m_to in ((2, 1), (3, 2), (4, 3), (3, 1), (4, 2)):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            checks = verify_catalog(m_from, m_to)
        for c in checks:
            status = "PASS" if c.is_null else "FAIL"
            note = "" if c.is_null else f" (residual {c.residual:.3g}; corrected coefficients available)"
            lines.append(f"[{status}] {c.name}: trace {m_from}->{m_to}{note}")
            if (m_from, m_to) != (4, 2) and not c.is_null:
                ok = False
    dims = {}
    for m_from, m_to in ((2, 1), (3, 2), (4, 3)):
        dims[f"({m_from},{m_to})"] = int(compute_null_space(m_from, m_to).shape[1])
    lines.append(f"null-space dimensions: {dims}")
    report = {"checks": lines, "dimensions": dims, "catalog_ok": ok}
    return report, lines


def run(cfg: RunConfig, out_dir=None) -> int:
    """Execute one configured run; returns the process exit code."""
    out_dir = Path(out_dir if out_dir is not None else cfg.output_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    label = cfg.label or cfg.mode

    extra: dict = {}
    if cfg.mode == "nullspace-verify":
        report, lines = _run_nullspace_verify(cfg, out_dir)
        for line in lines:
            print(line)
        manifest = _manifest(cfg, {"report": report})
        (out_dir / f"{label}.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        (out_dir / f"{label}.report.txt").write_text("\n".join(lines) + "\n")
        return 0 if report["catalog_ok"] else 1

    if cfg.mode == "ensemble-build":
        sector = build_sector(cfg.L, cfg.n_particles)
        maps = {
            3: build_transfer_map(sector.dim, 2, 3, cache_dir=cfg.cache_dir or None),
            4: build_transfer_map(sector.dim, 2, 4, cache_dir=cfg.cache_dir or None),
        }
        ens = build_ensemble(sector, cfg.ensemble_size, cfg.seed, maps)
        target = cfg.ensemble_file or str(out_dir / f"{label}.npz")
        save_ensemble(target, ens)
        manifest = _manifest(cfg, {"ensemble_file": str(target), "storage_bytes": ens.storage_bytes()})
        (out_dir / f"{label}.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        print(f"ensemble of {ens.size} states written to {target} ({ens.storage_bytes()/1e6:.1f} MB resident)")
        return 0

    runners = {
        "lindblad": _run_lindblad,
        "trajectories": _run_trajectories,
        "replica-meanfield": _run_replica,
        "replica-ensemble": _run_replica,
        "replica-hybrid": _run_replica,
    }
    columns = _filter_columns(runners[cfg.mode](cfg), cfg.observables)
    manifest = _manifest(cfg)
    _write_csv(out_dir / f"{label}.csv", columns, manifest["manifest_hash"])
    (out_dir / f"{label}.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"wrote {out_dir / (label + '.csv')}")
    return 0


def compare(file_a, file_b, tolerances: dict | None = None, band_columns: tuple = (),
            band_coverage: float = 0.95, force: bool = False) -> tuple[dict, int]:
    """Column-wise comparison of two runs against a tolerance specification.

    Per shared column the max absolute deviation is reported; pass/fail is
    decided for the columns named in ``tolerances``.  For each name in
    ``band_columns``, file_a's values must lie inside file_b's bootstrap band
    columns (<name>_lo, <name>_hi) at a fraction >= band_coverage of times.
    """
    hash_a, cols_a = read_csv(file_a)
    hash_b, cols_b = read_csv(file_b)

    def version_of(path):
        mpath = Path(str(path).replace(".csv", ".manifest.json"))
        if mpath.exists():
            return json.loads(mpath.read_text()).get("version")
        return None

    va, vb = version_of(file_a), version_of(file_b)
    if not force and va is not None and vb is not None and va != vb:
        raise ValueError(f"library version mismatch ({va} vs {vb}); rerun or pass --force")

    shared = [k for k in cols_a if k in cols_b and k != "t"]
    if not shared:
        raise ValueError("no shared columns to compare")
    if len(cols_a["t"]) != len(cols_b["t"]) or np.max(np.abs(cols_a["t"] - cols_b["t"])) > 1e-12:
        raise ValueError("time grids differ")

    report: dict = {"columns": {}, "bands": {}, "pass": True}
    tolerances = tolerances or {}
    for name in shared:
        both = np.abs(cols_a[name] - cols_b[name])
        finite = both[np.isfinite(both)]
        max_dev = float(finite.max()) if finite.size else 0.0
        entry = {"max_abs_deviation": max_dev}
        if name in tolerances:
            entry["tolerance"] = tolerances[name]
            entry["pass"] = max_dev <= tolerances[name]
            report["pass"] &= entry["pass"]
        report["columns"][name] = entry
    for name in band_columns:
        lo, hi = cols_b.get(f"{name}_lo"), cols_b.get(f"{name}_hi")
        if lo is None or hi is None or name not in cols_a:
            raise ValueError(f"band comparison for {name!r} needs {name}, {name}_lo, {name}_hi")
        inside = (cols_a[name] >= lo - 1e-15) & (cols_a[name] <= hi + 1e-15)
        frac = float(inside.mean())
        ok = frac >= band_coverage
        report["bands"][name] = {"coverage": frac, "required": band_coverage, "pass": ok}
        report["pass"] &= ok
    return report, (0 if report["pass"] else 2)


def _parse_compare_spec(path) -> tuple[dict, tuple, float]:
    tolerances: dict = {}
    bands: list = []
    coverage = 0.95
    for line in Path(path).read_text().splitlines():
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, value = (p.strip() for p in stripped.split("=", 1))
        if key == "band_coverage":
            coverage = float(value)
        elif key == "bands":
            bands = [v.strip() for v in value.split(",") if v.strip()]
        else:
            tolerances[key] = float(value)
    return tolerances, tuple(bands), coverage


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="replica-cutoff", description=__doc__)
    parser.add_argument("mode", choices=[*MODES, "compare"])
    parser.add_argument("--config", help="flat key=value configuration file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("--a", help="compare: first CSV")
    parser.add_argument("--b", help="compare: second CSV (band columns read from here)")
    parser.add_argument("--force", action="store_true", help="compare: ignore version mismatch")
    args = parser.parse_args(argv)

    try:
        if args.mode == "compare":
            if not args.a or not args.b:
                print("compare needs --a and --b", file=sys.stderr)
                return 2
            tolerances, bands, coverage = ({}, (), 0.95)
            if args.config:
                tolerances, bands, coverage = _parse_compare_spec(args.config)
            report, code = compare(args.a, args.b, tolerances, bands, coverage, force=args.force)
            print(json.dumps(report, indent=2, sort_keys=True))
            return code

        if not args.config:
            print("this mode needs --config", file=sys.stderr)
            return 2
        cfg = parse_config(args.config, mode=args.mode)
        if args.seed is not None:
            cfg.seed = args.seed
        return run(cfg, out_dir=args.out)
    except (ValueError, FileNotFoundError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
