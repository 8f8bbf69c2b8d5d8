"""Command-line surface and file persistence.

Four subcommands: ``simulate`` writes a synthetic noisy track plus its
latent truth, ``fit`` runs the sampler on a track, ``summarize`` prints
posterior credible intervals from a samples file, and ``study`` loops
simulate/fit/summarize over replicates and reports interval coverage of the
true parameters.

All files are plain delimited text with a comment header recording the
config hash and seed. Numbers are written with shortest round-trip
formatting so outputs re-ingest losslessly. Exit codes: 0 success,
2 ingestion/validation error, 3 numerical failure.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import math
import os
import sys

import click
import numpy as np

from .gaussian import DegenerateConstraintError
from .model import (
    PARAM_NAMES,
    ModelParams,
    ObservationSet,
    reconstruct_locations,
    simulate_path,
    snap_observations,
)
from .sampler import SamplerConfig, credible_intervals, run_chain

EXIT_INGESTION = 2
EXIT_NUMERICAL = 3

UNITS_NOTE = "units assumed: metres and minutes"


class IngestionError(ValueError):
    """Invalid input file or configuration."""


class NumericalError(RuntimeError):
    """Unrecoverable numerical failure during a run."""


# ---------------------------------------------------------------------------
# configuration

_PARAM_KEYS = {"sigmaB2", "mu", "lambda", "sigmaS2", "sigmaE2"}

_KNOWN_KEYS = {
    "dt": float,
    "seed": int,
    "n_iterations": int,
    "burn_in": int,
    "thin": int,
    "path_updates_per_param_update": int,
    "section_len_min": int,
    "section_len_max": int,
    "proposal_scales": (list, type(None)),
    "tune_proposals": bool,
    "speed_prior_k": (int, float, type(None)),
    "init_step_convention": str,
    "path_snapshot_stride": int,
    "check_constraints": bool,
    "path_warmup_updates": (int, type(None)),
    "true_params": dict,
    "initial_params": (dict, type(None)),
    "n_observations": int,
    "obs_interval": float,
    "origin": list,
    "replicates": int,
    "output_dir": str,
    "track_out": str,
    "truth_out": str,
    "samples_out": str,
    "diagnostics_out": str,
    "paths_out": str,
    "level": float,
}

_DEFAULTS = {
    "seed": 0,
    "thin": 1,
    "path_updates_per_param_update": 50,
    "section_len_min": 5,
    "section_len_max": 12,
    "proposal_scales": None,
    "tune_proposals": True,
    "speed_prior_k": 2.0,
    "init_step_convention": "legacy",
    "path_snapshot_stride": 10,
    "check_constraints": False,
    "path_warmup_updates": None,
    "initial_params": None,
    "origin": [0.0, 0.0],
    "level": 0.9,
}


def load_config(path: str, **overrides) -> dict:
    """Read and validate a JSON run config; unknown keys are rejected.

    Keyword overrides with value None are ignored.
    """
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestionError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise IngestionError("config must be a JSON object")
    unknown = sorted(set(cfg) - set(_KNOWN_KEYS))
    if unknown:
        raise IngestionError(f"unknown config keys: {', '.join(unknown)}")
    for key, val in overrides.items():
        if val is not None:
            cfg[key] = val
    merged = dict(_DEFAULTS)
    merged.update(cfg)
    for key, val in merged.items():
        expected = _KNOWN_KEYS[key]
        if isinstance(expected, tuple):
            ok = isinstance(val, expected)
        elif expected is float:
            ok = isinstance(val, (int, float)) and not isinstance(val, bool)
        elif expected is int:
            ok = isinstance(val, int) and not isinstance(val, bool)
        else:
            ok = isinstance(val, expected)
        if not ok:
            raise IngestionError(f"config key {key!r} has invalid type {type(val).__name__}")
    for pkey in ("true_params", "initial_params"):
        block = merged.get(pkey)
        if block is not None:
            bad = sorted(set(block) - _PARAM_KEYS) + sorted(_PARAM_KEYS - set(block))
            if bad:
                raise IngestionError(f"{pkey} must have exactly keys {sorted(_PARAM_KEYS)}")
    return merged


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def _params_from_dict(d: dict, allow_zero_noise: bool = False) -> ModelParams:
    try:
        p = ModelParams(
            sigmaB2=float(d["sigmaB2"]),
            mu=float(d["mu"]),
            lam=float(d["lambda"]),
            sigmaS2=float(d["sigmaS2"]),
            sigmaE2=float(d["sigmaE2"]),
        )
    except (KeyError, ValueError) as exc:
        raise IngestionError(f"invalid parameter block: {exc}") from exc
    if not allow_zero_noise and not p.all_positive():
        raise IngestionError("parameters must be strictly positive for inference")
    return p


def _sampler_config(cfg: dict, require_iters: bool = True) -> SamplerConfig:
    for key in ("dt",) + (("n_iterations", "burn_in") if require_iters else ()):
        if key not in cfg:
            raise IngestionError(f"config key {key!r} is required")
    try:
        return SamplerConfig(
            dt=cfg["dt"],
            n_iterations=cfg.get("n_iterations", 0),
            burn_in=cfg.get("burn_in", 0),
            thin=cfg["thin"],
            path_updates_per_param_update=cfg["path_updates_per_param_update"],
            section_len_min=cfg["section_len_min"],
            section_len_max=cfg["section_len_max"],
            proposal_scales=cfg["proposal_scales"],
            tune_proposals=cfg["tune_proposals"],
            speed_prior_k=cfg["speed_prior_k"],
            init_step_convention=cfg["init_step_convention"],
            seed=cfg["seed"],
            path_snapshot_stride=cfg["path_snapshot_stride"],
            check_constraints=cfg["check_constraints"],
            path_warmup_updates=cfg["path_warmup_updates"],
        )
    except ValueError as exc:
        raise IngestionError(str(exc)) from exc


# ---------------------------------------------------------------------------
# file I/O

def _fmt(v) -> str:
    return repr(float(v))


def _header(cfg: dict) -> list[str]:
    return [
        f"# config_hash={config_hash(cfg)} seed={cfg.get('seed')}",
        f"# {UNITS_NOTE}",
    ]


def _write_lines(path: str, lines) -> None:
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    try:
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IngestionError(f"cannot write {path}: {exc}") from exc


def read_track(path: str):
    """Parse a `time,x,y` track file; failures carry row numbers."""
    try:
        with open(path) as fh:
            raw = fh.readlines()
    except OSError as exc:
        raise IngestionError(f"cannot read track {path}: {exc}") from exc
    times, xs, ys = [], [], []
    header_seen = False
    for lineno, line in enumerate(raw, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if not header_seen:
            if [c.strip() for c in line.split(",")] != ["time", "x", "y"]:
                raise IngestionError(f"row {lineno}: expected header 'time,x,y'")
            header_seen = True
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise IngestionError(f"row {lineno}: expected 3 fields, got {len(parts)}")
        try:
            t, x, y = (float(p) for p in parts)
        except ValueError as exc:
            raise IngestionError(f"row {lineno}: {exc}") from exc
        times.append(t)
        xs.append(x)
        ys.append(y)
    if not header_seen:
        raise IngestionError("track file is empty")
    if len(times) < 2:
        raise IngestionError("track must contain at least two observations")
    if any(b <= a for a, b in zip(times, times[1:])):
        raise IngestionError("track times must be strictly increasing")
    return np.array(times), np.array(xs), np.array(ys)


def read_samples(path: str) -> np.ndarray:
    """Parse a samples file back into a (k, 5) parameter matrix."""
    try:
        with open(path) as fh:
            raw = fh.readlines()
    except OSError as exc:
        raise IngestionError(f"cannot read samples {path}: {exc}") from exc
    rows = []
    header_seen = False
    expected = ["iteration", *PARAM_NAMES]
    for lineno, line in enumerate(raw, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [c.strip() for c in line.split(",")]
        if not header_seen:
            if parts != expected:
                raise IngestionError(f"row {lineno}: bad samples header")
            header_seen = True
            continue
        if len(parts) != 6:
            raise IngestionError(f"row {lineno}: expected 6 fields")
        try:
            rows.append([float(p) for p in parts[1:]])
        except ValueError as exc:
            raise IngestionError(f"row {lineno}: {exc}") from exc
    if not rows:
        raise IngestionError("samples file contains no rows")
    return np.array(rows)


# ---------------------------------------------------------------------------
# commands

def do_simulate(cfg: dict) -> None:
    for key in ("dt", "true_params", "n_observations", "obs_interval", "track_out", "truth_out"):
        if key not in cfg:
            raise IngestionError(f"simulate requires config key {key!r}")
    dt = float(cfg["dt"])
    interval = float(cfg["obs_interval"])
    n_obs = cfg["n_observations"]
    if n_obs < 2:
        raise IngestionError("n_observations must be >= 2")
    per_gap = interval / dt
    if abs(per_gap - round(per_gap)) > 1e-9:
        raise IngestionError("obs_interval must be an integer multiple of dt")
    per_gap = int(round(per_gap))
    params = _params_from_dict(cfg["true_params"], allow_zero_noise=True)

    rng = np.random.default_rng(cfg["seed"])
    n_steps = (n_obs - 1) * per_gap
    path = simulate_path(
        params, n_steps, dt, np.asarray(cfg["origin"], dtype=float), rng,
        init_step_convention=cfg["init_step_convention"],
    )
    locs = reconstruct_locations(path)
    obs_nodes = np.arange(n_obs) * per_gap
    noise = (
        math.sqrt(params.sigmaE2) * rng.standard_normal((n_obs, 2))
        if params.sigmaE2 > 0
        else np.zeros((n_obs, 2))
    )
    obs_xy = locs[obs_nodes] + noise

    lines = _header(cfg) + ["time,x,y"]
    for i in range(n_obs):
        t = i * interval
        lines.append(f"{_fmt(t)},{_fmt(obs_xy[i, 0])},{_fmt(obs_xy[i, 1])}")
    _write_lines(cfg["track_out"], lines)

    plines = _header(cfg)
    plines.append(
        "# true_params "
        + " ".join(f"{n}={_fmt(v)}" for n, v in zip(PARAM_NAMES, params.as_array()))
    )
    plines.append("# bearing/step columns describe the edge arriving at the node")
    plines.append("node,time,x,y,bearing,step")
    plines.append(f"0,{_fmt(0.0)},{_fmt(locs[0, 0])},{_fmt(locs[0, 1])},,")
    for k in range(1, n_steps + 1):
        plines.append(
            f"{k},{_fmt(k * dt)},{_fmt(locs[k, 0])},{_fmt(locs[k, 1])},"
            f"{_fmt(path.bearings[k - 1])},{_fmt(path.steps[k - 1])}"
        )
    _write_lines(cfg["truth_out"], plines)


def _ingest_track(cfg: dict, track_path: str) -> ObservationSet:
    times, xs, ys = read_track(track_path)
    try:
        return snap_observations(times, xs, ys, float(cfg["dt"]))
    except ValueError as exc:
        raise IngestionError(str(exc)) from exc


def do_fit(cfg: dict, track_path: str) -> None:
    for key in ("samples_out", "diagnostics_out"):
        if key not in cfg:
            raise IngestionError(f"fit requires config key {key!r}")
    obs = _ingest_track(cfg, track_path)
    sc = _sampler_config(cfg)
    initial = (
        _params_from_dict(cfg["initial_params"]) if cfg.get("initial_params") else None
    )
    try:
        samples, diags = run_chain(obs, sc, initial_params=initial)
    except (np.linalg.LinAlgError, DegenerateConstraintError, FloatingPointError) as exc:
        raise NumericalError(f"sampler failed: {exc}") from exc

    lines = _header(cfg) + ["iteration," + ",".join(PARAM_NAMES)]
    for s in samples:
        lines.append(
            f"{s.iteration}," + ",".join(_fmt(v) for v in s.params.as_array())
        )
    _write_lines(cfg["samples_out"], lines)

    dlines = _header(cfg) + ["key,value"]
    for key, val in diags.as_rows():
        dlines.append(f"{key},{val!r}" if not isinstance(val, float) else f"{key},{_fmt(val)}")
    _write_lines(cfg["diagnostics_out"], dlines)

    if cfg.get("paths_out"):
        plines = _header(cfg) + ["sample,node,time,x,y"]
        dt = float(cfg["dt"])
        for s in samples:
            if s.path is None:
                continue
            locs = reconstruct_locations(s.path)
            for k in range(locs.shape[0]):
                plines.append(
                    f"{s.iteration},{k},{_fmt(k * dt)},{_fmt(locs[k, 0])},{_fmt(locs[k, 1])}"
                )
        _write_lines(cfg["paths_out"], plines)


def summarize_matrix(mat: np.ndarray, level: float):
    """Per-parameter posterior mean and equal-tailed interval rows."""
    ints = credible_intervals(mat, level)
    rows = []
    for j, name in enumerate(PARAM_NAMES):
        lo, hi = ints[name]
        rows.append((name, float(np.mean(mat[:, j])), lo, hi))
    return rows


def do_summarize(samples_path: str, level: float, out=None) -> list:
    mat = read_samples(samples_path)
    if mat.shape[0] < 2:
        raise IngestionError("need at least two samples to summarize")
    rows = summarize_matrix(mat, level)
    lines = ["parameter,mean,lo,hi"]
    for name, mean, lo, hi in rows:
        lines.append(f"{name},{_fmt(mean)},{_fmt(lo)},{_fmt(hi)}")
    text = "\n".join(lines)
    click.echo(text, file=out)
    return rows


def _run_replicate(args):
    """simulate + fit + summarize for one study replicate (picklable)."""
    cfg, rep, sim_seed, fit_seed, level = args
    rep_dir = os.path.join(cfg["output_dir"], f"rep_{rep:03d}")
    sim_cfg = dict(cfg)
    sim_cfg.update(
        seed=sim_seed,
        track_out=os.path.join(rep_dir, "track.csv"),
        truth_out=os.path.join(rep_dir, "truth.csv"),
    )
    fit_cfg = dict(cfg)
    fit_cfg.update(
        seed=fit_seed,
        samples_out=os.path.join(rep_dir, "samples.csv"),
        diagnostics_out=os.path.join(rep_dir, "diagnostics.csv"),
        paths_out=os.path.join(rep_dir, "paths.csv"),
    )
    try:
        do_simulate(sim_cfg)
        do_fit(fit_cfg, sim_cfg["track_out"])
        mat = read_samples(fit_cfg["samples_out"])
        if mat.shape[0] < 2:
            raise NumericalError("replicate produced fewer than two samples")
        ints = credible_intervals(mat, level)
    except Exception as exc:  # noqa: BLE001 - replicate failures must not abort the study
        return rep, None, f"{type(exc).__name__}: {exc}"
    truth = cfg["true_params"]
    result = {}
    for name in PARAM_NAMES:
        lo, hi = ints[name]
        true_val = float(truth[name])
        result[name] = (lo, hi, bool(lo <= true_val <= hi))
    return rep, result, None


def do_study(cfg: dict, workers: int = 1) -> None:
    for key in ("dt", "true_params", "n_observations", "obs_interval", "replicates", "output_dir"):
        if key not in cfg:
            raise IngestionError(f"study requires config key {key!r}")
    reps = cfg["replicates"]
    if reps < 1:
        raise IngestionError("replicates must be >= 1")
    level = float(cfg["level"])
    ss = np.random.SeedSequence(cfg["seed"])
    children = ss.spawn(reps)
    jobs = []
    for rep, child in enumerate(children):
        s = child.generate_state(2)
        jobs.append((cfg, rep, int(s[0]), int(s[1]), level))

    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_replicate, jobs))
    else:
        results = [_run_replicate(job) for job in jobs]

    rep_lines = _header(cfg) + [
        "replicate,status," + ",".join(f"{n}_covered" for n in PARAM_NAMES)
    ]
    per_param_cov = {n: [] for n in PARAM_NAMES}
    per_param_width = {n: [] for n in PARAM_NAMES}
    for rep, result, err in results:
        if result is None:
            rep_lines.append(f"{rep},failed:{err}," + ",".join([""] * 5))
            continue
        flags = []
        for name in PARAM_NAMES:
            lo, hi, covered = result[name]
            per_param_cov[name].append(covered)
            per_param_width[name].append(hi - lo)
            flags.append("1" if covered else "0")
        rep_lines.append(f"{rep},ok," + ",".join(flags))
    _write_lines(os.path.join(cfg["output_dir"], "replicates.csv"), rep_lines)

    cov_lines = _header(cfg) + ["parameter,n_ok,n_covered,coverage,mean_width"]
    for name in PARAM_NAMES:
        flags = per_param_cov[name]
        n_ok = len(flags)
        n_cov = sum(flags)
        coverage = n_cov / n_ok if n_ok else float("nan")
        width = float(np.mean(per_param_width[name])) if n_ok else float("nan")
        cov_lines.append(f"{name},{n_ok},{n_cov},{_fmt(coverage)},{_fmt(width)}")
    _write_lines(os.path.join(cfg["output_dir"], "coverage.csv"), cov_lines)
    click.echo("\n".join(cov_lines[2:]))


# ---------------------------------------------------------------------------
# click surface

@click.group()
def cli():
    """Continuous-time step-and-turn movement model tools."""


_common = [
    click.option("--config", "config_path", required=True, type=click.Path()),
    click.option("--seed", type=int, default=None, help="override config seed"),
    click.option("--dt", type=float, default=None, help="override grid spacing"),
    click.option("--iterations", "n_iterations", type=int, default=None,
                 help="override post-burn-in iteration count"),
]


def _with_common(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


@cli.command()
@_with_common
def simulate(config_path, seed, dt, n_iterations):
    """Simulate a synthetic track and its latent truth."""
    cfg = load_config(config_path, seed=seed, dt=dt, n_iterations=n_iterations)
    do_simulate(cfg)


@cli.command()
@click.option("--track", "track_path", required=True, type=click.Path())
@_with_common
def fit(track_path, config_path, seed, dt, n_iterations):
    """Fit the movement model to an observed track."""
    cfg = load_config(config_path, seed=seed, dt=dt, n_iterations=n_iterations)
    do_fit(cfg, track_path)


@cli.command()
@click.option("--samples", "samples_path", required=True, type=click.Path())
@click.option("--level", type=float, default=0.9, show_default=True)
def summarize(samples_path, level):
    """Print posterior means and credible intervals from a samples file."""
    if not 0.0 < level < 1.0:
        raise IngestionError("level must be in (0, 1)")
    do_summarize(samples_path, level)


@cli.command()
@click.option("--workers", type=int, default=1, show_default=True)
@_with_common
def study(config_path, seed, dt, n_iterations, workers):
    """Run a simulate/fit coverage study over replicates."""
    cfg = load_config(config_path, seed=seed, dt=dt, n_iterations=n_iterations)
    do_study(cfg, workers=workers)


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except (IngestionError, click.UsageError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_INGESTION)
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERICAL)
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    return 0


if __name__ == "__main__":
    sys.exit(main())
