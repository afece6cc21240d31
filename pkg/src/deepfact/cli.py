"""Command-line entry point ``deepfact``.

Usage::

    deepfact <subcommand> --config <path> [--out <dir>] [--seed <u64>] [--threads <n>]

Subcommands are ``simulate``, ``theory``, ``coupling``, ``plasticity``,
``sweep`` and ``metrics``. The config is a TOML file; nested tables are
flattened to dotted keys, so ``[init] alpha = 0.1`` is the key
``init.alpha``. Indices in outputs are 1-based.

Exit codes: 0 on success (runs that miss their loss threshold are flagged in
the outputs), 2 when the config cannot be parsed, 3 when it fails
validation.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .core import (
    AllOnes,
    AlphaM,
    BlockSpec,
    FactorChain,
    Gaussian,
    Identity,
    ObservationSet,
    build_init,
    product,
)
from .errors import ConfigError, DeepFactError
from .experiments import (
    OBSERVATION_MODES,
    BlockConstant,
    PlasticityProtocol,
    RankR,
    TrainSettings,
    generate_ground_truth,
    run_plasticity,
    sample_nested_observations,
    sample_observations,
    train,
)
from .flow import IntegratorConfig, eigen_product_spectrum, initial_eigen_state, integrate_reduced_eigen
from .graph import detect_decoupling
from .metrics import reconstruction_error, spectrum_metrics
from .theory import predict_limit

__all__ = ["EXIT_OK", "EXIT_PARSE", "EXIT_VALIDATION", "ExperimentConfig", "load_config", "main", "run_experiment"]

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_VALIDATION = 3

SUBCOMMANDS = ("simulate", "theory", "coupling", "plasticity", "sweep", "metrics")

CONFIG_KEYS = (
    "kind", "dim", "depth",
    "init.scheme", "init.alpha", "init.m", "init.std",
    "obs.mode", "obs.count", "obs.seed",
    "truth.kind", "truth.rank", "truth.seed",
    "integrator.method", "integrator.step", "integrator.t_max", "integrator.stop_loss",
    "trials", "out",
)
# Keys beyond the core schema that some experiments need.
EXTENSION_KEYS = ("truth.target", "integrator.record_every")

INIT_SCHEMES = ("alpha_m", "identity", "all_ones", "gaussian")
TRUTH_KINDS = ("rank_r", "block_constant")
METHODS = ("rk4", "euler", "gd")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _flatten(table: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in table.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def _as_list(value) -> list:
    return list(value) if isinstance(value, (list, tuple)) else [value]


def _number(value, key: str) -> float:
    if isinstance(value, str) and value.strip().lower() in ("inf", "infinity"):
        return math.inf
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key} must be a number, got {value!r}")
    return float(value)


def _integer(value, key: str, minimum: int = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigError(f"{key} must be an integer >= {minimum}, got {value!r}")
    return int(value)


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    dim: int
    depths: tuple
    scheme: str
    alphas: tuple
    ms: tuple
    std: Optional[float]
    obs_mode: str
    obs_count: tuple
    obs_seed: int
    truth_kind: str
    truth_rank: Optional[int]
    truth_seed: int
    truth_target: float
    method: str
    step: Optional[float]
    t_max: float
    stop_loss: float
    record_every: int
    trials: int
    out: Optional[str]
    raw: dict

    @property
    def block_spec(self) -> Optional[BlockSpec]:
        if self.obs_mode != "block":
            return None
        n = self.obs_count[0] if self.obs_count else self.dim
        return BlockSpec(self.dim // n, n, self.truth_target)

    def settings(self) -> TrainSettings:
        if self.method == "gd":
            iters = int(math.ceil(self.t_max / self.step))
            return TrainSettings("gd", self.step, self.stop_loss, self.t_max, iters, self.record_every)
        return TrainSettings(self.method, self.step, self.stop_loss, self.t_max, 0, self.record_every)


def parse_config(flat: dict, kind: str) -> ExperimentConfig:
    """Validate a flattened config for subcommand ``kind``."""
    unknown = sorted(set(flat) - set(CONFIG_KEYS) - set(EXTENSION_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    declared = flat.get("kind", kind)
    if declared != kind:
        raise ConfigError(f"config kind {declared!r} does not match subcommand {kind!r}")
    if "dim" not in flat:
        raise ConfigError("dim is required")
    dim = _integer(flat["dim"], "dim", 1)
    depths = tuple(_integer(v, "depth", 1) for v in _as_list(flat.get("depth", 2)))
    scheme = flat.get("init.scheme", "alpha_m")
    if scheme not in INIT_SCHEMES:
        raise ConfigError(f"init.scheme must be one of {INIT_SCHEMES}, got {scheme!r}")
    alphas = tuple(_number(v, "init.alpha") for v in _as_list(flat.get("init.alpha", 1.0)))
    ms = tuple(_number(v, "init.m") for v in _as_list(flat.get("init.m", math.inf)))
    if any(not a > 0 for a in alphas):
        raise ConfigError("init.alpha values must be positive")
    if any(not m > 1 for m in ms):
        raise ConfigError("init.m values must exceed 1")
    std = None
    if scheme == "gaussian":
        if "init.std" not in flat:
            raise ConfigError("init.std is required for the gaussian scheme (suggested: 1e-2/sqrt(dim))")
        std = _number(flat["init.std"], "init.std")
        if not std > 0:
            raise ConfigError("init.std must be positive")

    default_mode = "block" if kind in ("theory", "coupling", "sweep") else "uniform_without_replacement"
    obs_mode = flat.get("obs.mode", default_mode)
    if obs_mode not in OBSERVATION_MODES:
        raise ConfigError(f"obs.mode must be one of {OBSERVATION_MODES}, got {obs_mode!r}")
    obs_count = tuple(_integer(v, "obs.count", 1) for v in _as_list(flat.get("obs.count", [])))
    if obs_mode == "block":
        n = obs_count[0] if obs_count else dim
        if dim % n:
            raise ConfigError(f"obs.count (number of blocks) {n} must divide dim {dim}")
    if obs_mode == "uniform_without_replacement":
        if not obs_count:
            raise ConfigError("obs.count is required for uniform sampling")
        if max(obs_count) > dim * dim:
            raise ConfigError(f"obs.count cannot exceed dim^2 = {dim * dim}")
    if kind == "plasticity":
        if obs_mode != "uniform_without_replacement" or len(obs_count) != 2 or obs_count[0] >= obs_count[1]:
            raise ConfigError("plasticity needs uniform sampling with obs.count = [pre, post], pre < post")
    obs_seed = _integer(flat.get("obs.seed", 0), "obs.seed")

    truth_kind = flat.get("truth.kind", "block_constant" if obs_mode == "block" else "rank_r")
    if truth_kind not in TRUTH_KINDS:
        raise ConfigError(f"truth.kind must be one of {TRUTH_KINDS}, got {truth_kind!r}")
    truth_rank = None
    if truth_kind == "rank_r":
        truth_rank = _integer(flat.get("truth.rank", 1), "truth.rank", 1)
        if truth_rank > dim:
            raise ConfigError(f"truth.rank {truth_rank} exceeds dim {dim}")
    elif obs_mode != "block":
        raise ConfigError("truth.kind = block_constant needs obs.mode = block")
    truth_seed = _integer(flat.get("truth.seed", 0), "truth.seed")
    truth_target = _number(flat.get("truth.target", 1.0), "truth.target")
    if not truth_target > 0:
        raise ConfigError("truth.target must be positive")

    method = flat.get("integrator.method", "rk4")
    if method not in METHODS:
        raise ConfigError(f"integrator.method must be one of {METHODS}, got {method!r}")
    step = flat.get("integrator.step")
    step = None if step is None else _number(step, "integrator.step")
    if step is not None and not step > 0:
        raise ConfigError("integrator.step must be positive")
    if method == "gd" and step is None:
        raise ConfigError("integrator.step is required for gradient descent")
    t_max = _number(flat.get("integrator.t_max", 100.0), "integrator.t_max")
    stop_loss = _number(flat.get("integrator.stop_loss", 1e-12), "integrator.stop_loss")
    if not t_max > 0 or not stop_loss >= 0:
        raise ConfigError("integrator.t_max must be positive and integrator.stop_loss non-negative")
    record_every = _integer(flat.get("integrator.record_every", 100), "integrator.record_every", 1)
    trials = _integer(flat.get("trials", 1), "trials", 1)
    out = flat.get("out")
    if out is not None and not isinstance(out, str):
        raise ConfigError("out must be a path string")
    if kind in ("theory", "sweep") and scheme not in ("alpha_m", "identity"):
        raise ConfigError(f"{kind} needs init.scheme alpha_m or identity")
    if kind == "theory" and obs_mode != "block":
        raise ConfigError("theory predictions need obs.mode = block")
    return ExperimentConfig(
        kind, dim, depths, scheme, alphas, ms, std, obs_mode, obs_count, obs_seed,
        truth_kind, truth_rank, truth_seed, truth_target, method, step, t_max,
        stop_loss, record_every, trials, out, dict(flat),
    )


def load_config(path: str | os.PathLike, kind: str) -> ExperimentConfig:
    """Read and validate a TOML config. Raises ``OSError``/``TOMLDecodeError`` or ``ConfigError``."""
    with open(path, "rb") as fh:
        table = tomllib.load(fh)
    return parse_config(_flatten(table), kind)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def _scheme(cfg: ExperimentConfig, alpha: float, m: float, seed: int):
    if cfg.scheme == "alpha_m":
        return AlphaM(alpha, m)
    if cfg.scheme == "identity":
        return Identity(alpha)
    if cfg.scheme == "all_ones":
        return AllOnes(alpha)
    return Gaussian(cfg.std, seed)


def _truth(cfg: ExperimentConfig) -> np.ndarray:
    if cfg.truth_kind == "rank_r":
        return generate_ground_truth(RankR(cfg.dim, cfg.truth_rank, cfg.truth_seed))
    return generate_ground_truth(BlockConstant(cfg.block_spec))


def _observations(cfg: ExperimentConfig, truth: np.ndarray) -> ObservationSet:
    count = cfg.obs_count[0] if cfg.obs_count else None
    return sample_observations(cfg.dim, count, cfg.obs_seed, cfg.obs_mode, truth, cfg.block_spec)


def _conserved_spec(cfg: ExperimentConfig) -> Optional[BlockSpec]:
    return cfg.block_spec if cfg.scheme in ("alpha_m", "identity") else None


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if math.isfinite(v) else str(v)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def _pool_map(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _grid(cfg: ExperimentConfig) -> list[tuple[int, float, float]]:
    return sorted(itertools.product(cfg.depths, cfg.ms, cfg.alphas))


# ---------------------------------------------------------------------------
# Experiment kinds
# ---------------------------------------------------------------------------


def _run_simulate(cfg: ExperimentConfig, out: Path, seed: int, threads: int) -> dict:
    truth = _truth(cfg)
    obs = _observations(cfg, truth)
    depth, alpha, m = cfg.depths[0], cfg.alphas[0], cfg.ms[0]
    spec = _conserved_spec(cfg)

    def one(trial: int):
        chain = build_init(_scheme(cfg, alpha, m, seed + trial), depth, cfg.dim)
        return train(chain, obs, cfg.settings(), block_spec=spec)

    trajs = _pool_map(one, list(range(cfg.trials)), threads)
    header = ["trial", "t", "loss"] + [f"sigma_{k + 1}" for k in range(cfg.dim)] + [
        "stable_rank", "effective_rank", "balance_drift", "conserved_drift"]
    rows, finals = [], []
    for trial, tr in enumerate(trajs):
        for k in range(len(tr)):
            rows.append([trial + 1, tr.times[k], tr.losses[k], *tr.singular_values[k],
                         tr.stable_ranks[k], tr.effective_ranks[k],
                         tr.invariant_drifts["balance"][k], tr.invariant_drifts["conserved"][k]])
        w = product(tr.final_chain)
        finals.append({
            "trial": trial + 1,
            "t": tr.times[-1],
            "loss": tr.final_loss,
            "converged": tr.converged,
            "status": tr.status,
            "singular_values": tr.singular_values[-1].tolist(),
            "stable_rank": tr.stable_ranks[-1],
            "effective_rank": tr.effective_ranks[-1],
            "reconstruction_error": reconstruction_error(w, truth) if np.any(truth) else None,
        })
    _write_csv(out / "trajectory.csv", header, rows)
    return {"trials": finals}


def _run_theory(cfg: ExperimentConfig, out: Path, seed: int, threads: int) -> dict:
    spec = cfg.block_spec

    def one(point):
        depth, m, alpha = point
        scheme = Identity(alpha) if cfg.scheme == "identity" else AlphaM(alpha, m)
        lim = predict_limit(spec, scheme, depth)
        return [depth, m, alpha, lim.branch.value, lim.sigma1, lim.sigma_secondary, lim.stable_rank]

    rows = _pool_map(one, _grid(cfg), threads)
    _write_csv(out / "theory.csv",
               ["depth", "m", "alpha", "branch", "sigma1", "sigma_secondary", "srank_limit"], rows)
    return {"trials": [{"depth": r[0], "m": r[1], "alpha": r[2], "branch": r[3],
                        "sigma1": r[4], "sigma_secondary": r[5], "srank_limit": r[6],
                        "converged": True} for r in rows]}


def _run_coupling(cfg: ExperimentConfig, out: Path, seed: int, threads: int) -> dict:
    truth = _truth(cfg)
    obs = _observations(cfg, truth)

    def one(point):
        depth, m, alpha = point
        chain = build_init(_scheme(cfg, alpha, m, seed), depth, cfg.dim)
        rep = detect_decoupling(chain, obs)
        parts = " | ".join(
            " ".join(f"({obs.rows[k] + 1},{obs.cols[k] + 1})" for k in part) for part in rep.partition
        )
        rule = rep.structural_rule.value if rep.structural_rule else "numeric"
        return [depth, m, alpha, rep.verdict.value, rule, len(rep.partition), parts]

    rows = _pool_map(one, _grid(cfg), threads)
    _write_csv(out / "coupling.csv",
               ["depth", "m", "alpha", "verdict", "structural_rule", "num_parts", "partition"], rows)
    return {"trials": [{"depth": r[0], "m": r[1], "alpha": r[2], "verdict": r[3],
                        "structural_rule": r[4], "converged": True} for r in rows]}


# Flow runs from alpha**depth at or below this go through the reduced eigenvalue ODE.
REDUCED_ROUTE_SCALE = 1e-10


def _sweep_point(cfg: ExperimentConfig, obs: ObservationSet, spec: Optional[BlockSpec], seed: int, point):
    depth, m, alpha = point
    scheme = _scheme(cfg, alpha, m, seed)
    reduced = (
        spec is not None
        and cfg.method != "gd"
        and cfg.scheme in ("alpha_m", "identity")
        and depth >= 2
        and alpha**depth <= REDUCED_ROUTE_SCALE
    )
    if reduced:
        icfg = IntegratorConfig(cfg.method, cfg.step, True, cfg.t_max, cfg.stop_loss, cfg.record_every)
        etraj = integrate_reduced_eigen(spec, depth, initial_eigen_state(scheme, spec), icfg)
        sv = eigen_product_spectrum(etraj.final, spec, depth)
        sm = spectrum_metrics(np.diag(sv))
        final_loss, converged = float(etraj.losses[-1]), etraj.converged
        srank, erank = sm.stable_rank, sm.effective_rank
    else:
        tr = train(build_init(scheme, depth, cfg.dim), obs, cfg.settings(), block_spec=spec)
        sv = tr.singular_values[-1]
        final_loss, converged = tr.final_loss, tr.converged
        srank, erank = tr.stable_ranks[-1], tr.effective_ranks[-1]
    pred1 = pred2 = math.nan
    if spec is not None and not spec.degenerate and depth >= 2 and cfg.scheme in ("alpha_m", "identity"):
        lim = predict_limit(spec, scheme, depth)
        pred1, pred2 = lim.sigma1, lim.sigma_secondary
    second = sv[1] if sv.size > 1 else math.nan
    return [depth, m, alpha, "reduced" if reduced else "full", sv[0], second, srank, erank,
            final_loss, converged, pred1, pred2]


def _run_sweep(cfg: ExperimentConfig, out: Path, seed: int, threads: int) -> dict:
    truth = _truth(cfg)
    obs = _observations(cfg, truth)
    spec = cfg.block_spec
    rows = _pool_map(lambda p: _sweep_point(cfg, obs, spec, seed, p), _grid(cfg), threads)
    header = ["depth", "m", "alpha", "route", "sigma1", "sigma_secondary", "stable_rank", "effective_rank",
              "final_loss", "converged", "predicted_sigma1", "predicted_sigma_secondary"]
    _write_csv(out / "sweep.csv", header, rows)
    return {"trials": [dict(zip(header, r)) for r in rows]}


def _run_plasticity(cfg: ExperimentConfig, out: Path, seed: int, threads: int) -> dict:
    settings = cfg.settings()
    tasks = [(trial, depth) for trial in range(cfg.trials) for depth in cfg.depths]

    def one(task):
        trial, depth = task
        truth = generate_ground_truth(RankR(cfg.dim, cfg.truth_rank or 1, cfg.truth_seed + trial))
        pre, post = sample_nested_observations(cfg.dim, cfg.obs_count, cfg.obs_seed + trial, truth)
        protocol = PlasticityProtocol(pre, post, ("pre-only", "warm", "cold"), settings, settings)
        init = build_init(_scheme(cfg, cfg.alphas[0], cfg.ms[0], seed + trial), depth, cfg.dim)
        res = run_plasticity(protocol, init, truth)
        return [[trial + 1, depth, mode, r.initial_loss, r.final_loss, r.converged,
                 r.effective_rank, r.stable_rank, r.reconstruction_error]
                for mode, r in ((k, res[k]) for k in ("pre-only", "warm", "cold"))]

    rows = [row for group in _pool_map(one, tasks, threads) for row in group]
    header = ["trial", "depth", "mode", "initial_loss", "final_loss", "converged",
              "effective_rank", "stable_rank", "reconstruction_error"]
    _write_csv(out / "plasticity.csv", header, rows)
    return {"trials": [dict(zip(header, r)) for r in rows]}


def _metrics_dict(matrix: np.ndarray) -> dict:
    sm = spectrum_metrics(matrix)
    return {
        "singular_values": sm.singulars.tolist(),
        "stable_rank": sm.stable_rank,
        "effective_rank": sm.effective_rank,
        "spectral_norm": sm.spectral_norm,
        "frobenius_norm": sm.frobenius_norm,
    }


def _run_metrics(cfg: ExperimentConfig, out: Path, seed: int, threads: int) -> dict:
    truth = _truth(cfg)
    obs = _observations(cfg, truth)
    chain = build_init(_scheme(cfg, cfg.alphas[0], cfg.ms[0], seed), cfg.depths[0], cfg.dim)
    w0 = product(chain)
    report = {
        "ground_truth": _metrics_dict(truth),
        "initial_product": _metrics_dict(w0),
        "observed_count": len(obs),
        "initial_reconstruction_error": reconstruction_error(w0, truth) if np.any(truth) else None,
    }
    (out / "metrics.json").write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n")
    return {"trials": [dict(report, converged=True)]}


RUNNERS = {
    "simulate": _run_simulate,
    "theory": _run_theory,
    "coupling": _run_coupling,
    "sweep": _run_sweep,
    "plasticity": _run_plasticity,
    "metrics": _run_metrics,
}


def run_experiment(
    kind: str,
    config_path: str | os.PathLike,
    *,
    out: Optional[str] = None,
    seed: int = 0,
    threads: int = 1,
) -> int:
    """Run one experiment and return the process exit code."""
    try:
        cfg = load_config(config_path, kind)
    except (OSError, tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        print(f"deepfact: cannot parse config: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (ConfigError, ValueError) as exc:
        print(f"deepfact: invalid config: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    out_dir = Path(out or cfg.out or "deepfact_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    try:
        result = RUNNERS[kind](cfg, out_dir, int(seed), max(1, int(threads)))
    except (DeepFactError, ValueError) as exc:
        print(f"deepfact: invalid experiment: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    summary = {
        "kind": kind,
        "config": cfg.raw,
        "seed": int(seed),
        "trials": result["trials"],
        "all_converged": all(bool(t.get("converged", True)) for t in result["trials"]),
        "wall_clock_seconds": time.perf_counter() - started,
    }
    (out_dir / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepfact", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML experiment config")
        p.add_argument("--out", help="output directory (overrides the config's out)")
        p.add_argument("--seed", type=int, default=0, help="base seed for random initializations")
        p.add_argument("--threads", type=int, default=1, help="worker threads for trials and grid points")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if not 0 <= args.seed < 2**64:
        print("deepfact: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_VALIDATION
    return run_experiment(args.command, args.config, out=args.out, seed=args.seed, threads=args.threads)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
