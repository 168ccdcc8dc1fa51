"""Benchmark orchestration.

Executes a run config across seeds, writes a self-describing run directory
(config snapshot, per-seed checkpoint and training stream, per-seed records,
aggregate summary), renders scatter frames, and assembles comparison reports
from finished run directories.

Run directory layout:
    <out>/<name>/config.json           resolved snapshot (re-executable)
    <out>/<name>/seed<k>.npz           trained networks + optimizer state
    <out>/<name>/seed<k>_train.jsonl   training metrics stream
    <out>/<name>/records.jsonl         one evaluation record per seed
    <out>/<name>/summary.json          mean/std aggregate over seeds
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .baselines import (
    DirectSdeResult,
    DriftNet,
    direct_sde_frames,
    linear_interpolation_path,
    train_direct_sde,
)
from .config import EvalSpec, RunConfig, run_config_from_snapshot, snapshot_dict
from .metrics import FrameSequence, empirical_w2, mcvs, path_metrics
from .nets import load_checkpoint, make_time_embedding, save_checkpoint
from .solver import (
    SolverNets,
    TrainResult,
    default_frame_times,
    inference_rollout,
    train,
)
from .tasks import (
    STREAM_EVAL,
    STREAM_SOURCE,
    STREAM_TARGET,
    SeededSampler,
    make_schedule,
    make_task,
    sample_source,
    sample_target,
)

log = logging.getLogger(__name__)

Array = np.ndarray

# evaluation noise must not collide with the training streams, which use
# the raw run seed
_EVAL_SEED_BASE = 90_000
_EVAL_SEED_STRIDE = 1_000

METRIC_COLUMNS = (
    "terminal_w2",
    "max_intermediate_w2",
    "path_w2T",
    "observed_mean_w2",
    "mcvs",
    "kinetic_energy",
)


def _eval_seed(seed: int, rollout: int) -> int:
    return _EVAL_SEED_BASE + _EVAL_SEED_STRIDE * seed + rollout


# --- checkpoints ------------------------------------------------------------

def save_result_checkpoint(path, cfg: RunConfig, result) -> None:
    if isinstance(result, TrainResult):
        extra = {
            "kind": "fbsde",
            "run": snapshot_dict(cfg),
            "best_step": result.best_step,
            "best_metric": result.best_metric,
            "seed": result.seed,
        }
        save_checkpoint(path, result.nets.named(), extra)
    elif isinstance(result, DirectSdeResult):
        extra = {
            "kind": "direct-sde",
            "run": snapshot_dict(cfg),
            "best_step": result.best_step,
            "best_metric": result.best_metric,
            "seed": result.seed,
            "kinetic_convention": result.kinetic_convention,
        }
        save_checkpoint(path, {"drift": (result.net.spec, result.net.params)}, extra)
    else:
        raise TypeError(f"cannot checkpoint {type(result).__name__}")


def load_result_checkpoint(path):
    """Rebuild (run config, rollout-ready networks, extra) from a run
    checkpoint of either training kind."""
    nets, extra = load_checkpoint(path)
    run_cfg = run_config_from_snapshot(extra["run"])
    dim = make_task(run_cfg.task).dim
    if extra["kind"] == "fbsde":
        scfg = run_cfg.solver
        y0_spec, y0 = nets["y0"]
        z_spec, z = nets["z"]
        f_spec, f = nets.get("f", (None, None))
        built = SolverNets(
            emb=make_time_embedding(scfg.emb_dim, scfg.horizon),
            y0_spec=y0_spec, y0=y0, z_spec=z_spec, z=z, f_spec=f_spec, f=f,
            z_mode=scfg.z_mode, dim=dim,
        )
        return run_cfg, built, extra
    if extra["kind"] == "direct-sde":
        dcfg = run_cfg.direct
        spec, params = nets["drift"]
        built = DriftNet(emb=make_time_embedding(dcfg.emb_dim, dcfg.horizon),
                         spec=spec, params=params, dim=dim)
        return run_cfg, built, extra
    raise ValueError(f"unknown checkpoint kind {extra.get('kind')!r}")


# --- evaluation -------------------------------------------------------------

def _rollout_fn(cfg: RunConfig, nets, task, schedule):
    """Uniform (n, seed, times) -> FrameSequence interface over the three
    generative methods. nets is the method's trained networks (None for the
    linear reference)."""
    if cfg.method in ("fbsde-terminal", "fbsde-marginal"):
        def roll(n, seed, times):
            return inference_rollout(cfg.solver, nets, task, n, seed,
                                     frame_times=times, schedule=schedule)
    elif cfg.method == "direct-sde":
        def roll(n, seed, times):
            return direct_sde_frames(cfg.direct, nets, task, n, seed, times)
    elif cfg.method == "linear":
        def roll(n, seed, times):
            sampler = SeededSampler(seed)
            src = sample_source(task, n, sampler.rng(STREAM_SOURCE))
            tgt = sample_target(task, task.horizon, n, sampler.rng(STREAM_TARGET))
            return linear_interpolation_path(src, tgt, times, horizon=task.horizon)
    else:
        raise ValueError(f"unknown method {cfg.method!r}")
    return roll


def _frame_grid(cfg: RunConfig, task) -> list[float]:
    if cfg.method in ("fbsde-terminal", "fbsde-marginal"):
        return default_frame_times(cfg.solver.steps, cfg.solver.horizon)
    if cfg.method == "direct-sde":
        return default_frame_times(cfg.direct.steps, cfg.direct.horizon)
    return [k * task.horizon / 20 for k in range(21)]


def evaluate_path_protocol(roll, task, times, observed_times, ev: EvalSpec,
                           seed: int) -> dict:
    """Detour-style scoring: several independent evaluation rollouts against
    fresh target draws at every frame time; mean and standard error."""
    per: dict[str, list[float]] = {}
    for r in range(ev.rollouts):
        es = _eval_seed(seed, r)
        fs = roll(ev.samples, es, times)
        rng = SeededSampler(es).rng(STREAM_EVAL)
        targets = FrameSequence(times=list(times), frames=[
            sample_target(task, t, ev.samples, rng) for t in times])
        rec = path_metrics(fs, targets)
        curve = dict(zip([round(t, 9) for t in rec.times], rec.w2_curve))
        observed = [curve[round(t, 9)] for t in observed_times]
        vals = {
            "terminal_w2": rec.terminal_w2,
            "max_intermediate_w2": rec.max_intermediate_w2,
            "path_w2T": rec.path_w2T,
            "observed_mean_w2": float(np.mean(observed)),
            "mcvs": mcvs(fs),
        }
        for k, v in vals.items():
            per.setdefault(k, []).append(float(v))
    out = {}
    for k, vs in per.items():
        out[k] = float(np.mean(vs))
        out[f"{k}_se"] = float(np.std(vs, ddof=1) / math.sqrt(len(vs))) if len(vs) > 1 else 0.0
    out["protocol"] = "path"
    return out


def evaluate_endpoint_protocol(roll, task, times, ev: EvalSpec, seed: int) -> dict:
    """Terminal-law scoring: one rollout, exact W2 against several fresh
    target draws, speed variability along the trajectory frames."""
    es = _eval_seed(seed, 0)
    fs = roll(ev.samples, es, times)
    rng = SeededSampler(es).rng(STREAM_EVAL)
    w2s = [empirical_w2(fs.frames[-1], sample_target(task, task.horizon, ev.samples, rng))
           for _ in range(ev.target_draws)]
    return {
        "terminal_w2": float(np.mean(w2s)),
        "terminal_w2_draw_std": float(np.std(w2s, ddof=1)) if len(w2s) > 1 else 0.0,
        "mcvs": float(mcvs(fs)),
        "protocol": "endpoint",
    }


def evaluate(cfg: RunConfig, nets, seed: int) -> dict:
    task = make_task(cfg.task)
    steps = cfg.solver.steps if cfg.solver else (cfg.direct.steps if cfg.direct else 20)
    schedule = make_schedule(task, steps)
    roll = _rollout_fn(cfg, nets, task, schedule)
    times = _frame_grid(cfg, task)
    if len(schedule.interior_observed_indices()) > 0:
        observed = [float(schedule.times[i]) for i in schedule.interior_observed_indices()]
        observed.append(float(schedule.times[-1]))
        return evaluate_path_protocol(roll, task, times, observed, cfg.eval, seed)
    return evaluate_endpoint_protocol(roll, task, times, cfg.eval, seed)


# --- per-seed execution -----------------------------------------------------

def run_single(cfg: RunConfig, seed: int, out_dir: str | Path) -> dict:
    """Train (if the method trains) and evaluate one seed, writing the
    checkpoint and training stream into the run directory. Failures are
    captured in the record, not raised."""
    out = Path(out_dir)
    record: dict = {"name": cfg.name, "task": cfg.task, "method": cfg.method,
                    "seed": seed, "status": "ok"}
    t0 = time.perf_counter()
    try:
        task = make_task(cfg.task)
        result = None
        nets = None
        if cfg.method in ("fbsde-terminal", "fbsde-marginal"):
            result = train(cfg.solver, task, seed)
            nets = result.nets
        elif cfg.method == "direct-sde":
            result = train_direct_sde(cfg.direct, task, seed)
            nets = result.net
        if result is not None:
            save_result_checkpoint(out / f"seed{seed}.npz", cfg, result)
            with open(out / f"seed{seed}_train.jsonl", "w") as fh:
                for rec in result.metrics:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            record["train"] = {
                "best_step": result.best_step,
                "best_metric": result.best_metric,
                "steps_run": len(result.metrics),
            }
            if isinstance(result, DirectSdeResult):
                record["kinetic_convention"] = result.kinetic_convention
                kes = [m["kinetic_energy"] for m in result.metrics if "kinetic_energy" in m]
                record["train"]["final_kinetic_energy"] = kes[-1] if kes else None
        record["eval"] = evaluate(cfg, nets, seed)
        if cfg.method == "direct-sde" and record["train"].get("final_kinetic_energy") is not None:
            record["eval"]["kinetic_energy"] = record["train"]["final_kinetic_energy"]
    except Exception as exc:
        log.exception("seed %d of %s failed", seed, cfg.name)
        record["status"] = "failed"
        record["error"] = f"{type(exc).__name__}: {exc}"
    record["wall_s"] = round(time.perf_counter() - t0, 3)
    return record


def _worker(snap: dict, seed: int, out_dir: str) -> dict:
    return run_single(run_config_from_snapshot(snap), seed, out_dir)


def aggregate(records: list[dict]) -> dict:
    """Mean/std over the seeds that finished; order-independent."""
    ok = [r for r in records if r.get("status") == "ok"]
    metrics: dict[str, dict] = {}
    keys = sorted({k for r in ok for k, v in r.get("eval", {}).items()
                   if isinstance(v, (int, float))})
    for k in keys:
        vals = [float(r["eval"][k]) for r in ok if k in r.get("eval", {})]
        if not vals:
            continue
        metrics[k] = {
            "mean": float(np.mean(vals)),
            "std": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
            "n": len(vals),
        }
    return {
        "seeds_ok": sorted(r["seed"] for r in ok),
        "seeds_failed": sorted(r["seed"] for r in records if r.get("status") != "ok"),
        "metrics": metrics,
    }


def execute_run(cfg: RunConfig, out_root: str | Path, parallelism: int = 1) -> list[dict]:
    """Fan out over seeds, then aggregate. One seed failing does not stop
    the others; the failure is recorded and reflected in the summary."""
    out = Path(out_root) / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    snap = snapshot_dict(cfg)
    with open(out / "config.json", "w") as fh:
        json.dump(snap, fh, indent=2, sort_keys=True)
    if parallelism > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            futures = [pool.submit(_worker, snap, s, str(out)) for s in cfg.seeds]
            records = [f.result() for f in futures]
    else:
        records = [run_single(cfg, s, out) for s in cfg.seeds]
    records.sort(key=lambda r: r["seed"])
    with open(out / "records.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    summary = {
        "schema": 1,
        "name": cfg.name,
        "task": cfg.task,
        "method": cfg.method,
        "paper_scale": cfg.paper_scale,
        **aggregate(records),
    }
    protocols = {r["eval"]["protocol"] for r in records if "eval" in r}
    if protocols:
        summary["protocol"] = sorted(protocols)[0]
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    for rec in records:
        if rec["status"] == "ok":
            log.info("%s seed %d ok (%.1fs)", cfg.name, rec["seed"], rec["wall_s"])
        else:
            log.warning("%s seed %d FAILED: %s", cfg.name, rec["seed"], rec.get("error"))
    return records


# --- reporting --------------------------------------------------------------

def report(run_dirs: list[str | Path]) -> tuple[str, str, list[str]]:
    """Combine summaries into a CSV and an aligned text table.

    Returns (csv text, table text, missing directories). Directories without
    a summary are listed and skipped; the partial table is still produced.
    An empty result set yields a header-only CSV and a warning.
    """
    rows = []
    missing = []
    for d in run_dirs:
        p = Path(d) / "summary.json"
        if not p.is_file():
            missing.append(str(d))
            continue
        with open(p) as fh:
            rows.append(json.load(fh))
    rows.sort(key=lambda s: (s.get("task", ""), s.get("method", ""), s.get("name", "")))
    if missing:
        log.warning("missing summaries for: %s", ", ".join(missing))
    if not rows:
        log.warning("no runs to report")

    present = [c for c in METRIC_COLUMNS
               if any(c in s.get("metrics", {}) for s in rows)]
    buf = io.StringIO()
    writer = csv.writer(buf)
    header = ["task", "method", "name", "seeds_ok", "seeds_failed"]
    for c in present:
        header += [f"{c}_mean", f"{c}_std"]
    writer.writerow(header)
    for s in rows:
        line = [s.get("task"), s.get("method"), s.get("name"),
                len(s.get("seeds_ok", [])), len(s.get("seeds_failed", []))]
        for c in present:
            m = s.get("metrics", {}).get(c)
            line += ["" if m is None else f"{m['mean']:.6g}",
                     "" if m is None else f"{m['std']:.3g}"]
        writer.writerow(line)

    cells = [["task", "method", "seeds"] + present]
    for s in rows:
        line = [str(s.get("task")), str(s.get("method")), str(len(s.get("seeds_ok", [])))]
        for c in present:
            m = s.get("metrics", {}).get(c)
            line.append("" if m is None else f"{m['mean']:.4g} ± {m['std']:.2g}")
        cells.append(line)
    widths = [max(len(r[i]) for r in cells) for i in range(len(cells[0]))]
    table_lines = []
    for i, r in enumerate(cells):
        table_lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        if i == 0:
            table_lines.append("  ".join("-" * w for w in widths))
    table = "\n".join(table_lines) + "\n"
    return buf.getvalue(), table, missing


# --- SVG frames -------------------------------------------------------------

_SVG_SIZE = 480
_SVG_MARGIN = 24


def _svg_scatter(layers: list[tuple[Array, str, float]], bounds, title: str) -> str:
    """One scatter frame. Layers draw in order (first = bottom). Deterministic
    text output: fixed float formatting, no timestamps."""
    (x0, x1), (y0, y1) = bounds
    span = max(x1 - x0, y1 - y0, 1e-9)
    inner = _SVG_SIZE - 2 * _SVG_MARGIN
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2

    def px(x):
        return _SVG_MARGIN + inner * ((x - cx) / span + 0.5)

    def py(y):
        return _SVG_SIZE - _SVG_MARGIN - inner * ((y - cy) / span + 0.5)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_SIZE}" '
        f'height="{_SVG_SIZE}" viewBox="0 0 {_SVG_SIZE} {_SVG_SIZE}">',
        f'<rect width="{_SVG_SIZE}" height="{_SVG_SIZE}" fill="#ffffff"/>',
    ]
    for pts, color, opacity in layers:
        parts.append(f'<g fill="{color}" fill-opacity="{opacity}">')
        for x, y in np.asarray(pts, dtype=np.float64):
            parts.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="2.4"/>')
        parts.append("</g>")
    parts.append(f'<text x="{_SVG_MARGIN}" y="{_SVG_MARGIN - 6}" '
                 f'font-family="sans-serif" font-size="14" fill="#333333">{title}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_frames(run_dir: str | Path, times: list[float] | None = None,
                out_dir: str | Path | None = None, samples: int = 2000,
                seed: int | None = None, frame_seed: int = 0) -> list[Path]:
    """Render one SVG per requested time from a finished run.

    Generated particles are drawn over gray target samples wherever the task
    prescribes a law at that time; axes are fixed across the sequence so the
    motion reads true. Default times: six evenly spaced frames.
    """
    run_dir = Path(run_dir)
    with open(run_dir / "config.json") as fh:
        cfg = run_config_from_snapshot(json.load(fh))
    task = make_task(cfg.task)
    if times is None:
        times = [k * task.horizon / 5 for k in range(6)]
    if seed is None:
        seed = cfg.seeds[0]
    if cfg.method == "linear":
        roll = _rollout_fn(cfg, None, task, None)
    else:
        _, built, _ = load_result_checkpoint(run_dir / f"seed{seed}.npz")
        schedule = make_schedule(task, cfg.solver.steps) if cfg.solver else None
        roll = _rollout_fn(cfg, built, task, schedule)
    fs = roll(samples, _eval_seed(seed, 77) + frame_seed, list(times))
    rng = SeededSampler(_eval_seed(seed, 78) + frame_seed).rng(STREAM_EVAL)
    targets: list[Array | None] = []
    for t in times:
        try:
            targets.append(sample_target(task, t, samples, rng))
        except ValueError:
            targets.append(None)
    clouds = list(fs.frames) + [t for t in targets if t is not None]
    allpts = np.vstack(clouds)
    pad = 0.05 * float(np.max(allpts.max(axis=0) - allpts.min(axis=0)))
    bounds = ((float(allpts[:, 0].min()) - pad, float(allpts[:, 0].max()) + pad),
              (float(allpts[:, 1].min()) - pad, float(allpts[:, 1].max()) + pad))
    out = Path(out_dir) if out_dir is not None else run_dir / "frames"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for k, (t, gen) in enumerate(zip(times, fs.frames)):
        layers = []
        if targets[k] is not None:
            layers.append((targets[k], "#b0b0b0", 0.55))
        layers.append((gen, "#1f6fb2", 0.75))
        svg = _svg_scatter(layers, bounds, f"t = {t:.2f}")
        path = out / f"frame_{k:02d}_t{t:.2f}.svg"
        path.write_text(svg)
        written.append(path)
    return written
