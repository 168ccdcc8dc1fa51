"""Comparison dynamics for the benchmark tasks.

The direct neural SDE learns a drift f(t, x) by minimizing entropic transport
divergences between its rolled marginals and the observed laws, plus a kinetic
penalty gamma * E sum ||f||^2 dt. Unlike the adjoint solver, gradients here
flow through the rollout into the transport terms via the converged plans
(envelope differentiation of the divergence value).

linear_interpolation_path is a deterministic straight-line reference along the
exact W2 matching between two clouds.
"""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .forces import EstimatorSpec, sinkhorn_field
from .metrics import FrameSequence, empirical_w2
from .nets import (
    MlpSpec,
    NetParams,
    TimeEmbedding,
    adamw_step,
    clip_global_norm,
    embed_time,
    init_mlp,
    make_time_embedding,
    mlp_backprop,
    mlp_forward,
)
from .solver import NonFiniteState, _net_input, sample_increments
from .tasks import (
    STREAM_INCREMENTS,
    STREAM_PARAM_INIT,
    STREAM_SOURCE,
    STREAM_TARGET,
    STREAM_VALIDATION,
    MarginalSchedule,
    SeededSampler,
    TaskSpec,
    make_schedule,
    sample_source,
    sample_target,
)

log = logging.getLogger(__name__)

Array = np.ndarray

KINETIC_CONVENTION = "E sum_i ||f(t_i, X_i)||^2 dt (no 1/2 factor)"


@dataclass(frozen=True)
class DirectSdeConfig:
    steps: int = 100
    horizon: float = 1.0
    sigma: float = 0.15
    gamma: float = 0.1
    marginal_weight: float = 1.0
    antithetic: bool = True
    batch: int = 2048
    step_budget: int = 500
    val_every: int = 25
    val_samples: int = 4096
    lr: float = 2e-4
    weight_decay: float = 1e-5
    grad_clip: float = 10.0
    emb_dim: int = 32
    hidden: int = 1024
    depth: int = 8
    estimator: EstimatorSpec = dc_field(default_factory=lambda: EstimatorSpec(kind="SINKHORN"))

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.marginal_weight <= 0:
            raise ValueError("marginal weight must be positive")
        if self.antithetic and self.batch % 2 != 0:
            raise ValueError("antithetic sampling needs an even batch")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps


@dataclass
class DriftNet:
    emb: TimeEmbedding
    spec: MlpSpec
    params: NetParams
    dim: int


def make_drift_net(cfg: DirectSdeConfig, dim: int, rng: np.random.Generator) -> DriftNet:
    emb = make_time_embedding(cfg.emb_dim, cfg.horizon)
    spec = MlpSpec(dim + cfg.emb_dim, cfg.hidden, cfg.depth, dim, zero_init_final=True)
    return DriftNet(emb=emb, spec=spec, params=init_mlp(spec, rng), dim=dim)


def direct_sde_rollout(cfg: DirectSdeConfig, net: DriftNet, X0: Array,
                       increments: Array) -> tuple[list[Array], list[Array]]:
    """Euler rollout X_{i+1} = X_i + f(t_i, X_i) dt + sigma dW_i.

    Returns states X_0..X_N and the drift evaluations f_0..f_{N-1}."""
    n, d = X0.shape
    N = cfg.steps
    if increments.shape != (N, n, d):
        raise ValueError(f"increments must have shape ({N}, {n}, {d})")
    X = [np.asarray(X0, dtype=np.float64)]
    if not np.all(np.isfinite(X[0])):
        raise NonFiniteState(0, "state")
    drifts: list[Array] = []
    inp = np.empty((n, d + cfg.emb_dim))
    dt = cfg.dt
    for i in range(N):
        _net_input(X[i], embed_time(i * dt, net.emb), out=inp)
        f_out = mlp_forward(net.params, net.spec, inp)
        x_next = X[i] + f_out * dt + cfg.sigma * increments[i]
        if not np.all(np.isfinite(x_next)):
            raise NonFiniteState(i, "state")
        X.append(x_next)
        drifts.append(f_out)
    return X, drifts


def kinetic_energy(drifts: list[Array], dt: float) -> float:
    """E sum_i ||f_i||^2 dt over the batch; zero for the zero drift."""
    total = 0.0
    for f in drifts:
        total += float(np.mean(np.sum(f * f, axis=1))) * dt
    return total


def direct_sde_loss_grads(cfg: DirectSdeConfig, net: DriftNet, X0: Array, increments: Array,
                          observed: dict[int, list[Array]]) -> tuple[float, dict, dict[str, Array]]:
    """Loss, per-part diagnostics, and exact drift-parameter gradients.

    observed maps grid indices to target draws. The transport terms are
    differentiated through the rolled particles using the converged plans; the
    kinetic term is differentiated exactly.
    """
    n, d = X0.shape
    N = cfg.steps
    dt = cfg.dt
    est = cfg.estimator
    X, drifts = direct_sde_rollout(cfg, net, X0, increments)
    sink_sum = 0.0
    inject: dict[int, Array] = {}
    conv = []
    for idx, draws in observed.items():
        if not 1 <= idx <= N:
            raise ValueError(f"observed index {idx} outside 1..{N}")
        ff = sinkhorn_field(X[idx], draws, est.tau, anneal=est.anneal,
                            tol=est.sinkhorn_tol, max_iter=est.sinkhorn_max_iter,
                            with_divergence=True)
        # dS/dx is the reported field over 2n
        inject[idx] = (cfg.marginal_weight / (2 * n)) * ff.values
        sink_sum += cfg.marginal_weight * ff.aux["divergence"]
        conv.append(float(ff.aux["converged"]))
    ke = kinetic_energy(drifts, dt)
    loss = sink_sum + cfg.gamma * ke
    grads = {k: np.zeros_like(v) for k, v in net.params.values.items()}
    gX = np.zeros((n, d))
    inp = np.empty((n, d + cfg.emb_dim))
    for i in range(N - 1, -1, -1):
        if (i + 1) in inject:
            gX = gX + inject[i + 1]
        uf = dt * gX + (cfg.gamma * 2.0 * dt / n) * drifts[i]
        _net_input(X[i], embed_time(i * dt, net.emb), out=inp)
        _, cache = mlp_forward(net.params, net.spec, inp, return_cache=True)
        fg, fdx = mlp_backprop(net.params, net.spec, inp, uf, cache=cache)
        for k, g in fg.items():
            grads[k] += g
        gX = gX + fdx[:, :d]
    parts = {"sinkhorn_sum": sink_sum, "kinetic_energy": ke,
             "sinkhorn_converged": float(np.mean(conv)) if conv else 1.0}
    return loss, parts, grads


@dataclass
class DirectSdeResult:
    net: DriftNet
    cfg: DirectSdeConfig
    task: TaskSpec
    schedule: MarginalSchedule
    metrics: list[dict]
    best_step: int
    best_metric: float
    seed: int
    kinetic_convention: str = KINETIC_CONVENTION


def observed_eval_times(schedule: MarginalSchedule) -> list[float]:
    """The supervised times (interior observed plus terminal)."""
    times = [float(schedule.times[i]) for i in schedule.interior_observed_indices()]
    times.append(float(schedule.times[-1]))
    return times


def direct_sde_frames(cfg: DirectSdeConfig, net: DriftNet, task: TaskSpec, n: int, seed: int,
                      frame_times: list[float]) -> FrameSequence:
    sampler = SeededSampler(seed)
    X0 = sample_source(task, n, sampler.rng(STREAM_SOURCE))
    dW = sample_increments(n, cfg.steps, cfg.dt, task.dim, False, sampler.rng(STREAM_INCREMENTS))
    X, _ = direct_sde_rollout(cfg, net, X0, dW)
    frames = []
    for t in frame_times:
        k = round(t / cfg.horizon * cfg.steps)
        if abs(k * cfg.horizon / cfg.steps - t) > 1e-9:
            raise ValueError(f"frame time {t} does not lie on the rollout grid")
        frames.append(X[int(k)].copy())
    return FrameSequence(times=list(frame_times), frames=frames)


def _observed_mean_w2(cfg: DirectSdeConfig, net: DriftNet, task: TaskSpec, step: int,
                      sampler: SeededSampler, schedule: MarginalSchedule) -> float:
    rng = sampler.rng(STREAM_VALIDATION, index=step + 1)
    n = cfg.val_samples
    X0 = sample_source(task, n, rng)
    dW = sample_increments(n, cfg.steps, cfg.dt, task.dim, False, rng)
    X, _ = direct_sde_rollout(cfg, net, X0, dW)
    vals = []
    for t in observed_eval_times(schedule):
        k = round(t / cfg.horizon * cfg.steps)
        vals.append(empirical_w2(X[int(k)], sample_target(task, t, n, rng)))
    return float(np.mean(vals))


def train_direct_sde(cfg: DirectSdeConfig, task: TaskSpec, seed: int,
                     progress=None) -> DirectSdeResult:
    """Optimize the drift on one task; checkpoint selection by the mean W2
    over the supervised times on validation rollouts. Divergence recovery
    mirrors the adjoint solver: restore best parameters and halve the rate."""
    sampler = SeededSampler(seed)
    net = make_drift_net(cfg, task.dim, sampler.rng(STREAM_PARAM_INIT))
    schedule = make_schedule(task, cfg.steps)
    observed_idx = [int(i) for i in schedule.interior_observed_indices()] + [cfg.steps]
    est = cfg.estimator
    dt = cfg.dt
    lr = cfg.lr
    best_metric = math.inf
    best_step = -1
    best_snap = net.params.copy()
    metrics: list[dict] = []
    t_start = time.perf_counter()
    for step in range(cfg.step_budget):
        rec: dict = {"step": step, "lr": lr, "method": "direct-sde"}
        src_rng = sampler.rng(STREAM_SOURCE, index=step + 1)
        inc_rng = sampler.rng(STREAM_INCREMENTS, index=step + 1)
        tgt_rng = sampler.rng(STREAM_TARGET, index=step + 1)
        X0 = sample_source(task, cfg.batch, src_rng)
        dW = sample_increments(cfg.batch, cfg.steps, dt, task.dim, cfg.antithetic, inc_rng)
        try:
            observed = {
                idx: [sample_target(task, idx * dt, est.target_batch, tgt_rng)
                      for _ in range(est.target_draws)]
                for idx in observed_idx
            }
            loss, parts, grads = direct_sde_loss_grads(cfg, net, X0, dW, observed)
        except NonFiniteState as exc:
            log.warning("step %d: %s; restoring best parameters and halving lr", step, exc)
            net.params = best_snap.copy()
            lr *= 0.5
            rec.update({"recovered": True, "loss": math.nan})
            metrics.append(rec)
            continue
        if not math.isfinite(loss):
            log.warning("step %d: non-finite loss; restoring best parameters and halving lr", step)
            net.params = best_snap.copy()
            lr *= 0.5
            rec.update({"recovered": True, "loss": float(loss)})
            metrics.append(rec)
            continue
        rec["loss"] = loss
        rec.update(parts)
        _, rec["grad_clipped"] = clip_global_norm(grads, cfg.grad_clip)
        adamw_step(net.params, grads, lr=lr, weight_decay=cfg.weight_decay)
        is_last = step == cfg.step_budget - 1
        if step % cfg.val_every == cfg.val_every - 1 or is_last:
            val = _observed_mean_w2(cfg, net, task, step, sampler, schedule)
            rec["val_metric"] = val
            if val < best_metric:
                best_metric = val
                best_step = step
                best_snap = net.params.copy()
            rec["best_metric"] = best_metric
        rec["elapsed_s"] = time.perf_counter() - t_start
        metrics.append(rec)
        if progress is not None:
            progress(rec)
    if best_step < 0:
        best_snap = net.params.copy()
        best_step = cfg.step_budget - 1
        best_metric = math.nan
    best_net = copy.copy(net)
    best_net.params = best_snap
    return DirectSdeResult(net=best_net, cfg=cfg, task=task, schedule=schedule, metrics=metrics,
                           best_step=best_step, best_metric=best_metric, seed=seed)


def linear_interpolation_path(source: Array, target: Array, times: list[float],
                              horizon: float = 1.0) -> FrameSequence:
    """Straight lines from each source particle to its exact-W2 matched
    target particle, sampled at the given times."""
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.shape != target.shape:
        raise ValueError("source and target must have matching shapes")
    cost = cdist(source, target, metric="sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    matched = target[cols[np.argsort(rows)]]
    frames = []
    for t in times:
        a = t / horizon
        frames.append((1.0 - a) * source + a * matched)
    return FrameSequence(times=list(times), frames=frames)
