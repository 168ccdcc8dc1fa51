"""Seeded samplers for the bundled source/target laws and their observation
schedules.

All randomness flows through SeededSampler: a draw is a pure function of
(seed, stream id, draw index), so any run is replayable from its config alone.
Callers mint a numpy Generator per (stream, index) and pass it to the
sampling functions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray

TASK_IDS = ("N8G", "M8G", "NM", "DETOUR")

# stream ids; every consumer of randomness owns one so draws never collide
STREAM_SOURCE = 1
STREAM_TARGET = 2
STREAM_INCREMENTS = 3
STREAM_PARAM_INIT = 4
STREAM_VALIDATION = 5
STREAM_EVAL = 6

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class SeededSampler:
    """Counter-based generator factory.

    rng(stream, index) returns a fresh Philox generator whose output depends
    only on (seed, stream, index): the key encodes (seed, stream) and the
    index is placed in the high counter word, leaving 2^192 blocks of
    headroom per index.
    """

    seed: int

    def rng(self, stream: int, index: int = 0) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, stream & _MASK64], dtype=np.uint64)
        counter = np.array([0, 0, 0, index & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))


@dataclass(frozen=True)
class TaskSpec:
    """Geometry of one benchmark task. All bundled tasks are planar (d=2)
    on the unit horizon."""

    task_id: str
    dim: int = 2
    horizon: float = 1.0
    # eight-Gaussians mixture: centers equally spaced on a circle. The scale
    # is bounded above by the endpoint W2 budgets: at radius 4 the mode-count
    # imbalance of finite i.i.d. draws alone costs ~0.58 at n=2000, so those
    # budgets are only reachable at the tighter benchmark convention below.
    eight_radius: float = 2.0
    eight_std: float = 0.2
    # two moons: unit half circles at horizontal offsets +-0.5 and vertical
    # offsets -+0.25, Gaussian noise, then one global rescale
    moons_noise: float = 0.1
    moons_scale: float = 3.0
    # detour marginal flow: Gaussian with a parabolic-arc mean
    detour_start_x: float = -2.25
    detour_end_x: float = 2.25
    detour_peak_y: float = 2.75
    detour_std: tuple[float, float] = (0.35, 0.12)

    def __post_init__(self):
        if self.task_id not in TASK_IDS:
            raise ValueError(f"unknown task id {self.task_id!r}; expected one of {TASK_IDS}")
        if self.dim != 2:
            raise ValueError("bundled tasks are two-dimensional")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if min(self.detour_std) <= 0 or self.eight_std <= 0 or self.moons_noise < 0:
            raise ValueError("spread parameters must be positive")

    def geometry(self) -> dict:
        """Task parameters for run-config snapshots, so outputs are
        self-describing (the mixture/moons geometry is a convention, not a
        property of the task names)."""
        return {
            "task_id": self.task_id,
            "dim": self.dim,
            "horizon": self.horizon,
            "eight_radius": self.eight_radius,
            "eight_std": self.eight_std,
            "moons_noise": self.moons_noise,
            "moons_scale": self.moons_scale,
            "detour_start_x": self.detour_start_x,
            "detour_end_x": self.detour_end_x,
            "detour_peak_y": self.detour_peak_y,
            "detour_std": list(self.detour_std),
        }


def make_task(task_id: str, **overrides) -> TaskSpec:
    return TaskSpec(task_id=task_id, **overrides)


def detour_mean(task: TaskSpec, t: float) -> Array:
    """Mean of the detour marginal at time t: a straight sweep in x with a
    parabolic arc in y peaking at t = 1/2."""
    if not 0.0 <= t <= task.horizon:
        raise ValueError(f"t={t} outside [0, {task.horizon}]")
    s = t / task.horizon
    x = task.detour_start_x + (task.detour_end_x - task.detour_start_x) * s
    y = task.detour_peak_y * 4.0 * s * (1.0 - s)
    return np.array([x, y])


def eight_gaussian_centers(task: TaskSpec) -> Array:
    k = np.arange(8)
    ang = 2.0 * math.pi * k / 8.0
    return task.eight_radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _sample_standard_normal(n: int, rng: np.random.Generator) -> Array:
    return rng.standard_normal((n, 2))


def _sample_eight_gaussians(task: TaskSpec, n: int, rng: np.random.Generator) -> Array:
    centers = eight_gaussian_centers(task)
    idx = rng.integers(0, 8, size=n)
    return centers[idx] + task.eight_std * rng.standard_normal((n, 2))


def _sample_moons(task: TaskSpec, n: int, rng: np.random.Generator) -> Array:
    # moon 0 arcs over (-0.5, -0.25), moon 1 is its point reflection
    side = rng.integers(0, 2, size=n)
    ang = rng.uniform(0.0, math.pi, size=n)
    x = np.cos(ang) - 0.5
    y = np.sin(ang) - 0.25
    pts = np.stack([x, y], axis=1)
    pts[side == 1] *= -1.0
    pts += task.moons_noise * rng.standard_normal((n, 2))
    return task.moons_scale * pts


def _sample_detour(task: TaskSpec, t: float, n: int, rng: np.random.Generator) -> Array:
    std = np.asarray(task.detour_std)
    return detour_mean(task, t) + std * rng.standard_normal((n, 2))


def sample_target(task: TaskSpec, t: float, n: int, rng: np.random.Generator) -> Array:
    """n i.i.d. draws from the task's target law at time t.

    Only the detour task prescribes intermediate marginals; the endpoint
    tasks reject t != horizon.
    """
    if n < 1:
        raise ValueError("need n >= 1 samples")
    if task.task_id == "DETOUR":
        return _sample_detour(task, t, n, rng)
    if not math.isclose(t, task.horizon, rel_tol=0.0, abs_tol=1e-12):
        raise ValueError(f"task {task.task_id} has a target law only at t = {task.horizon}")
    if task.task_id in ("N8G", "M8G"):
        return _sample_eight_gaussians(task, n, rng)
    if task.task_id == "NM":
        return _sample_moons(task, n, rng)
    raise ValueError(f"unknown task id {task.task_id!r}")


def sample_source(task: TaskSpec, n: int, rng: np.random.Generator) -> Array:
    """n i.i.d. draws from the task's source law (the law at t=0)."""
    if n < 1:
        raise ValueError("need n >= 1 samples")
    if task.task_id in ("N8G", "NM"):
        return _sample_standard_normal(n, rng)
    if task.task_id == "M8G":
        return _sample_moons(task, n, rng)
    if task.task_id == "DETOUR":
        # the detour starts on its own marginal flow, not on a standard normal
        return _sample_detour(task, 0.0, n, rng)
    raise ValueError(f"unknown task id {task.task_id!r}")


@dataclass(frozen=True)
class MarginalSchedule:
    """Uniform time grid with observation flags.

    observed[i] marks times whose law is supervised. The terminal index is
    always flagged; it is consumed as the terminal condition, while interior
    flags gate the running force.
    """

    task: TaskSpec
    times: Array
    observed: Array

    def __post_init__(self):
        if len(self.times) != len(self.observed):
            raise ValueError("times and observed flags must align")
        if not self.observed[-1]:
            raise ValueError("terminal time must be observed")

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    def interior_observed_indices(self) -> Array:
        idx = np.flatnonzero(self.observed[:-1])
        return idx[idx > 0]

    def omega_gates(self) -> Array:
        """Per-step running-force gates (length n_steps): 1 at interior
        observed indices, 0 elsewhere. The terminal flag carries no gate
        because the terminal law is consumed as the boundary condition."""
        omega = np.zeros(self.n_steps)
        omega[self.interior_observed_indices()] = 1.0
        return omega


def make_schedule(task: TaskSpec, n_steps: int) -> MarginalSchedule:
    """Observation schedule on an n_steps uniform grid.

    The detour observes nine interior laws at fractions 0.1..0.9 of the
    horizon (Euler steps 10, 20, ..., 90 when n_steps=100) plus the terminal;
    endpoint tasks observe the terminal only.
    """
    if n_steps < 1:
        raise ValueError("need at least one step")
    times = np.linspace(0.0, task.horizon, n_steps + 1)
    observed = np.zeros(n_steps + 1, dtype=bool)
    observed[-1] = True
    if task.task_id == "DETOUR":
        for frac in np.arange(1, 10) / 10.0:
            i = int(round(frac * n_steps))
            if 0 < i < n_steps:
                observed[i] = True
    return MarginalSchedule(task=task, times=times, observed=observed)
