"""Sample-based estimators of the law-gradient fields that drive the solver.

Two families:
  * a balanced density-ratio classifier whose logit gradient estimates the
    score difference grad log(mu/rho) ("KL"),
  * the gradient field of the debiased entropic transport divergence with
    half-squared-Euclidean cost ("SINKHORN"),
plus their weighted combination ("HYBRID") and per-particle norm clipping.

Estimated fields are plain arrays with no gradient linkage to the solver
networks: they are regression targets, never differentiated through.

The entropic solver runs in the log domain with symmetric half-step updates
and epsilon annealing from the squared data diameter down to tau^2. The
symmetric update keeps the iteration invariant under swapping the two clouds,
which is what makes S(mu,mu) vanish identically and S(mu,rho) match
S(rho,mu) to rounding.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.special import expit

from .nets import MlpSpec, NetParams, adamw_step, clip_global_norm, init_mlp, mlp_backprop, mlp_forward

log = logging.getLogger(__name__)

Array = np.ndarray

ESTIMATOR_KINDS = ("KL", "SINKHORN", "HYBRID")


@dataclass(frozen=True)
class ClassifierSpec:
    hidden: int = 256
    depth: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-5
    updates_per_step: int = 20
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.updates_per_step < 1:
            raise ValueError("need at least one classifier update per step")
        if self.lr <= 0 or self.grad_clip <= 0:
            raise ValueError("classifier lr and grad clip must be positive")


@dataclass(frozen=True)
class EstimatorSpec:
    kind: str
    alpha_kl: float = 0.1
    alpha_w2: float = 0.9
    field_clip: float | None = 10.0
    tau: float = 0.2
    anneal: float = 0.9
    debiased: bool = True
    classifier: ClassifierSpec = dc_field(default_factory=ClassifierSpec)
    target_batch: int = 2048
    target_draws: int = 4
    sinkhorn_tol: float = 1e-9
    sinkhorn_max_iter: int = 500

    def __post_init__(self):
        if self.kind not in ESTIMATOR_KINDS:
            raise ValueError(f"estimator kind must be one of {ESTIMATOR_KINDS}")
        if self.alpha_kl < 0 or self.alpha_w2 < 0:
            raise ValueError("mixture weights must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 < self.anneal < 1.0:
            raise ValueError("annealing ratio must lie in (0, 1)")
        if self.field_clip is not None and self.field_clip <= 0:
            raise ValueError("field clip must be positive when set")
        if self.target_batch < 1 or self.target_draws < 1:
            raise ValueError("target batch and draws must be >= 1")


@dataclass
class ForceField:
    """Per-particle law-gradient estimates, detached from all networks."""

    values: Array
    estimator: str
    clip_fraction: float = 0.0
    aux: dict = dc_field(default_factory=dict)


# ---------------------------------------------------------------------------
# KL branch: balanced ratio classifier


def make_classifier(dim: int, spec: ClassifierSpec, rng: np.random.Generator) -> tuple[MlpSpec, NetParams]:
    """Fresh logit network D(x). The zero-initialized head makes the initial
    logit identically zero, i.e. the indistinguishable-classes optimum."""
    mspec = MlpSpec(dim, spec.hidden, spec.depth, 1, zero_init_final=True)
    return mspec, init_mlp(mspec, rng)


def classifier_loss_value(mspec: MlpSpec, params: NetParams, gen: Array, target: Array) -> float:
    dg = mlp_forward(params, mspec, gen)[:, 0]
    dt = mlp_forward(params, mspec, target)[:, 0]
    # -mean log s(D) - mean log(1 - s(D)) via stable softplus
    return float(np.logaddexp(0.0, -dg).mean() + np.logaddexp(0.0, dt).mean())


def train_ratio_classifier(
    gen: Array, target: Array, spec: EstimatorSpec, mspec: MlpSpec, params: NetParams
) -> float:
    """Run spec.classifier.updates_per_step AdamW steps on the balanced
    logistic loss (generated labeled 1, target labeled 0; per-class means).

    Returns the last loss. A non-finite loss aborts the inner loop so the
    caller sees the blow-up instead of trained-on-garbage parameters.
    """
    if gen.size == 0 or target.size == 0:
        raise ValueError("both batches must be non-empty")
    if gen.shape[1] != target.shape[1]:
        raise ValueError("batch dimensions differ")
    cspec = spec.classifier
    n, m = gen.shape[0], target.shape[0]
    x = np.concatenate([gen, target], axis=0)
    loss = math.nan
    for _ in range(cspec.updates_per_step):
        out, cache = mlp_forward(params, mspec, x, return_cache=True)
        d = out[:, 0]
        loss = float(np.logaddexp(0.0, -d[:n]).mean() + np.logaddexp(0.0, d[n:]).mean())
        if not math.isfinite(loss):
            log.warning("classifier loss non-finite; aborting inner loop")
            break
        upstream = np.empty((n + m, 1))
        upstream[:n, 0] = -(1.0 - expit(d[:n])) / n
        upstream[n:, 0] = expit(d[n:]) / m
        grads, _ = mlp_backprop(params, mspec, x, upstream, cache=cache)
        clip_global_norm(grads, cspec.grad_clip)
        adamw_step(params, grads, lr=cspec.lr, weight_decay=cspec.weight_decay)
    return loss


def kl_field(mspec: MlpSpec, params: NetParams, x: Array) -> ForceField:
    """Input-gradient of the classifier logit at each particle."""
    ones = np.ones((x.shape[0], 1))
    _, dx = mlp_backprop(params, mspec, x, ones)
    return ForceField(values=dx.copy(), estimator="KL")


# ---------------------------------------------------------------------------
# Entropic transport branch


def _half_sq_cost(x: Array, y: Array) -> Array:
    xx = np.einsum("ij,ij->i", x, x)
    yy = np.einsum("ij,ij->i", y, y)
    c = xx[:, None] + yy[None, :] - 2.0 * (x @ y.T)
    np.maximum(c, 0.0, out=c)
    c *= 0.5
    return c


@dataclass
class SinkhornResult:
    f: Array
    g: Array
    cost: Array
    eps: float
    value: float
    residual: float
    iterations: int
    converged: bool

    def plan(self) -> Array:
        n, m = self.cost.shape
        logp = (self.f[:, None] + self.g[None, :] - self.cost) / self.eps
        return np.exp(logp) / (n * m)


class _WarnThrottle:
    """Full warning for the first few non-convergences, then every 50th.
    Per-call diagnostics stay available in SinkhornResult / ForceField.aux."""

    def __init__(self, head: int = 3, every: int = 50):
        self.head = head
        self.every = every
        self.count = 0

    def reset(self):
        self.count = 0

    def warn(self, residual: float, iterations: int, tol: float, reached_target: bool):
        self.count += 1
        if self.count > self.head and self.count % self.every != 0:
            return
        suffix = "" if self.count <= self.head else f" ({self.count} occurrences, most suppressed)"
        phase = "" if reached_target else "; iteration cap hit during annealing"
        log.warning(
            "sinkhorn did not converge: residual %.3e after %d iterations (tol %.1e)%s%s",
            residual, iterations, tol, phase, suffix,
        )


_nonconvergence = _WarnThrottle()

# exponent bound below which exp() cannot overflow and whole rows cannot
# underflow (annealing from 2*C.max keeps exponents near [-log(n*m), 0])
_EXP_GUARD = 600.0


def _solve_potentials(x: Array, y: Array, tau: float, anneal: float, tol: float, max_iter: int) -> SinkhornResult:
    """Symmetric log-domain iterations with epsilon annealing.

    Both potentials update in parallel from the previous pair (half steps),
    so the whole iteration commutes with swapping (x, y). Annealing starts at
    the squared data diameter and shrinks geometrically to tau^2; the
    convergence criterion applies once the final epsilon is reached.

    When x and y are the same array the iterate stays symmetric (f == g), so
    the column reduction is skipped.
    """
    same = x is y
    n, m = x.shape[0], y.shape[0]
    C = _half_sq_cost(x, y)
    eps_target = tau * tau
    eps = max(2.0 * float(C.max()), eps_target)
    f = np.zeros(n)
    g = f if same else np.zeros(m)
    log_n, log_m = math.log(n), math.log(m)
    M = np.empty_like(C)
    T = np.empty_like(C)
    residual = math.inf
    converged = False
    it = 0
    eps_used = eps
    while it < max_iter:
        it += 1
        eps_used = eps
        annealing = eps > eps_target
        np.subtract(f[:, None], C, out=M)
        M += g[None, :]
        M *= 1.0 / eps
        if float(M.max()) <= _EXP_GUARD:
            np.exp(M, out=T)
            lse_r = np.log(T.sum(axis=1))
            lse_c = lse_r if same else np.log(T.sum(axis=0))
        else:
            rmax = M.max(axis=1)
            np.subtract(M, rmax[:, None], out=T)
            np.exp(T, out=T)
            lse_r = rmax + np.log(T.sum(axis=1))
            if same:
                lse_c = lse_r
            else:
                cmax = M.max(axis=0)
                np.subtract(M, cmax[None, :], out=T)
                np.exp(T, out=T)
                lse_c = cmax + np.log(T.sum(axis=0))
        df = -0.5 * eps * (lse_r - log_m)
        f += df
        if same:
            residual = float(np.abs(df).max())
        else:
            dg = -0.5 * eps * (lse_c - log_n)
            g += dg
            residual = max(float(np.abs(df).max()), float(np.abs(dg).max()))
        if annealing:
            eps = max(eps * anneal, eps_target)
        elif residual < tol:
            converged = True
            break
    value = float(f.mean() + g.mean())
    if not converged:
        _nonconvergence.warn(residual, it, tol, reached_target=eps_used == eps_target)
    return SinkhornResult(f=f, g=g, cost=C, eps=eps_used, value=value,
                          residual=residual, iterations=it, converged=converged)


def sinkhorn_divergence(
    mu: Array,
    rho: Array,
    tau: float,
    anneal: float = 0.9,
    tol: float = 1e-9,
    max_iter: int = 500,
    debiased: bool = True,
) -> float:
    """Entropic transport cost at epsilon = tau^2, with the two self terms
    subtracted when debiased (so the divergence of a cloud against itself is
    exactly zero)."""
    mu = np.asarray(mu, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    cross = _solve_potentials(mu, rho, tau, anneal, tol, max_iter)
    value = cross.value
    if debiased:
        value -= 0.5 * _solve_potentials(mu, mu, tau, anneal, tol, max_iter).value
        value -= 0.5 * _solve_potentials(rho, rho, tau, anneal, tol, max_iter).value
    return value


def _plan_grad(plan: Array, x: Array, y: Array) -> Array:
    """Rows of sum_j plan_ij (x_i - y_j)."""
    return plan.sum(axis=1)[:, None] * x - plan @ y


def sinkhorn_field(
    gen: Array,
    target_batches: list[Array] | Array,
    tau: float,
    anneal: float = 0.9,
    tol: float = 1e-9,
    max_iter: int = 500,
    with_divergence: bool = False,
) -> ForceField:
    """2n-scaled gradient of the debiased divergence at each generated
    particle, averaged over the provided target draws.

    The rho-self term of the divergence does not depend on the generated
    cloud, so only the cross plans and one mu-self plan are needed. With
    with_divergence=True the debiased value, averaged over the same draws as
    the gradient, is also computed (one extra self solve per draw) and
    reported in aux.
    """
    gen = np.asarray(gen, dtype=np.float64)
    if isinstance(target_batches, np.ndarray) and target_batches.ndim == 2:
        target_batches = [target_batches]
    if len(target_batches) < 1:
        raise ValueError("need at least one target draw")
    n = gen.shape[0]
    self_res = _solve_potentials(gen, gen, tau, anneal, tol, max_iter)
    self_part = _plan_grad(self_res.plan(), gen, gen)
    grad = np.zeros_like(gen)
    residuals = [self_res.residual]
    converged = self_res.converged
    divergence = None
    for k, y in enumerate(target_batches):
        y = np.asarray(y, dtype=np.float64)
        cross = _solve_potentials(gen, y, tau, anneal, tol, max_iter)
        grad += _plan_grad(cross.plan(), gen, y)
        residuals.append(cross.residual)
        converged = converged and cross.converged
        if with_divergence:
            rho_self = _solve_potentials(y, y, tau, anneal, tol, max_iter)
            term = cross.value - 0.5 * self_res.value - 0.5 * rho_self.value
            divergence = term if divergence is None else divergence + term
    grad /= len(target_batches)
    if divergence is not None:
        divergence /= len(target_batches)
    grad -= self_part
    values = 2.0 * n * grad
    aux = {"residual": max(residuals), "converged": converged}
    if divergence is not None:
        aux["divergence"] = float(divergence)
    return ForceField(values=values, estimator="SINKHORN", aux=aux)


# ---------------------------------------------------------------------------
# combination and clipping


def clip_field(ff: ForceField, c: float) -> ForceField:
    """Rescale per-particle vectors to norm <= c; the reported fraction is the
    exact count of particles above the threshold over n."""
    if c <= 0:
        raise ValueError("clip threshold must be positive")
    norms = np.linalg.norm(ff.values, axis=1)
    over = norms > c
    values = ff.values.copy()
    if np.any(over):
        values[over] *= (c / norms[over])[:, None]
    return ForceField(
        values=values,
        estimator=ff.estimator,
        clip_fraction=float(over.mean()),
        aux=dict(ff.aux),
    )


def hybrid_field(kl: ForceField, w2: ForceField, alpha_kl: float, alpha_w2: float, c_field: float | None) -> ForceField:
    """alpha_kl * KL field + alpha_w2 * transport field, then one clip."""
    if kl.values.shape != w2.values.shape:
        raise ValueError("field shapes differ")
    combined = ForceField(
        values=alpha_kl * kl.values + alpha_w2 * w2.values,
        estimator="HYBRID",
        aux={**w2.aux, "kl_aux": kl.aux},
    )
    if c_field is None:
        return combined
    return clip_field(combined, c_field)


def law_force(
    gen: Array,
    target_batches: list[Array],
    spec: EstimatorSpec,
    classifier: tuple[MlpSpec, NetParams] | None = None,
    with_divergence: bool = False,
) -> ForceField:
    """One estimator invocation at a single time index.

    For KL/HYBRID the caller owns the (warm-started) classifier state and the
    inner training loop runs here, on the first target draw.
    """
    if spec.kind in ("KL", "HYBRID"):
        if classifier is None:
            raise ValueError("KL-based estimators need classifier state")
        mspec, params = classifier
        clf_loss = train_ratio_classifier(gen, target_batches[0], spec, mspec, params)
        kl = kl_field(mspec, params, gen)
        kl.aux["classifier_loss"] = clf_loss
        if spec.kind == "KL":
            out = clip_field(kl, spec.field_clip) if spec.field_clip is not None else kl
            return out
    w2 = sinkhorn_field(
        gen, target_batches, spec.tau,
        anneal=spec.anneal, tol=spec.sinkhorn_tol, max_iter=spec.sinkhorn_max_iter,
        with_divergence=with_divergence,
    )
    if spec.kind == "SINKHORN":
        return clip_field(w2, spec.field_clip) if spec.field_clip is not None else w2
    return hybrid_field(kl, w2, spec.alpha_kl, spec.alpha_w2, spec.field_clip)
