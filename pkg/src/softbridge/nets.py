"""Dense-network substrate: SiLU MLPs, sinusoidal time features, hand-rolled
reverse-mode gradients, AdamW updates, and global-norm gradient clipping.

Everything is float64 numpy. Parameters live in insertion-ordered dicts keyed
by layer name ("w0", "b0", ...) so they serialize directly into checkpoint
containers. No autodiff tape: the stacks here are plain affine/SiLU chains and
the backward pass is written out explicitly.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

Array = np.ndarray

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of one dense network.

    depth counts hidden layers; depth=0 degenerates to a single affine map,
    which several tests and the linear-logit classifier rely on.
    """

    input_dim: int
    hidden_dim: int
    depth: int
    output_dim: int
    zero_init_final: bool = False

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_dim < 1 or self.output_dim < 1:
            raise ValueError("all layer dimensions must be >= 1")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden_dim] * self.depth + [self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class NetParams:
    """Named parameter arrays plus AdamW moment state.

    Dicts are insertion-ordered, so iteration over `values` is the canonical
    parameter order. Moment arrays always mirror parameter shapes and `step`
    increases by exactly one per applied optimizer update.
    """

    values: dict[str, Array]
    m: dict[str, Array]
    v: dict[str, Array]
    step: int = 0

    @property
    def names(self) -> list[str]:
        return list(self.values)

    def copy(self) -> "NetParams":
        return NetParams(
            values={k: a.copy() for k, a in self.values.items()},
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            step=self.step,
        )


def init_mlp(spec: MlpSpec, rng: np.random.Generator) -> NetParams:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    With zero_init_final the last affine layer starts at exactly zero so the
    network output is identically zero before the first update.
    """
    values: dict[str, Array] = {}
    shapes = spec.layer_shapes()
    last = len(shapes) - 1
    for l, (fan_in, fan_out) in enumerate(shapes):
        if spec.zero_init_final and l == last:
            w = np.zeros((fan_in, fan_out))
            b = np.zeros(fan_out)
        else:
            bound = 1.0 / math.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
        values[f"w{l}"] = w
        values[f"b{l}"] = b
    return NetParams(
        values=values,
        m={k: np.zeros_like(a) for k, a in values.items()},
        v={k: np.zeros_like(a) for k, a in values.items()},
    )


def _silu(a: Array) -> Array:
    s = 1.0 / (1.0 + np.exp(-a))
    return a * s


def _silu_deriv(a: Array) -> Array:
    s = 1.0 / (1.0 + np.exp(-a))
    return s * (1.0 + a * (1.0 - s))


def mlp_forward(params: NetParams, spec: MlpSpec, x: Array, return_cache: bool = False):
    """Forward pass. With return_cache=True also returns the per-layer inputs
    and pre-activations needed by mlp_backprop."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"expected input of shape (n, {spec.input_dim}), got {x.shape}")
    inputs = [x]
    pre = []
    h = x
    for l in range(spec.depth):
        a = h @ params.values[f"w{l}"] + params.values[f"b{l}"]
        pre.append(a)
        h = _silu(a)
        inputs.append(h)
    out = h @ params.values[f"w{spec.depth}"] + params.values[f"b{spec.depth}"]
    if return_cache:
        return out, (inputs, pre)
    return out


def mlp_backprop(params: NetParams, spec: MlpSpec, x: Array, upstream: Array, cache=None):
    """Reverse-mode gradients of sum(output * upstream).

    Returns (parameter gradient dict, input gradient). Passing the cache from
    mlp_forward avoids recomputing the forward pass.
    """
    if cache is None:
        _, cache = mlp_forward(params, spec, x, return_cache=True)
    inputs, pre = cache
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != (inputs[0].shape[0], spec.output_dim):
        raise ValueError(f"upstream shape {g.shape} does not match output")
    grads: dict[str, Array] = {}
    last = spec.depth
    grads[f"w{last}"] = inputs[last].T @ g
    grads[f"b{last}"] = g.sum(axis=0)
    g = g @ params.values[f"w{last}"].T
    for l in range(spec.depth - 1, -1, -1):
        g = g * _silu_deriv(pre[l])
        grads[f"w{l}"] = inputs[l].T @ g
        grads[f"b{l}"] = g.sum(axis=0)
        g = g @ params.values[f"w{l}"].T
    return grads, g


def adamw_step(
    params: NetParams,
    grads: dict[str, Array],
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> bool:
    """One decoupled-weight-decay Adam update, in place.

    Returns False and leaves parameters, moments and the step counter
    untouched when any gradient entry is non-finite, so the caller can react
    instead of poisoning the moment state.
    """
    for name in params.values:
        if not np.all(np.isfinite(grads[name])):
            return False
    b1, b2 = betas
    params.step += 1
    c1 = 1.0 - b1 ** params.step
    c2 = 1.0 - b2 ** params.step
    for name, p in params.values.items():
        g = grads[name]
        m = params.m[name]
        v = params.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        # decay is decoupled: applied to the parameter, never to the moments
        p -= lr * weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return True


def clip_global_norm(grads: dict[str, Array], max_norm: float) -> tuple[dict[str, Array], bool]:
    """Scale all gradients in place so their joint L2 norm is <= max_norm.

    Returns (grads, True) when scaling occurred.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = 0.0
    for g in grads.values():
        total += float(np.dot(g.ravel(), g.ravel()))
    norm = math.sqrt(total)
    if not norm > max_norm:
        return grads, False
    scale = max_norm / norm
    for g in grads.values():
        g *= scale
    return grads, True


@dataclass(frozen=True)
class TimeEmbedding:
    """Sinusoidal time features: (sin(w_i t), ..., cos(w_i t), ...)."""

    dim: int
    frequencies: tuple[float, ...]

    def __post_init__(self):
        if self.dim < 2 or self.dim % 2 != 0:
            raise ValueError("embedding dim must be a positive even integer")
        if len(self.frequencies) != self.dim // 2:
            raise ValueError("need dim/2 frequencies")
        freqs = self.frequencies
        if any(f <= 0 for f in freqs) or any(b <= a for a, b in zip(freqs, freqs[1:])):
            raise ValueError("frequencies must be positive and strictly increasing")


def make_time_embedding(dim: int, horizon: float = 1.0) -> TimeEmbedding:
    """Geometric frequency ladder w_k = 2*pi*2^k / horizon, k = 0..dim/2-1."""
    freqs = tuple(2.0 * math.pi * (2.0 ** k) / horizon for k in range(dim // 2))
    return TimeEmbedding(dim=dim, frequencies=freqs)


def embed_time(t: float, emb: TimeEmbedding) -> Array:
    w = np.asarray(emb.frequencies, dtype=np.float64)
    return np.concatenate([np.sin(w * t), np.cos(w * t)])


def save_checkpoint(path, nets: dict[str, tuple[MlpSpec, NetParams]], extra: dict | None = None):
    """Write named networks with optimizer state to a single .npz container.

    Layout (format version 1): each parameter array is stored under
    "<net>/<param>", its Adam moments under "<net>/m/<param>" and
    "<net>/v/<param>"; "__meta__" holds a UTF-8 JSON blob with the format
    version, every network's MlpSpec and step counter, the parameter order,
    and caller metadata. All values are row-major float64.
    """
    arrays: dict[str, Array] = {}
    meta = {"format_version": CHECKPOINT_FORMAT_VERSION, "nets": {}, "extra": extra or {}}
    for net_name, (spec, params) in nets.items():
        if "/" in net_name:
            raise ValueError("network names must not contain '/'")
        meta["nets"][net_name] = {
            "spec": asdict(spec),
            "step": params.step,
            "param_names": params.names,
        }
        for pname, arr in params.values.items():
            arrays[f"{net_name}/{pname}"] = np.ascontiguousarray(arr, dtype=np.float64)
            arrays[f"{net_name}/m/{pname}"] = np.ascontiguousarray(params.m[pname], dtype=np.float64)
            arrays[f"{net_name}/v/{pname}"] = np.ascontiguousarray(params.v[pname], dtype=np.float64)
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[dict[str, tuple[MlpSpec, NetParams]], dict]:
    """Inverse of save_checkpoint. Returns ({name: (spec, params)}, extra)."""
    with np.load(path) as zf:
        meta = json.loads(bytes(zf["__meta__"]).decode("utf-8"))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {meta.get('format_version')!r}")
        nets: dict[str, tuple[MlpSpec, NetParams]] = {}
        for net_name, info in meta["nets"].items():
            spec = MlpSpec(**info["spec"])
            values = {p: zf[f"{net_name}/{p}"] for p in info["param_names"]}
            m = {p: zf[f"{net_name}/m/{p}"] for p in info["param_names"]}
            v = {p: zf[f"{net_name}/v/{p}"] for p in info["param_names"]}
            nets[net_name] = (spec, NetParams(values=values, m=m, v=v, step=info["step"]))
    return nets, meta["extra"]
