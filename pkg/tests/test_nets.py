import math

import numpy as np
import pytest

from softbridge.nets import (
    MlpSpec,
    NetParams,
    TimeEmbedding,
    adamw_step,
    clip_global_norm,
    embed_time,
    init_mlp,
    load_checkpoint,
    make_time_embedding,
    mlp_backprop,
    mlp_forward,
    save_checkpoint,
)

from oracles import fd_array_grad, fd_param_grads, rel_err


def rng(seed=0):
    return np.random.default_rng(seed)


def test_zero_init_final_outputs_zero():
    spec = MlpSpec(3, 16, 2, 2, zero_init_final=True)
    params = init_mlp(spec, rng())
    x = rng(1).standard_normal((7, 3))
    assert np.all(mlp_forward(params, spec, x) == 0.0)


def test_depth_zero_is_plain_affine():
    spec = MlpSpec(2, 4, 0, 3)
    params = init_mlp(spec, rng(2))
    x = rng(3).standard_normal((5, 2))
    out = mlp_forward(params, spec, x)
    np.testing.assert_array_equal(out, x @ params.values["w0"] + params.values["b0"])


def test_forward_deterministic():
    spec = MlpSpec(2, 8, 2, 2)
    params = init_mlp(spec, rng(4))
    x = rng(5).standard_normal((11, 2))
    a = mlp_forward(params, spec, x)
    b = mlp_forward(params, spec, x)
    np.testing.assert_array_equal(a, b)


def test_forward_rejects_bad_shape():
    spec = MlpSpec(2, 4, 1, 1)
    params = init_mlp(spec, rng())
    with pytest.raises(ValueError):
        mlp_forward(params, spec, np.zeros((3, 5)))


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec(0, 4, 1, 1)
    with pytest.raises(ValueError):
        MlpSpec(2, 4, -1, 1)


def test_affine_backprop_closed_form():
    spec = MlpSpec(3, 4, 0, 2)
    params = init_mlp(spec, rng(6))
    x = rng(7).standard_normal((6, 3))
    g = rng(8).standard_normal((6, 2))
    grads, dx = mlp_backprop(params, spec, x, g)
    np.testing.assert_array_equal(grads["w0"], x.T @ g)
    np.testing.assert_array_equal(grads["b0"], g.sum(axis=0))
    np.testing.assert_array_equal(dx, g @ params.values["w0"].T)


def test_zero_upstream_gives_zero_grads():
    spec = MlpSpec(2, 6, 2, 2)
    params = init_mlp(spec, rng(9))
    x = rng(10).standard_normal((4, 2))
    grads, dx = mlp_backprop(params, spec, x, np.zeros((4, 2)))
    assert all(np.all(g == 0.0) for g in grads.values())
    assert np.all(dx == 0.0)


def test_backprop_matches_finite_differences():
    # 3 hidden layers, mixed widths, random upstream: loss = sum(out * u)
    spec = MlpSpec(3, 5, 3, 2)
    params = init_mlp(spec, rng(11))
    x = rng(12).standard_normal((4, 3))
    u = rng(13).standard_normal((4, 2))

    def loss():
        return float(np.sum(mlp_forward(params, spec, x) * u))

    grads, dx = mlp_backprop(params, spec, x, u)
    fd = fd_param_grads(loss, params)
    for name in params.names:
        assert rel_err(grads[name], fd[name]) <= 1e-4, name
    assert rel_err(dx, fd_array_grad(loss, x)) <= 1e-4


def test_adamw_zero_grad_is_fixed_point():
    spec = MlpSpec(2, 4, 1, 1)
    params = init_mlp(spec, rng(14))
    before = {k: v.copy() for k, v in params.values.items()}
    ok = adamw_step(params, {k: np.zeros_like(v) for k, v in params.values.items()}, lr=0.1)
    assert ok and params.step == 1
    for k in before:
        np.testing.assert_array_equal(params.values[k], before[k])


def test_adamw_single_step_closed_form():
    # scalar parameter, one update from zero moments:
    # m_hat = g, v_hat = g^2, update = -lr * g / (|g| + eps)
    params = NetParams(
        values={"w0": np.array([[1.0]])},
        m={"w0": np.zeros((1, 1))},
        v={"w0": np.zeros((1, 1))},
    )
    g = 0.5
    lr, eps = 0.1, 1e-8
    ok = adamw_step(params, {"w0": np.array([[g]])}, lr=lr, eps=eps)
    assert ok
    expected = 1.0 - lr * g / (abs(g) + eps)
    assert params.values["w0"][0, 0] == pytest.approx(expected, rel=0, abs=1e-15)


def test_adamw_decoupled_weight_decay():
    # zero gradient: the only change is the decay term p <- p - lr*wd*p
    params = NetParams(
        values={"w0": np.array([[2.0]])},
        m={"w0": np.zeros((1, 1))},
        v={"w0": np.zeros((1, 1))},
    )
    adamw_step(params, {"w0": np.zeros((1, 1))}, lr=0.5, weight_decay=0.1)
    assert params.values["w0"][0, 0] == pytest.approx(2.0 * (1.0 - 0.05), abs=1e-15)


def test_adamw_rejects_nonfinite_gradients():
    spec = MlpSpec(2, 4, 1, 1)
    params = init_mlp(spec, rng(15))
    before = params.copy()
    bad = {k: np.zeros_like(v) for k, v in params.values.items()}
    bad["w0"][0, 0] = np.nan
    ok = adamw_step(params, bad, lr=0.1)
    assert not ok
    assert params.step == before.step
    for k in before.values:
        np.testing.assert_array_equal(params.values[k], before.values[k])
        np.testing.assert_array_equal(params.m[k], before.m[k])


def test_adamw_update_direction_invariant_to_loss_scale():
    # scaling all gradients by c leaves the bias-corrected step unchanged in
    # the eps -> 0 limit; checked at eps=1e-12
    spec = MlpSpec(2, 6, 1, 2)
    base = init_mlp(spec, rng(16))
    grads = {k: rng(17).standard_normal(v.shape) for k, v in base.values.items()}
    a = base.copy()
    b = base.copy()
    adamw_step(a, grads, lr=1e-3, eps=1e-12)
    adamw_step(b, {k: 7.3 * g for k, g in grads.items()}, lr=1e-3, eps=1e-12)
    for k in base.values:
        assert np.max(np.abs(a.values[k] - b.values[k])) <= 1e-6


def test_clip_global_norm():
    g = {"a": np.array([3.0, 4.0])}
    _, applied = clip_global_norm(g, 10.0)
    assert not applied
    np.testing.assert_array_equal(g["a"], [3.0, 4.0])

    g = {"a": np.array([12.0]), "b": np.array([16.0])}  # joint norm 20
    _, applied = clip_global_norm(g, 10.0)
    assert applied
    np.testing.assert_allclose(g["a"], [6.0])
    np.testing.assert_allclose(g["b"], [8.0])

    with pytest.raises(ValueError):
        clip_global_norm(g, 0.0)


def test_time_embedding_values():
    emb = make_time_embedding(4, horizon=1.0)
    v = embed_time(0.0, emb)
    np.testing.assert_array_equal(v, [0.0, 0.0, 1.0, 1.0])

    emb1 = TimeEmbedding(dim=2, frequencies=(1.0,))
    v = embed_time(math.pi / 2.0, emb1)
    assert v[0] == pytest.approx(1.0, abs=1e-15)
    assert v[1] == pytest.approx(0.0, abs=1e-15)

    emb32 = make_time_embedding(32, horizon=1.0)
    assert embed_time(0.37, emb32).shape == (32,)


def test_time_embedding_validation():
    with pytest.raises(ValueError):
        TimeEmbedding(dim=3, frequencies=(1.0,))
    with pytest.raises(ValueError):
        TimeEmbedding(dim=4, frequencies=(2.0, 1.0))
    # geometric ladder spans dim/2 octaves over the horizon
    emb = make_time_embedding(8, horizon=2.0)
    np.testing.assert_allclose(
        emb.frequencies, [math.pi * 2.0 ** k for k in range(4)], rtol=1e-15
    )


def test_checkpoint_roundtrip(tmp_path):
    spec_a = MlpSpec(2, 8, 2, 2, zero_init_final=True)
    spec_b = MlpSpec(4, 6, 1, 3)
    a = init_mlp(spec_a, rng(18))
    b = init_mlp(spec_b, rng(19))
    adamw_step(b, {k: rng(20).standard_normal(v.shape) for k, v in b.values.items()}, lr=1e-3)
    path = tmp_path / "ck.npz"
    save_checkpoint(path, {"y0": (spec_a, a), "z": (spec_b, b)}, extra={"note": "x"})
    nets, extra = load_checkpoint(path)
    assert extra == {"note": "x"}
    assert set(nets) == {"y0", "z"}
    spec_l, params_l = nets["z"]
    assert spec_l == spec_b
    assert params_l.step == 1
    for k in b.values:
        np.testing.assert_array_equal(params_l.values[k], b.values[k])
        np.testing.assert_array_equal(params_l.m[k], b.m[k])
        np.testing.assert_array_equal(params_l.v[k], b.v[k])


def test_checkpoint_version_gate(tmp_path):
    import json

    spec = MlpSpec(2, 4, 1, 1)
    params = init_mlp(spec, rng(21))
    path = tmp_path / "ck.npz"
    save_checkpoint(path, {"n": (spec, params)})
    # tamper with the embedded format version
    with np.load(path) as zf:
        arrays = {k: zf[k] for k in zf.files}
    meta = json.loads(bytes(arrays["__meta__"]).decode())
    meta["format_version"] = 99
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    with pytest.raises(ValueError, match="format version"):
        load_checkpoint(path)
