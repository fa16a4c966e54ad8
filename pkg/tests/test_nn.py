"""Autodiff kernel: gradients vs central finite differences, plus contracts
for stop-gradient, gradient accumulation, EMA, the cosine schedule, and the
checkpoint round trip."""

import math

import numpy as np
import pytest

from lotcast import nn
from lotcast.nn import (
    GRU, MLP, AdamW, Conv1dSame, LayerNorm, Linear, Module,
    MultiHeadSelfAttention, Param, Tensor,
)


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar-valued f at x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_grad(build, x0: np.ndarray, rtol: float = 1e-4, h: float = 1e-6):
    """build(Tensor) -> scalar Tensor; compares autodiff grad to FD."""
    xt = Tensor(x0.copy(), requires_grad=True)
    build(xt).backward()
    ana = xt.grad.copy()

    def f(arr):
        return build(Tensor(arr)).item()

    num = numeric_grad(f, x0.copy(), h=h)
    scale = np.maximum(np.abs(num), 1.0)
    np.testing.assert_allclose(ana, num, atol=rtol, rtol=0, err_msg="grad mismatch",
                               verbose=True, strict=False)
    assert np.max(np.abs(ana - num) / scale) < rtol


RNG_SEEDS = list(range(20))


@pytest.mark.parametrize("seed", RNG_SEEDS)
def test_elementwise_and_reduction_grads(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(3, 4)) * 2.0

    check_grad(lambda x: (x * x + 2.0 * x - x / 3.0).sum(), x0)
    check_grad(lambda x: (x.tanh() + x.sigmoid()).sum(), x0)
    check_grad(lambda x: x.exp().mean(), x0)
    check_grad(lambda x: ((x * x) + 1.0).log().sum(), x0)
    check_grad(lambda x: ((x * x) + 0.5).sqrt().sum(), x0)
    # keep FD away from the ReLU kink
    x_off = x0 + np.where(np.abs(x0) < 1e-3, 0.1, 0.0)
    check_grad(lambda x: (x.relu() * x).sum(), x_off)
    check_grad(lambda x: (x ** 3).sum(axis=0).sum(), x0)
    check_grad(lambda x: x.mean(axis=1).sum(), x0)


@pytest.mark.parametrize("seed", RNG_SEEDS)
def test_matmul_broadcast_shape_grads(seed):
    rng = np.random.default_rng(seed)
    a0 = rng.normal(size=(2, 3, 4))
    b0 = rng.normal(size=(4, 5))

    check_grad(lambda a: ((a @ Tensor(b0)) ** 2).sum(), a0)
    check_grad(lambda b: ((Tensor(a0) @ b) ** 2).sum(), b0)
    # broadcasting add/mul
    c0 = rng.normal(size=(3, 1))
    check_grad(lambda c: (Tensor(a0[0]) * c + c).sum(), c0)
    # reshape / transpose / swapaxes / getitem / cumsum
    check_grad(lambda x: x.reshape(6, 4).transpose(1, 0).sum(axis=0).mean(), a0)
    check_grad(lambda x: x.swapaxes(0, 2)[1:, :, 0].cumsum(axis=0).sum(), a0)
    check_grad(lambda x: x.broadcast_to((5, 2, 3, 4)).sum(), a0)


@pytest.mark.parametrize("seed", RNG_SEEDS)
def test_softmax_logsoftmax_max_concat_stack_grads(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(4, 6))
    w = rng.normal(size=(4, 6))

    check_grad(lambda x: (nn.softmax(x, axis=-1) * Tensor(w)).sum(), x0)
    check_grad(lambda x: (nn.log_softmax(x, axis=-1) * Tensor(w)).sum(), x0)
    check_grad(lambda x: x.max(axis=1).sum(), x0)  # distinct entries w.p. 1
    check_grad(lambda x: nn.concat([x * 2.0, x ** 2], axis=1).sum(), x0)
    check_grad(lambda x: nn.stack([x, x * 3.0], axis=0).mean(), x0)
    idx = rng.integers(0, 6, size=(4, 2))
    check_grad(lambda x: x.take_along_axis(idx, axis=1).sum(), x0)


@pytest.mark.parametrize("seed", RNG_SEEDS)
def test_fused_layer_grads(seed):
    rng = np.random.default_rng(seed)

    # layer_norm wrt input, weight, bias
    x0 = rng.normal(size=(3, 8))
    w0 = rng.normal(size=8) + 1.0
    b0 = rng.normal(size=8)
    check_grad(lambda x: (nn.layer_norm(x, Tensor(w0), Tensor(b0)) ** 2).sum(), x0, rtol=5e-4)
    check_grad(lambda w: (nn.layer_norm(Tensor(x0), w, Tensor(b0)) ** 2).sum(), w0)
    check_grad(lambda b: (nn.layer_norm(Tensor(x0), Tensor(w0), b) ** 2).sum(), b0)

    # gru_cell wrt every input
    dx, dh, B = 5, 4, 3
    xs = rng.normal(size=(B, dx))
    hs = rng.normal(size=(B, dh))
    wx = rng.normal(size=(dx, 3 * dh)) * 0.5
    wh = rng.normal(size=(dh, 3 * dh)) * 0.5
    bx = rng.normal(size=3 * dh) * 0.1
    bh = rng.normal(size=3 * dh) * 0.1
    others = dict(x=xs, h=hs, wx=wx, wh=wh, bx=bx, bh=bh)
    for key in others:
        fixed = {k: Tensor(v) for k, v in others.items()}

        def build(t, key=key, fixed=fixed):
            args = dict(fixed)
            args[key] = t
            return (nn.gru_cell(args["x"], args["h"], args["wx"],
                                args["wh"], args["bx"], args["bh"]) ** 2).sum()

        check_grad(build, others[key].copy())


@pytest.mark.parametrize("seed", RNG_SEEDS[:10])
def test_module_grads_end_to_end(seed):
    """Whole-module FD check through conv -> GRU -> attention -> MLP."""
    rng = np.random.default_rng(seed)
    B, N, T, d = 2, 3, 4, 8
    conv = Conv1dSame(rng, 5, d)
    gru = GRU(rng, d, d)
    att = MultiHeadSelfAttention(rng, d, 4)
    head = MLP(rng, [d, 16, 2])
    mask = np.ones((B, N), dtype=bool)
    mask[1, 2] = False
    x0 = rng.normal(size=(B, N, T, 5))

    def forward(xt: Tensor) -> Tensor:
        h = gru(conv(xt))                    # (B, N, d)
        h = att(h, mask)
        out = head(h) * Tensor(mask[..., None].astype(float))
        return (out ** 2).sum()

    xt = Tensor(x0.copy(), requires_grad=True)
    forward(xt).backward()
    ana = xt.grad.copy()
    num = numeric_grad(lambda a: forward(Tensor(a)).item(), x0.copy())
    scale = np.maximum(np.abs(num), 1.0)
    assert np.max(np.abs(ana - num) / scale) < 5e-4

    # parameter gradient spot check (one weight matrix per module)
    params = {}
    for m, pre in ((conv, "conv"), (gru, "gru"), (att, "att"), (head, "head")):
        params.update(m.params(pre))
    name = "gru.wx"
    p = params[name]
    for q in params.values():
        q.zero_grad()
    forward(Tensor(x0)).backward()
    ana_w = p.grad.copy()

    def f_w(arr):
        old = p.t.data
        p.t.data = arr
        val = forward(Tensor(x0)).item()
        p.t.data = old
        return val

    num_w = numeric_grad(f_w, p.data.copy())
    scale = np.maximum(np.abs(num_w), 1.0)
    assert np.max(np.abs(ana_w - num_w) / scale) < 5e-4


def test_masked_attention_ignores_padding():
    """Padded agents must not influence valid rows at all."""
    rng = np.random.default_rng(0)
    att = MultiHeadSelfAttention(rng, 8, 2)
    x_real = rng.normal(size=(1, 2, 8))
    mask2 = np.array([[True, True]])
    out2 = att(Tensor(x_real), mask2).data

    x_pad = np.concatenate([x_real, rng.normal(size=(1, 3, 8))], axis=1)
    mask5 = np.array([[True, True, False, False, False]])
    out5 = att(Tensor(x_pad), mask5).data
    np.testing.assert_allclose(out2[0, :2], out5[0, :2], atol=1e-12)


def test_stop_gradient_blocks_flow():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    y = (nn.stop_gradient(x * x) * x).sum()   # d/dx of sg(x^2)*x is x^2, not 3x^2
    y.backward()
    np.testing.assert_allclose(x.grad, np.array([4.0, 9.0]))


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with nn.no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad and y._backward is None
    assert nn.grad_enabled()


def test_backward_requires_scalar_and_accumulates():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()
    (x.sum() * 1.0).backward()
    (x.sum() * 1.0).backward()
    np.testing.assert_allclose(x.grad, 2.0 * np.ones((2, 2)))
    x.zero_grad()
    assert x.grad is None


def test_external_grad_op_injects_supplied_gradient():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    supplied = np.array([10.0, 20.0])
    y = nn.external_grad_op(x, value=7.0, grad=supplied)
    (y * 3.0).backward()
    assert y.item() == 7.0
    np.testing.assert_allclose(x.grad, 3.0 * supplied)


def test_ema_update_closed_form():
    rng = np.random.default_rng(1)
    init = rng.normal(size=(3, 3))
    src = {"a": Param(init.copy(), "a")}
    tgt = {"a": Param(init.copy(), "a")}
    tau = 0.99
    bar = init.copy()
    for _ in range(5):
        src["a"].t.data = rng.normal(size=(3, 3))
        nn.ema_update(tgt, src, tau)
        bar = tau * bar + (1 - tau) * src["a"].data
    np.testing.assert_allclose(tgt["a"].data, bar, atol=1e-12)
    with pytest.raises(ValueError):
        nn.ema_update({"b": tgt["a"]}, src, tau)


def test_cosine_schedule_endpoints_and_midpoint():
    base = 1e-3
    assert nn.cosine_lr(base, 0, 100) == pytest.approx(base)
    assert nn.cosine_lr(base, 50, 100) == pytest.approx(base / 2)
    assert nn.cosine_lr(base, 100, 100) == pytest.approx(0.0, abs=1e-12)


def test_adamw_decoupled_weight_decay():
    """With zero gradient moments, decay still shrinks weights (decoupled)."""
    p = Param(np.array([10.0]), "w")
    p.t.grad = np.array([0.0])
    opt = AdamW({"w": p}, base_lr=0.1, total_steps=10, weight_decay=0.5)
    opt.step()
    # update = -lr * wd * w = -0.1 * 0.5 * 10 = -0.5
    np.testing.assert_allclose(p.data, np.array([9.5]), atol=1e-12)


def test_adamw_matches_reference_step():
    """One AdamW step against the textbook update, nonzero gradient."""
    w0 = np.array([1.0, -2.0])
    g = np.array([0.3, -0.1])
    p = Param(w0.copy(), "w")
    p.t.grad = g.copy()
    opt = AdamW({"w": p}, base_lr=1e-2, total_steps=1000, weight_decay=0.01)
    lr = opt.step()
    m = 0.1 * g
    v = 0.001 * g * g
    mhat = m / (1 - 0.9)
    vhat = v / (1 - 0.999)
    expect = w0 - lr * (mhat / (np.sqrt(vhat) + 1e-8) + 0.01 * w0)
    np.testing.assert_allclose(p.data, expect, atol=1e-12)


def test_adamw_deterministic_across_runs():
    def run():
        rng = np.random.default_rng(7)
        lin = Linear(rng, 4, 3)
        params = lin.params("lin")
        opt = AdamW(params, base_lr=1e-2, total_steps=50)
        x = Tensor(rng.normal(size=(8, 4)))
        tgt = rng.normal(size=(8, 3))
        for _ in range(20):
            opt.zero_grad()
            loss = ((lin(x) - Tensor(tgt)) ** 2).mean()
            loss.backward()
            opt.step()
        return {n: p.data.copy() for n, p in params.items()}

    a, b = run(), run()
    for n in a:
        np.testing.assert_array_equal(a[n], b[n])


def test_checkpoint_round_trip_and_hash_stability(tmp_path):
    rng = np.random.default_rng(3)
    params = {
        "enc.w": Param(rng.normal(size=(4, 6)), "enc.w"),
        "enc.b": Param(rng.normal(size=6), "enc.b"),
        "head.w": Param(rng.normal(size=(6, 2)), "head.w"),
    }
    path = tmp_path / "model.ckpt"
    nn.save_checkpoint(path, params, config_hash="abc123")
    header, values = nn.load_checkpoint(path)
    assert header["format"] == "ckpt/v1"
    assert header["config_hash"] == "abc123"
    assert [e["id"] for e in header["params"]] == sorted(params)
    for n, p in params.items():
        np.testing.assert_allclose(values[n], p.data, atol=1e-6)  # f32 round trip

    # byte-identical on re-save
    path2 = tmp_path / "model2.ckpt"
    nn.save_checkpoint(path2, params, config_hash="abc123")
    assert nn.file_sha256(path) == nn.file_sha256(path2)

    # load_into restores values and validates manifests
    fresh = {n: Param(np.zeros_like(p.data), n) for n, p in params.items()}
    nn.load_into(fresh, path, expect_config_hash="abc123")
    for n in params:
        np.testing.assert_allclose(fresh[n].data, params[n].data, atol=1e-6)
    with pytest.raises(ValueError):
        nn.load_into(fresh, path, expect_config_hash="other")
    with pytest.raises(ValueError):
        nn.load_into({"enc.w": fresh["enc.w"]}, path)


def test_checkpoint_rejects_truncated_file(tmp_path):
    p = {"w": Param(np.ones((2, 2)), "w")}
    path = tmp_path / "m.ckpt"
    nn.save_checkpoint(path, p, "h")
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        nn.load_checkpoint(path)


def test_module_param_discovery_paths():
    rng = np.random.default_rng(0)

    class Net(Module):
        def __init__(self):
            self.lin = Linear(rng, 2, 3)
            self.blocks = [LayerNorm(3), LayerNorm(3)]

    names = set(Net().params("net"))
    assert names == {"net.lin.w", "net.lin.b",
                     "net.blocks.0.w", "net.blocks.0.b",
                     "net.blocks.1.w", "net.blocks.1.b"}
