import math

import numpy as np
import pytest
import torch

import gradcheck as G
from unimm import nn


def test_mlp_zero_weights():
    store = nn.ParamStore(0)
    spec = nn.MLPSpec("m", (3, 4, 2)).build(store)
    with torch.no_grad():
        for n in store.names():
            store[n].zero_()
    out = nn.mlp_forward(store, spec, nn.tensor(np.ones((5, 3))))
    assert torch.all(out == 0)


def test_affine_identity():
    store = nn.ParamStore(0)
    store.add("l.w", [[2.0]])
    store.add("l.b", [1.0])
    assert nn.linear(store, "l", nn.tensor([[3.0]])).item() == 7.0


def test_mlp_matches_reference_forward(rng):
    store = nn.ParamStore(5)
    spec = nn.MLPSpec("m", (4, 6, 3)).build(store)
    x = rng.normal(size=(7, 4))
    out = nn.mlp_forward(store, spec, nn.tensor(x)).detach().numpy()
    w0, b0, w1, b1 = (store[n].detach().numpy() for n in ("m.0.w", "m.0.b", "m.1.w", "m.1.b"))
    ref = np.zeros((7, 3))
    for r in range(7):
        h = [max(0.0, sum(x[r, i] * w0[i, j] for i in range(4)) + b0[j]) for j in range(6)]
        ref[r] = [sum(h[j] * w1[j, k] for j in range(6)) + b1[k] for k in range(3)]
    assert np.max(np.abs(out - ref)) <= 1e-12


def test_shape_error_names_layer():
    store = nn.ParamStore(0)
    spec = nn.MLPSpec("head", (4, 3)).build(store)
    with pytest.raises(nn.ShapeError, match="head.0"):
        nn.mlp_forward(store, spec, nn.tensor(np.ones((2, 5))))


def test_initialization_bounds_and_determinism():
    a, b = nn.ParamStore(3), nn.ParamStore(3)
    for s in (a, b):
        s.linear("x", 10, 6)
    bound = math.sqrt(6 / 16)
    w = a["x.w"].detach().numpy()
    assert np.all(np.abs(w) <= bound) and np.all(a["x.b"].detach().numpy() == 0)
    assert np.array_equal(w, b["x.w"].detach().numpy())
    c = nn.ParamStore(4)
    c.linear("x", 10, 6)
    assert not np.array_equal(w, c["x.w"].detach().numpy())
    with pytest.raises(KeyError):
        a.linear("x", 1, 1)


def _attn_store(width=4, heads=1):
    store = nn.ParamStore(0)
    spec = nn.AttentionSpec("a", width, heads).build(store)
    with torch.no_grad():
        for p in "qkvo":
            store[f"a.{p}.w"].copy_(torch.eye(width, dtype=nn.DTYPE))
            store[f"a.{p}.b"].zero_()
    return store, spec


def test_attention_single_key():
    store, spec = _attn_store()
    q = nn.tensor([[1.0, 2.0, 0.0, -1.0]])
    kv = nn.tensor([[0.5, -0.3, 2.0, 1.0]])
    out = nn.attention_forward(store, spec, q, kv, kv)
    assert torch.equal(out, kv)


def test_attention_identical_keys_average():
    q = nn.tensor([[0.3, 0.1]])
    k = nn.tensor([[1.0, 1.0], [1.0, 1.0]])
    v = nn.tensor([[1.0, 0.0], [3.0, 2.0]])
    out = nn.scaled_dot_attention(q, k, v)
    np.testing.assert_allclose(out.numpy(), [[2.0, 1.0]], atol=1e-15)


def test_attention_two_token_hand_softmax():
    q = nn.tensor([[1.0, 0.5]])
    k = nn.tensor([[0.2, -1.0], [1.5, 0.3]])
    v = nn.tensor([[1.0, 2.0], [-1.0, 4.0]])
    rel = nn.tensor([[[0.1, 0.1], [-0.5, 0.0]]])
    s0 = (1.0 * 0.3 + 0.5 * -0.9) / math.sqrt(2)
    s1 = (1.0 * 1.0 + 0.5 * 0.3) / math.sqrt(2)
    w0 = math.exp(s0) / (math.exp(s0) + math.exp(s1))
    expect = [w0 * 1.0 + (1 - w0) * -1.0, w0 * 2.0 + (1 - w0) * 4.0]
    out = nn.scaled_dot_attention(q, k, v, rel=rel)
    assert np.max(np.abs(out.numpy()[0] - expect)) <= 1e-12


def test_attention_rows_sum_to_one(rng):
    store = nn.ParamStore(1)
    spec = nn.AttentionSpec("a", 8, heads=2).build(store)
    mask = torch.as_tensor(rng.random((3, 5, 6)) < 0.5)
    mask[..., 0] = True
    _, w = nn.attention_forward(store, spec, nn.tensor(rng.normal(size=(3, 5, 8))),
                                nn.tensor(rng.normal(size=(3, 6, 8))), nn.tensor(rng.normal(size=(3, 6, 8))),
                                nn.tensor(rng.normal(size=(3, 5, 6, 8))), mask, return_weights=True)
    assert torch.max(torch.abs(w.sum(-2) - 1)).item() <= 1e-12
    assert torch.all(w.masked_select(~mask.unsqueeze(-1).expand_as(w)) == 0)


def test_attention_length_mismatch():
    with pytest.raises(nn.ShapeError):
        nn.scaled_dot_attention(nn.tensor(np.ones((1, 2))), nn.tensor(np.ones((3, 2))), nn.tensor(np.ones((2, 2))))
    with pytest.raises(nn.ShapeError):
        nn.scaled_dot_attention(nn.tensor(np.ones((1, 2))), nn.tensor(np.ones((3, 2))),
                                nn.tensor(np.ones((3, 2))), rel=nn.tensor(np.ones((1, 2, 2))))


def test_backward_square():
    store = nn.ParamStore(0)
    w = store.add("w", 3.0)
    store.add("unused", [1.0, 2.0])
    nn.backward(w * w)
    assert store.grad("w").item() == 6.0
    assert torch.all(store.grad("unused") == 0)


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        nn.backward(nn.tensor([1.0, 2.0], requires_grad=True) * 2)


@pytest.mark.parametrize("case", [G.linear_case, G.mlp_case, G.layer_norm_case, G.attention_case,
                                  lambda r: G.loss_case(r, True), lambda r: G.loss_case(r, False)])
def test_layer_gradients_fd(case):
    rng = np.random.default_rng(11)
    for _ in range(5):
        f, ts = case(rng)
        worst, n, _ = G.check(f, ts, rng)
        assert n > 0 and worst <= 1e-4


def test_adamw_zero_grad_no_decay():
    store = nn.ParamStore(0)
    p = store.add("p", [1.0, -2.0])
    p.grad = torch.zeros(2, dtype=nn.DTYPE)
    nn.adamw_step(store, nn.OptimizerState(weight_decay=0.0), 1e-3)
    assert p.detach().tolist() == [1.0, -2.0]


def test_adamw_decay_only():
    store = nn.ParamStore(0)
    p = store.add("p", [1.0, -2.0])
    p.grad = torch.zeros(2, dtype=nn.DTYPE)
    nn.adamw_step(store, nn.OptimizerState(weight_decay=0.1), 0.01)
    np.testing.assert_allclose(p.detach().numpy(), [1.0 - 0.01 * 0.1 * 1.0, -2.0 + 0.01 * 0.1 * 2.0], rtol=0, atol=1e-15)


def test_adamw_hand_update():
    theta, g, m0, v0, lr, wd = 0.7, -0.3, 0.05, 0.02, 1e-2, 1e-4
    b1, b2, eps, t = 0.9, 0.999, 1e-8, 3
    store = nn.ParamStore(0)
    p = store.add("p", [theta])
    p.grad = nn.tensor([g])
    st = nn.OptimizerState(m={"p": nn.tensor([m0])}, v={"p": nn.tensor([v0])}, step=t - 1, weight_decay=wd)
    nn.adamw_step(store, st, lr)
    m = b1 * m0 + (1 - b1) * g
    v = b2 * v0 + (1 - b2) * g * g
    mh = m / (1 - b1 ** t)
    vh = v / (1 - b2 ** t)
    expect = theta * (1 - lr * wd) - lr * mh / (math.sqrt(vh) + eps)
    assert abs(p.item() - expect) <= 1e-12
    assert st.step == t


def test_adamw_missing_gradients():
    store = nn.ParamStore(0)
    store.add("p", [1.0])
    with pytest.raises(nn.OptimizerStateError):
        nn.adamw_step(store, nn.OptimizerState(), 1e-3)


def test_cosine_schedule():
    assert nn.cosine_lr(0, 100) == 5e-4
    assert nn.cosine_lr(100, 100) == 0.0
    assert nn.cosine_lr(50, 100) == pytest.approx(2.5e-4, abs=1e-18)
    with pytest.raises(ValueError):
        nn.cosine_lr(101, 100)
    with pytest.raises(ValueError):
        nn.cosine_lr(-1, 100)


def test_checkpoint_round_trip(tmp_path):
    store = nn.ParamStore(9)
    nn.MLPSpec("m", (3, 5, 2)).build(store)
    store.embedding("q", 4, 3)
    nn.save_checkpoint(store, tmp_path / "ck", {"width": 5})
    arrays, hp, seed = nn.load_checkpoint(tmp_path / "ck")
    assert hp == {"width": 5} and seed == 9
    for n, a in store.arrays().items():
        assert np.array_equal(a, arrays[n])
    raw = (tmp_path / "ck.bin").read_bytes()
    first = np.frombuffer(raw[:8], dtype="<f8")[0]
    assert first == store.arrays()["m.0.w"].ravel()[0]
    other = nn.ParamStore(0)
    nn.MLPSpec("m", (3, 5, 2)).build(other)
    other.embedding("q", 4, 3)
    other.load_arrays(arrays)
    assert all(np.array_equal(a, b) for a, b in zip(other.arrays().values(), store.arrays().values()))


def test_load_arrays_shape_check():
    store = nn.ParamStore(0)
    store.linear("l", 2, 2)
    with pytest.raises(nn.ShapeError):
        store.load_arrays({"l.w": np.zeros((3, 2))})


def test_mac_counter():
    store = nn.ParamStore(0)
    spec = nn.MLPSpec("m", (4, 8, 2)).build(store)
    with nn.count_macs() as c:
        nn.mlp_forward(store, spec, nn.tensor(np.ones((3, 4))))
    assert c["macs"] == spec.macs(3) == 3 * (32 + 16)
