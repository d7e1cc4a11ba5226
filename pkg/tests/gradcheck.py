"""Central finite-difference gradient oracle shared by unit and acceptance tests.

A perturbation that flips the sign of any ReLU or |.| input crosses a kink; such
coordinates are reported as skipped rather than compared.
"""
import contextlib

import numpy as np
import torch

from unimm import nn
from unimm.encoder import EncoderConfig
from unimm.mixture import MixtureConfig, batch_loss
from unimm.model import BehaviorModel
from unimm.trainer import step_loss

EPS = 1e-5
# central differences at EPS cannot resolve gradients below ~1e-5 * |f| (float64
# roundoff of f divided by 2 EPS); smaller magnitudes are compared against that floor
FLOOR = 1e-5


@contextlib.contextmanager
def kink_trace():
    seen = []
    relu, absf = torch.relu, torch.abs

    def r(x, *a, **k):
        seen.append((x.detach() > 0).reshape(-1))
        return relu(x, *a, **k)

    def ab(x, *a, **k):
        seen.append((x.detach() > 0).reshape(-1))
        return absf(x, *a, **k)

    torch.relu, torch.abs = r, ab
    try:
        yield seen
    finally:
        torch.relu, torch.abs = relu, absf


def _signature(f):
    with kink_trace() as seen, torch.no_grad():
        val = float(f())
    return val, (torch.cat(seen) if seen else torch.zeros(0, dtype=torch.bool))


def rel_error(a, n, fval=1.0):
    return abs(a - n) / max(abs(a), abs(n), FLOOR * max(1.0, abs(fval)))


def check(f, tensors, rng, coords=8, eps=EPS, picks=None):
    """Max relative error between autograd and central differences of scalar ``f``.

    ``tensors`` are leaf tensors with requires_grad. ``coords`` entries are drawn from
    every tensor, or, when ``picks`` is a list of tensor positions, one entry from each
    listed tensor. Returns (max_rel, compared, skipped).
    """
    for t in tensors:
        t.grad = None
    out = f()
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    fval, base = _signature(f)
    worst, compared, skipped = 0.0, 0, 0
    if picks is None:
        jobs = [(t, g, rng.choice(t.numel(), size=min(coords, t.numel()), replace=False))
                for t, g in zip(tensors, grads)]
    else:
        jobs = [(tensors[j], grads[j], [rng.integers(tensors[j].numel())]) for j in picks]
    for t, g, idx in jobs:
        g = torch.zeros_like(t) if g is None else g
        flat = t.data.view(-1)
        for i in idx:
            old = flat[i].item()
            flat[i] = old + eps
            fp, sp = _signature(f)
            flat[i] = old - eps
            fm, sm = _signature(f)
            flat[i] = old
            if not (torch.equal(sp, base) and torch.equal(sm, base)):
                skipped += 1
                continue
            num = (fp - fm) / (2 * eps)
            worst = max(worst, rel_error(g.view(-1)[i].item(), num, fval))
            compared += 1
    return worst, compared, skipped


# --- randomized instances per layer -------------------------------------------

def linear_case(rng):
    store = nn.ParamStore(int(rng.integers(1 << 30)))
    store.linear("l", 5, 3)
    x = nn.tensor(rng.normal(size=(4, 5)), requires_grad=True)
    c = nn.tensor(rng.normal(size=(4, 3)))
    return (lambda: (nn.linear(store, "l", x) * c).sum()), [store["l.w"], store["l.b"], x]


def mlp_case(rng):
    store = nn.ParamStore(int(rng.integers(1 << 30)))
    spec = nn.MLPSpec("m", (6, 7, 3)).build(store)
    x = nn.tensor(rng.normal(size=(5, 6)), requires_grad=True)
    c = nn.tensor(rng.normal(size=(5, 3)))
    return (lambda: (nn.mlp_forward(store, spec, x) * c).sum()), [store[n] for n in store.names()] + [x]


def layer_norm_case(rng):
    store = nn.ParamStore(0)
    store.norm("n", 6)
    with torch.no_grad():
        store["n.g"].copy_(nn.tensor(rng.normal(size=6)))
        store["n.b"].copy_(nn.tensor(rng.normal(size=6)))
    x = nn.tensor(rng.normal(size=(3, 6)), requires_grad=True)
    c = nn.tensor(rng.normal(size=(3, 6)))
    return (lambda: (nn.layer_norm(store, "n", x) * c).sum()), [store["n.g"], store["n.b"], x]


def attention_case(rng):
    store = nn.ParamStore(int(rng.integers(1 << 30)))
    spec = nn.AttentionSpec("a", 8, heads=2).build(store)
    q = nn.tensor(rng.normal(size=(3, 8)), requires_grad=True)
    kv = nn.tensor(rng.normal(size=(4, 8)), requires_grad=True)
    rel = nn.tensor(rng.normal(size=(3, 4, 8)), requires_grad=True)
    mask = torch.as_tensor(rng.random((3, 4)) < 0.7)
    mask[:, 0] = True
    c = nn.tensor(rng.normal(size=(3, 8)))
    f = lambda: (nn.attention_forward(store, spec, q, kv, kv, rel, mask) * c).sum()
    return f, [store[n] for n in store.names()] + [q, kv, rel]


def loss_case(rng, regression: bool):
    """Decoder outputs fed straight into the batch loss (inputs and parameters)."""
    n, N, K = 5, 4, 3
    raw_scores = nn.tensor(rng.normal(size=(N, K)), requires_grad=True)
    loc = nn.tensor(rng.normal(0, 2, (N, n, 2)), requires_grad=True)
    b_raw = nn.tensor(rng.normal(size=(N, n, 2)), requires_grad=True)
    mu = nn.tensor(rng.normal(size=(N, n)), requires_grad=True)
    k_raw = nn.tensor(rng.normal(0, 2, (N, n)), requires_grad=True)
    y = np.zeros((N, n, 4))
    y[..., :2] = rng.normal(0, 2, (N, n, 2))
    y[..., 2] = rng.uniform(-np.pi, np.pi, (N, n))
    y[..., 3] = rng.random((N, n)) < 0.8
    y[:, 0, 3] = 1
    yt = nn.tensor(y)
    z = torch.as_tensor(rng.integers(0, K, N))

    def f():
        b = torch.nn.functional.softplus(b_raw) + 1e-3
        kappa = torch.nn.functional.softplus(k_raw) * 10 + 1e-3  # spans both log I0 branches
        return batch_loss(torch.log_softmax(raw_scores, -1), z, yt, yt[..., 3] > 0.5, loc, b, mu, kappa,
                          regression)[0]
    ts = [raw_scores, loc, b_raw, mu, k_raw] if regression else [raw_scores]
    return f, ts


def tiny_model(rng, paradigm, regression, scene):
    mix = MixtureConfig(K=3, paradigm=paradigm, continuous_regression=regression, T_pred=1.0, T_zstar=1.0,
                        score_hidden=5, reg_hidden=7, anchor_hidden=6)
    anchors = None
    if paradigm == "anchor_based":
        from unimm.mixture import AnchorSet
        from unimm.scenario import CATEGORIES
        traj = {}
        for c in CATEGORIES:
            a = np.zeros((3, 81, 3))
            v = rng.uniform(0.5, 8, (3, 1))
            a[:, :, 0] = v * np.arange(81) * 0.1
            a[:, :, 1] = rng.normal(0, 0.02, (3, 1)) * np.arange(81) ** 1.5
            a[:, 1:, 2] = np.arctan2(np.diff(a[:, :, 1]), np.diff(a[:, :, 0]))
            traj[c] = a
        anchors = AnchorSet(traj)
    enc = EncoderConfig(width=8, heads=2, blocks=1, ffn_mult=2, rel_hidden=6)
    return BehaviorModel(mix, anchors, enc, seed=int(rng.integers(1 << 30)))


def jitter(store, rng, scale=0.2):
    """Move every parameter off its initial value so no pre-activation sits exactly at 0."""
    with torch.no_grad():
        for _, t in store.trainable():
            t.add_(nn.tensor(rng.normal(0.0, scale, tuple(t.shape))))


def mini_scene(rng):
    """Two agents on one short polyline: cheap enough for many finite-difference passes."""
    from unimm.scenario import MapPolyline, Scenario, Track
    t = np.arange(91) * 0.1
    tracks = []
    for i, (cat, rad) in enumerate([("vehicle", 2.0), ("cyclist", 0.8)]):
        s = np.zeros((91, 4))
        v = rng.uniform(2, 8)
        bend = rng.normal(0, 0.1)
        s[:, 0] = v * t + rng.uniform(0, 10)
        s[:, 1] = 3.0 * i + bend * t ** 2
        s[:, 2] = np.arctan2(2 * bend * t, v)
        s[:, 3] = 1
        s[: int(rng.integers(0, 4)), 3] = 0
        tracks.append(Track(i, cat, rad, s))
    return Scenario([MapPolyline([[0, 0], [10, 0], [20, rng.uniform(-2, 2)]], 4.0)], tracks)


def model_case(rng, scene, paradigm, regression):
    m = tiny_model(rng, paradigm, regression, scene)
    jitter(m.store, rng)
    inputs = [scene.states_array()]
    f = lambda: step_loss(m, [scene], inputs, m.cfg.n_zstar)[0]
    return f, [t for _, t in m.store.trainable()]
