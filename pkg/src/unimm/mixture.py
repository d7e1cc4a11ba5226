"""Mixture behavior head: decoders, component likelihoods, positive matching and anchors."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import nn
from .geometry import Pose2, mean_displacement, seqsum, states_to_global, states_to_local, steps_for
from .scenario import CATEGORIES, TAU

PARADIGMS = ("anchor_free", "anchor_based")
ANCHOR_HORIZON = 8.0
SCALE_FLOOR = 1e-3
KAPPA_CEIL = 500.0
POS_SCALE = 10.0  # anchor features are in units of 10 m
STEP_SCALE = 1.0  # regression outputs are per-step displacements in m, summed along the horizon
TURN_SCALE = 0.1  # per-step heading change in rad, summed the same way
OUT_PER_STEP = 6  # x, y, raw scale x, raw scale y, heading, raw concentration


class MatchingError(ValueError):
    pass


class ClusteringError(ValueError):
    pass


class LikelihoodDomainError(ValueError):
    pass


def _multiple_of_tau(v: float) -> bool:
    r = v / TAU
    return v > 0 and abs(r - round(r)) < 1e-9


@dataclass
class MixtureConfig:
    K: int = 6
    paradigm: str = "anchor_free"
    continuous_regression: bool = True
    T_pred: float = 2.0
    T_zstar: float = 2.0
    score_hidden: int = 16
    reg_hidden: int = 512
    anchor_hidden: int = 512

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"paradigm must be one of {PARADIGMS}")
        if self.paradigm == "anchor_free" and not self.continuous_regression:
            raise ValueError("anchor_free requires continuous_regression")
        for k in ("T_pred", "T_zstar"):
            if not _multiple_of_tau(getattr(self, k)):
                raise ValueError(f"{k}={getattr(self, k)} is not a positive multiple of {TAU}")
        if self.T_zstar > self.T_pred + 1e-9:
            raise ValueError("T_zstar must not exceed T_pred")

    @property
    def n_pred(self) -> int:
        return steps_for(self.T_pred)

    @property
    def n_zstar(self) -> int:
        return steps_for(self.T_zstar)

    @property
    def discrete(self) -> bool:
        return self.paradigm == "anchor_based" and not self.continuous_regression

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class ComponentParams:
    loc: np.ndarray    # (n, 2) Laplace location
    scale: np.ndarray  # (n, 2) Laplace scale b
    mu: np.ndarray     # (n,) von Mises mean
    kappa: np.ndarray  # (n,) von Mises concentration

    def expected(self) -> np.ndarray:
        return np.concatenate([self.loc, self.mu[:, None]], axis=1)


@dataclass
class MixturePrediction:
    """Scores over all K components plus trajectories for the realized ones (local frame)."""

    scores: np.ndarray                 # (K,) log-probabilities
    trajectories: np.ndarray           # (K', n, 3) x, y, heading
    components: np.ndarray             # (K',) indices of the realized components
    params: list = field(default_factory=list)
    frame: Pose2 = Pose2(0.0, 0.0, 0.0)


# --- anchors ------------------------------------------------------------------

@dataclass
class AnchorSet:
    """Per-category K agent-local 8 s trajectories, row 0 at the origin."""

    trajectories: dict  # category -> (K, 81, 3)

    @property
    def K(self) -> int:
        return next(iter(self.trajectories.values())).shape[0]

    def future(self, category: str, n_steps: int) -> np.ndarray:
        """Anchor states for steps 1..n_steps after the frame, (K, n, 3)."""
        if category not in self.trajectories:
            raise ValueError(f"no anchors for category {category!r}")
        a = self.trajectories[category]
        if n_steps > a.shape[1] - 1:
            raise ValueError(f"anchors cover {a.shape[1] - 1} steps, asked for {n_steps}")
        return a[:, 1: n_steps + 1]

    def to_json(self) -> str:
        doc = {c: self.trajectories[c].tolist() for c in CATEGORIES if c in self.trajectories}
        return json.dumps(doc, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "AnchorSet":
        doc = json.loads(text)
        traj = {c: np.array(v, dtype=float) for c, v in doc.items()}
        ks = {v.shape[0] for v in traj.values()}
        if len(ks) != 1:
            raise ValueError("anchor counts differ across categories")
        return cls(traj)


def anchors_in_gt_frame(anchors: AnchorSet, category: str, pose, n_steps: int | None = None) -> np.ndarray:
    """Anchors rigidly moved to ``pose`` (x, y, heading): (K, n, 3) in the global frame."""
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}")
    n = n_steps if n_steps is not None else anchors.trajectories[category].shape[1] - 1
    pose = np.asarray(pose.as_array() if isinstance(pose, Pose2) else pose, dtype=float)[:3]
    return states_to_global(anchors.future(category, n), pose)


def future_trajectories(scenes, category: str, horizon: float = ANCHOR_HORIZON) -> np.ndarray:
    """Agent-local futures (N, n, 3) of every fully valid agent of ``category``."""
    n = steps_for(horizon)
    out = []
    for sc in scenes:
        c = sc.current_step
        for tr in sc.tracks:
            if tr.category != category:
                continue
            st = tr.states
            if c + n >= len(st) or not np.all(st[c: c + n + 1, 3] > 0.5):
                continue
            out.append(states_to_local(st[c + 1: c + n + 1, :3], st[c, :3]))
    if not out:
        return np.zeros((0, n, 3))
    return np.stack(out)


def _sqdist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance between flattened position sets, (N, K)."""
    d = x[:, None, :] - c[None, :, :]
    return seqsum(d * d, axis=-1)


def kmeans_assign(x_pos: np.ndarray, centers_pos: np.ndarray):
    """x_pos (N, P), centers_pos (K, P) -> (labels, squared distances (N, K))."""
    d = _sqdist(x_pos, centers_pos)
    return np.argmin(d, axis=1), d


def kmeans_update(traj: np.ndarray, labels: np.ndarray, k: int) -> tuple:
    """Cluster means: positions averaged, headings by circular mean. Returns (centers, counts)."""
    n, steps = traj.shape[:2]
    centers = np.zeros((k, steps, 3))
    counts = np.bincount(labels, minlength=k)
    for j in range(k):
        m = traj[labels == j]
        if len(m) == 0:
            continue
        cnt = float(len(m))
        centers[j, :, 0] = seqsum(m[:, :, 0], axis=0) / cnt
        centers[j, :, 1] = seqsum(m[:, :, 1], axis=0) / cnt
        centers[j, :, 2] = np.arctan2(seqsum(np.sin(m[:, :, 2]), axis=0) / cnt,
                                      seqsum(np.cos(m[:, :, 2]), axis=0) / cnt)
    return centers, counts


@dataclass
class KMeansResult:
    centers: np.ndarray  # (K, n, 3)
    labels: np.ndarray
    objective: list      # after every assignment step


def kmeans(traj: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding over flattened positions."""
    traj = np.asarray(traj, dtype=float)
    n = len(traj)
    x = traj[:, :, :2].reshape(n, -1)
    if len(np.unique(x, axis=0)) < k:
        raise ClusteringError(f"need {k} distinct trajectories, have {len(np.unique(x, axis=0))}")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    d2 = _sqdist(x, x[chosen]).min(axis=1)
    while len(chosen) < k:
        p = d2 / d2.sum()
        i = int(rng.choice(n, p=p))
        chosen.append(i)
        d2 = np.minimum(d2, _sqdist(x, x[[i]])[:, 0])
    centers = traj[chosen].copy()
    trace = []
    labels = None
    for _ in range(max_iter):
        new_labels, d = kmeans_assign(x, centers[:, :, :2].reshape(k, -1))
        trace.append(float(seqsum(d[np.arange(n), new_labels])))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centers, counts = kmeans_update(traj, labels, k)
        # empty clusters take the points farthest from their current centers
        if np.any(counts == 0):
            cost = d[np.arange(n), labels].copy()
            for j in np.flatnonzero(counts == 0):
                far = int(np.argmax(cost))
                centers[j] = traj[far]
                cost[far] = -1.0
    return KMeansResult(centers, labels, trace)


def kmeans_anchors(scenes, K: int, category: str, horizon: float = ANCHOR_HORIZON, seed: int = 0) -> AnchorSet:
    traj = future_trajectories(scenes, category, horizon)
    if len(traj) < K:
        raise ClusteringError(f"{category}: {len(traj)} trajectories for K={K}")
    res = kmeans(traj, K, seed)
    full = np.concatenate([np.zeros((K, 1, 3)), res.centers], axis=1)
    return AnchorSet({category: full})


def build_anchor_set(scenes, K: int, seed: int = 0, horizon: float = ANCHOR_HORIZON) -> AnchorSet:
    out = {}
    for i, cat in enumerate(CATEGORIES):
        out.update(kmeans_anchors(scenes, K, cat, horizon, seed + i).trajectories)
    return AnchorSet(out)


# --- matching -----------------------------------------------------------------

def candidate_distances(candidates, y, horizon: float) -> np.ndarray:
    """traj_distance of every candidate (K, n, >=2) to y (n', 4) over ``horizon``."""
    candidates = np.asarray(candidates, dtype=float)
    y = np.asarray(y, dtype=float)
    m = min(steps_for(horizon), candidates.shape[1], len(y))
    return mean_displacement(candidates[:, :m, :2], y[None, :m, :2], y[None, :m, 3] > 0.5, m)


def match_positive(candidates, y, T_zstar: float) -> int:
    """Index of the candidate closest to y over the first T_zstar; lowest index on ties."""
    d = candidate_distances(candidates, y, T_zstar)
    if not np.any(np.isfinite(d)):
        raise MatchingError("ground truth has no valid step within the matching horizon")
    return int(np.argmin(d))


# --- likelihoods --------------------------------------------------------------

_ASYMP = [1.0]
for _k in range(1, 25):
    _ASYMP.append(_ASYMP[-1] * (2 * _k - 1) ** 2 / (_k * 8.0))


def log_i0(kappa):
    """log I0(kappa): 30-term power series below 15, asymptotic expansion above."""
    is_np = not torch.is_tensor(kappa)
    k = nn.tensor(kappa) if is_np else kappa
    small = torch.clamp(k, max=15.0)
    j = torch.arange(30, dtype=k.dtype)
    logt = 2.0 * j * torch.log(small.unsqueeze(-1) / 2.0) - 2.0 * torch.lgamma(j + 1.0)
    series = torch.logsumexp(logt, dim=-1)
    big = torch.clamp(k, min=15.0)
    inv = 1.0 / big
    acc = torch.zeros_like(big)
    for c in reversed(_ASYMP[1:]):
        acc = (acc + c) * inv
    asym = big - 0.5 * torch.log(2.0 * math.pi * big) + torch.log1p(acc)
    out = torch.where(k < 15.0, series, asym)
    return out.numpy() if is_np else out


def laplace_nll(y, loc, b):
    return torch.abs(y - loc) / b + torch.log(2.0 * b)


def von_mises_nll(theta, mu, kappa):
    return -kappa * torch.cos(theta - mu) + math.log(2.0 * math.pi) + log_i0(kappa)


def component_nll(y, params, heading: bool = True, step_mean: bool = False):
    """NLL of y (n, 4) under per-step independent Laplace (x, y) and von Mises (heading).

    ``params`` holds tensors or arrays loc (n, 2), scale (n, 2), mu (n,), kappa (n,)
    (a ComponentParams or dict). Invalid steps are excluded; the result is summed over
    valid steps, or averaged when ``step_mean``.
    """
    get = (lambda k: getattr(params, k)) if not isinstance(params, dict) else params.__getitem__
    loc, b, mu, kappa = (nn.tensor(get(k)) if not torch.is_tensor(get(k)) else get(k)
                         for k in ("loc", "scale", "mu", "kappa"))
    if torch.any(b <= 0) or torch.any(kappa <= 0):
        raise LikelihoodDomainError("scales and concentrations must be positive")
    y = nn.tensor(y)
    n = min(len(y), loc.shape[-2])
    y = y[:n]
    valid = y[:, 3] > 0.5
    per_step = laplace_nll(y[:, :2], loc[:n], b[:n]).sum(-1)
    if heading:
        per_step = per_step + von_mises_nll(y[:, 2], mu[:n], kappa[:n])
    per_step = torch.where(valid, per_step, torch.zeros_like(per_step))
    total = per_step.sum()
    if step_mean:
        total = total / torch.clamp(valid.sum(), min=1)
    return total


def training_loss(scores, zstar: int, y=None, params=None, config: MixtureConfig | None = None,
                  step_mean: bool = False):
    """Cross-entropy of log-scores against one-hot z*, plus the z* component NLL when regressing."""
    scores = scores if torch.is_tensor(scores) else nn.tensor(scores)
    ce = -scores[..., zstar]
    if config is not None and not config.continuous_regression:
        return ce
    if params is None:
        return ce
    return ce + component_nll(y, params, step_mean=step_mean)


def batch_loss(log_scores, zstar, y, valid, loc, b, mu, kappa, regression: bool):
    """Mean over samples of CE + per-step-mean NLL; all tensors batched over N samples.

    Returns (total, classification, regression) scalars.
    """
    ce = -log_scores.gather(1, zstar[:, None])[:, 0]
    cls = ce.mean()
    if not regression:
        return cls, cls, torch.zeros((), dtype=cls.dtype)
    per = laplace_nll(y[..., :2], loc, b).sum(-1) + von_mises_nll(y[..., 2], mu, kappa)
    per = torch.where(valid, per, torch.zeros_like(per))
    reg = (per.sum(-1) / torch.clamp(valid.sum(-1), min=1)).mean()
    return cls + reg, cls, reg


# --- decoders -----------------------------------------------------------------

def _to_params(raw, n, base=None):
    """Map raw outputs (..., n*6) to distribution tensors; ``base`` (..., n, 3) offsets them."""
    r = raw.reshape(*raw.shape[:-1], n, OUT_PER_STEP)
    # cumulative displacements keep per-step errors from turning into velocity jitter
    loc = torch.cumsum(r[..., 0:2] * STEP_SCALE, dim=-2)
    mu = torch.cumsum(r[..., 4] * TURN_SCALE, dim=-1)
    if base is not None:
        loc = loc + base[..., :2]
        mu = mu + base[..., 2]
    b = F.softplus(r[..., 2:4]) + SCALE_FLOOR
    kappa = torch.clamp(F.softplus(r[..., 5]) + SCALE_FLOOR, max=KAPPA_CEIL)
    return loc, b, mu, kappa


def anchor_features(anchor_local):
    """Flattened (x/10, y/10, cos h, sin h) per step for the anchor encoder."""
    a = anchor_local
    f = torch.stack([a[..., 0] / POS_SCALE, a[..., 1] / POS_SCALE, torch.cos(a[..., 2]), torch.sin(a[..., 2])], -1)
    return f.reshape(*f.shape[:-2], -1)


class MixtureHead:
    def __init__(self, store: nn.ParamStore, cfg: MixtureConfig, width: int = 64, prefix: str = "dec"):
        self.store, self.cfg, self.width = store, cfg, width
        n, d = cfg.n_pred, width
        p = prefix
        self.score_prefix = f"{p}.score"
        if cfg.paradigm == "anchor_free":
            store.embedding(f"{p}.queries", cfg.K, d)
            self.score = nn.MLPSpec(f"{p}.score", (2 * d, cfg.score_hidden, 1)).build(store)
            self.reg = nn.MLPSpec(f"{p}.reg", (2 * d, cfg.reg_hidden, n * OUT_PER_STEP)).build(store)
            self.score_params = [f"{p}.queries"]
        else:
            self.score = nn.MLPSpec(f"{p}.score", (d, cfg.score_hidden, cfg.K)).build(store)
            self.score_params = []
            if cfg.continuous_regression:
                self.anchor_enc = nn.MLPSpec(f"{p}.anchor_enc", (4 * n, cfg.anchor_hidden, d)).build(store)
                self.reg = nn.MLPSpec(f"{p}.reg", (2 * d, cfg.reg_hidden, n * OUT_PER_STEP)).build(store)
        self.queries_name = f"{p}.queries"

    def is_score_param(self, name: str) -> bool:
        return name.startswith(self.score_prefix + ".")

    def _fused(self, emb):
        q = self.store[self.queries_name]
        k = q.shape[0]
        e = emb.unsqueeze(-2).expand(*emb.shape[:-1], k, emb.shape[-1])
        return torch.cat([e, q.expand(*emb.shape[:-1], *q.shape)], dim=-1)

    def log_scores(self, emb):
        """Normalized log-probabilities (N, K)."""
        if self.cfg.paradigm == "anchor_free":
            logits = nn.mlp_forward(self.store, self.score, self._fused(emb))[..., 0]
        else:
            logits = nn.mlp_forward(self.store, self.score, emb)
        return torch.log_softmax(logits, dim=-1)

    def regress_all(self, emb):
        """Anchor-free: distribution tensors for all K components, each (N, K, n, ...)."""
        raw = nn.mlp_forward(self.store, self.reg, self._fused(emb))
        return _to_params(raw, self.cfg.n_pred)

    def regress_components(self, emb, comps):
        """Anchor-free: distribution tensors of component ``comps[i]`` for embedding i."""
        q = self.store[self.queries_name][torch.as_tensor(comps)]
        raw = nn.mlp_forward(self.store, self.reg, torch.cat([emb, q], dim=-1))
        return _to_params(raw, self.cfg.n_pred)

    def regress_anchor(self, emb, anchor_local):
        """Anchor-based: refine one anchor (N, n, 3) per embedding (N, D)."""
        a = nn.tensor(anchor_local) if not torch.is_tensor(anchor_local) else anchor_local
        code = nn.mlp_forward(self.store, self.anchor_enc, anchor_features(a))
        raw = nn.mlp_forward(self.store, self.reg, torch.cat([emb, code], dim=-1))
        return _to_params(raw, self.cfg.n_pred, base=a)


def _component_params(loc, b, mu, kappa):
    return ComponentParams(*(t.detach().numpy().copy() for t in (loc, b, mu, kappa)))


def decode_anchor_free(head: MixtureHead, embedding) -> MixturePrediction:
    if head.cfg.paradigm != "anchor_free":
        raise ValueError("head is not anchor-free")
    emb = nn.tensor(embedding) if not torch.is_tensor(embedding) else embedding
    with torch.no_grad():
        s = head.log_scores(emb[None])[0]
        loc, b, mu, kappa = (t[0] for t in head.regress_all(emb[None]))
    params = [_component_params(loc[k], b[k], mu[k], kappa[k]) for k in range(head.cfg.K)]
    traj = np.stack([p.expected() for p in params])
    return MixturePrediction(s.numpy().copy(), traj, np.arange(head.cfg.K), params)


def decode_anchor_based(head: MixtureHead, embedding, anchors: AnchorSet, category: str,
                        selected: int | None = None) -> MixturePrediction:
    cfg = head.cfg
    if cfg.paradigm != "anchor_based":
        raise ValueError("head is not anchor-based")
    if selected is not None and not (0 <= selected < cfg.K):
        raise ValueError(f"selected component {selected} outside [0, {cfg.K})")
    emb = nn.tensor(embedding) if not torch.is_tensor(embedding) else embedding
    a = anchors.future(category, cfg.n_pred)
    with torch.no_grad():
        s = head.log_scores(emb[None])[0].numpy().copy()
    if not cfg.continuous_regression:
        return MixturePrediction(s, a.copy(), np.arange(cfg.K))
    k = int(np.argmax(s)) if selected is None else int(selected)
    with torch.no_grad():
        loc, b, mu, kappa = (t[0] for t in head.regress_anchor(emb[None], nn.tensor(a[k])[None]))
    p = _component_params(loc, b, mu, kappa)
    return MixturePrediction(s, p.expected()[None], np.array([k]), [p])


def decoder_macs(cfg: MixtureConfig, width: int = 64) -> int:
    """Analytic multiply-adds of one decoder call for one agent embedding."""
    n, d, hs, hr = cfg.n_pred, width, cfg.score_hidden, cfg.reg_hidden
    reg = 2 * d * hr + hr * n * OUT_PER_STEP
    if cfg.paradigm == "anchor_free":
        return cfg.K * (2 * d * hs + hs + reg)
    macs = d * hs + hs * cfg.K
    if cfg.continuous_regression:
        macs += 4 * n * cfg.anchor_hidden + cfg.anchor_hidden * d + reg
    return macs


def measure_decoder_macs(cfg: MixtureConfig, width: int = 64, seed: int = 0) -> int:
    """Multiply-adds counted while decoding one embedding with a freshly built head."""
    store = nn.ParamStore(seed)
    head = MixtureHead(store, cfg, width)
    emb = torch.zeros(1, width, dtype=nn.DTYPE)
    with torch.no_grad(), nn.count_macs() as c:
        head.log_scores(emb)
        if cfg.paradigm == "anchor_free":
            head.regress_all(emb)
        elif cfg.continuous_regression:
            head.regress_anchor(emb, torch.zeros(1, cfg.n_pred, 3, dtype=nn.DTYPE))
    return c["macs"]
