"""Query-centric scene encoder with factorized temporal / agent-map / agent-agent attention.

Every token lives in its own local frame; pairwise relations enter only through
relative-pose encodings added to the attention keys, so embeddings are invariant to
a global rigid motion of the scene.

Agent tokens are tracklets of one update interval: tracklet ``j`` covers steps
``5j .. 5j+5`` and is expressed in the frame of its last state. With a 1 s history,
tracklet 1 ends at the current step, so the embedding for start time ``m * tau`` lives in column ``1 + m``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import nn
from .geometry import wrap_angle
from .scenario import CATEGORIES, Scenario

TRACKLET_STEPS = 5
MAP_SPACING = 2.5
MAP_POINTS = 3  # two intervals, about 5 m
AGENT_FEAT = 6 * 5 + len(CATEGORIES)
MAP_FEAT = MAP_POINTS * 2 + MAP_POINTS + 1
REL_FEAT = 4


class EncoderStateError(RuntimeError):
    pass


def column_for_step(step: int) -> int:
    """Tracklet column whose frame is the state at ``step``."""
    return step // TRACKLET_STEPS - 1


# --- tokens -------------------------------------------------------------------

@dataclass
class SceneTokens:
    """Padded token arrays for a batch of B scenes."""

    agent_feat: np.ndarray   # (B, A, J, AGENT_FEAT)
    agent_pose: np.ndarray   # (B, A, J, 3)
    agent_valid: np.ndarray  # (B, A, J) bool
    map_feat: np.ndarray     # (B, M, MAP_FEAT)
    map_pose: np.ndarray     # (B, M, 3)
    map_valid: np.ndarray    # (B, M) bool

    @property
    def shape(self):
        return self.agent_feat.shape[:3]


def _resample_polyline(points: np.ndarray, spacing: float = MAP_SPACING) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(1, int(np.ceil(s[-1] / spacing - 1e-9)))
    q = np.linspace(0.0, s[-1], n + 1)
    return np.stack([np.interp(q, s, points[:, 0]), np.interp(q, s, points[:, 1])], axis=1)


def map_tokens(polylines) -> tuple:
    """(features (M, MAP_FEAT), poses (M, 3)) for ~5 m pieces of every polyline."""
    feats, poses = [], []
    for pl in polylines:
        pts = _resample_polyline(pl.points)
        for i0 in range(0, len(pts) - 1, MAP_POINTS - 1):
            piece = pts[i0: i0 + MAP_POINTS]
            start, end = piece[0], piece[-1]
            h = float(np.arctan2(end[1] - start[1], end[0] - start[0]))
            c, s = np.cos(h), np.sin(h)
            d = piece - start
            loc = np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]], axis=1)
            f = np.zeros(MAP_FEAT)
            f[: 2 * len(piece)] = loc.ravel()
            f[2 * MAP_POINTS: 2 * MAP_POINTS + len(piece)] = 1.0
            f[-1] = pl.half_width
            feats.append(f)
            poses.append((start[0], start[1], h))
    if not feats:
        return np.zeros((0, MAP_FEAT)), np.zeros((0, 3))
    return np.array(feats), np.array(poses)


def agent_tokens(states: np.ndarray, categories) -> tuple:
    """Tracklet tokens for states (A, T, 4). Returns features, poses, validity."""
    states = np.asarray(states, dtype=float)
    a_n, t_n = states.shape[:2]
    j_n = (t_n - 1) // TRACKLET_STEPS
    idx = np.arange(j_n)[:, None] * TRACKLET_STEPS + np.arange(TRACKLET_STEPS + 1)[None, :]
    win = states[:, idx]  # (A, J, 6, 4)
    frame = win[:, :, -1, :3]
    valid = win[:, :, -1, 3] > 0.5
    c, s = np.cos(frame[..., 2:3]), np.sin(frame[..., 2:3])
    dx = win[..., 0] - frame[..., 0:1]
    dy = win[..., 1] - frame[..., 1:2]
    dh = win[..., 2] - frame[..., 2:3]
    wv = win[..., 3] > 0.5
    f = np.stack([c * dx + s * dy, -s * dx + c * dy, np.cos(dh), np.sin(dh), wv.astype(float)], axis=-1)
    f = np.where(wv[..., None], f, 0.0).reshape(a_n, j_n, -1)
    onehot = np.zeros((a_n, j_n, len(CATEGORIES)))
    for i, cat in enumerate(categories):
        onehot[i, :, CATEGORIES.index(cat)] = 1.0
    feat = np.concatenate([f, onehot], axis=-1)
    pose = np.where(valid[..., None], frame, 0.0)
    return feat, pose, valid


def build_tokens(sc: Scenario, states: np.ndarray | None = None) -> SceneTokens:
    return batch_tokens([sc], None if states is None else [states])


def batch_tokens(scenes, states_list=None, num_agents: int | None = None) -> SceneTokens:
    """Pad several scenes (optionally with substituted state arrays) into one batch."""
    if states_list is None:
        states_list = [sc.states_array() for sc in scenes]
    maps = [map_tokens(sc.polylines) for sc in scenes]
    ags = [agent_tokens(st, [t.category for t in sc.tracks]) for sc, st in zip(scenes, states_list)]
    b = len(scenes)
    a_max = max([len(sc.tracks) for sc in scenes] + [num_agents or 1])
    m_max = max([len(m[0]) for m in maps] + [1])
    j_n = (scenes[0].num_steps - 1) // TRACKLET_STEPS
    af = np.zeros((b, a_max, j_n, AGENT_FEAT))
    ap = np.zeros((b, a_max, j_n, 3))
    av = np.zeros((b, a_max, j_n), dtype=bool)
    mf = np.zeros((b, m_max, MAP_FEAT))
    mp = np.zeros((b, m_max, 3))
    mv = np.zeros((b, m_max), dtype=bool)
    for i, ((f, p, v), (g, q)) in enumerate(zip(ags, maps)):
        af[i, : len(f)], ap[i, : len(f)], av[i, : len(f)] = f, p, v
        mf[i, : len(g)], mp[i, : len(g)] = g, q
        mv[i, : len(g)] = True
    return SceneTokens(af, ap, av, mf, mp, mv)


def repeat_map(tokens: SceneTokens, agent_feat, agent_pose, agent_valid) -> SceneTokens:
    return SceneTokens(agent_feat, agent_pose, agent_valid, tokens.map_feat, tokens.map_pose, tokens.map_valid)


def rel_features(q_pose: np.ndarray, k_pose: np.ndarray, scale: float) -> np.ndarray:
    """Pose of k in the frame of q as (dx/scale, dy/scale, dheading, log(1 + dist))."""
    dx = k_pose[..., 0] - q_pose[..., 0]
    dy = k_pose[..., 1] - q_pose[..., 1]
    c, s = np.cos(q_pose[..., 2]), np.sin(q_pose[..., 2])
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    dh = wrap_angle(k_pose[..., 2] - q_pose[..., 2])
    dist = np.sqrt(lx * lx + ly * ly)
    return np.stack([lx / scale, ly / scale, dh, np.log1p(dist)], axis=-1)


# --- model --------------------------------------------------------------------

@dataclass
class EncoderConfig:
    width: int = 64
    heads: int = 4
    blocks: int = 2
    ffn_mult: int = 2
    rel_hidden: int = 64
    rel_scale: float = 20.0

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class EncoderCache:
    """Per-rollout state for column-by-column encoding."""

    map_state: torch.Tensor | None = None
    temporal_inputs: list = field(default_factory=list)  # per block: list of (B, A, D) columns
    agent_feat: list = field(default_factory=list)       # per column: (B, A, F) inputs seen
    agent_pose: list = field(default_factory=list)
    agent_valid: list = field(default_factory=list)

    @property
    def columns(self) -> int:
        return len(self.agent_feat)


class Encoder:
    def __init__(self, store: nn.ParamStore, cfg: EncoderConfig | None = None, prefix: str = "enc"):
        self.store = store
        self.cfg = cfg = cfg or EncoderConfig()
        d = cfg.width
        p = prefix
        self.map_in = nn.MLPSpec(f"{p}.map_in", (MAP_FEAT, d, d)).build(store)
        self.agent_in = nn.MLPSpec(f"{p}.agent_in", (AGENT_FEAT, d, d)).build(store)
        # relative-pose embeddings, one per attention type, shared across layers
        self.rel = {k: nn.MLPSpec(f"{p}.rel_{k}", (REL_FEAT, cfg.rel_hidden, d)).build(store)
                    for k in ("mm", "t", "am", "aa")}
        self.map_layer = self._layer(f"{p}.map0", cross=False)
        self.layers = []
        for b in range(cfg.blocks):
            self.layers.append({k: self._layer(f"{p}.b{b}.{k}", cross=(k == "am")) for k in ("t", "am", "aa")})

    def _layer(self, name, cross):
        d = self.cfg.width
        self.store.norm(f"{name}.ln1", d)
        self.store.norm(f"{name}.ln2", d)
        if cross:
            self.store.norm(f"{name}.lnk", d)
        return {"name": name,
                "attn": nn.AttentionSpec(f"{name}.attn", d, self.cfg.heads).build(self.store),
                "ffn": nn.MLPSpec(f"{name}.ffn", (d, d * self.cfg.ffn_mult, d)).build(self.store)}

    # -- pieces --

    def _rel(self, kind, q_pose, k_pose):
        f = nn.tensor(rel_features(q_pose, k_pose, self.cfg.rel_scale))
        return nn.mlp_forward(self.store, self.rel[kind], f)

    def _ffn(self, layer, x):
        return x + nn.mlp_forward(self.store, layer["ffn"], nn.layer_norm(self.store, layer["name"] + ".ln2", x))

    def _self_attn(self, layer, xq, xk, rel, mask):
        """Residual self-attention where keys come from the same stream (xk ⊇ xq)."""
        s, name = self.store, layer["name"]
        q = nn.layer_norm(s, name + ".ln1", xq)
        k = nn.layer_norm(s, name + ".ln1", xk)
        out = nn.attention_forward(s, layer["attn"], q, k, k, rel, mask)
        return self._ffn(layer, xq + out)

    def _map_attn(self, layer, x, mem, rel, mem_valid):
        """Agent tokens (B, ..., D) attend to themselves plus all map tokens (B, M, D).

        Same arithmetic as ``nn.attention_forward`` with keys [self, map...], but the
        map keys and values are shared across queries instead of being materialized.
        """
        s, name, spec = self.store, layer["name"], layer["attn"]
        h = spec.heads
        q_in = nn.layer_norm(s, name + ".ln1", x)
        m_in = nn.layer_norm(s, name + ".lnk", mem)
        lead = x.shape[:-1]
        b_n, d = lead[0], x.shape[-1]
        dh = d // h
        m_n = mem.shape[1]

        def heads(t):
            return t.reshape(b_n, -1, h, dh)

        q = heads(nn.linear(s, f"{spec.name}.q", q_in))
        ks = heads(nn.linear(s, f"{spec.name}.k", q_in))
        vs = heads(nn.linear(s, f"{spec.name}.v", q_in))
        km = nn.linear(s, f"{spec.name}.k", m_in).reshape(b_n, m_n, h, dh)
        vm = nn.linear(s, f"{spec.name}.v", m_in).reshape(b_n, m_n, h, dh)
        r = rel.reshape(b_n, q.shape[1], 1 + m_n, h, dh)
        scores = torch.einsum("blhd,blmhd->blmh", q, r)
        s_self = (q * ks).sum(-1).unsqueeze(2)
        s_map = torch.einsum("blhd,bmhd->blmh", q, km)
        scores = (scores + torch.cat([s_self, s_map], dim=2)) / (dh ** 0.5)
        mask = torch.cat([torch.ones(b_n, 1, dtype=torch.bool), torch.as_tensor(mem_valid)], dim=1)
        scores = scores.masked_fill(~mask[:, None, :, None], float("-inf"))
        w = torch.softmax(scores, dim=2)
        o = w[:, :, 0, :, None] * vs + torch.einsum("blmh,bmhd->blhd", w[:, :, 1:], vm)
        o = nn.linear(s, f"{spec.name}.o", o.reshape(*lead, d))
        return self._ffn(layer, x + o)

    def _map_rel(self, tokens, q_pose):
        """Relative encodings of [self] + map tokens for agent queries q_pose (B, A, J, 3)."""
        mp = tokens.map_pose[:, None, None, :, :]
        kp = np.concatenate([q_pose[..., None, :], np.broadcast_to(mp, q_pose.shape[:-1] + mp.shape[-2:])], axis=-2)
        return self._rel("am", q_pose[..., None, :], kp)

    def encode_map(self, tokens: SceneTokens) -> torch.Tensor:
        m = nn.mlp_forward(self.store, self.map_in, nn.tensor(tokens.map_feat))
        rel = self._rel("mm", tokens.map_pose[:, :, None, :], tokens.map_pose[:, None, :, :])
        mv = tokens.map_valid
        mask = mv[:, None, :] | np.eye(mv.shape[1], dtype=bool)[None]
        return self._self_attn(self.map_layer, m, m, rel, torch.as_tensor(mask))

    # -- full encode --

    def encode(self, tokens: SceneTokens) -> torch.Tensor:
        """Embeddings (B, A, J, D) for every tracklet column."""
        b, a, j = tokens.shape
        mem = self.encode_map(tokens)
        x = nn.mlp_forward(self.store, self.agent_in, nn.tensor(tokens.agent_feat))
        pose, valid = tokens.agent_pose, tokens.agent_valid
        eye_j = np.eye(j, dtype=bool)
        t_mask = torch.as_tensor((valid[:, :, None, :] & np.tril(np.ones((j, j), dtype=bool))) | eye_j)
        t_rel = self._rel("t", pose[:, :, :, None, :], pose[:, :, None, :, :])
        am_rel = self._map_rel(tokens, pose)
        pt = pose.transpose(0, 2, 1, 3)  # (B, J, A, 3)
        vt = valid.transpose(0, 2, 1)
        aa_mask = torch.as_tensor(vt[:, :, None, :] | np.eye(a, dtype=bool))
        aa_rel = self._rel("aa", pt[:, :, :, None, :], pt[:, :, None, :, :])
        for layer in self.layers:
            x = self._self_attn(layer["t"], x, x, t_rel, t_mask)
            x = self._map_attn(layer["am"], x, mem, am_rel, tokens.map_valid)
            xt = x.transpose(1, 2)
            xt = self._self_attn(layer["aa"], xt, xt, aa_rel, aa_mask)
            x = xt.transpose(1, 2)
        return x

    # -- incremental encode --

    def encode_column(self, tokens: SceneTokens, j: int, cache: EncoderCache) -> torch.Tensor:
        """Embedding (B, A, D) of column ``j`` reusing cached columns ``< j``."""
        b, a, _ = tokens.shape
        if j != cache.columns:
            raise EncoderStateError(f"cache holds {cache.columns} columns, asked for column {j}")
        for jj in range(j):
            if not (np.array_equal(cache.agent_feat[jj], tokens.agent_feat[:, :, jj])
                    and np.array_equal(cache.agent_pose[jj], tokens.agent_pose[:, :, jj])
                    and np.array_equal(cache.agent_valid[jj], tokens.agent_valid[:, :, jj])):
                raise EncoderStateError(f"scene tokens differ from cached column {jj}")
        if cache.map_state is None:
            cache.map_state = self.encode_map(tokens)
            cache.temporal_inputs = [[] for _ in self.layers]
        mem = cache.map_state
        if mem.shape[0] != b:
            raise EncoderStateError("cache batch size does not match tokens")
        feat = tokens.agent_feat[:, :, j]
        pose = tokens.agent_pose[:, :, j]
        valid = tokens.agent_valid[:, :, j]
        hist_pose = tokens.agent_pose[:, :, : j + 1]
        hist_valid = tokens.agent_valid[:, :, : j + 1]
        x = nn.mlp_forward(self.store, self.agent_in, nn.tensor(feat))  # (B, A, D)
        t_rel = self._rel("t", pose[:, :, None, None, :], hist_pose[:, :, None, :, :])  # (B,A,1,j+1,D)
        t_mask = hist_valid.copy()
        t_mask[:, :, j] = True
        t_mask = torch.as_tensor(t_mask[:, :, None, :])
        am_rel = self._map_rel(tokens, pose[:, :, None, :])  # (B, A, 1, 1+M, D)
        aa_rel = self._rel("aa", pose[:, :, None, :], pose[:, None, :, :])
        aa_mask = torch.as_tensor(valid[:, None, :] | np.eye(a, dtype=bool))
        with torch.no_grad():
            new_inputs = []
            for li, layer in enumerate(self.layers):
                xs = x.detach().clone()
                new_inputs.append(xs)
                keys = torch.stack(cache.temporal_inputs[li] + [xs], dim=2)  # (B, A, j+1, D)
                x = self._self_attn(layer["t"], x.unsqueeze(2), keys, t_rel, t_mask).squeeze(2)
                x = self._map_attn(layer["am"], x.unsqueeze(2), mem, am_rel, tokens.map_valid).squeeze(2)
                x = self._self_attn(layer["aa"], x, x, aa_rel, aa_mask)
        for li, xs in enumerate(new_inputs):
            cache.temporal_inputs[li].append(xs)
        cache.agent_feat.append(feat.copy())
        cache.agent_pose.append(pose.copy())
        cache.agent_valid.append(valid.copy())
        return x


def incremental_encode(encoder: Encoder, cache: EncoderCache, tokens: SceneTokens, upto: int) -> torch.Tensor:
    """Advance ``cache`` through column ``upto``; returns embeddings (B, A, n_new, D)."""
    out = []
    for j in range(cache.columns, upto + 1):
        out.append(encoder.encode_column(tokens, j, cache))
    if not out:
        raise EncoderStateError(f"cache already holds column {upto}")
    return torch.stack(out, dim=2)
