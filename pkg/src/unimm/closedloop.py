"""Closed-loop sample generation with posterior policies, and rolling-matching tokenization.

Generation walks the update grid h = 0, tau, ... For each agent the posterior policy
picks the component whose trajectory best matches ground truth over T_post and
executes its first tau when the plan stays within the execution threshold; otherwise
ground truth is kept. All agents commit together before the next step.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderCache, agent_tokens, batch_tokens, column_for_step
from .geometry import mean_displacement, states_to_global, steps_for
from .mixture import AnchorSet, anchors_in_gt_frame
from .scenario import TAU, OpenLoopSample, Scenario, check_horizon, start_steps


class SelectionError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


@dataclass
class PosteriorConfig:
    T_post: float = TAU
    execution_threshold: float = 1.0
    approximate: bool = False

    def __post_init__(self):
        r = self.T_post / TAU
        if self.T_post < TAU - 1e-9 or abs(r - round(r)) > 1e-9:
            raise ValueError(f"T_post={self.T_post} must be a multiple of tau >= {TAU}")
        if not self.execution_threshold >= 0:
            raise ValueError("execution_threshold must be >= 0")

    @property
    def n_post(self) -> int:
        return steps_for(self.T_post)

    def to_dict(self):
        return dict(self.__dict__)


def segment_distances(cands: np.ndarray, gt: np.ndarray, n_steps: int) -> np.ndarray:
    """Mean displacement of each candidate (K, n, >=2) to gt (n', 4) over the shared prefix."""
    m = min(n_steps, cands.shape[1], len(gt))
    return mean_displacement(cands[:, :m, :2], gt[None, :m, :2], gt[None, :m, 3] > 0.5, m)


def posterior_component(candidates, gt_segment, T_post: float) -> int:
    """argmin over global-frame candidates of d over T_post; lowest index on ties."""
    d = segment_distances(np.asarray(candidates, float), np.asarray(gt_segment, float), steps_for(T_post))
    if not np.any(np.isfinite(d)):
        raise SelectionError("no valid ground truth inside the posterior window")
    return int(np.argmin(d))


def _execute(track: np.ndarray, h: int, plan: np.ndarray, n_tau: int) -> None:
    end = min(h + 1 + n_tau, len(track))
    track[h + 1: end, :3] = plan[: end - h - 1, :3]
    track[h + 1: end, 3] = 1.0


@dataclass
class ClosedLoopResult:
    states: np.ndarray       # (A, T, 4)
    provenance: np.ndarray   # (A, n_starts) True where a plan segment was executed
    components: np.ndarray   # (A, n_starts) posterior component or -1
    distances: np.ndarray    # (A, n_starts) plan error over T_post (nan if not evaluated)


def _plans_needed(model, cfg: PosteriorConfig) -> bool:
    return model is not None and not cfg.approximate and model.needs_network_plans


def generate_closed_loop_batch(scenes, model, anchors: AnchorSet | None, cfg: PosteriorConfig,
                               tau: float = TAU) -> list:
    """Closed-loop state sequences for several scenes, sharing one encoder batch."""
    n_tau = steps_for(tau)
    if abs(tau - TAU) > 1e-12:
        raise PreconditionError(f"tokens are built on tau={TAU}, got {tau}")
    if model is not None and model.cfg.paradigm == "anchor_free" and cfg.n_post > model.cfg.n_pred:
        raise PreconditionError("anchor-free posterior window exceeds the prediction horizon")
    if anchors is None and model is not None:
        anchors = model.anchors
    use_net = _plans_needed(model, cfg)
    if not use_net and (anchors is None or (model is not None and model.cfg.paradigm == "anchor_free")):
        raise PreconditionError("approximate posterior needs anchors and an anchor-based model")
    gts = [sc.states_array() for sc in scenes]
    cls = [g.copy() for g in gts]
    starts = start_steps(scenes[0], tau)
    a_max = max([len(sc.tracks) for sc in scenes] + [1])
    out = [ClosedLoopResult(c, np.zeros((len(c), len(starts)), bool), np.full((len(c), len(starts)), -1),
                            np.full((len(c), len(starts)), np.nan)) for c in cls]
    cache = EncoderCache() if use_net else None
    base = batch_tokens(scenes, cls, a_max) if use_net else None
    for m, h in enumerate(starts):
        emb = None
        if use_net:
            tok = _refresh_agent_tokens(base, scenes, cls, a_max)
            j = column_for_step(h)
            while cache.columns < j:
                model.encoder.encode_column(tok, cache.columns, cache)
            emb = model.encoder.encode_column(tok, j, cache)  # (B, A, D)
        free_trajs = None
        if use_net and model.cfg.paradigm == "anchor_free":
            bsz, asz, d_w = emb.shape
            free_trajs = model.component_trajectories(emb.reshape(bsz * asz, d_w)).reshape(
                bsz, asz, model.cfg.K, model.cfg.n_pred, 3)
        picks = []  # (b, a, pose, gt segment, candidates, z, d)
        for b, sc in enumerate(scenes):
            gt, cl = gts[b], cls[b]
            for a, tr in enumerate(sc.tracks):
                if cl[a, h, 3] <= 0.5:
                    continue
                gt_seg = gt[a, h + 1: h + 1 + cfg.n_post]
                if not np.any(gt_seg[:, 3] > 0.5):
                    continue
                pose = cl[a, h, :3]
                if free_trajs is not None:
                    cands = states_to_global(free_trajs[b, a], pose)
                else:
                    cands = anchors_in_gt_frame(anchors, tr.category, pose, cfg.n_post)
                d = segment_distances(cands, gt_seg, cfg.n_post)
                z = int(np.argmin(d))
                picks.append((b, a, pose, gt_seg, cands, z, d))
        refined = None
        if use_net and model.cfg.paradigm == "anchor_based" and picks:
            idx_b = [p[0] for p in picks]
            idx_a = [p[1] for p in picks]
            refined = model.realize(emb[idx_b, idx_a], [scenes[b].tracks[a].category for b, a in zip(idx_b, idx_a)],
                                    [p[5] for p in picks])
        commits = []
        for i, (b, a, pose, gt_seg, cands, z, d) in enumerate(picks):
            if refined is not None:
                plan = states_to_global(refined[i], pose)
                d_plan = float(segment_distances(plan[None], gt_seg, cfg.n_post)[0])
            else:
                plan, d_plan = cands[z], float(d[z])
            out[b].components[a, m] = z
            out[b].distances[a, m] = d_plan
            if d_plan < cfg.execution_threshold:
                commits.append((b, a, plan))
                out[b].provenance[a, m] = True
        for b, a, plan in commits:
            _execute(cls[b][a], h, plan, n_tau)
    return out


def _refresh_agent_tokens(base, scenes, states_list, a_max):
    af, ap, av = base.agent_feat.copy(), base.agent_pose.copy(), base.agent_valid.copy()
    for b, (sc, st) in enumerate(zip(scenes, states_list)):
        f, p, v = agent_tokens(st, [t.category for t in sc.tracks])
        af[b, : len(f)], ap[b, : len(f)], av[b, : len(f)] = f, p, v
    return type(base)(af, ap, av, base.map_feat, base.map_pose, base.map_valid)


def generate_closed_loop_scenario(sc: Scenario, model, anchors: AnchorSet | None, cfg: PosteriorConfig,
                                  tau: float = TAU) -> ClosedLoopResult:
    return generate_closed_loop_batch([sc], model, anchors, cfg, tau)[0]


# --- training samples ---------------------------------------------------------

@dataclass
class ClosedLoopSample(OpenLoopSample):
    """Input read from the closed-loop scenario, target from ground truth."""

    provenance: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))


def make_training_batch(gt: Scenario, result: ClosedLoopResult, T_pred: float, tau: float = TAU) -> list:
    n_pred = check_horizon(T_pred, tau)
    cl_sc = gt.with_states(result.states, name=gt.name)
    out = []
    for ai, tr in enumerate(gt.tracks):
        for m, s in enumerate(start_steps(gt, tau)):
            target = tr.states[s + 1: s + 1 + n_pred]
            if not np.any(target[:, 3] > 0.5):
                continue
            out.append(ClosedLoopSample(cl_sc, ai, tr.agent_id, round((s - gt.current_step) * gt.dt, 6), s,
                                        target.copy(), result.provenance[ai, :m].copy()))
    return out


# --- rolling-matching tokenization --------------------------------------------

@dataclass
class TokenSequence:
    agent_ids: list
    tokens: np.ndarray      # (A, n_starts), -1 where ground truth was kept
    states: np.ndarray      # (A, T, 4) reconstruction
    distances: np.ndarray   # (A, n_starts)

    def to_json(self) -> str:
        return json.dumps({str(i): [int(t) for t in row] for i, row in zip(self.agent_ids, self.tokens)},
                          sort_keys=False) + "\n"


def tokenize_rolling(sc: Scenario, anchors: AnchorSet, tau: float = TAU) -> TokenSequence:
    """Per agent: move anchors to the reconstructed pose, take the nearest over tau, append it."""
    n_tau = steps_for(tau)
    gt = sc.states_array()
    rec = gt.copy()
    starts = start_steps(sc, tau)
    tokens = np.full((len(sc.tracks), len(starts)), -1)
    dists = np.full((len(sc.tracks), len(starts)), np.nan)
    for a, tr in enumerate(sc.tracks):
        for m, h in enumerate(starts):
            if rec[a, h, 3] <= 0.5:
                continue
            seg = gt[a, h + 1: h + 1 + n_tau]
            if not np.any(seg[:, 3] > 0.5):
                continue
            cands = anchors_in_gt_frame(anchors, tr.category, rec[a, h, :3], n_tau)
            d = segment_distances(cands, seg, n_tau)
            k = int(np.argmin(d))
            tokens[a, m] = k
            dists[a, m] = d[k]
            _execute(rec[a], h, cands[k], n_tau)
    return TokenSequence([t.agent_id for t in sc.tracks], tokens, rec, dists)


@dataclass
class EquivalenceReport:
    equal: bool
    per_agent: list
    first_divergence: list  # step index or None per agent
    tokens: TokenSequence | None = None

    def to_dict(self):
        return {"equal": self.equal, "per_agent": self.per_agent, "first_divergence": self.first_divergence}


def check_tokenization_equivalence(sc: Scenario, anchors: AnchorSet, tau: float = TAU,
                                   threshold: float = math.inf, generator_tau: float | None = None
                                   ) -> EquivalenceReport:
    """Compare rolling tokenization with approximate closed-loop generation state by state."""
    if generator_tau is not None and abs(generator_tau - tau) > 1e-12:
        raise PreconditionError(f"tokenizer tau {tau} differs from generator tau {generator_tau}")
    tok = tokenize_rolling(sc, anchors, tau)
    gen = generate_closed_loop_scenario(sc, None, anchors, PosteriorConfig(tau, threshold, True), tau)
    per_agent, first = [], []
    for a in range(len(sc.tracks)):
        x, y = tok.states[a], gen.states[a]
        same = np.array([np.array_equal(x[t], y[t]) for t in range(len(x))])
        per_agent.append(bool(same.all()))
        first.append(None if same.all() else int(np.argmin(same)))
    return EquivalenceReport(all(per_agent), per_agent, first, tok)


def closed_loop_scene(gt: Scenario, result: ClosedLoopResult) -> Scenario:
    return gt.with_states(result.states, name=gt.name)

