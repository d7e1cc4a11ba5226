"""Autoregressive multi-agent rollout: sample a component per agent, execute its first tau."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .closedloop import _refresh_agent_tokens
from .encoder import EncoderCache, EncoderStateError, batch_tokens, column_for_step
from .geometry import states_to_global, steps_for
from .scenario import TAU, Scenario, start_steps


@dataclass
class RolloutConfig:
    num_rollouts: int = 32
    duration: float = 8.0
    tau: float = TAU
    seed: int = 0
    debug: bool = False

    def __post_init__(self):
        r = self.duration / self.tau
        if self.duration <= 0 or abs(r - round(r)) > 1e-9:
            raise ValueError("duration must be a positive multiple of tau")
        if self.num_rollouts < 1:
            raise ValueError("num_rollouts must be >= 1")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class Rollout:
    scenario_name: str
    agent_ids: list
    states: np.ndarray    # (R, A, T, 4)
    choices: np.ndarray   # (R, A, n_steps), -1 for agents not simulated
    simulated: np.ndarray  # (A,) agents valid at the start
    config: dict = field(default_factory=dict)
    debug_max_rel: float | None = None

    def to_json(self) -> str:
        doc = {"scenario": self.scenario_name, "config": self.config, "agent_ids": self.agent_ids,
               "simulated": self.simulated.tolist(), "choices": self.choices.tolist(),
               "states": self.states.tolist()}
        return json.dumps(doc, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Rollout":
        d = json.loads(text)
        return cls(d["scenario"], d["agent_ids"], np.array(d["states"], dtype=float),
                   np.array(d["choices"], dtype=int), np.array(d["simulated"], dtype=bool), d["config"])


def sample_component(log_scores: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw from exp(log_scores) (N, K) with uniforms u (N,)."""
    cdf = np.cumsum(np.exp(log_scores), axis=-1)
    k = np.array([np.searchsorted(c, ui * c[-1], side="right") for c, ui in zip(cdf, u)], dtype=int)
    return np.minimum(k, log_scores.shape[-1] - 1)


def initial_states(sc: Scenario, num_rollouts: int) -> tuple:
    """History copied from ground truth, future unknown; agents invalid at the start removed."""
    gt = sc.states_array()
    c = sc.current_step
    active = gt[:, c, 3] > 0.5
    st = np.zeros((num_rollouts,) + gt.shape)
    st[:, :, : c + 1] = gt[:, : c + 1]
    st[:, ~active] = 0.0
    return st, active


def step(model, sc: Scenario, states: np.ndarray, tokens_base, cache: EncoderCache, rngs, h: int,
         active: np.ndarray, tau: float = TAU):
    """Advance every rollout by one update interval from step ``h`` (in place).

    Returns (components (R, A), embeddings (R, A, D)).
    """
    n_tau = steps_for(tau)
    r_n, a_n = states.shape[:2]
    j = column_for_step(h)
    if cache.columns > j:
        raise EncoderStateError(f"cache is ahead of step {h}")
    tok = _refresh_agent_tokens(tokens_base, [sc] * r_n, list(states), a_n)
    while cache.columns < j:
        model.encoder.encode_column(tok, cache.columns, cache)
    emb = model.encoder.encode_column(tok, j, cache)
    u = np.stack([rng.random(a_n) for rng in rngs])  # drawn for every agent to keep streams aligned
    rr, aa = np.nonzero(np.broadcast_to(active, (r_n, a_n)))
    comps = np.full((r_n, a_n), -1)
    if len(rr):
        e = emb[rr, aa]
        ls = model.log_scores(e)
        k = sample_component(ls, u[rr, aa])
        comps[rr, aa] = k
        local = model.realize(e, [sc.tracks[a].category for a in aa], k)
        for i, (r, a) in enumerate(zip(rr, aa)):
            plan = states_to_global(local[i, :n_tau], states[r, a, h, :3])
            end = min(h + 1 + n_tau, states.shape[2])
            states[r, a, h + 1: end, :3] = plan[: end - h - 1]
            states[r, a, h + 1: end, 3] = 1.0
    return comps, emb


def rollout(sc: Scenario, model, cfg: RolloutConfig | None = None) -> Rollout:
    cfg = cfg or RolloutConfig()
    r_n = cfg.num_rollouts
    states, active = initial_states(sc, r_n)
    n_steps = int(round(cfg.duration / cfg.tau))
    starts = start_steps(sc, cfg.tau)[:n_steps]
    rngs = [np.random.default_rng([cfg.seed, r]) for r in range(r_n)]
    base = batch_tokens([sc] * r_n, list(states), len(sc.tracks))
    cache = EncoderCache()
    choices = np.full((r_n, len(sc.tracks), n_steps), -1)
    embs = []
    for m, h in enumerate(starts):
        comps, emb = step(model, sc, states, base, cache, rngs, h, active, cfg.tau)
        choices[:, :, m] = comps
        embs.append(emb)
    dbg = None
    if cfg.debug and embs:
        with torch.no_grad():
            full = model.encoder.encode(_refresh_agent_tokens(base, [sc] * r_n, list(states), len(sc.tracks)))
        dbg = 0.0
        for m, h in enumerate(starts):
            ref = full[:, :, column_for_step(h)][:, active]
            diff = (embs[m][:, active] - ref).abs().max().item() if active.any() else 0.0
            dbg = max(dbg, diff / max(ref.abs().max().item(), 1e-300) if active.any() else 0.0)
    return Rollout(sc.name, [t.agent_id for t in sc.tracks], states, choices, active, cfg.to_dict(), dbg)
