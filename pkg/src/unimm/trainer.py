"""Open-loop and closed-loop training loops, and the frozen-backbone scorer refit."""
from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import nn
from .closedloop import PosteriorConfig, generate_closed_loop_batch, _plans_needed
from .encoder import EncoderConfig, batch_tokens, column_for_step
from .geometry import mean_displacement, states_to_local
from .mixture import AnchorSet, MixtureConfig, batch_loss
from .model import BehaviorModel
from .scenario import start_steps

DATA_MODES = ("open_loop", "closed_loop")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    data_mode: str = "open_loop"
    mixture: MixtureConfig = field(default_factory=MixtureConfig)
    posterior: PosteriorConfig | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    base_lr: float = 2e-3
    weight_decay: float = 1e-4
    max_steps: int | None = None

    def __post_init__(self):
        if self.data_mode not in DATA_MODES:
            raise ValueError(f"data_mode must be one of {DATA_MODES}")
        if self.data_mode == "closed_loop" and self.posterior is None:
            raise ValueError("closed_loop training needs a PosteriorConfig")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs >= 0 and batch_size >= 1 required")

    def total_steps(self, n_scenes: int) -> int:
        per_epoch = math.ceil(n_scenes / self.batch_size)
        total = self.epochs * per_epoch
        return total if self.max_steps is None else min(total, self.max_steps)


@dataclass
class TrainResult:
    model: BehaviorModel
    trace: list  # dicts: step, loss, regression, classification, lr


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "regression", "classification"])
        for r in trace:
            w.writerow([r["step"], repr(r["loss"]), repr(r["regression"]), repr(r["classification"])])


def batches(n: int, batch_size: int, epochs: int, seed: int):
    """Scene index batches: a fresh permutation per epoch from one seeded stream."""
    rng = np.random.default_rng([seed, 7])
    for _ in range(epochs):
        perm = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield perm[i: i + batch_size]


@dataclass
class SampleBatch:
    rows: np.ndarray        # (N, 4) scene, agent, column, start index
    y: np.ndarray           # (N, n_pred, 4) ground truth in the input frame
    categories: list


def collect_samples(scenes, inputs, n_pred: int) -> SampleBatch:
    """One sample per (agent, start) whose input state is valid and target has a valid step."""
    rows, ys, cats = [], [], []
    for b, (sc, cl) in enumerate(zip(scenes, inputs)):
        gt = sc.states_array()
        for a, tr in enumerate(sc.tracks):
            for m, h in enumerate(start_steps(sc)):
                if cl[a, h, 3] <= 0.5:
                    continue
                tgt = np.zeros((n_pred, 4))
                seg = gt[a, h + 1: h + 1 + n_pred]
                tgt[: len(seg)] = seg
                if not np.any(tgt[:, 3] > 0.5):
                    continue
                rows.append((b, a, column_for_step(h), m))
                ys.append(states_to_local(tgt, cl[a, h, :3]))
                cats.append(tr.category)
    return SampleBatch(np.array(rows, dtype=int).reshape(-1, 4), np.array(ys).reshape(-1, n_pred, 4), cats)


def _argmin_rows(cands_xy: np.ndarray, y: np.ndarray, n: int) -> np.ndarray:
    """cands (N, K, n', 2) vs y (N, n'', 4): argmin over K of mean displacement over n steps."""
    d = mean_displacement(cands_xy[:, :, :n], y[:, None, :n, :2], y[:, None, :n, 3] > 0.5, n)
    return np.argmin(d, axis=1), np.isfinite(d).any(axis=1)


def match_batch(model: BehaviorModel, samples: SampleBatch, emb_s, n_z: int):
    """Positive component per sample and a mask of samples that could be matched."""
    cfg = model.cfg
    n = len(samples.rows)
    if cfg.paradigm == "anchor_free":
        traj = model.component_trajectories(emb_s)
        return _argmin_rows(traj[..., :2], samples.y, n_z)
    z = np.zeros(n, dtype=int)
    ok = np.zeros(n, dtype=bool)
    cats = np.array(samples.categories)
    for c in np.unique(cats):
        idx = np.flatnonzero(cats == c)
        a = model.anchors.future(c, n_z)[None, :, :, :2]
        for i0 in range(0, len(idx), 64):
            sl = idx[i0: i0 + 64]
            z[sl], ok[sl] = _argmin_rows(np.broadcast_to(a, (len(sl),) + a.shape[1:]), samples.y[sl], n_z)
    return z, ok


def step_loss(model: BehaviorModel, scenes, inputs, n_z: int, score_only: bool = False):
    """Loss on one batch of scenes whose input states are ``inputs``.

    Returns (total, classification, regression, samples).
    """
    cfg = model.cfg
    samples = collect_samples(scenes, inputs, cfg.n_pred)
    if len(samples.rows) == 0:
        raise TrainingError("batch has no training samples")
    tokens = batch_tokens(scenes, inputs)
    if score_only:
        with torch.no_grad():
            emb = model.encoder.encode(tokens)
    else:
        emb = model.encoder.encode(tokens)
    r = samples.rows
    emb_s = emb[r[:, 0], r[:, 1], r[:, 2]]
    zstar, ok = match_batch(model, samples, emb_s.detach(), n_z)
    keep = np.flatnonzero(ok)
    if len(keep) == 0:
        raise TrainingError("no sample has ground truth inside the matching horizon")
    emb_s = emb_s[keep]
    y = nn.tensor(samples.y[keep])
    valid = y[..., 3] > 0.5
    z_t = torch.as_tensor(zstar[keep])
    log_scores = model.head.log_scores(emb_s)
    regression = cfg.continuous_regression and not score_only
    loc = b = mu = kappa = None
    if regression:
        if cfg.paradigm == "anchor_free":
            loc, b, mu, kappa = model.head.regress_components(emb_s, z_t)
        else:
            a = model.anchor_local([samples.categories[i] for i in keep], zstar[keep])
            loc, b, mu, kappa = model.head.regress_anchor(emb_s, nn.tensor(a))
    total, cls, reg = batch_loss(log_scores, z_t, y, valid, loc, b, mu, kappa, regression)
    if not torch.isfinite(total):
        _diagnose(log_scores, z_t, y, valid, loc, b, mu, kappa, regression, samples, keep, scenes)
    return total, cls, reg, samples


def _diagnose(log_scores, z_t, y, valid, loc, b, mu, kappa, regression, samples, keep, scenes):
    with torch.no_grad():
        for i in range(len(keep)):
            args = [t[i: i + 1] if t is not None else None for t in (log_scores, z_t, y, valid, loc, b, mu, kappa)]
            val, _, _ = batch_loss(*args, regression)
            if not torch.isfinite(val):
                sb, sa, _, sm = samples.rows[keep[i]]
                sc = scenes[sb]
                raise TrainingError(f"non-finite loss for sample scene={sc.name or sb} "
                                    f"agent={sc.tracks[sa].agent_id} t={0.5 * sm:.1f}s")
    raise TrainingError("non-finite loss (no single sample isolated)")


class _ClosedLoopInputs:
    """Closed-loop inputs per batch; cached when generation ignores the parameters."""

    def __init__(self, model, posterior: PosteriorConfig, anchors):
        self.model, self.posterior, self.anchors = model, posterior, anchors
        self.static = not _plans_needed(model, posterior)
        self.cache = {}

    def __call__(self, scenes, ids):
        if self.static:
            missing = [i for i in ids if i not in self.cache]
            if missing:
                res = generate_closed_loop_batch([scenes[i] for i in missing], self.model, self.anchors,
                                                 self.posterior)
                for i, r in zip(missing, res):
                    self.cache[i] = r.states
            return [self.cache[i] for i in ids]
        res = generate_closed_loop_batch([scenes[i] for i in ids], self.model, self.anchors, self.posterior)
        return [r.states for r in res]


def _run(model: BehaviorModel, dataset, cfg: TrainConfig, n_z: int, score_only: bool, log=None) -> list:
    if not dataset:
        raise ValueError("dataset is empty")
    total = cfg.total_steps(len(dataset))
    opt = nn.OptimizerState(weight_decay=cfg.weight_decay, base_lr=cfg.base_lr)
    cl_inputs = None
    if cfg.data_mode == "closed_loop":
        cl_inputs = _ClosedLoopInputs(model, cfg.posterior, model.anchors)
    trace = []
    for step, ids in enumerate(batches(len(dataset), cfg.batch_size, cfg.epochs, cfg.seed)):
        if step >= total:
            break
        scenes = [dataset[i] for i in ids]
        inputs = cl_inputs(dataset, list(ids)) if cl_inputs else [sc.states_array() for sc in scenes]
        model.store.zero_grad()
        loss, cls, reg, _ = step_loss(model, scenes, inputs, n_z, score_only)
        nn.backward(loss)
        lr = nn.cosine_lr(step, total, cfg.base_lr)
        nn.adamw_step(model.store, opt, lr)
        row = {"step": step, "loss": loss.item(), "regression": reg.item(), "classification": cls.item(), "lr": lr}
        trace.append(row)
        if log is not None:
            log(row)
    return trace


def train(dataset, cfg: TrainConfig, anchors: AnchorSet | None = None, model: BehaviorModel | None = None,
          log=None) -> TrainResult:
    if model is None:
        model = BehaviorModel(cfg.mixture, anchors, cfg.encoder, seed=cfg.seed)
    trace = _run(model, dataset, cfg, model.cfg.n_zstar, score_only=False, log=log)
    return TrainResult(model, trace)


def clone_model(model: BehaviorModel) -> BehaviorModel:
    m = BehaviorModel(copy.deepcopy(model.cfg), model.anchors, copy.deepcopy(model.encoder.cfg), model.seed)
    m.store.load_arrays(model.store.arrays())
    return m


def refit_scorer(model: BehaviorModel, dataset, cfg: TrainConfig, T_zstar: float = 0.5,
                 steps: int | None = None, log=None) -> TrainResult:
    """Copy of ``model`` whose score head alone is retrained with positives matched over T_zstar."""
    out = clone_model(model)
    out.store.freeze_all_except(out.head.is_score_param)
    n_z = MixtureConfig(**{**out.cfg.to_dict(), "T_zstar": T_zstar}).n_zstar
    rcfg = copy.copy(cfg)
    if steps is not None:
        # enough epochs to honor the step count, then cut at it
        rcfg.epochs = math.ceil(steps / math.ceil(len(dataset) / cfg.batch_size)) if dataset else 0
        rcfg.max_steps = steps
    trace = [] if rcfg.total_steps(len(dataset)) == 0 else _run(out, dataset, rcfg, n_z, True, log)
    out.store.unfreeze()
    return TrainResult(out, trace)
