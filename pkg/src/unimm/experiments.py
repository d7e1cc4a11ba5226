"""Desk-scale paired training comparisons: train two variants per seed, roll out, score."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

from . import config as cfgmod
from .metrics import evaluate
from .mixture import build_anchor_set
from .simulator import RolloutConfig, rollout
from .synth import WorldConfig, generate_synthetic_dataset
from .trainer import refit_scorer, train

EVAL_SEED_OFFSET = 1000


@dataclass
class VariantResult:
    label: str
    seed: int
    report: dict
    final_loss: float
    seconds: float


@dataclass
class Comparison:
    variants: list = field(default_factory=list)

    def score(self, label: str, seed: int, key: str) -> float:
        for v in self.variants:
            if v.label == label and v.seed == seed:
                if key == "meta":
                    return v.report["meta"]
                return v.report["group_scores"][key]
        raise KeyError((label, seed))


def desk_config(base: cfgmod.RunConfig, seed: int, overrides: dict) -> cfgmod.RunConfig:
    return cfgmod.apply(base, {**overrides, "seed": seed})


def run_variant(label: str, cfg: cfgmod.RunConfig, train_scenes, eval_scenes, anchor_cache: dict,
                log=None) -> VariantResult:
    from .cli import _train_config
    t0 = time.perf_counter()
    anchors = None
    if cfg.mixture.paradigm == "anchor_based":
        key = (cfg.mixture.K, cfg.seed)
        if key not in anchor_cache:
            anchor_cache[key] = build_anchor_set(train_scenes, cfg.mixture.K, cfg.seed, cfg.anchors.horizon)
        anchors = anchor_cache[key]
    tc = _train_config(cfg)
    res = train(train_scenes, tc, anchors)
    model, trace = res.model, res.trace
    if cfg.train.refit_steps > 0:
        ref = refit_scorer(model, train_scenes, tc, cfg.train.refit_T_zstar, cfg.train.refit_steps)
        model = ref.model
    rc = RolloutConfig(cfg.rollout.num_rollouts, cfg.rollout.duration, seed=cfg.seed)
    ros = [rollout(sc, model, rc) for sc in eval_scenes]
    rep = evaluate(eval_scenes, ros, cfg.metrics.weights).to_dict()
    out = VariantResult(label, cfg.seed, rep, trace[-1]["loss"] if trace else float("nan"),
                        time.perf_counter() - t0)
    if log:
        log(f"{label} seed={cfg.seed} meta={rep['meta']:.4f} groups="
            + " ".join(f"{g}:{s:.4f}" for g, s in rep["group_scores"].items())
            + f" loss={out.final_loss:.3f} {out.seconds:.0f}s")
    return out


def compare(variants: dict, seeds=(1, 2, 3), base: cfgmod.RunConfig | None = None,
            train_count: int = 64, eval_count: int = 16, log=None) -> Comparison:
    """``variants`` maps label -> nested overrides. Data and model seeds both follow the run seed."""
    base = base or cfgmod.RunConfig()
    world = WorldConfig.from_dict(base.world)
    comp = Comparison()
    for seed in seeds:
        train_scenes = generate_synthetic_dataset(world, train_count, seed)
        eval_scenes = generate_synthetic_dataset(world, eval_count, EVAL_SEED_OFFSET + seed)
        cache = {}
        for label, over in variants.items():
            cfg = desk_config(base, seed, over)
            comp.variants.append(run_variant(label, cfg, train_scenes, eval_scenes, cache, log))
    return comp


def wins(comp: Comparison, better: str, worse: str, key: str, seeds=(1, 2, 3), strict: bool = True) -> int:
    n = 0
    for s in seeds:
        a, b = comp.score(better, s, key), comp.score(worse, s, key)
        n += (a > b) if strict else (a >= b)
    return n
