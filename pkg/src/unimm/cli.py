"""Command-line entry point: gen-data, anchors, train, rollout, eval, equiv-check, plot, config."""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import nn
from .closedloop import check_tokenization_equivalence
from .mixture import AnchorSet, ClusteringError, build_anchor_set
from .model import BehaviorModel
from .scenario import read_scenario, write_scenario
from .simulator import Rollout, RolloutConfig, rollout
from .synth import WorldConfig, generate_synthetic_dataset
from .trainer import TrainConfig, refit_scorer, train, write_trace

EXIT_OK, EXIT_PROPERTY, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _default_seed() -> int:
    v = os.environ.get("UNIMM_SEED")
    try:
        return int(v) if v is not None else 0
    except ValueError:
        raise UsageError(f"UNIMM_SEED must be an integer, got {v!r}")


def load_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.RunConfig()
    if getattr(args, "config", None):
        try:
            cfg = cfgmod.parse(Path(args.config).read_text())
        except OSError as e:
            raise UsageError(f"cannot read config: {e}")
    if getattr(args, "preset", None):
        cfg = cfgmod.with_preset(cfg, args.preset)
    over = {}
    seed = args.seed if args.seed is not None else (_default_seed() if "UNIMM_SEED" in os.environ else None)
    if seed is not None:
        over["seed"] = seed
    if args.threads is not None:
        over["threads"] = args.threads
    for attr, path in FLAG_PATHS.items():
        v = getattr(args, attr, None)
        if v is not None:
            node = over
            for p in path[:-1]:
                node = node.setdefault(p, {})
            node[path[-1]] = v
    return cfgmod.apply(cfg, over) if over else cfg


FLAG_PATHS = {
    "count": ("data", "count"),
    "k": ("anchors", "k"),
    "K": ("mixture", "K"),
    "paradigm": ("mixture", "paradigm"),
    "t_pred": ("mixture", "T_pred"),
    "t_zstar": ("mixture", "T_zstar"),
    "t_post": ("posterior", "T_post"),
    "threshold": ("posterior", "execution_threshold"),
    "approximate": ("posterior", "approximate"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "max_steps": ("train", "max_steps"),
    "data_mode": ("train", "data_mode"),
    "lr": ("train", "base_lr"),
    "refit_steps": ("train", "refit_steps"),
    "num_rollouts": ("rollout", "num_rollouts"),
    "debug": ("rollout", "debug"),
}


def _scene_files(data_dir) -> list:
    d = Path(data_dir)
    man = d / "manifest.json"
    if man.exists():
        files = [d / f for f in json.loads(man.read_text())["files"]]
    else:
        files = sorted(d.glob("scene_*.json"))
    if not files:
        raise UsageError(f"no scenario files in {data_dir}")
    return files


def load_scenes(data_dir, limit=None) -> list:
    files = _scene_files(data_dir)
    if limit is not None:
        files = files[:limit]
    scenes = []
    for f in files:
        sc = read_scenario(f)
        sc.name = f.stem
        scenes.append(sc)
    return scenes


def _mkdir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create {p}: {e}")
    if not os.access(p, os.W_OK):
        raise UsageError(f"{p} is not writable")
    return p


# --- commands -----------------------------------------------------------------

def cmd_gen_data(args, cfg) -> int:
    if cfg.data.count < 1:
        raise UsageError("--count must be >= 1")
    out = _mkdir(args.out)
    world = WorldConfig.from_dict(cfg.world)
    scenes = generate_synthetic_dataset(world, cfg.data.count, cfg.seed)
    files = []
    for sc in scenes:
        write_scenario(sc, out / f"{sc.name}.json")
        files.append(f"{sc.name}.json")
    man = {"count": cfg.data.count, "seed": cfg.seed, "world": world.to_dict(), "files": files}
    (out / "manifest.json").write_text(json.dumps(man, indent=1) + "\n")
    print(f"wrote {len(files)} scenarios to {out}")
    return EXIT_OK


def cmd_anchors(args, cfg) -> int:
    scenes = load_scenes(args.data)
    try:
        anchors = build_anchor_set(scenes, cfg.anchors.k, cfg.seed, cfg.anchors.horizon)
    except ClusteringError as e:
        raise UsageError(str(e))
    out = Path(args.out)
    _mkdir(out.parent)
    out.write_text(anchors.to_json())
    print(f"wrote {anchors.K} anchors per category to {out}")
    return EXIT_OK


def _train_config(cfg) -> TrainConfig:
    t = cfg.train
    post = cfg.posterior if t.data_mode == "closed_loop" else None
    return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, seed=cfg.seed, data_mode=t.data_mode,
                       mixture=cfg.mixture, posterior=post, encoder=cfg.encoder, base_lr=t.base_lr,
                       weight_decay=t.weight_decay, max_steps=t.max_steps)


def _read_anchors(path):
    try:
        return AnchorSet.from_json(Path(path).read_text())
    except OSError as e:
        raise UsageError(f"cannot read anchors: {e}")


def cmd_train(args, cfg) -> int:
    scenes = load_scenes(args.data)
    anchors = None
    if cfg.mixture.paradigm == "anchor_based" or cfg.posterior.approximate:
        if not args.anchors:
            raise UsageError("--anchors is required for anchor-based models")
        anchors = _read_anchors(args.anchors)
        if anchors.K != cfg.mixture.K:
            raise UsageError(f"anchor file has K={anchors.K}, model K={cfg.mixture.K}")
    tc = _train_config(cfg)
    res = train(scenes, tc, anchors if cfg.mixture.paradigm == "anchor_based" else None)
    model, trace = res.model, res.trace
    if cfg.train.refit_steps > 0:
        ref = refit_scorer(model, scenes, tc, cfg.train.refit_T_zstar, cfg.train.refit_steps)
        model = ref.model
        trace = trace + [{**r, "step": r["step"] + len(res.trace)} for r in ref.trace]
    out = Path(args.out)
    _mkdir(out.parent)
    model.save(out)
    write_trace(str(out) + ".trace.csv", trace)
    Path(str(out) + ".config.yaml").write_text(cfg.dump())
    print(f"trained {len(trace)} steps; final loss {trace[-1]['loss']:.4f}" if trace else "no steps run")
    return EXIT_OK


def _load_model(path) -> BehaviorModel:
    try:
        return BehaviorModel.load(path)
    except (OSError, KeyError, ValueError) as e:
        raise UsageError(f"cannot load model {path}: {e}")


def cmd_rollout(args, cfg) -> int:
    scenes = load_scenes(args.data, args.limit)
    model = _load_model(args.model)
    out = _mkdir(args.out)
    rc = RolloutConfig(cfg.rollout.num_rollouts, cfg.rollout.duration, seed=cfg.seed, debug=cfg.rollout.debug)
    worst = 0.0
    for sc in scenes:
        ro = rollout(sc, model, rc)
        (out / f"{sc.name}.rollout.json").write_text(ro.to_json())
        if ro.debug_max_rel is not None:
            worst = max(worst, ro.debug_max_rel)
    print(f"wrote rollouts for {len(scenes)} scenarios to {out}")
    if cfg.rollout.debug:
        print(f"max relative incremental/full embedding difference {worst:.3e}")
        if worst > 1e-9:
            return EXIT_PROPERTY
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    from .metrics import evaluate
    scenes = load_scenes(args.data, args.limit)
    rdir = Path(args.rollouts)
    rollouts = []
    for sc in scenes:
        f = rdir / f"{sc.name}.rollout.json"
        if not f.exists():
            raise UsageError(f"missing rollout file {f}")
        rollouts.append(Rollout.from_json(f.read_text()))
    rep = evaluate(scenes, rollouts, cfg.metrics.weights)
    out = Path(args.out)
    _mkdir(out.parent)
    out.write_text(rep.to_json())
    print(f"meta {rep.meta:.4f} " + " ".join(f"{g} {v:.4f}" for g, v in rep.group_scores.items()))
    return EXIT_OK


def cmd_equiv_check(args, cfg) -> int:
    if args.model:
        model = _load_model(args.model)
        if not model.cfg.discrete:
            raise UsageError("equivalence check needs a discrete model (anchor-based, no regression)")
        anchors = model.anchors
    elif args.anchors:
        anchors = _read_anchors(args.anchors)
    else:
        raise UsageError("pass --model or --anchors")
    scenes = load_scenes(args.data, args.limit)
    bad = 0
    tokens = {}
    for sc in scenes:
        rep = check_tokenization_equivalence(sc, anchors, 0.5, math.inf)
        tokens[sc.name] = json.loads(rep.tokens.to_json())
        if not rep.equal:
            bad += 1
            for aid, ok, step in zip(rep.tokens.agent_ids, rep.per_agent, rep.first_divergence):
                if not ok:
                    print(f"{sc.name}: agent {aid} diverges at step {step}")
    if args.out:
        out = Path(args.out)
        _mkdir(out.parent)
        out.write_text(json.dumps(tokens, sort_keys=True) + "\n")
    print(f"{len(scenes) - bad}/{len(scenes)} scenarios identical")
    return EXIT_OK if bad == 0 else EXIT_PROPERTY


def cmd_plot(args, cfg) -> int:
    from . import plotting
    out = _mkdir(args.out)
    if not args.reports and not args.traces:
        raise UsageError("pass --reports and/or --traces")
    if args.reports:
        reps = {}
        for p in args.reports:
            try:
                reps[Path(p).stem] = json.loads(Path(p).read_text())
            except (OSError, ValueError) as e:
                raise UsageError(f"cannot read report {p}: {e}")
        plotting.reports_bar_chart(reps, out / "scores.svg")
        plotting.reports_csv(reps, out / "scores.csv")
    if args.traces:
        tr = {}
        for p in args.traces:
            try:
                tr[Path(p).name.split(".")[0]] = plotting.read_trace(p)
            except (OSError, KeyError, ValueError) as e:
                raise UsageError(f"cannot read trace {p}: {e}")
        plotting.trace_line_chart(tr, out / "loss.svg")
    print(f"wrote plots to {out}")
    return EXIT_OK


def cmd_config(args, cfg) -> int:
    if not args.dump_defaults:
        raise UsageError("config: pass --dump-defaults")
    sys.stdout.write(cfg.dump())
    return EXIT_OK


# --- parser -------------------------------------------------------------------

def _bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes"):
        return True
    if v.lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {v!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--seed", type=int, help="seed (default: $UNIMM_SEED or 0)")
    common.add_argument("--threads", type=int, help="compute threads; 1 gives bit-identical reruns")

    p = argparse.ArgumentParser(prog="unimm", description="mixture-model multi-agent simulation lab")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate synthetic scenarios")
    g.add_argument("--count", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    a = sub.add_parser("anchors", parents=[common], help="k-means anchors per category")
    a.add_argument("--data", required=True)
    a.add_argument("--k", type=int)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_anchors)

    t = sub.add_parser("train", parents=[common], help="train a behavior model")
    t.add_argument("--data", required=True)
    t.add_argument("--anchors")
    t.add_argument("--preset", choices=sorted(cfgmod.PRESETS))
    t.add_argument("--out", required=True, help="checkpoint path prefix")
    t.add_argument("--K", type=int)
    t.add_argument("--paradigm", choices=["anchor_free", "anchor_based"])
    t.add_argument("--t-pred", type=float)
    t.add_argument("--t-zstar", type=float)
    t.add_argument("--t-post", type=float)
    t.add_argument("--threshold", type=float)
    t.add_argument("--approximate", type=_bool)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--data-mode", choices=["open_loop", "closed_loop"])
    t.add_argument("--lr", type=float)
    t.add_argument("--refit-steps", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("rollout", parents=[common], help="simulate scenarios with a trained model")
    r.add_argument("--data", required=True)
    r.add_argument("--model", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--num-rollouts", type=int)
    r.add_argument("--limit", type=int)
    r.add_argument("--debug", action="store_const", const=True)
    r.set_defaults(func=cmd_rollout)

    e = sub.add_parser("eval", parents=[common], help="realism report for rollouts")
    e.add_argument("--data", required=True)
    e.add_argument("--rollouts", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--limit", type=int)
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("equiv-check", parents=[common], help="rolling tokenization vs closed-loop generation")
    q.add_argument("--data", required=True)
    q.add_argument("--model")
    q.add_argument("--anchors")
    q.add_argument("--limit", type=int)
    q.add_argument("--out", help="write token sequences as JSON")
    q.set_defaults(func=cmd_equiv_check)

    pl = sub.add_parser("plot", parents=[common], help="SVG charts and CSV from reports and traces")
    pl.add_argument("--reports", nargs="*")
    pl.add_argument("--traces", nargs="*")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)

    c = sub.add_parser("config", parents=[common], help="print the run configuration")
    c.add_argument("--dump-defaults", action="store_true")
    c.add_argument("--preset", choices=sorted(cfgmod.PRESETS))
    c.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args)
        nn.set_threads(cfg.threads)
        np.seterr(over="ignore")
        return args.func(args, cfg)
    except (UsageError, cfgmod.ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
