"""Command line entry point (``fstmatch``)."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from .. import __version__
from ..fstmetrics import StabilityInput, delta_stability, q_curve
from ..fstnet import FstModel, detection_scorer, fst_labels, load_fst, save_fst, total_loss, total_loss_and_grad
from ..game import make_grid_game
from ..nets import grad_check, grad_check_params, jitter_biases, load_networks, logit_scorer, save_model
from ..numerics import SeededRng
from ..shapley import random_game, verify_axioms
from ..synthworld import export_samples, gen_world, import_samples
from . import pipelines
from .config import ConfigError, ExperimentConfig, load_config, save_config
from .external import ExternalGame, parse_scorer
from .report import ExperimentReport, render

log = logging.getLogger("fstmatch")

EXPERIMENTS = {"hyp1": pipelines.run_hypothesis1, "hyp2": pipelines.run_hypothesis2,
               "hyp3": pipelines.run_hypothesis3, "fst": pipelines.run_fst_comparison,
               "instability": pipelines.run_instability}


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="JSON config (see `fstmatch config default`)")
    p.add_argument("--seed", type=int, help="run a single seed")
    p.add_argument("--seeds", help="comma separated seed list, e.g. 0,1,2")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory (default: runs)")
    p.add_argument("--grid", type=int, metavar="L", help="grid side length")
    p.add_argument("--samples", type=int, metavar="T", help="Shapley permutations per map")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seeds:
        cfg.seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.grid is not None:
        cfg.world.L = args.grid
        cfg.world.face_region = cfg.world.boundary_region = None
        cfg.world.__post_init__()
    if args.samples is not None:
        cfg.shapley.samples = args.samples
    cfg.world.validate()
    return cfg


def _first_seed(cfg: ExperimentConfig) -> ExperimentConfig:
    return cfg.for_seed(cfg.seeds[0])


# --- subcommands ---------------------------------------------------------------------

def cmd_config_default(args) -> int:
    path = args.out if args.out.suffix == ".json" else args.out / "config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_config(resolve_config(args), path)
    print(path)
    return 0


def cmd_world_gen(args) -> int:
    cfg = _first_seed(resolve_config(args))
    world = gen_world(cfg.world)
    for split in ("train", "test"):
        export_samples(world.samples(split), args.out / split, cfg.world)
    print(f"wrote {len(world.samples('train'))} train and {len(world.samples('test'))} test samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _first_seed(resolve_config(args))
    args.out.mkdir(parents=True, exist_ok=True)
    if args.what == "fst":
        model = pipelines.fst_model(cfg)
        print(save_fst(model, args.out / "fst.npz"))
        return 0
    models = pipelines.seed_models(cfg)
    roles = ("detection",) if args.what == "baseline" else ("source", "target")
    for role in roles:
        print(save_model(getattr(models, role), args.out / f"{role}.npz"))
    return 0


def _load_samples(args, cfg):
    if args.data:
        samples = import_samples(args.data)
    else:
        world = gen_world(cfg.world)
        samples = world.fakes(args.split) if args.fakes else world.samples(args.split)
    return samples[args.first:args.first + args.count]


def _label(sample, role: str) -> int:
    return {"detection": sample.label, "source": sample.source_id, "target": sample.target_id}[role]


def cmd_attribute(args) -> int:
    cfg = _first_seed(resolve_config(args))
    samples = _load_samples(args, cfg)
    L, T, seed = cfg.world.L, cfg.shapley.samples, cfg.seeds[0]
    if args.scorer:
        with parse_scorer(args.scorer, args.timeout, args.concurrent) as ext:
            files = pipelines.attribute(
                samples, lambda s: ExternalGame(ext, s.sample_id, s.grids, _label(s, args.role)), T, seed, args.out)
    else:
        if args.additive:
            def score_for(s):
                return lambda batch: batch.reshape(batch.shape[0], -1).sum(axis=1)
        elif args.checkpoint:
            nets, manifest = load_networks(args.checkpoint)
            if manifest.get("kind") == "fst":
                model = load_fst(args.checkpoint)

                def score_for(s):
                    return detection_scorer(model, s.label)
            else:
                net = next(iter(nets.values()))

                def score_for(s):
                    return logit_scorer(net, _label(s, args.role))
        else:
            models = pipelines.seed_models(cfg)

            def score_for(s):
                return models.scorer(args.role, s)
        files = pipelines.attribute(samples, lambda s: make_grid_game(s, score_for(s), L), T, seed, args.out)
    print(f"wrote {len(files)} files to {args.out}")
    return 0


def read_phi(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = sorted((int(r["grid_index"]), float(r["phi"])) for r in csv.DictReader(fh))
    return np.array([v for _, v in rows])


def cmd_metrics(args) -> int:
    if args.which == "q":
        d, s, t = (read_phi(p) for p in (args.detection, args.source, args.target))
        curve = q_curve(d, s, t)
        for k, q in curve.items():
            print(f"k={k}\tQ={q!r}")
        print(f"Q_mean={float(np.mean(list(curve.values())))!r}")
    elif args.which == "delta":
        raw = read_phi(args.raw)
        comp = {Path(p).stem: read_phi(p) for p in args.compressed}
        print(f"delta={delta_stability(StabilityInput(raw, comp))!r}")
    else:
        return _run_experiment(args, "instability")
    return 0


def cmd_verify(args) -> int:
    if args.which == "axioms":
        gen = SeededRng(args.seed or 0, 3001).generator(0)
        games = [random_game(int(gen.integers(3, 11)), gen) for _ in range(args.games)]
        rep = verify_axioms(games)
        print(json.dumps(rep.as_dict(), indent=2))
        return 0 if rep.ok else 1
    cfg = _first_seed(resolve_config(args))
    world = gen_world(cfg.world)
    batch = world.samples("train")[:16]
    X = np.stack([s.flat for s in batch])
    models = pipelines.seed_models(cfg)
    err_d = grad_check(models.detection, X, [s.label for s in batch])
    fm = FstModel.init(X.shape[1], cfg.world.n_identities, 8, 8, 16, 16, seed=cfg.seeds[0])
    jitter_biases(fm.networks().values(), seed=cfg.seeds[0])
    labels = fst_labels(batch)
    w = cfg.fst.weights
    _, grads, _ = total_loss_and_grad(fm, X, labels, w)
    err_f = grad_check_params(fm.params, lambda: total_loss(fm, X, labels, w), grads)
    print(f"detection encoder max relative error {err_d:.3g}")
    print(f"fst total loss max relative error {err_f:.3g}")
    return 0 if max(err_d, err_f) < 1e-4 else 1


def _run_experiment(args, name: str) -> int:
    cfg = resolve_config(args)
    t0 = time.time()
    run_dir = args.out / "models"
    report = EXPERIMENTS[name](cfg, run_dir=run_dir)
    files = report.write(args.out)
    log_path = args.out / "run_log.json"
    entries = json.loads(log_path.read_text()) if log_path.exists() else []
    entries.append({"experiment": name, "config_digest": cfg.digest(), "seeds": cfg.seeds,
                    "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(t0)),
                    "seconds": round(time.time() - t0, 2), "tool_version": __version__,
                    "python": platform.python_version(), "numpy": np.__version__})
    log_path.write_text(json.dumps(entries, indent=2) + "\n")
    print(render(report), end="")
    for f in files:
        print(f)
    return 0 if all(report.checks.values()) else 2


def cmd_exp(args) -> int:
    return _run_experiment(args, args.which)


def cmd_report(args) -> int:
    print(render(ExperimentReport.load(args.path)), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="fstmatch", description="Shapley attribution experiments on a synthetic "
                                 "face-swap world.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    cfgp = sub.add_parser("config", help="config file helpers")
    cfgs = cfgp.add_subparsers(dest="action", required=True)
    cfgs.add_parser("default", parents=[common], help="write the full default config").set_defaults(
        func=cmd_config_default)

    world = sub.add_parser("world", help="synthetic world")
    ws = world.add_subparsers(dest="action", required=True)
    ws.add_parser("gen", parents=[common], help="export train/test samples as CSV").set_defaults(func=cmd_world_gen)

    tr = sub.add_parser("train", parents=[common], help="train and save checkpoints")
    tr.add_argument("what", choices=("baseline", "encoders", "fst"))
    tr.set_defaults(func=cmd_train)

    at = sub.add_parser("attribute", parents=[common], help="per-image Shapley maps as CSV + JSON")
    src = at.add_mutually_exclusive_group()
    src.add_argument("--checkpoint", type=Path, help="saved network (.npz/.csv)")
    src.add_argument("--scorer", help="external scorer: stdio:<command> or tcp:<host:port>")
    src.add_argument("--additive", action="store_true", help="score = sum of kept features (test scorer)")
    at.add_argument("--role", choices=("detection", "source", "target"), default="detection")
    at.add_argument("--data", type=Path, help="directory written by `world gen` (default: generate)")
    at.add_argument("--split", choices=("train", "test"), default="test")
    at.add_argument("--fakes", action="store_true", help="fakes only")
    at.add_argument("--first", type=int, default=0)
    at.add_argument("--count", type=int, default=4)
    at.add_argument("--timeout", type=float, default=30.0)
    at.add_argument("--concurrent", action="store_true", help="external scorer is concurrency safe")
    at.set_defaults(func=cmd_attribute)

    me = sub.add_parser("metrics", help="Q, delta and instability")
    ms = me.add_subparsers(dest="which", required=True)
    q = ms.add_parser("q", parents=[common], help="Q curve from three attribution CSVs")
    q.add_argument("--detection", required=True)
    q.add_argument("--source", required=True)
    q.add_argument("--target", required=True)
    d = ms.add_parser("delta", parents=[common], help="stability of a raw map against compressed maps")
    d.add_argument("--raw", required=True)
    d.add_argument("--compressed", nargs="+", required=True)
    ms.add_parser("instability", parents=[common], help="instability against T on the detection encoder")
    me.set_defaults(func=cmd_metrics)

    ve = sub.add_parser("verify", help="self checks")
    vs = ve.add_subparsers(dest="which", required=True)
    ax = vs.add_parser("axioms", parents=[common], help="Shapley axioms on random games")
    ax.add_argument("--games", type=int, default=20)
    vs.add_parser("grads", parents=[common], help="finite-difference gradient checks")
    ve.set_defaults(func=cmd_verify)

    ex = sub.add_parser("exp", parents=[common], help="run an experiment and write its report")
    ex.add_argument("which", choices=tuple(EXPERIMENTS))
    ex.set_defaults(func=cmd_exp)

    rp = sub.add_parser("report", help="reports")
    rs = rp.add_subparsers(dest="action", required=True)
    rr = rs.add_parser("render", parents=[common], help="markdown summary of a report JSON")
    rr.add_argument("path", type=Path)
    rr.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 64


if __name__ == "__main__":
    sys.exit(main())
