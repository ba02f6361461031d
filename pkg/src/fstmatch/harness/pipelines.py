"""Experiment pipelines on the synthetic world.

Each ``run_*`` function loops over ``config.seeds``; per seed it generates
the world, trains (or loads) the models it needs and computes attribution
maps with permutation-sampled Shapley values.  Trained models are cached in
memory and, when ``run_dir`` is given, as checkpoints under
``run_dir/<config digest>/``.
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from ..fstmetrics import (StabilityInput, delta_stability, kept_counts, overlap_fraction, q_curve,
                          relevance_mask, top_fraction_mask)
from ..fstnet import FstModel, detection_scorer, forward_fst, fst_labels, load_fst, save_fst, train_fst
from ..game import EvaluationError, make_grid_game
from ..nets import DenseStack, encoder, load_model, logit_scorer, save_model, train
from ..numerics import SeededRng, cosine_similarity, rank_auc
from ..shapley import AttributionMap, instability, sampled_shapley
from ..synthworld import World, build_paired_unpaired, compress, gen_world
from .config import ExperimentConfig
from .report import ExperimentReport, summarize

log = logging.getLogger(__name__)

LEVELS = ("c23", "c40")
ROLES = ("detection", "source", "target")

# signature of an attribution backend: (role, scorer, sample, stream) -> phi
PhiFn = Callable[[str, Callable, object, int], np.ndarray]


@dataclass
class SeedModels:
    world: World
    detection: DenseStack
    source: DenseStack
    target: DenseStack

    def scorer(self, role: str, sample):
        if role == "detection":
            return logit_scorer(self.detection, sample.label)
        if role == "source":
            return logit_scorer(self.source, sample.source_id)
        return logit_scorer(self.target, sample.target_id)


_MEMO: dict[tuple, object] = {}


def clear_cache() -> None:
    _MEMO.clear()


def _matrix(samples) -> np.ndarray:
    return np.stack([s.flat for s in samples])


def _cached(key: tuple, path: Path | None, load, build, save):
    if key in _MEMO:
        return _MEMO[key]
    if path is not None and path.exists():
        obj = load(path)
    else:
        obj = build()
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            save(obj, path)
    _MEMO[key] = obj
    return obj


def _model_dir(cfg: ExperimentConfig, run_dir) -> Path | None:
    return None if run_dir is None else Path(run_dir) / cfg.digest()


def train_detector(samples, cfg: ExperimentConfig, stream: int = 1) -> DenseStack:
    X = _matrix(samples)
    y = [s.label for s in samples]
    init = encoder(X.shape[1], 2, cfg.encoder_hidden, cfg.world.seed, stream)
    return train(init, X, y, cfg.train)[0]


def train_identity_encoder(samples, cfg: ExperimentConfig, role: str) -> DenseStack:
    X = _matrix(samples)
    y = [s.source_id if role == "source" else s.target_id for s in samples]
    init = encoder(X.shape[1], cfg.world.n_identities, cfg.encoder_hidden, cfg.world.seed,
                   2 if role == "source" else 3)
    return train(init, X, y, cfg.train)[0]


def seed_models(cfg: ExperimentConfig, run_dir=None) -> SeedModels:
    """World plus v_d, v_s, v_t for a single-seed config (see ``for_seed``)."""
    digest = cfg.digest()
    world = _cached(("world", digest), None, None, lambda: gen_world(cfg.world), None)
    mdir = _model_dir(cfg, run_dir)
    train_set = world.samples("train")
    nets = {}
    for role in ROLES:
        build = (lambda: train_detector(train_set, cfg)) if role == "detection" else \
            (lambda r=role: train_identity_encoder(train_set, cfg, r))
        nets[role] = _cached((role, digest), None if mdir is None else mdir / f"{role}.npz",
                             load_model, build, save_model)
    return SeedModels(world, nets["detection"], nets["source"], nets["target"])


def fst_model(cfg: ExperimentConfig, run_dir=None) -> FstModel:
    world = seed_models(cfg, run_dir).world
    mdir = _model_dir(cfg, run_dir)

    def build():
        samples = world.samples("train")
        X = _matrix(samples)
        f = cfg.fst
        init = FstModel.init(X.shape[1], cfg.world.n_identities, f.c_s, f.c_t, f.hidden, f.head_hidden,
                             cfg.world.seed)
        return train_fst(init, X, fst_labels(samples), f.train, f.weights, f.fakes_only)[0]

    return _cached(("fst", cfg.digest()), None if mdir is None else mdir / "fst.npz", load_fst, build, save_fst)


def pick(samples, k: int, seed: int, stream: int = 8001) -> list:
    """Deterministic subset of ``k`` samples, kept in their original order."""
    if k >= len(samples):
        return list(samples)
    idx = SeededRng(seed, stream).generator(0).choice(len(samples), size=k, replace=False)
    return [samples[i] for i in sorted(idx)]


def sampled_phi(cfg: ExperimentConfig) -> PhiFn:
    L, T, seed = cfg.world.L, cfg.shapley.samples, cfg.world.seed

    def phi(role, scorer, sample, stream):
        return sampled_shapley(make_grid_game(sample, scorer, L), T, SeededRng(seed, stream)).phi

    return phi


def _stream(image_index: int, role: str) -> int:
    # one stream per (image, role); compressed copies reuse the raw stream
    return 100_000 + 4 * image_index + ROLES.index(role)


def _seed_configs(config: ExperimentConfig):
    if not config.seeds:
        raise ValueError("config lists no seeds")
    return [(s, config.for_seed(s)) for s in config.seeds]


def _report(name: str, config: ExperimentConfig) -> ExperimentReport:
    return ExperimentReport(name, config.to_dict(), list(config.seeds),
                            provenance={"config_digest": config.digest()})


def _grid(v, L: int) -> list:
    return np.asarray(v).reshape(L, L).tolist()


# --- hypothesis 1 ------------------------------------------------------------------

def image_h1_metrics(phi_d, phi_s, phi_t, cfg: ExperimentConfig) -> dict:
    """Q curve, its mean, and top-fraction mask overlaps with the planted regions."""
    w = cfg.world
    curve = q_curve(phi_d, phi_s, phi_t)
    frac = cfg.shapley.top_fraction
    masks = {r: top_fraction_mask(p, frac) for r, p in zip(ROLES, (phi_d, phi_s, phi_t))}
    out = {"q_mean": float(np.mean(list(curve.values()))), "curve": curve}
    for role, m in masks.items():
        out[f"{role}_boundary"] = overlap_fraction(m, w.boundary_region)
        out[f"{role}_face"] = overlap_fraction(m, w.face_region)
        out[f"{role}_background"] = overlap_fraction(m, w.background_region)
    return out


def run_hypothesis1(config: ExperimentConfig, run_dir=None, phi_fn: PhiFn | None = None,
                    with_instability: bool = True) -> ExperimentReport:
    report = _report("hyp1", config)
    per_image, per_seed, curves = [], [], []
    for seed, cfg in _seed_configs(config):
        models = seed_models(cfg, run_dir)
        phi = phi_fn or sampled_phi(cfg)
        images = pick(models.world.fakes("test"), cfg.shapley.attr_images, seed)
        rows, all_maps = [], []
        for j, s in enumerate(images):
            maps = {r: phi(r, models.scorer(r, s), s, _stream(j, r)) for r in ROLES}
            all_maps.append(maps)
            m = image_h1_metrics(maps["detection"], maps["source"], maps["target"], cfg)
            curves.append(list(m.pop("curve").values()))
            rows.append({"seed": seed, "image": s.sample_id, **m})
            if j == 0 and seed == config.seeds[0]:
                report.figures["intersections"] = _intersection_figure(maps, cfg)
        per_image += rows
        pooled = pooled_q(all_maps, cfg.world.n_grids)
        seed_row = {"seed": seed, "q_mean": float(np.mean([r["q_mean"] for r in rows])), "q_pooled": pooled}
        for key in rows[0]:
            if key.endswith(("_boundary", "_face", "_background")):
                seed_row[key] = float(np.mean([r[key] for r in rows]))
        per_seed.append(seed_row)
    report.tables["images"] = per_image
    report.tables["seeds"] = per_seed
    for key in per_seed[0]:
        if key != "seed":
            report.summary[key] = summarize([r[key] for r in per_seed])
    ks = kept_counts(config.world.n_grids)
    report.series["q_curve"] = {"columns": ["k", "q_mean"],
                                "rows": [[k, q] for k, q in zip(ks, np.mean(curves, axis=0))]}
    report.checks["q_positive_every_seed"] = all(r["q_mean"] > 0 for r in per_seed)
    det = report.summary["detection_boundary"]["mean"]
    report.checks["detection_mask_on_boundary"] = bool(
        det > report.summary["source_boundary"]["mean"] and det > report.summary["target_boundary"]["mean"])
    if with_instability:
        inst = run_instability(config, run_dir)
        report.tables["instability"] = inst.tables["instability"]
        report.series["instability"] = inst.series["instability"]
        report.summary.update(inst.summary)
        report.checks.update(inst.checks)
    return report


def pooled_q(maps: list[dict], n: int) -> float:
    """Q with every image's grids pooled, averaged over the kept-count schedule."""
    qs = []
    for k in kept_counts(n):
        on, off = [], []
        for m in maps:
            bits = relevance_mask(m["source"], m["target"], k).bits
            on.append(m["detection"][bits])
            off.append(m["detection"][~bits])
        qs.append(np.concatenate(off).mean() - np.concatenate(on).mean())
    return float(np.mean(qs))


def _intersection_figure(maps: dict, cfg: ExperimentConfig) -> dict:
    L, frac = cfg.world.L, cfg.shapley.top_fraction
    masks = {r: top_fraction_mask(maps[r], frac).bits for r in ROLES}
    boundary = np.zeros(cfg.world.n_grids, dtype=bool)
    boundary[cfg.world.boundary_region] = True
    return {
        "phi": {r: _grid(maps[r], L) for r in ROLES},
        "top_mask": {r: _grid(masks[r].astype(int), L) for r in ROLES},
        "detection_and_source": _grid((masks["detection"] & masks["source"]).astype(int), L),
        "detection_and_target": _grid((masks["detection"] & masks["target"]).astype(int), L),
        "boundary": _grid(boundary.astype(int), L),
    }


def run_instability(config: ExperimentConfig, run_dir=None) -> ExperimentReport:
    """Instability of the detection encoder's maps against the sample count T."""
    report = _report("instability", config)
    rows = []
    Ts = sorted(config.shapley.instability_samples)
    for seed, cfg in _seed_configs(config):
        models = seed_models(cfg, run_dir)
        images = pick(models.world.samples("test"), cfg.shapley.instability_images, seed, stream=8002)
        values = defaultdict(list)
        for j, s in enumerate(images):
            game = make_grid_game(s, models.scorer("detection", s), cfg.world.L)
            for T in Ts:
                values[T].append(instability(game, T, 1_000_000 + 2 * j, 1_000_001 + 2 * j))
        for T in Ts:
            rows.append({"seed": seed, "T": T, "instability": float(np.mean(values[T]))})
    report.tables["instability"] = rows
    means = []
    for T in Ts:
        s = summarize([r["instability"] for r in rows if r["T"] == T])
        report.summary[f"instability_T{T}"] = s
        means.append([T, s["mean"], s["std"]])
    report.series["instability"] = {"columns": ["T", "mean", "std"], "rows": means}
    report.checks["instability_decreasing"] = bool(means[-1][1] < means[0][1])
    return report


# --- hypothesis 2 ------------------------------------------------------------------

def video_auc(scores, labels, groups) -> float:
    """AUC over per-group mean scores."""
    scores, labels, groups = map(np.asarray, (scores, labels, groups))
    keys = np.unique(groups)
    means = np.array([scores[groups == g].mean() for g in keys])
    glab = np.array([labels[groups == g][0] for g in keys])
    return rank_auc(means[glab == 1], means[glab == 0])


def run_hypothesis2(config: ExperimentConfig, run_dir=None, phi_fn: PhiFn | None = None) -> ExperimentReport:
    report = _report("hyp2", config)
    seed_rows, curve_rows = [], []
    n_pair = config.pairing.n_pair_identities
    for seed, cfg in _seed_configs(config):
        models = seed_models(cfg, run_dir)
        world = models.world
        phi = phi_fn or sampled_phi(cfg)
        paired, unpaired = build_paired_unpaired(world, n_pair, cfg.pairing.real_ratio)
        if len(paired.reals) != len(unpaired.reals):
            raise AssertionError("paired and unpaired real counts differ")
        held = set(range(2 * n_pair, cfg.world.n_identities))
        test = [s for s in world.samples("test") if s.source_id in held and s.target_id in held]
        Xt, yt = _matrix(test), np.array([s.label for s in test])
        groups = [s.video_group for s in test]
        images = pick([s for s in test if s.role == "fake"], cfg.shapley.attr_images, seed)
        id_maps = [{r: phi(r, models.scorer(r, x), x, _stream(j, r)) for r in ("source", "target")}
                   for j, x in enumerate(images)]
        row = {"seed": seed, "n_real": len(paired.reals), "n_fake": len(paired.fakes)}
        for name, split, stream in (("paired", paired, 11), ("unpaired", unpaired, 12)):
            mdir = _model_dir(cfg, run_dir)
            model = _cached((name, cfg.digest()), None if mdir is None else mdir / f"{name}.npz", load_model,
                            lambda sp=split, st=stream: train_detector(sp.samples, cfg, st), save_model)
            logits = model(Xt)
            score = logits[:, 1] - logits[:, 0]
            row[f"{name}_acc"] = float(np.mean(logits.argmax(1) == yt))
            row[f"{name}_auc"] = video_auc(score, yt, groups)
            curves = []
            for j, x in enumerate(images):
                pd = phi("detection", logit_scorer(model, x.label), x, _stream(j, "detection"))
                curves.append(list(q_curve(pd, id_maps[j]["source"], id_maps[j]["target"]).values()))
            curve = np.mean(curves, axis=0)
            row[f"{name}_q_mean"] = float(curve.mean())
            for k, q in zip(kept_counts(cfg.world.n_grids), curve):
                curve_rows.append({"seed": seed, "condition": name, "k": k, "q": float(q)})
        row["auc_gap"] = row["paired_auc"] - row["unpaired_auc"]
        seed_rows.append(row)
    report.tables["seeds"] = seed_rows
    report.tables["q_curves"] = curve_rows
    for key in seed_rows[0]:
        if key != "seed":
            report.summary[key] = summarize([r[key] for r in seed_rows])
    ks = kept_counts(config.world.n_grids)
    avg = {c: [float(np.mean([r["q"] for r in curve_rows if r["condition"] == c and r["k"] == k])) for k in ks]
           for c in ("paired", "unpaired")}
    n = config.world.n_grids
    report.series["q_curves"] = {"columns": ["k", "kept_pct", "q_paired", "q_unpaired"],
                                 "rows": [[k, 100 * k / n, p, u] for k, p, u in
                                          zip(ks, avg["paired"], avg["unpaired"])]}
    report.checks["equal_real_counts"] = True
    report.checks["paired_auc_ge_unpaired_most_seeds"] = \
        sum(r["paired_auc"] >= r["unpaired_auc"] for r in seed_rows) >= 0.8 * len(seed_rows)
    report.checks["paired_q_above_unpaired_every_k"] = all(p > u for p, u in zip(avg["paired"], avg["unpaired"]))
    return report


# --- hypothesis 3 and the FST comparison -------------------------------------------

def _delta_maps(phi, role, scorer_for, sample, stream, cfg) -> tuple[float, dict]:
    raw = phi(role, scorer_for(sample), sample, stream)
    by_level = {}
    for level in LEVELS:
        c = compress(sample, level, cfg.world)
        by_level[level] = phi(role, scorer_for(c), c, stream)
    per_level = {lv: cosine_similarity(raw, p) for lv, p in by_level.items()}
    return delta_stability(StabilityInput(raw, by_level)), per_level


def _compressed_auc(score_fn, samples, cfg) -> dict:
    y = np.array([s.label for s in samples])
    out = {}
    for level in ("raw",) + LEVELS:
        data = samples if level == "raw" else [compress(s, level, cfg.world) for s in samples]
        sc = score_fn(_matrix(data))
        out[level] = rank_auc(sc[y == 1], sc[y == 0])
    return out


def run_hypothesis3(config: ExperimentConfig, run_dir=None, phi_fn: PhiFn | None = None,
                    include_fst: bool = True) -> ExperimentReport:
    report = _report("hyp3", config)
    image_rows, seed_rows, bucket_rows = [], [], []
    for seed, cfg in _seed_configs(config):
        models = seed_models(cfg, run_dir)
        phi = phi_fn or sampled_phi(cfg)
        images = pick(models.world.fakes("test"), cfg.shapley.attr_images, seed)
        rows = []
        for j, s in enumerate(images):
            row = {"seed": seed, "image": s.sample_id, "pair": f"{s.source_id}-{s.target_id}"}
            for role in ROLES:
                d, lv = _delta_maps(phi, role, lambda x, r=role: models.scorer(r, x), s, _stream(j, role), cfg)
                row[f"delta_{role}"] = d
                row.update({f"cos_{role}_{k}": v for k, v in lv.items()})
            rows.append(row)
        image_rows += rows
        seed_row = {"seed": seed, **{f"delta_{r}": float(np.mean([x[f"delta_{r}"] for x in rows])) for r in ROLES}}
        buckets = defaultdict(list)
        for r in rows:
            buckets[r["pair"]].append(r)
        ok = 0
        for pair, members in sorted(buckets.items()):
            b = {f"delta_{r}": float(np.mean([m[f"delta_{r}"] for m in members])) for r in ROLES}
            hit = b["delta_source"] > b["delta_detection"] and b["delta_target"] > b["delta_detection"]
            ok += hit
            bucket_rows.append({"seed": seed, "pair": pair, **b, "identity_above_detection": hit})
        seed_row["bucket_fraction"] = ok / len(buckets)
        if include_fst:
            seed_row.update(_fst_seed(cfg, models, phi, images, run_dir, seed_row["delta_detection"]))
        seed_rows.append(seed_row)
    report.tables["images"] = image_rows
    report.tables["buckets"] = bucket_rows
    report.tables["seeds"] = seed_rows
    for key in seed_rows[0]:
        if key != "seed":
            report.summary[key] = summarize([r[key] for r in seed_rows])
    mean = {k: v["mean"] for k, v in report.summary.items()}
    report.checks["identity_delta_above_detection"] = bool(
        mean["delta_source"] > mean["delta_detection"] and mean["delta_target"] > mean["delta_detection"])
    if include_fst:
        _fst_checks(report, seed_rows)
    return report


def _fst_seed(cfg, models, phi, images, run_dir, baseline_delta: float) -> dict:
    fm = fst_model(cfg, run_dir)
    deltas = [_delta_maps(phi, "detection", lambda x: detection_scorer(fm, x.label), s,
                          _stream(j, "detection"), cfg)[0] for j, s in enumerate(images)]
    test = models.world.samples("test")

    def margin(model_logits):
        return lambda X: (lambda z: z[:, 1] - z[:, 0])(model_logits(X))

    base = _compressed_auc(margin(models.detection), test, cfg)
    fst = _compressed_auc(margin(lambda X: forward_fst(fm, X)[2]), test, cfg)
    out = {"fst_delta": float(np.mean(deltas)), "baseline_delta": baseline_delta}
    for level in ("raw",) + LEVELS:
        out[f"baseline_auc_{level}"] = base[level]
        out[f"fst_auc_{level}"] = fst[level]
    out["baseline_auc_compressed"] = float(np.mean([base[lv] for lv in LEVELS]))
    out["fst_auc_compressed"] = float(np.mean([fst[lv] for lv in LEVELS]))
    return out


def _fst_checks(report: ExperimentReport, seed_rows) -> None:
    wins = sum(r["fst_delta"] > r["baseline_delta"] for r in seed_rows)
    report.summary["fst_delta_wins"] = summarize([wins])
    report.checks["fst_delta_above_baseline_most_seeds"] = wins >= 0.8 * len(seed_rows)
    report.checks["fst_compressed_auc_ge_baseline"] = bool(
        report.summary["fst_auc_compressed"]["mean"] >= report.summary["baseline_auc_compressed"]["mean"])


def run_fst_comparison(config: ExperimentConfig, run_dir=None, phi_fn: PhiFn | None = None) -> ExperimentReport:
    """Baseline vs FST detection: attribution stability and compressed-test AUC."""
    report = _report("fst", config)
    rows = []
    for seed, cfg in _seed_configs(config):
        models = seed_models(cfg, run_dir)
        phi = phi_fn or sampled_phi(cfg)
        images = pick(models.world.fakes("test"), cfg.shapley.attr_images, seed)
        base = [_delta_maps(phi, "detection", lambda x: models.scorer("detection", x), s,
                            _stream(j, "detection"), cfg)[0] for j, s in enumerate(images)]
        rows.append({"seed": seed, **_fst_seed(cfg, models, phi, images, run_dir, float(np.mean(base)))})
    report.tables["seeds"] = rows
    for key in rows[0]:
        if key != "seed":
            report.summary[key] = summarize([r[key] for r in rows])
    _fst_checks(report, rows)
    return report


# --- attribution files ---------------------------------------------------------------

def attribute(samples, game_for: Callable, T: int, seed: int, out_dir, retries: int = 1) -> list[Path]:
    """Write ``<id>.csv`` (grid_index, phi) and a ``<id>.json`` sidecar per sample.

    ``game_for(sample)`` builds the coalition game.  An evaluation failure is
    retried ``retries`` times; if it persists, ``manifest.json`` records the
    images finished so far and the error is re-raised.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    done, written = [], []
    for j, s in enumerate(samples):
        name = getattr(s, "sample_id", "") or f"image{j:04d}"
        for attempt in range(retries + 1):
            try:
                amap = sampled_shapley(game_for(s), T, SeededRng(seed, j))
                break
            except EvaluationError as exc:
                log.warning("attribution of %s failed (attempt %d): %s", name, attempt + 1, exc)
                if attempt == retries:
                    _write_manifest(out, done, T, seed, failed=name, error=str(exc))
                    raise
        written += write_attribution(amap, out, name)
        done.append(name)
    written.append(_write_manifest(out, done, T, seed))
    return written


def write_attribution(amap: AttributionMap, out: Path, name: str) -> list[Path]:
    csv_path, meta_path = out / f"{name}.csv", out / f"{name}.json"
    lines = ["grid_index,phi"] + [f"{i},{float(v)!r}" for i, v in enumerate(amap.phi)]
    csv_path.write_text("\n".join(lines) + "\n")
    meta = {"method": amap.method, "T": amap.samples, "seed": amap.seed, "stream": amap.stream,
            "baseline_score": amap.baseline_score, "grand_score": amap.grand_score,
            "efficiency_residual": amap.efficiency_residual}
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return [csv_path, meta_path]


def _write_manifest(out: Path, done, T, seed, failed=None, error=None) -> Path:
    m = {"T": T, "seed": seed, "completed": list(done), "complete": failed is None}
    if failed is not None:
        m.update(failed=failed, error=error)
    path = out / "manifest.json"
    path.write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
    return path

