import json
import subprocess
import sys

import numpy as np
import pytest

from fstmatch.fstmetrics import q_curve, q_mean
from fstmatch.game import EvaluationError, make_grid_game
from fstmatch.harness import cli
from fstmatch.harness.config import ConfigError, ExperimentConfig, from_dict, load_config, save_config
from fstmatch.harness.external import ExternalGame, ExternalScorer, ProtocolError, external_score, parse_scorer
from fstmatch.harness.pipelines import (attribute, image_h1_metrics, pooled_q, run_hypothesis1, run_hypothesis2,
                                        run_hypothesis3, video_auc)
from fstmatch.harness.report import ExperimentReport, render, summarize
from fstmatch.shapley import sampled_shapley

ECHO = f"{sys.executable} -m fstmatch.harness.echo_server"


def tiny_config(**shapley) -> ExperimentConfig:
    cfg = ExperimentConfig(seeds=[0, 1])
    cfg.world.L, cfg.world.n_identities = 6, 8
    cfg.world.face_region = cfg.world.boundary_region = None
    cfg.world.__post_init__()
    cfg.train.epochs = 3
    cfg.fst.train.epochs = 2
    cfg.pairing.n_pair_identities = 3
    cfg.shapley.samples, cfg.shapley.attr_images = 8, 3
    cfg.shapley.instability_samples, cfg.shapley.instability_images = [2, 8], 3
    for k, v in shapley.items():
        setattr(cfg.shapley, k, v)
    return cfg


# --- config -----------------------------------------------------------------------

def test_config_roundtrip(tmp_path):
    cfg = tiny_config()
    back = load_config(save_config(cfg, tmp_path / "c.json"))
    assert back.to_dict() == cfg.to_dict() and back.digest() == cfg.digest()


def test_unknown_keys_are_errors():
    with pytest.raises(ConfigError, match="shapley.sample"):
        from_dict({"shapley": {"sample": 5}})
    with pytest.raises(ConfigError):
        from_dict({"world": {"L": 8, "colour": 1}})


def test_for_seed():
    cfg = ExperimentConfig().for_seed(3)
    assert cfg.world.seed == cfg.train.seed == cfg.fst.train.seed == 3 and cfg.seeds == [3]
    assert ExperimentConfig().digest() == ExperimentConfig().digest()


# --- reports ------------------------------------------------------------------------

def test_summarize_and_report_files(tmp_path):
    s = summarize([1.0, 3.0])
    assert s["mean"] == 2.0 and s["std"] == pytest.approx(np.sqrt(2)) and s["n"] == 2
    rep = ExperimentReport("demo", {"a": 1}, [0, 1], tables={"t": [{"seed": 0, "x": 0.1}, {"seed": 1, "x": 0.2}]},
                           summary={"x": summarize([0.1, 0.2])}, checks={"ok": True},
                           series={"curve": {"columns": ["k", "q"], "rows": [[1, 0.5]]}})
    files = rep.write(tmp_path)
    assert {f.name for f in files} == {"demo.json", "demo_t.csv", "demo_curve.dat"}
    assert (tmp_path / "demo_t.csv").read_text().splitlines() == ["seed,x", "0,0.1", "1,0.2"]
    back = ExperimentReport.load(tmp_path / "demo.json")
    assert back.summary == json.loads(json.dumps(rep.summary))
    assert "| x |" in render(back)
    assert "started" not in json.dumps(back.to_dict())


def test_video_auc_groups():
    scores = [0.9, 0.1, 0.4, 0.45, 0.2]
    labels = [1, 1, 0, 0, 0]
    groups = [7, 7, 8, 8, 9]
    # group means: fake 0.5, reals 0.425 and 0.2
    assert video_auc(scores, labels, groups) == 1.0


# --- external scorer ------------------------------------------------------------------

@pytest.mark.parametrize("extra", ["", "--shuffle"])
def test_popcount_monotone_over_nested_masks(extra):
    with parse_scorer(f"stdio:{ECHO} --mode popcount {extra}") as sc:
        sc.register("img", np.ones((6, 2)))
        nested = np.tril(np.ones((6, 6), dtype=int))
        scores = sc.score_many("img", nested, 1)
    assert list(scores) == [1, 2, 3, 4, 5, 6]


def test_out_of_order_responses_matched_by_id():
    grids = np.arange(8.0).reshape(4, 2)
    with parse_scorer(f"stdio:{ECHO} --mode sum --shuffle") as sc:
        sc.register("g", grids)
        masks = np.eye(4, dtype=int)
        assert list(sc.score_many("g", masks, 0)) == [1.0, 5.0, 9.0, 13.0]
        assert external_score(sc, "g", [1, 1, 0, 0]) == 6.0


def test_tcp_transport():
    proc = subprocess.Popen([sys.executable, "-m", "fstmatch.harness.echo_server", "--tcp", "0", "--mode", "sum"],
                            stdout=subprocess.PIPE, text=True)
    try:
        port = proc.stdout.readline().split()[1]
        with parse_scorer(f"tcp:127.0.0.1:{port}") as sc:
            game = ExternalGame(sc, "t", np.ones((4, 3)), 1)
            assert game.baseline_score == 0.0 and game.grand_score == 12.0
    finally:
        proc.kill()
        proc.wait()


def test_dead_process_names_command():
    sc = parse_scorer(f"stdio:{ECHO} --die-after 1", timeout=10).start()
    try:
        sc.register("a", np.ones((2, 1)))
        with pytest.raises(EvaluationError, match="echo_server"):
            sc.score_many("a", np.ones((3, 2)), 1)
    finally:
        sc.close()


def test_malformed_response_is_protocol_error():
    sc = parse_scorer(f"stdio:{ECHO} --garble-after 0", timeout=10).start()
    try:
        sc.register("a", np.ones((2, 1)))
        with pytest.raises(ProtocolError) as info:
            sc.score_many("a", [[1, 0]], 1)
        assert "not json" in info.value.payload
    finally:
        sc.close()


def test_timeout():
    sc = ExternalScorer("stdio", f"{sys.executable} -c 'import time; time.sleep(30)'", timeout=0.3).start()
    try:
        with pytest.raises(EvaluationError, match="timed out"):
            sc.register("a", np.ones((2, 1)))
    finally:
        sc._proc.kill()
        sc.close()


def test_unregistered_image_error():
    with parse_scorer(f"stdio:{ECHO}") as sc:
        with pytest.raises(EvaluationError, match="not registered"):
            sc.score_many("nope", [[1]], 0)
    with pytest.raises(ValueError):
        parse_scorer("http://x")


# --- attribution files ----------------------------------------------------------------

def additive_game(sample):
    return make_grid_game(sample, lambda b: b.reshape(b.shape[0], -1).sum(1), sample.grids.shape[0] ** 0.5 // 1)


def test_attribute_additive(tmp_path, small_world):
    samples = small_world.fakes("test")[:2]
    L = small_world.config.L
    attribute(samples, lambda s: make_grid_game(s, lambda b: b.reshape(len(b), -1).sum(1), L), 7, 3, tmp_path)
    for s in samples:
        rows = (tmp_path / f"{s.sample_id}.csv").read_text().splitlines()
        assert rows[0] == "grid_index,phi"
        phi = np.array([float(r.split(",")[1]) for r in rows[1:]])
        np.testing.assert_allclose(phi, s.grids.sum(1), atol=1e-12)
        meta = json.loads((tmp_path / f"{s.sample_id}.json").read_text())
        assert meta["method"] == "sampled" and meta["T"] == 7 and abs(meta["efficiency_residual"]) < 1e-12
    assert json.loads((tmp_path / "manifest.json").read_text())["complete"]


def test_attribute_external_deterministic(tmp_path, small_world):
    samples = small_world.fakes("test")[:2]
    outs = []
    for run in ("a", "b"):
        with parse_scorer(f"stdio:{ECHO} --mode sum --shuffle") as sc:
            attribute(samples, lambda s: ExternalGame(sc, s.sample_id, s.grids, 1), 5, 0, tmp_path / run)
        outs.append({p.name: p.read_bytes() for p in sorted((tmp_path / run).iterdir())})
    assert outs[0] == outs[1]


def test_attribute_retry_then_partial_manifest(tmp_path, small_world):
    samples = small_world.fakes("test")[:3]
    calls = {"n": 0}

    def flaky(sample):
        calls["n"] += 1
        if sample is samples[0] and calls["n"] == 1:
            raise EvaluationError("transient")
        if sample is samples[2]:
            raise EvaluationError("down for good")
        return make_grid_game(sample, lambda b: b.reshape(len(b), -1).sum(1), small_world.config.L)

    with pytest.raises(EvaluationError, match="down for good"):
        attribute(samples, flaky, 4, 0, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["completed"] == [samples[0].sample_id, samples[1].sample_id]
    assert manifest["failed"] == samples[2].sample_id and not manifest["complete"]


# --- pipelines --------------------------------------------------------------------------

def planted_maps(cfg):
    w = cfg.world
    n = w.n_grids
    ramp = np.arange(n) / (10 * n)
    region = {"detection": w.boundary_region, "source": w.background_region, "target": w.face_region}

    def phi(role, scorer, sample, stream):
        v = np.zeros(n)
        v[region[role]] = 1.0
        return v + ramp

    return phi


def test_hyp1_with_injected_maps_matches_metrics():
    cfg = tiny_config()
    phi = planted_maps(cfg)
    rep = run_hypothesis1(cfg, phi_fn=phi, with_instability=False)
    maps = {r: phi(r, None, None, 0) for r in ("detection", "source", "target")}
    expected = q_mean(maps["detection"], maps["source"], maps["target"])
    assert rep.summary["q_mean"]["values"] == [expected, expected]
    assert rep.summary["q_pooled"]["mean"] == pytest.approx(expected)
    m = image_h1_metrics(maps["detection"], maps["source"], maps["target"], cfg)
    assert rep.tables["images"][0]["detection_boundary"] == m["detection_boundary"]
    assert rep.checks["q_positive_every_seed"] and rep.checks["detection_mask_on_boundary"]
    assert pooled_q([maps], cfg.world.n_grids) == pytest.approx(expected)
    assert list(q_curve(*maps.values())) == [r[0] for r in rep.series["q_curve"]["rows"]]


def test_hyp2_and_hyp3_small_runs():
    cfg = tiny_config()
    rep2 = run_hypothesis2(cfg)
    assert all(r["n_real"] == r["n_fake"] for r in rep2.tables["seeds"])
    assert rep2.checks["equal_real_counts"]
    rep3 = run_hypothesis3(cfg)
    assert {"delta_detection", "fst_delta", "fst_auc_compressed"} <= set(rep3.summary)


def test_hyp3_without_quantisation_gives_unit_delta():
    cfg = tiny_config()
    cfg.world.quant_step_c23, cfg.world.quant_step_c40 = 1e-13, 2e-13
    cfg.world.artifact_amplitude = 1e-14
    rep = run_hypothesis3(cfg, include_fst=False)
    for role in ("detection", "source", "target"):
        assert rep.summary[f"delta_{role}"]["mean"] == pytest.approx(1.0, abs=1e-6)


def test_sampled_phi_matches_manual_call():
    from fstmatch.harness.pipelines import sampled_phi, seed_models
    from fstmatch.numerics import SeededRng
    cfg = tiny_config().for_seed(0)
    models = seed_models(cfg)
    s = models.world.fakes("test")[0]
    scorer = models.scorer("source", s)
    direct = sampled_shapley(make_grid_game(s, scorer, cfg.world.L), cfg.shapley.samples, SeededRng(0, 5)).phi
    assert np.array_equal(sampled_phi(cfg)("source", scorer, s, 5), direct)


# --- command line ---------------------------------------------------------------------------

def test_cli_config_and_experiment_determinism(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    save_config(tiny_config(), cfg_path)
    assert cli.main(["config", "default", "--out", str(tmp_path / "defaults.json")]) == 0
    assert load_config(tmp_path / "defaults.json").to_dict() == ExperimentConfig().to_dict()
    bad = tmp_path / "bad.json"
    bad.write_text('{"sedes": [1]}')
    assert cli.main(["exp", "hyp2", "--config", str(bad)]) == 64
    for run in ("a", "b"):
        cli.main(["exp", "hyp2", "--config", str(cfg_path), "--seeds", "0,1", "--out", str(tmp_path / run)])
    names = sorted(p.name for p in (tmp_path / "a").iterdir() if p.is_file() and p.name != "run_log.json")
    assert names == ["hyp2.json", "hyp2_q_curves.csv", "hyp2_q_curves.dat", "hyp2_seeds.csv"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    assert cli.main(["report", "render", str(tmp_path / "a" / "hyp2.json")]) == 0
    assert "# hyp2" in capsys.readouterr().out


def test_cli_attribute_and_metrics(tmp_path, capsys):
    out = tmp_path / "attr"
    assert cli.main(["attribute", "--additive", "--fakes", "--count", "1", "--samples", "5", "--out", str(out)]) == 0
    csv_file = next(p for p in out.iterdir() if p.suffix == ".csv")
    assert cli.main(["metrics", "q", "--detection", str(csv_file), "--source", str(csv_file),
                     "--target", str(csv_file)]) == 0
    assert "Q_mean=" in capsys.readouterr().out
    assert cli.main(["metrics", "delta", "--raw", str(csv_file), "--compressed", str(csv_file)]) == 0
    assert "delta=1.0" in capsys.readouterr().out


def test_cli_train_world_verify(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    save_config(tiny_config(), cfg_path)
    assert cli.main(["world", "gen", "--config", str(cfg_path), "--out", str(tmp_path / "w")]) == 0
    assert (tmp_path / "w" / "test" / "manifest.csv").exists()
    assert cli.main(["train", "baseline", "--config", str(cfg_path), "--out", str(tmp_path / "m")]) == 0
    ckpt = tmp_path / "m" / "detection.npz"
    assert cli.main(["attribute", "--checkpoint", str(ckpt), "--config", str(cfg_path), "--data",
                     str(tmp_path / "w" / "test"), "--count", "1", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["verify", "axioms", "--games", "5"]) == 0
    assert cli.main(["verify", "grads", "--config", str(cfg_path)]) == 0
