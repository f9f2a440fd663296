import json

import pytest

from harvana.cli import main
from harvana import pipeline
from harvana.hyperspace import ParamSpec, SearchSpace, read_trials, save_space


PLANTED_SPEC = {
    "deployment": {
        "sampling_rate": 50.0,
        "sources": [
            {"id": "hips_acc", "position": "hips", "modality": "acc", "channels": 1},
            {"id": "torso_acc", "position": "torso", "modality": "acc", "channels": 1},
            {"id": "hand_acc", "position": "hand", "modality": "acc", "channels": 1},
        ],
    },
    "planted": {
        "activities": ["walk", "still"],
        "informative": {
            "walk": {"hips_acc": {"base_freq": 3.0, "amplitude": 1.0}},
            "still": {"torso_acc": {"base_freq": 6.0, "amplitude": 1.0}},
        },
        "distractor_sigma": 0.4,
    },
    "sensor": {"noise_sigma": 0.2},
}


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "planted.json").write_text(json.dumps(PLANTED_SPEC))
    return tmp_path


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def demo_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo_shared") / "demo"
    assert run_cli("pipeline", "--demo", out) == 0
    return out


def test_generate_partition_explore_analyze_dgp_train(workdir):
    data = workdir / "data"
    assert run_cli("generate", "--planted", workdir / "planted.json",
                   "--frames", 16, "--window", 80, "--seed", 3,
                   "--out", data) == 0
    assert (data / "meta.json").exists()

    folds = workdir / "folds.json"
    assert run_cli("partition", "--data", data, "--window", 80, "--k", 4,
                   "--meta-len", 1, "--seed", 1, "--out", folds) == 0

    space = workdir / "space.json"
    dep = pipeline.deployment_from_json(PLANTED_SPEC["deployment"])
    save_space(pipeline.gain_space(dep), space)
    model = workdir / "model.json"
    model.write_text(json.dumps({"n_conv_blocks": 0, "dropout": 0.0, "epochs": 15,
                                 "classifier_head": "softmax_linear"}))
    trials = workdir / "trials.jsonl"
    assert run_cli("explore", "--space", space, "--strategy", "random",
                   "--budget", 24, "--seed", 42, "--out", trials,
                   "--data", data, "--folds", folds, "--window", 80,
                   "--model", model) == 0
    assert len(read_trials(trials)) == 24

    report_json = workdir / "report_walk.json"
    csv = workdir / "report_walk.csv"
    svg = workdir / "marginal.svg"
    assert run_cli("analyze", "--trials", trials, "--space", space,
                   "--response", "per_activity_nu[walk]", "--out", report_json,
                   "--csv", csv,
                   "--pairwise", "gain_hips_acc,gain_torso_acc",
                   "--resolution", 8, "--svg", svg) == 0
    assert report_json.exists() and csv.exists() and svg.exists()
    assert run_cli("analyze", "--trials", trials, "--space", space,
                   "--response", "per_activity_nu[still]",
                   "--out", workdir / "report_still.json") == 0

    dgp_path = workdir / "dgp.json"
    assert run_cli("dgp", "--report", workdir / "report_walk.json",
                   "--report", workdir / "report_still.json",
                   "--space", space, "--tau-imp", 0.2, "--tau-int", 0.2,
                   "--out", dgp_path) == 0
    doc = json.loads(dgp_path.read_text())
    assert set(doc["per_activity"]) == {"walk", "still"}

    assert run_cli("dgp", "agree", "--a", dgp_path, "--b", dgp_path) == 0

    metrics = workdir / "metrics.json"
    assert run_cli("train", "--data", data, "--folds", folds, "--window", 80,
                   "--config", model, "--mode", "w-DGP", "--dgp", dgp_path,
                   "--seed", 3, "--out", metrics) == 0
    out = json.loads(metrics.read_text())
    assert "w-DGP" in out["results"]
    assert (workdir / "metrics_fold0.csv").exists()


def test_explore_sphere_objective(tmp_path):
    space_path = tmp_path / "space.json"
    save_space(SearchSpace(params=(
        ParamSpec("x0", "continuous", 0.0, 1.0),
        ParamSpec("x1", "continuous", 0.0, 1.0))), space_path)
    out = tmp_path / "t.jsonl"
    assert run_cli("explore", "--space", space_path, "--strategy", "tpe",
                   "--budget", 12, "--seed", 0, "--out", out,
                   "--objective", "sphere", "--set", "gamma=0.3",
                   "--set", "n_startup=4") == 0
    assert len(read_trials(out)) == 12


def test_explore_workers_flag(tmp_path):
    space_path = tmp_path / "space.json"
    save_space(SearchSpace(params=(
        ParamSpec("x0", "continuous", 0.0, 1.0),
        ParamSpec("x1", "continuous", 0.0, 1.0))), space_path)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run_cli("explore", "--space", space_path, "--strategy", "random",
                   "--budget", 10, "--seed", 5, "--out", a,
                   "--objective", "sphere") == 0
    assert run_cli("explore", "--space", space_path, "--strategy", "random",
                   "--budget", 10, "--seed", 5, "--out", b,
                   "--objective", "sphere", "--workers", 4) == 0
    assert a.read_bytes() == b.read_bytes()


def test_invalid_space_exits_2(tmp_path):
    space_path = tmp_path / "bad_space.json"
    space_path.write_text(json.dumps(
        {"params": [{"name": "lr", "kind": "continuous", "lower": 0.1,
                     "upper": 0.001, "prior": "uniform"}]}))
    out = tmp_path / "t.jsonl"
    assert run_cli("explore", "--space", space_path, "--budget", 3,
                   "--out", out, "--objective", "sphere") == 2


def test_missing_manifest_input_exits_2(tmp_path):
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps({"seed": 1}))  # no deployment/planted
    assert run_cli("pipeline", "--manifest", manifest) == 2


def test_stage_error_names_failing_stage(tmp_path):
    from harvana.pipeline import StageError, run_pipeline
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps({"seed": 1}))
    with pytest.raises(StageError, match="stage 'generate' failed"):
        run_pipeline(manifest)


def test_manifest_stage_toggles(demo_run, tmp_path):
    from harvana.pipeline import run_pipeline
    doc = json.loads((demo_run / "manifest.json").read_text())
    doc["stages"] = ["report"]
    manifest = demo_run / "manifest_report_only.json"
    manifest.write_text(json.dumps(doc))
    # config hash differs from the full run, only the report stage executes
    artifacts = run_pipeline(manifest, force=True)
    assert [p.name for p in artifacts] == ["report"]


def test_demo_pipeline_all_artifacts(demo_run):
    for rel in ["data/meta.json", "folds.json", "trials.jsonl",
                "reports/report_nu.json", "dgp.json", "metrics.json",
                "report/summary.md", "report/tau_sweep.csv",
                "report/tau_sweep.svg", "report/importance.csv"]:
        assert (demo_run / rel).exists(), rel


def test_pipeline_rerun_skips_stages(demo_run, caplog):
    import logging
    with caplog.at_level(logging.INFO):
        assert run_cli("pipeline", "--manifest", demo_run / "manifest.json") == 0
    assert sum("up-to-date" in r.message for r in caplog.records) == 7


def test_tau_sweep_csv_format_and_leftmost_all_sources(demo_run):
    lines = (demo_run / "report" / "tau_sweep.csv").read_text().splitlines()
    assert lines[0].startswith("#")  # provenance
    assert lines[1] == "tau_imp,mean_f1,std_f1,mean_subset_size"
    rows = [line.split(",") for line in lines[2:]]
    assert len(rows) == 4
    n_sources = len(json.loads((demo_run / "data" / "meta.json").read_text())["sources"])
    assert float(rows[0][3]) == n_sources  # tau=0 keeps every data source
    sizes = [float(r[3]) for r in rows]
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))


def test_artifacts_embed_provenance(demo_run):
    for rel in ["folds.json", "dgp.json", "metrics.json", "reports/report_nu.json"]:
        doc = json.loads((demo_run / rel).read_text())
        assert set(doc["provenance"]) == {"seed", "config_hash"}, rel
    for rel in ["report/importance.csv", "report/tau_sweep.csv"]:
        first = (demo_run / rel).read_text().splitlines()[0]
        assert first.startswith("#") and "config_hash=" in first, rel
    svg = (demo_run / "report" / "tau_sweep.svg").read_text()
    assert "config_hash=" in svg
    # trial log lines each carry their seed; the log format itself stays pure
    line = json.loads((demo_run / "trials.jsonl").read_text().splitlines()[0])
    assert "seed" in line


def test_report_skips_heatmaps_without_pairwise_mass(tmp_path, caplog):
    out = tmp_path / "demo"
    assert run_cli("pipeline", "--demo", out) == 0
    # zero out the pairwise terms and re-render: heat maps must be skipped
    rep_path = out / "reports" / "report_nu.json"
    doc = json.loads(rep_path.read_text())
    doc["pairwise"] = [[u, v, 0.0] for u, v, _ in doc["pairwise"]]
    rep_path.write_text(json.dumps(doc, sort_keys=True))
    for svg in (out / "report").glob("marginal_*.svg"):
        svg.unlink()
    import logging
    with caplog.at_level(logging.INFO):
        assert run_cli("report", "--manifest", out / "manifest.json", "--force") == 0
    assert not list((out / "report").glob("marginal_*.svg"))
    assert any("heat maps skipped" in r.message for r in caplog.records)


def test_demo_pipeline_byte_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli("pipeline", "--demo", a) == 0
    assert run_cli("pipeline", "--demo", b) == 0
    for rel in ["trials.jsonl", "dgp.json", "metrics.json",
                "report/tau_sweep.csv", "report/tau_sweep.svg",
                "report/summary.md"]:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    svgs_a = sorted((a / "report").glob("marginal_*.svg"))
    svgs_b = sorted((b / "report").glob("marginal_*.svg"))
    assert [p.name for p in svgs_a] == [p.name for p in svgs_b]
    for pa, pb in zip(svgs_a, svgs_b):
        assert pa.read_bytes() == pb.read_bytes()
