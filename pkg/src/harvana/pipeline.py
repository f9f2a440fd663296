"""End-to-end orchestration: generate -> partition -> explore -> analyze ->
dgp -> protocol -> report, driven by a JSON manifest.

Stages are idempotent: each one is skipped when its output already exists
unless force=True. Every JSON artifact embeds a provenance block (stage seed
plus a hash of the manifest) and all outputs are byte-deterministic for a
fixed manifest, so two runs produce identical trial logs, reports, and SVGs.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import dgp as dgp_mod
from . import explorer, fanova, forest, hyperspace, learner, report, sensors

logger = logging.getLogger(__name__)


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# JSON codecs for the pieces a manifest describes

def deployment_from_json(doc: Mapping) -> sensors.Deployment:
    sources = tuple(sensors.DataSource(id=s["id"], position=s["position"],
                                       modality=s["modality"],
                                       channels=int(s.get("channels", 1)))
                    for s in doc["sources"])
    return sensors.Deployment(sources=sources,
                              sampling_rate=float(doc["sampling_rate"]))


def deployment_to_json(dep: sensors.Deployment) -> dict:
    return {"sampling_rate": dep.sampling_rate,
            "sources": [{"id": s.id, "position": s.position, "modality": s.modality,
                         "channels": s.channels} for s in dep.sources]}


def planted_from_json(doc: Mapping) -> sensors.PlantedDgp:
    informative = {
        activity: {src: sensors.SignalSpec(base_freq=float(spec["base_freq"]),
                                           amplitude=float(spec.get("amplitude", 1.0)),
                                           phase=float(spec.get("phase", 0.0)))
                   for src, spec in srcs.items()}
        for activity, srcs in doc["informative"].items()
    }
    return sensors.PlantedDgp(
        activities=tuple(doc["activities"]),
        informative=informative,
        distractor_sigma=float(doc.get("distractor_sigma", 1.0)),
        crosstalk_amp=float(doc.get("crosstalk_amp", 0.0)),
        distractor_offset_sigma=float(doc.get("distractor_offset_sigma", 0.0)),
        phase_jitter=float(doc.get("phase_jitter", 0.5)),
        freq_jitter=float(doc.get("freq_jitter", 0.0)),
        amp_jitter=float(doc.get("amp_jitter", 0.0)),
        autocorr=float(doc.get("autocorr", 0.0)),
    )


def sensor_model_from_json(doc: Mapping) -> sensors.SensorModel:
    return sensors.SensorModel(
        gain=float(doc.get("gain", 1.0)),
        offset=float(doc.get("offset", 0.0)),
        noise_sigma=float(doc.get("noise_sigma", 0.0)),
        drift_per_second=float(doc.get("drift_per_second", 0.0)),
        dropout_prob=float(doc.get("dropout_prob", 0.0)),
        transfer=doc.get("transfer", "linear"),
    )


def model_config_from_json(doc: Mapping) -> learner.ModelConfig:
    kw = dict(doc)
    if "kernel_sizes" in kw:
        kw["kernel_sizes"] = tuple(kw["kernel_sizes"])
    return learner.ModelConfig(**kw)


def model_config_to_json(cfg: learner.ModelConfig) -> dict:
    return {
        "conv_mode": cfg.conv_mode, "n_conv_blocks": cfg.n_conv_blocks,
        "kernel_sizes": list(cfg.kernel_sizes), "n_filters": cfg.n_filters,
        "stride_fraction": cfg.stride_fraction, "dropout": cfg.dropout,
        "dense_units": cfg.dense_units, "learning_rate": cfg.learning_rate,
        "epochs": cfg.epochs, "batch_size": cfg.batch_size,
        "activation": cfg.activation, "classifier_head": cfg.classifier_head,
        "source_gains": dict(cfg.source_gains), "mask_sigma": cfg.mask_sigma,
    }


def gain_space(deployment: sensors.Deployment,
               lr_bounds: tuple[float, float] = (0.005, 0.5)) -> hyperspace.SearchSpace:
    """Per-source input-gain space plus a global log-uniform learning rate."""
    params = [hyperspace.ParamSpec("lr", "continuous", lr_bounds[0], lr_bounds[1],
                                   prior="log")]
    for s in deployment.sources:
        params.append(hyperspace.ParamSpec(f"gain_{s.id}", "continuous", 0.0, 1.0,
                                           source_tag=s.id))
    return hyperspace.SearchSpace(params=tuple(params))


# ---------------------------------------------------------------------------
# the evaluator the explorer drives

class LearnerEvaluator:
    """(Configuration, budget, seed) -> Trial, by training the learner on the
    train split and validating on the held-out fold. Budget is epochs.
    Divergence is a measured worst-case outcome (nu = 1), not a failure."""

    def __init__(self, dataset: sensors.Dataset, folds: sensors.FoldAssignment,
                 base_config: learner.ModelConfig, val_fold: int = 0):
        self.dataset = dataset
        self.base_config = base_config
        self.activities = tuple(dataset.activities)
        self.window_len = dataset.frames[0].samples.shape[1]
        self.train_frames, self.val_frames = folds.split(dataset.frames, val_fold)

    def __call__(self, config: hyperspace.Configuration, budget: float,
                 seed: int) -> hyperspace.Trial:
        cfg = learner.config_from_values(config, self.base_config)
        epochs = max(1, round(budget))
        cfg = learner.ModelConfig(**{**model_config_to_json(cfg), "epochs": epochs,
                                     "recurrent": dict(cfg.recurrent)})
        net = learner.build(cfg, self.dataset.deployment, self.activities,
                            self.window_len, seed=seed)
        try:
            trained = learner.train(net, self.train_frames, cfg, seed=seed)
            metrics = learner.evaluate(trained, self.val_frames)
            nu, f1 = metrics.nu, metrics.macro_f1
            per_nu = metrics.per_activity_nu
        except learner.TrainingDiverged as e:
            logger.warning("trial diverged at epoch %d; recording worst-case loss", e.epoch)
            nu, f1 = 1.0, 0.0
            per_nu = {a: 1.0 for a in self.activities}
        return hyperspace.Trial(trial_id=-1, config=config, budget=budget, nu=nu,
                                per_activity_nu=per_nu, f1=f1, seed=seed)


# ---------------------------------------------------------------------------
# manifest

DEFAULT_MANIFEST: dict = {
    "seed": 7,
    "paths": {
        "data": "data",
        "space": "space.json",
        "folds": "folds.json",
        "trials": "trials.jsonl",
        "reports": "reports",
        "dgp": "dgp.json",
        "metrics": "metrics.json",
        "report": "report",
    },
    "generate": {
        "deployment": None,   # deployment_to_json layout
        "planted": None,      # planted_from_json layout
        "sensor": {"noise_sigma": 0.3},
        "frames_per_activity": 20,
        "window_len": 100,
        "stride": None,
        "smooth_window": 1,
        "recordings_per_activity": 1,
    },
    "partition": {"k": 4, "meta_len": 1},
    "explore": {"strategy": "random", "budget": 24, "settings": {},
                "val_fold": 0, "model": {}, "lr_bounds": [0.005, 0.5]},
    "analyze": {"n_trees": 32, "max_depth": 10, "min_leaf": 3},
    "dgp": {"tau_imp": 0.2, "tau_int": 0.2},
    "protocol": {"modes": ["wo-DGP", "w-DGP"], "model": {}, "hexp": None,
                 "include_null": False, "supplement": False},
    "report": {"tau_sweep": [0.0, 0.2, 0.4, 0.6], "pairwise": [], "resolution": 20},
}


def _merge(base: Mapping, override: Mapping) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class Manifest:
    doc: dict
    root: Path

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ManifestError(f"manifest not found: {path}")
        return cls(doc=_merge(DEFAULT_MANIFEST, doc), root=path.parent)

    def path(self, key: str) -> Path:
        return self.root / self.doc["paths"][key]

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    def stage_seed(self, stage: str) -> int:
        offsets = {"generate": 1, "partition": 2, "explore": 3, "analyze": 4,
                   "dgp": 5, "protocol": 6, "report": 7}
        return int(hyperspace.derive_rng(self.seed, offsets[stage]).integers(2 ** 31))

    def config_hash(self) -> str:
        blob = json.dumps(self.doc, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def provenance(self, stage: str) -> dict:
        return {"seed": self.stage_seed(stage), "config_hash": self.config_hash()}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# stages

def _load_frames(manifest: Manifest) -> tuple[sensors.Dataset, sensors.FoldAssignment]:
    ds = sensors.ingest_csv(manifest.path("data"))
    gen = manifest.doc["generate"]
    ds.frames = sensors.segment(ds, int(gen["window_len"]), gen.get("stride"),
                                smooth_window=int(gen.get("smooth_window", 1)))
    folds = sensors.folds_from_json(json.loads(manifest.path("folds").read_text()))
    return ds, folds


def stage_generate(manifest: Manifest, force: bool = False, workers: int = 1) -> Path:
    out = manifest.path("data")
    if (out / "meta.json").exists() and not force:
        logger.info("generate: %s up-to-date", out)
        return out
    gen = manifest.doc["generate"]
    if not gen.get("deployment") or not gen.get("planted"):
        raise ManifestError("generate stage needs 'deployment' and 'planted'")
    dep = deployment_from_json(gen["deployment"])
    planted = planted_from_json(gen["planted"])
    sensor = sensor_model_from_json(gen.get("sensor") or {})
    ds = sensors.generate(dep, planted, int(gen["frames_per_activity"]),
                          int(gen["window_len"]), sensor,
                          seed=manifest.stage_seed("generate"),
                          stride=gen.get("stride"),
                          recordings_per_activity=int(gen.get("recordings_per_activity", 1)))
    sensors.write_dataset(ds, out)
    (out / "provenance.json").write_text(
        json.dumps(manifest.provenance("generate"), sort_keys=True) + "\n")
    logger.info("generate: wrote %s", out)
    return out


def stage_partition(manifest: Manifest, force: bool = False, workers: int = 1) -> Path:
    out = manifest.path("folds")
    if out.exists() and not force:
        logger.info("partition: %s up-to-date", out)
        return out
    ds = sensors.ingest_csv(manifest.path("data"))
    gen = manifest.doc["generate"]
    frames = sensors.segment(ds, int(gen["window_len"]), gen.get("stride"),
                             smooth_window=int(gen.get("smooth_window", 1)))
    part = manifest.doc["partition"]
    folds = sensors.meta_segment_partition(frames, int(part["k"]),
                                           int(part["meta_len"]),
                                           manifest.stage_seed("partition"))
    doc = folds.to_json()
    doc["provenance"] = manifest.provenance("partition")
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    logger.info("partition: wrote %s", out)
    return out


def stage_explore(manifest: Manifest, force: bool = False, workers: int = 1) -> Path:
    out = manifest.path("trials")
    if out.exists() and not force:
        logger.info("explore: %s up-to-date", out)
        return out
    ds, folds = _load_frames(manifest)
    exp = manifest.doc["explore"]
    space_path = manifest.path("space")
    if space_path.exists():
        space = hyperspace.load_space(space_path)
    else:
        space = gain_space(ds.deployment, tuple(exp.get("lr_bounds", (0.005, 0.5))))
        hyperspace.save_space(space, space_path)
    base = model_config_from_json(exp.get("model") or {})
    evaluator = LearnerEvaluator(ds, folds, base, val_fold=int(exp.get("val_fold", 0)))
    strategy = explorer.Strategy(exp["strategy"], dict(exp.get("settings") or {}))
    explorer.run(space, strategy, evaluator, int(exp["budget"]),
                 manifest.stage_seed("explore"), out_path=out,
                 full_budget=float(base.epochs), workers=workers)
    logger.info("explore: wrote %s", out)
    return out


def stage_analyze(manifest: Manifest, force: bool = False, workers: int = 1) -> Path:
    out_dir = manifest.path("reports")
    done = out_dir / "report_nu.json"
    if done.exists() and not force:
        logger.info("analyze: %s up-to-date", out_dir)
        return out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    trials = hyperspace.read_trials(manifest.path("trials"))
    space = hyperspace.load_space(manifest.path("space"))
    ana = manifest.doc["analyze"]
    prov = manifest.provenance("analyze")
    responses = ["nu"] + [f"per_activity_nu[{a}]"
                          for a in sorted(trials[0].per_activity_nu)]
    # fANOVA over full-budget trials only: mixed fidelities corrupt the surface
    full = max(t.budget for t in trials)
    full_trials = [t for t in trials if t.budget == full]
    for resp in responses:
        fr = forest.fit_forest(full_trials, space, response=resp,
                               n_trees=int(ana["n_trees"]),
                               max_depth=int(ana["max_depth"]),
                               min_leaf=int(ana["min_leaf"]),
                               seed=manifest.stage_seed("analyze"),
                               workers=workers)
        rep = fanova.decompose(fr)
        name = "nu" if resp == "nu" else resp[len("per_activity_nu["):-1]
        doc = fanova.report_to_json(rep)
        doc["provenance"] = prov
        (out_dir / f"report_{name}.json").write_text(
            json.dumps(doc, indent=2, sort_keys=True) + "\n")
        report.importance_csv(rep, out_dir / f"report_{name}.csv", prov)
    logger.info("analyze: wrote %s", out_dir)
    return out_dir


def stage_dgp(manifest: Manifest, force: bool = False, workers: int = 1) -> Path:
    out = manifest.path("dgp")
    if out.exists() and not force:
        logger.info("dgp: %s up-to-date", out)
        return out
    space = hyperspace.load_space(manifest.path("space"))
    reports_dir = manifest.path("reports")
    reports = {}
    for path in sorted(reports_dir.glob("report_*.json")):
        name = path.stem[len("report_"):]
        if name == "nu":
            continue
        reports[name] = fanova.report_from_json(json.loads(path.read_text()))
    if not reports:
        raise ManifestError(f"no per-activity reports under {reports_dir}")
    cfg = manifest.doc["dgp"]
    model = dgp_mod.derive_dgp(reports, space, float(cfg["tau_imp"]),
                               float(cfg["tau_int"]))
    doc = dgp_mod.dgp_to_json(model)
    doc["provenance"] = manifest.provenance("dgp")
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    logger.info("dgp: wrote %s", out)
    return out


def stage_protocol(manifest: Manifest, force: bool = False, workers: int = 1) -> Path:
    out = manifest.path("metrics")
    if out.exists() and not force:
        logger.info("protocol: %s up-to-date", out)
        return out
    ds, folds = _load_frames(manifest)
    proto = manifest.doc["protocol"]
    cfg = model_config_from_json(proto.get("model") or {})
    seed = manifest.stage_seed("protocol")
    results = {}
    for mode in proto["modes"]:
        model = None
        if mode == "w-DGP":
            model = dgp_mod.load_dgp(manifest.path("dgp"))
        elif mode == "w-HExp":
            if not proto.get("hexp"):
                raise ManifestError("w-HExp mode needs a 'hexp' path")
            model = dgp_mod.load_hexp(manifest.root / proto["hexp"])
        res = learner.run_protocol(ds, folds, cfg, dgp=model, mode=mode, seed=seed,
                                   include_null=bool(proto.get("include_null")),
                                   supplement=bool(proto.get("supplement")))
        results[mode] = res.to_json()
        for fi, m in enumerate(res.per_fold):
            report.confusion_csv(m.labels, m.confusion,
                                 out.parent / f"confusion_{mode}_fold{fi}.csv",
                                 manifest.provenance("protocol"))
    doc = {"provenance": manifest.provenance("protocol"), "results": results}
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    logger.info("protocol: wrote %s", out)
    return out


def stage_report(manifest: Manifest, force: bool = False, workers: int = 1) -> Path:
    out_dir = manifest.path("report")
    done = out_dir / "summary.md"
    if done.exists() and not force:
        logger.info("report: %s up-to-date", out_dir)
        return out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    prov = manifest.provenance("report")
    rep_cfg = manifest.doc["report"]
    space = hyperspace.load_space(manifest.path("space"))
    trials = hyperspace.read_trials(manifest.path("trials"))
    overall = fanova.report_from_json(json.loads(
        (manifest.path("reports") / "report_nu.json").read_text()))
    report.importance_csv(overall, out_dir / "importance.csv", prov)

    # pairwise marginal heat maps for the named (or top) pairs
    pairs = [tuple(p) for p in rep_cfg.get("pairwise") or []]
    if not pairs:
        ranked = sorted(overall.pairwise.items(), key=lambda kv: -kv[1])
        pairs = [k for k, w in ranked[:2] if w > 0]
    if pairs:
        full = max(t.budget for t in trials)
        fr = forest.fit_forest([t for t in trials if t.budget == full], space,
                               response="nu",
                               n_trees=int(manifest.doc["analyze"]["n_trees"]),
                               max_depth=int(manifest.doc["analyze"]["max_depth"]),
                               min_leaf=int(manifest.doc["analyze"]["min_leaf"]),
                               seed=manifest.stage_seed("analyze"))
        for u, v in pairs:
            tu, tv, vals = fanova.pairwise_marginal_table(
                fr, u, v, int(rep_cfg.get("resolution", 20)))
            report.heatmap_svg(vals, out_dir / f"marginal_{u}_{v}.svg", u, v,
                               title=f"marginal nu over ({u}, {v})", provenance=prov)
            report.pairwise_grid_csv(tu, tv, vals, u, v,
                                     out_dir / f"marginal_{u}_{v}.csv", prov)
    else:
        logger.info("report: no positive pairwise terms, heat maps skipped")

    # tau sweep: subset sizes and protocol f1 per threshold
    ds, folds = _load_frames(manifest)
    reports = {}
    for path in sorted(manifest.path("reports").glob("report_*.json")):
        name = path.stem[len("report_"):]
        if name != "nu":
            reports[name] = fanova.report_from_json(json.loads(path.read_text()))
    proto_cfg = model_config_from_json(manifest.doc["protocol"].get("model") or {})
    tau_int = float(manifest.doc["dgp"]["tau_int"])
    seed = manifest.stage_seed("report")
    taus = [float(t) for t in rep_cfg["tau_sweep"]]
    rows = []
    for tau in taus:
        model = dgp_mod.derive_dgp(reports, space, tau, tau_int)
        sizes = [len(model.subsets[y]) for y in model.activities]
        res = learner.run_protocol(ds, folds, proto_cfg, dgp=model, mode="w-DGP",
                                   seed=seed)
        rows.append([tau, res.mean_f1, res.std_f1, float(np.mean(sizes))])
    report.write_csv(out_dir / "tau_sweep.csv",
                     ["tau_imp", "mean_f1", "std_f1", "mean_subset_size"],
                     rows, prov)
    report.tau_sweep_svg(taus, [r[1] for r in rows], [r[2] for r in rows],
                         [r[3] for r in rows], out_dir / "tau_sweep.svg", prov)

    metrics = json.loads(manifest.path("metrics").read_text())["results"]
    mode_lines = "\n".join(
        f"- {mode}: macro f1 {res['mean_f1']:.4f} +- {res['std_f1']:.4f}"
        for mode, res in sorted(metrics.items()))
    top = sorted(overall.individual.items(), key=lambda kv: -kv[1])[:5]
    imp_lines = "\n".join(f"- {p}: {v:.4f}" for p, v in top)
    sweep_lines = "\n".join(
        f"- tau_imp={r[0]:g}: f1 {r[1]:.4f} +- {r[2]:.4f}, mean subset size {r[3]:.2f}"
        for r in rows)
    summary = {
        "Protocol results": mode_lines,
        "Top hyperparameter importances (overall nu)": imp_lines,
        "Threshold sweep": sweep_lines,
    }
    report.summary_markdown(out_dir / "summary.md", summary, prov)
    logger.info("report: wrote %s", out_dir)
    return out_dir


STAGES: list[tuple[str, Callable[[Manifest, bool], Path]]] = [
    ("generate", stage_generate),
    ("partition", stage_partition),
    ("explore", stage_explore),
    ("analyze", stage_analyze),
    ("dgp", stage_dgp),
    ("protocol", stage_protocol),
    ("report", stage_report),
]


def run_pipeline(manifest_path: str | Path, force: bool = False,
                 workers: int = 1) -> list[Path]:
    """Run the manifest's stages in order; the first failure aborts with a
    StageError naming the stage (its partial artifacts are left in place).

    The optional manifest field "stages" (a list of stage names) toggles a
    subset on; omitted or null means every stage."""
    manifest = Manifest.load(manifest_path)
    enabled = manifest.doc.get("stages")
    if enabled is not None:
        unknown = set(enabled) - {name for name, _ in STAGES}
        if unknown:
            raise ManifestError(f"unknown stages in manifest: {sorted(unknown)}")
    artifacts = []
    for name, fn in STAGES:
        if enabled is not None and name not in enabled:
            logger.info("%s: toggled off in manifest", name)
            continue
        try:
            artifacts.append(fn(manifest, force, workers))
        except (ManifestError, hyperspace.SpaceError, learner.ConfigError,
                dgp_mod.DgpError, sensors.SensorError, sensors.IngestError,
                explorer.StrategyError, FileNotFoundError) as e:
            raise StageError(name, e) from e
    return artifacts


# ---------------------------------------------------------------------------
# bundled demo

def demo_manifest(out_dir: str | Path) -> Path:
    """Materialize the bundled demo manifest (a small planted deployment that
    the full pipeline runs end to end in seconds)."""
    from importlib import resources

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with resources.files("harvana.data").joinpath("demo_manifest.json").open() as fh:
        doc = json.load(fh)
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path
