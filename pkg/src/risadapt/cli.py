"""Command line entry point: ``risadapt {scene,gen,train,adapt,dispersion,pipeline}``.

Every stage reads the files written by earlier stages from ``--out`` and
writes its own. Running the stages one by one gives byte-identical files to
``pipeline``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import adapt, dataset, neuralnet
from .dataset import ProbeSet, record_seed
from .exceptions import FormatError, InvalidArgumentError, ProbeMismatchError, RisAdaptError
from .neuralnet import TrainConfig
from .physics import FrequencyGrid, channel_dispersion
from .scene import LAYOUTS, TWO_PI, SceneSpec, canonical_angle, default_scene, random_config
from .simulator import ChannelSimulator

log = logging.getLogger("risadapt")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

FILES = {
    "config": "config.json",
    "scene": "scene.json",
    "probes": "probes.json",
    "ce_data": "ce_dataset.rscd",
    "sense_data": "sensing_dataset.rssd",
    "ce_model": "ce_model.rsnn",
    "sense_model": "sensing_model.rsnn",
    "models": "models.json",
    "instances": "instances.jsonl",
    "summary": "summary.json",
    "dispersion": "dispersion.json",
    "manifest": "manifest.json",
    "failed": "STAGE_FAILED.json",
}
PRODUCER = {"scene": "scene", "probes": "gen", "ce_data": "gen", "sense_data": "gen",
            "ce_model": "train", "sense_model": "train", "models": "train"}
FORMAT_VERSIONS = {"scene": 1, "RSCD": dataset.DATASET_VERSION, "RSSD": dataset.DATASET_VERSION,
                   "RSNN": neuralnet.MODEL_VERSION, "report": 1}

PRESETS = {
    "paper": {"n_ce": 100_000, "n_sense": 1_000},
    "desk": {"n_ce": 20_000, "n_sense": 1_000},
}


class ConfigError(RisAdaptError):
    pass


class StageError(RisAdaptError):
    def __init__(self, stage, message):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


@dataclass
class GridConfig:
    f_min: float = 0.9
    f_max: float = 1.1
    n_freq: int = 25
    f_target: float = 1.0

    def build(self) -> FrequencyGrid:
        return FrequencyGrid.uniform(self.f_min, self.f_max, self.n_freq, self.f_target)


@dataclass
class RunConfig:
    seed: int = 7
    preset: str = "desk"
    scene_seed: int | None = None
    grid: GridConfig = field(default_factory=GridConfig)
    n_ce: int = 20_000
    n_sense: int = 1_000
    n_probes: int = dataset.N_PROBES
    probe_seed: int | None = None
    ce_seed: int | None = None
    sense_seed: int | None = None
    eval_seed: int | None = None
    ce_hidden: tuple = (64, 64)
    sense_hidden: tuple = (256, 128, 26)
    ce_train: dict = field(default_factory=dict)
    sense_train: dict = field(default_factory=dict)
    feature_mode: str = "complex"
    sense_loss: str = "embedding"
    n_test: int = 100
    n_baseline: int = 500
    n_restarts: int = 50
    max_sweeps: int = 10
    dispersion_samples: int = 50

    def resolved(self) -> "RunConfig":
        """Fill unset seeds from the global seed and validate."""
        s = self.seed
        cfg = replace(
            self,
            scene_seed=s if self.scene_seed is None else self.scene_seed,
            probe_seed=record_seed(s, 3) if self.probe_seed is None else self.probe_seed,
            ce_seed=record_seed(s, 1) if self.ce_seed is None else self.ce_seed,
            sense_seed=record_seed(s, 2) if self.sense_seed is None else self.sense_seed,
            eval_seed=record_seed(s, 4) if self.eval_seed is None else self.eval_seed,
            ce_train=TrainConfig.from_dict({"seed": record_seed(s, 5) % 2**32, **self.ce_train}).to_dict(),
            sense_train=TrainConfig.from_dict({"seed": record_seed(s, 6) % 2**32, **self.sense_train}).to_dict(),
            ce_hidden=tuple(self.ce_hidden), sense_hidden=tuple(self.sense_hidden),
        )
        cfg.validate()
        return cfg

    def validate(self):
        if self.preset not in LAYOUTS:
            raise ConfigError(f"unknown preset {self.preset!r}; expected one of {sorted(LAYOUTS)}")
        for name in ("n_ce", "n_sense", "n_probes", "n_test", "n_baseline", "n_restarts",
                     "max_sweeps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.dispersion_samples < 2:
            raise ConfigError("dispersion_samples must be >= 2")
        if self.n_probes != dataset.N_PROBES:
            raise ConfigError(f"n_probes must be {dataset.N_PROBES}")
        g = self.grid
        if g.n_freq < 1 or not g.f_min < g.f_target < g.f_max:
            raise ConfigError("grid needs n_freq >= 1 and f_min < f_target < f_max")
        if self.feature_mode not in adapt.FEATURE_MODES:
            raise ConfigError(f"feature_mode must be one of {adapt.FEATURE_MODES}")
        if self.sense_loss not in adapt.SENSING_LOSSES:
            raise ConfigError(f"sense_loss must be one of {adapt.SENSING_LOSSES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ce_hidden"], d["sense_hidden"] = list(self.ce_hidden), list(self.sense_hidden)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path=None, preset=None, seed=None) -> RunConfig:
    """Preset defaults, then the JSON config file, then command-line overrides."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        if isinstance(raw.get("config"), dict):  # the config.json echo of an earlier run
            raw = raw["config"]
    name = preset or raw.get("preset", "desk")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    merged = {**PRESETS[name], **raw, "preset": name}
    if seed is not None:
        merged["seed"] = seed
    known = {f.name for f in fields(RunConfig)}
    unknown = set(merged) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    try:
        grid = GridConfig(**merged.pop("grid", {}))
        cfg = RunConfig(grid=grid, **merged)
        return cfg.resolved()
    except (TypeError, InvalidArgumentError) as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Artifact helpers


class Workspace:
    def __init__(self, out: Path, cfg: RunConfig, threads: int = 1):
        self.out = Path(out)
        self.cfg = cfg
        self.threads = max(1, int(threads))
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, key: str) -> Path:
        return self.out / FILES[key]

    def require(self, key: str, override=None) -> Path:
        p = Path(override) if override else self.path(key)
        if not p.exists():
            raise StageError("inputs", f"missing {p.name}; run the {PRODUCER.get(key, key)!r} "
                                       "stage first")
        return p

    def manifest_block(self) -> dict:
        c = self.cfg
        return {"config_sha256": c.digest(), "seed": c.seed,
                "seeds": {"scene": c.scene_seed, "probes": c.probe_seed, "ce": c.ce_seed,
                          "sensing": c.sense_seed, "eval": c.eval_seed,
                          "ce_train": c.ce_train["seed"], "sense_train": c.sense_train["seed"]},
                "preset": c.preset, "n_ce": c.n_ce, "n_sense": c.n_sense,
                "format_versions": FORMAT_VERSIONS}

    def write_json(self, key: str, obj: dict, stage: str):
        obj = {**obj, "manifest": self.manifest_block()}
        self.path(key).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
        self.register(key, stage)

    def register(self, key: str, stage: str):
        mpath = self.path("manifest")
        man = json.loads(mpath.read_text()) if mpath.exists() else {"files": {}}
        if man.get("config_sha256") not in (None, self.cfg.digest()):
            man = {"files": {}}
        man.update(self.manifest_block())
        digest = hashlib.sha256(self.path(key).read_bytes()).hexdigest()
        man["files"][FILES[key]] = {"stage": stage, "sha256": digest}
        man["files"] = dict(sorted(man["files"].items()))
        mpath.write_text(json.dumps(man, indent=1, sort_keys=True) + "\n")

    def write_config(self):
        self.write_json("config", {"config": self.cfg.to_dict()}, "config")

    def check_config(self):
        """Refuse to mix artifacts produced under another configuration."""
        p = self.path("config")
        if p.exists():
            old = json.loads(p.read_text()).get("manifest", {}).get("config_sha256")
            if old is not None and old != self.cfg.digest():
                raise ConfigError(f"{self.out} holds artifacts of a different configuration "
                                  f"(config sha256 {old[:12]}...); use another --out")

    def scene(self) -> SceneSpec:
        return SceneSpec.load(self.require("scene"))

    def grid(self) -> FrequencyGrid:
        return self.cfg.grid.build()


# ---------------------------------------------------------------------------
# Stages


def cmd_scene(ws: Workspace):
    spec = default_scene(ws.cfg.scene_seed, ws.cfg.preset)
    ws.write_config()
    spec.save(ws.path("scene"), manifest=ws.manifest_block())
    ws.register("scene", "scene")
    log.info("scene: %d dipoles (%d walls)", spec.n_dipoles, len(spec.wall_positions))
    return spec


def cmd_gen(ws: Workspace):
    cfg = ws.cfg
    spec, grid = ws.scene(), ws.grid()
    sim = ChannelSimulator(spec, grid)
    probes = ProbeSet.from_seed(cfg.probe_seed, cfg.n_probes, spec.n_bits)
    probes.save(ws.path("probes"), manifest=ws.manifest_block())
    ws.register("probes", "gen")
    t0 = time.time()
    dataset.generate_ce_dataset(spec, grid, cfg.n_ce, cfg.ce_seed, ws.path("ce_data"),
                                ws.threads, sim)
    ws.register("ce_data", "gen")
    log.info("gen: %d CE records in %.0f s", cfg.n_ce, time.time() - t0)
    t0 = time.time()
    dataset.generate_sensing_dataset(spec, grid, probes, cfg.n_sense, cfg.sense_seed,
                                     ws.path("sense_data"), ws.threads, sim)
    ws.register("sense_data", "gen")
    log.info("gen: %d sensing records in %.0f s", cfg.n_sense, time.time() - t0)


def _estimator_params(train: dict) -> dict:
    t = TrainConfig.from_dict(train)
    return {"batch_size": t.batch_size, "learning_rate": t.learning_rate, "beta1": t.beta1,
            "beta2": t.beta2, "epsilon": t.epsilon, "max_epochs": t.max_epochs,
            "patience": t.patience, "val_fraction": t.val_fraction, "random_state": t.seed}


def cmd_train(ws: Workspace, ce_path=None, sense_path=None):
    cfg = ws.cfg
    grid = ws.grid()
    try:
        ce = dataset.read_dataset(ws.require("ce_data", ce_path), expect=dataset.CE_MAGIC)
        sd = dataset.read_dataset(ws.require("sense_data", sense_path),
                                  expect=dataset.SENSING_MAGIC)
    except FormatError as exc:
        raise StageError("train", str(exc)) from exc
    if ce.n_freq != len(grid) or sd.n_freq != len(grid):
        raise StageError("train", "dataset frequency count does not match the configured grid")
    probes = ProbeSet.load(ws.require("probes"))

    t0 = time.time()
    surrogate = adapt.ChannelModel(grid.target_index, cfg.ce_hidden,
                                   **_estimator_params(cfg.ce_train))
    surrogate.fit(np.column_stack([ce.bits, ce.theta]), ce.spectra)
    log.info("train: channel model %d epochs, best val mse %.3g (%.0f s)",
             surrogate.report_.epochs_run, surrogate.report_.best_val_mse, time.time() - t0)
    t0 = time.time()
    sensor = adapt.SensingModel(probes, cfg.feature_mode, cfg.sense_loss, cfg.sense_hidden,
                                **_estimator_params(cfg.sense_train))
    sensor.fit(sd.spectra, sd.theta)
    log.info("train: sensing model %d epochs, best val loss %.3g (%.0f s)",
             sensor.report_.epochs_run, sensor.report_.best_val_mse, time.time() - t0)

    neuralnet.save_mlp(surrogate.net_, ws.path("ce_model"))
    ws.register("ce_model", "train")
    neuralnet.save_mlp(sensor.net_, ws.path("sense_model"))
    ws.register("sense_model", "train")
    ws.write_json("models", {
        "channel_model": {"target_index": grid.target_index, "hidden": list(cfg.ce_hidden),
                          "report": surrogate.report_.to_dict()},
        "sensing_model": {"probe_seed": probes.seed, "feature_mode": cfg.feature_mode,
                          "loss": cfg.sense_loss, "hidden": list(cfg.sense_hidden),
                          "report": sensor.report_.to_dict()},
    }, "train")


def load_models(ws: Workspace):
    meta = json.loads(ws.require("models").read_text())
    probes = ProbeSet.load(ws.require("probes"))
    s_meta = meta["sensing_model"]
    if s_meta["probe_seed"] != ws.cfg.probe_seed or probes.seed != ws.cfg.probe_seed:
        raise ProbeMismatchError(
            f"sensing model was trained with probe seed {s_meta['probe_seed']}, "
            f"configuration asks for probe seed {ws.cfg.probe_seed}")
    sensor = adapt.SensingModel.from_net(neuralnet.load_mlp(ws.require("sense_model")),
                                         probes, s_meta["feature_mode"])
    surrogate = adapt.ChannelModel.from_net(neuralnet.load_mlp(ws.require("ce_model")),
                                            meta["channel_model"]["target_index"])
    return sensor, surrogate


def cmd_adapt(ws: Workspace):
    cfg = ws.cfg
    spec, grid = ws.scene(), ws.grid()
    sensor, surrogate = load_models(ws)
    adapt.check_probes(sensor, ProbeSet.from_seed(cfg.probe_seed, cfg.n_probes, spec.n_bits))
    sim = ChannelSimulator(spec, grid)
    params = adapt.OptimizeParams(cfg.n_restarts, cfg.max_sweeps, 0)
    t0 = time.time()
    entries = dataset._parallel_map(
        lambda i: adapt.run_instance(sim, sensor, surrogate, i, cfg.eval_seed,
                                     cfg.n_baseline, params),
        cfg.n_test, ws.threads)
    with open(ws.path("instances"), "w") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")
    ws.register("instances", "adapt")
    summary = adapt.summarize(entries)
    ws.write_json("summary", {"summary": summary}, "adapt")
    log.info("adapt: %d instances in %.0f s; mean ratio %.3f, improved %.0f%%, "
             "mean arc error %.4f rad", cfg.n_test, time.time() - t0, summary["mean_ratio"],
             100 * summary["fraction_improved"], summary["mean_arc_error"])
    return summary


def dispersion_study(spec: SceneSpec, grid: FrequencyGrid, n_samples: int, seed: int) -> dict:
    """Spread of ``H_RX-TX`` at the target frequency under random ``C``, ``theta`` or both."""
    sim = ChannelSimulator(spec, grid)
    k = grid.target_index
    rng = dataset.record_rng(seed, 0)
    theta_fixed = canonical_angle(rng.uniform(0, TWO_PI))
    c_fixed = random_config(rng, spec.n_bits)

    def h(c, theta, state=None):
        state = state or sim.theta_state(theta, [k])
        return complex(sim.channels(state, c)[0, 0])

    joint_rng, c_rng, t_rng = (dataset.record_rng(seed, i) for i in (1, 2, 3))
    joint = [h(random_config(joint_rng, spec.n_bits), canonical_angle(joint_rng.uniform(0, TWO_PI)))
             for _ in range(n_samples)]
    state = sim.theta_state(theta_fixed, [k])
    only_c = [h(random_config(c_rng, spec.n_bits), theta_fixed, state) for _ in range(n_samples)]
    only_theta = [h(c_fixed, canonical_angle(t_rng.uniform(0, TWO_PI))) for _ in range(n_samples)]

    def pairs(v):
        return [[z.real, z.imag] for z in v]

    return {
        "n_samples": n_samples,
        "target_frequency": grid.target_frequency,
        "sigma_joint": channel_dispersion(joint),
        "sigma_config": channel_dispersion(only_c),
        "sigma_theta": channel_dispersion(only_theta),
        "fixed_theta": theta_fixed,
        "fixed_config": list(c_fixed.bits),
        "samples": {"joint": pairs(joint), "config": pairs(only_c), "theta": pairs(only_theta)},
    }


def cmd_dispersion(ws: Workspace, n_samples=None):
    n = n_samples or ws.cfg.dispersion_samples
    if n < 2:
        raise ConfigError("dispersion needs at least two samples")
    report = dispersion_study(ws.scene(), ws.grid(), n, record_seed(ws.cfg.seed, 7))
    ws.write_json("dispersion", report, "dispersion")
    log.info("dispersion: sigma_joint %.4g, sigma_config %.4g, sigma_theta %.4g",
             report["sigma_joint"], report["sigma_config"], report["sigma_theta"])
    return report


def cmd_pipeline(ws: Workspace):
    cmd_scene(ws)
    cmd_gen(ws)
    cmd_train(ws)
    return cmd_adapt(ws)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", default="run", help="artifact directory (default: ./run)")
    common.add_argument("--seed", type=int, help="global seed (unsigned 64-bit)")
    common.add_argument("--preset", choices=sorted(PRESETS), help="size preset")
    common.add_argument("--threads", type=int, default=1, help="worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="risadapt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("scene", parents=[common], help="build the scene geometry")
    sub.add_parser("gen", parents=[common], help="simulate both training datasets")
    t = sub.add_parser("train", parents=[common], help="train the channel and sensing models")
    t.add_argument("--ce-data", help="channel dataset (default: <out>/ce_dataset.rscd)")
    t.add_argument("--sense-data", help="sensing dataset (default: <out>/sensing_dataset.rssd)")
    sub.add_parser("adapt", parents=[common], help="run sense-and-optimize on test instances")
    d = sub.add_parser("dispersion", parents=[common], help="channel spread study")
    d.add_argument("--samples", type=int, help="samples per study (default from config)")
    sub.add_parser("pipeline", parents=[common], help="scene, gen, train and adapt in one go")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        log.error("config error: --seed must be an unsigned 64-bit integer")
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.preset, args.seed)
        ws = Workspace(Path(args.out), cfg, args.threads)
        if args.command != "pipeline":
            ws.check_config()
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG

    stage = args.command
    marker = ws.path("failed")
    try:
        if stage == "scene":
            cmd_scene(ws)
        elif stage == "gen":
            cmd_gen(ws)
        elif stage == "train":
            cmd_train(ws, args.ce_data, args.sense_data)
        elif stage == "adapt":
            cmd_adapt(ws)
        elif stage == "dispersion":
            cmd_dispersion(ws, args.samples)
        else:
            cmd_pipeline(ws)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (RisAdaptError, OSError, ValueError) as exc:
        failed = getattr(exc, "stage", stage)
        marker.write_text(json.dumps({"stage": failed, "command": stage,
                                      "error": f"{type(exc).__name__}: {exc}"}, indent=1) + "\n")
        log.error("%s failed: %s", stage, exc)
        return EXIT_STAGE
    if marker.exists():
        marker.unlink()
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
