"""Single command-line entry point driving the full pipeline.

Subcommands compose in a fixed order: gen-data, train-local, train-global,
train-gate, calibrate-gate, evaluate, report; project and grad-check stand
alone. Each one reads a JSON run configuration, prints the resolved
configuration and seed, and fails fast with a declared exit code when a
prerequisite artifact is missing.

Exit codes: 0 success, 2 configuration error, 3 data or artifact error,
4 numerical failure. Every failure prints one line to stderr of the form
``nuclass: error code=<n> kind=<kind>: <message>``.

Every artifact embeds a schema version, the hash of the resolved
configuration, and the root seed. Reports carry no timestamps, so a rerun
with the same inputs reproduces them byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (
    ConfigError,
    FormatError,
    Taxonomy,
    complementary_benchmark_config,
    generate,
    hard_class_config,
    load_records,
    save_records,
    split_dataset,
)
from .gate import (
    load_calibration,
    safe_calibrate,
    safe_decide,
    save_calibration,
    select_thresholds,
)
from .metrics import (
    build_report,
    report_from_json_dict,
    report_to_csv,
    report_to_json,
    report_to_markdown,
)
from .projection import (
    BUILTIN_COHORTS,
    ProjectionError,
    cohort_matrix,
    load_projection,
    project,
    project_labels,
)
from .training import (
    NumericalError,
    ablation_plan,
    desk_plan,
    gate_from_checkpoint,
    gate_values,
    global_from_checkpoint,
    load_checkpoint,
    local_from_checkpoint,
    paper_plan,
    plan_from_dict,
    plan_to_dict,
    predict_global,
    predict_local,
    save_checkpoint,
    train_gate,
    train_global,
    train_local,
)

REPORT_SCHEMA = "nuclass-report/1"
PROJECT_SCHEMA = "nuclass-projected/1"
MODES = ("gate", "safe", "local", "global")
SYNTH_PRESETS = {
    "benchmark": complementary_benchmark_config,
    "hard": hard_class_config,
}
PLAN_PRESETS = {"desk": desk_plan, "paper": paper_plan}
DEMO_PROBS = (0.10, 0.15, 0.35, 0.25, 0.15)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class CliError(Exception):
    """Carries the declared exit code and a one-line reason."""

    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind


def config_error(message: str) -> CliError:
    return CliError(EXIT_CONFIG, "config", message)


def data_error(message: str) -> CliError:
    return CliError(EXIT_DATA, "data", message)


# ---------------------------------------------------------------------------
# run configuration


CONFIG_KEYS = {
    "data", "data_format", "taxonomy", "checkpoint_dir", "report_dir",
    "cohorts", "plans", "seed", "mode", "split", "synth", "model",
    "bootstrap_b", "heads_only_unfreeze",
}
MODEL_KEYS = {
    "local_hidden", "global_hidden", "d_tissue", "film_hidden",
    "global_d_proj", "gate_d_proj", "gate_hidden", "smoothing",
}


@dataclass
class RunConfig:
    """Resolved run settings: file layout, plans, seed, deployment mode."""

    base: Path
    data: str = "data.ndjson"
    data_format: str = "ndjson"
    taxonomy: str | None = None
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"
    cohorts: dict = field(default_factory=dict)
    plans: dict = field(default_factory=dict)
    seed: int = 0
    mode: str = "gate"
    split: tuple = (0.7, 0.15, 0.15)
    synth: dict = field(default_factory=lambda: {"preset": "benchmark"})
    model: dict = field(default_factory=dict)
    bootstrap_b: int = 1000
    heads_only_unfreeze: bool = False

    def path(self, name: str) -> Path:
        return (self.base / name).resolve()

    @property
    def data_path(self) -> Path:
        return self.path(self.data)

    def checkpoint(self, stage: str) -> Path:
        return self.path(self.checkpoint_dir) / f"{stage}.json"

    def report_path(self, name: str) -> Path:
        return self.path(self.report_dir) / name

    def plan(self, stage: str):
        spec_value = self.plans.get(stage, "desk")
        if isinstance(spec_value, str):
            if spec_value == "ablation":
                if stage != "gate":
                    raise config_error("the ablation plan applies to the gate stage only")
                plan = ablation_plan()
            elif spec_value in PLAN_PRESETS:
                plan = PLAN_PRESETS[spec_value](stage)
            else:
                raise config_error(
                    f"unknown plan preset {spec_value!r} for stage {stage!r}")
        elif isinstance(spec_value, dict):
            doc = dict(spec_value)
            doc.setdefault("stage", stage)
            try:
                plan = plan_from_dict(doc)
            except (KeyError, TypeError, ValueError) as e:
                raise config_error(f"bad plan for stage {stage!r}: {e}") from None
            if plan.stage != stage:
                raise config_error(
                    f"plan stage {plan.stage!r} does not match {stage!r}")
        else:
            raise config_error(f"plan for stage {stage!r} must be a name or an object")
        if stage == "gate" and self.heads_only_unfreeze:
            plan = replace(plan, unfreeze_groups=("heads",))
        try:
            plan.validate()
        except ValueError as e:
            raise config_error(f"invalid plan for stage {stage!r}: {e}") from None
        return plan

    def to_dict(self) -> dict:
        return {
            "data": self.data,
            "data_format": self.data_format,
            "taxonomy": self.taxonomy,
            "checkpoint_dir": self.checkpoint_dir,
            "report_dir": self.report_dir,
            "cohorts": dict(sorted(self.cohorts.items())),
            "plans": {k: self.plans[k] for k in sorted(self.plans)},
            "seed": self.seed,
            "mode": self.mode,
            "split": list(self.split),
            "synth": dict(sorted(self.synth.items())),
            "model": dict(sorted(self.model.items())),
            "bootstrap_b": self.bootstrap_b,
            "heads_only_unfreeze": self.heads_only_unfreeze,
        }


def config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def load_config(path: str | None, seed: int | None, mode: str | None) -> RunConfig:
    """Read and validate the config file; --seed and --mode override it."""
    if path is None:
        doc: dict = {}
        base = Path.cwd()
    else:
        p = Path(path)
        if not p.is_file():
            raise config_error(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise config_error(f"config is not valid JSON: {p}:{e.lineno}: {e.msg}")
        if not isinstance(doc, dict):
            raise config_error("config root must be a JSON object")
        base = p.resolve().parent

    unknown = set(doc) - CONFIG_KEYS
    if unknown:
        raise config_error(f"unknown config keys: {', '.join(sorted(unknown))}")
    cfg = RunConfig(base=base)
    for key in CONFIG_KEYS:
        if key in doc:
            setattr(cfg, key, doc[key])
    if seed is not None:
        cfg.seed = seed
    if mode is not None:
        cfg.mode = mode

    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
        raise config_error("seed must be an integer")
    if cfg.mode not in MODES:
        raise config_error(f"mode must be one of {', '.join(MODES)}; got {cfg.mode!r}")
    if cfg.data_format not in ("ndjson", "csv"):
        raise config_error(f"data_format must be ndjson or csv; got {cfg.data_format!r}")
    if cfg.data_format == "csv" and cfg.taxonomy is None:
        raise config_error("csv data requires a taxonomy file")
    split = tuple(cfg.split)
    if len(split) != 3 or any(not isinstance(f, (int, float)) for f in split):
        raise config_error("split must be three fractions")
    if abs(sum(split) - 1.0) > 1e-9 or any(f < 0 for f in split):
        raise config_error("split fractions must be nonnegative and sum to 1")
    cfg.split = split
    if not isinstance(cfg.cohorts, dict):
        raise config_error("cohorts must map cohort names to projection files")
    if not isinstance(cfg.synth, dict) or "preset" not in cfg.synth:
        raise config_error("synth must be an object with a preset")
    if cfg.synth["preset"] not in SYNTH_PRESETS:
        raise config_error(
            f"unknown synth preset {cfg.synth['preset']!r}; "
            f"choose from {', '.join(sorted(SYNTH_PRESETS))}")
    if not isinstance(cfg.model, dict):
        raise config_error("model must be an object")
    bad_model = set(cfg.model) - MODEL_KEYS
    if bad_model:
        raise config_error(f"unknown model keys: {', '.join(sorted(bad_model))}")
    if not isinstance(cfg.bootstrap_b, int) or cfg.bootstrap_b < 1:
        raise config_error("bootstrap_b must be a positive integer")
    if not isinstance(cfg.plans, dict):
        raise config_error("plans must map stage names to plan names or objects")
    bad_plans = set(cfg.plans) - {"local", "global", "gate"}
    if bad_plans:
        raise config_error(f"unknown plan stages: {', '.join(sorted(bad_plans))}")

    # every file the config references must exist before any work starts
    if cfg.taxonomy is not None and not cfg.path(cfg.taxonomy).is_file():
        raise data_error(f"taxonomy file not found: {cfg.path(cfg.taxonomy)}")
    for name, rel in sorted(cfg.cohorts.items()):
        if not cfg.path(rel).is_file():
            raise data_error(
                f"projection file for cohort {name!r} not found: {cfg.path(rel)}")
    return cfg


def announce(command: str, cfg: RunConfig) -> str:
    h = config_hash(cfg)
    print(f"nuclass {command} seed={cfg.seed} mode={cfg.mode} config_hash={h}")
    print("resolved-config: "
          + json.dumps(cfg.to_dict(), sort_keys=True, separators=(", ", ": ")))
    return h


def write_artifact(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# shared loading steps


def load_dataset(cfg: RunConfig):
    if not cfg.data_path.is_file():
        raise data_error(f"data file not found: {cfg.data_path}; run gen-data first")
    taxonomy = None
    if cfg.taxonomy is not None:
        try:
            tdoc = json.loads(cfg.path(cfg.taxonomy).read_text())
            taxonomy = Taxonomy(tuple(tdoc["classes"]), tuple(tdoc["tissues"]))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise data_error(f"bad taxonomy file {cfg.path(cfg.taxonomy)}: {e}")
    try:
        return load_records(cfg.data_path, fmt=cfg.data_format, taxonomy=taxonomy)
    except (FormatError, ValueError) as e:
        raise data_error(str(e))


def load_stage_checkpoint(cfg: RunConfig, stage: str, needed_by: str):
    path = cfg.checkpoint(stage)
    if not path.is_file():
        raise data_error(
            f"{stage} checkpoint not found: {path}; run train-{stage} before {needed_by}")
    try:
        return load_checkpoint(str(path))
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise data_error(f"unreadable {stage} checkpoint {path}: {e}")


def splits(cfg: RunConfig, ds):
    parts = split_dataset(ds, fractions=cfg.split, seed=cfg.seed)
    return ds.subset(parts.train), ds.subset(parts.val), ds.subset(parts.test)


def write_training_log(cfg: RunConfig, stage: str, log: list, info: dict,
                       h: str) -> Path:
    path = cfg.report_path(f"train-{stage}.log.ndjson")
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"schema": "nuclass-trainlog/1", "stage": stage,
              "config_hash": h, "seed": cfg.seed, "summary": info}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(entry, sort_keys=True) for entry in log]
    path.write_text("\n".join(lines) + "\n")
    return path


def model_kwargs(cfg: RunConfig, names: dict) -> dict:
    return {arg: cfg.model[key] for key, arg in names.items() if key in cfg.model}


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.seed, None)
    h = announce("gen-data", cfg)
    preset = SYNTH_PRESETS[cfg.synth["preset"]]
    kwargs = {k: v for k, v in cfg.synth.items() if k != "preset"}
    try:
        synth_cfg = preset(seed=cfg.seed, **kwargs)
        ds = generate(synth_cfg)
    except (TypeError, ConfigError) as e:
        raise config_error(f"bad synth settings: {e}") from None
    out = Path(args.out).resolve() if args.out else cfg.data_path
    out.parent.mkdir(parents=True, exist_ok=True)
    save_records(ds, out, fmt="ndjson",
                 meta={"config_hash": h, "seed": cfg.seed})
    print(f"wrote {len(ds)} records over {ds.taxonomy.n_classes} classes to {out}")
    return 0


def cmd_train_local(args) -> int:
    cfg = load_config(args.config, args.seed, None)
    h = announce("train-local", cfg)
    ds = load_dataset(cfg)
    train, val, _ = splits(cfg, ds)
    plan = cfg.plan("local")
    kwargs = model_kwargs(cfg, {"local_hidden": "hidden", "d_tissue": "d_tissue",
                                "film_hidden": "film_hidden",
                                "smoothing": "smoothing"})
    model, log, info = train_local(train, val, plan, cfg.seed, **kwargs)
    ck = cfg.checkpoint("local")
    ck.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(str(ck), "local", model, ds.taxonomy, cfg.seed,
                    config_hash=h, extra={"training": info})
    log_path = write_training_log(cfg, "local", log, info, h)
    print(f"best val macro-F1 {info['best_val_macro_f1']:.4f} "
          f"at step {info['best_step']}; checkpoint {ck}; log {log_path}")
    return 0


def cmd_train_global(args) -> int:
    cfg = load_config(args.config, args.seed, None)
    h = announce("train-global", cfg)
    ds = load_dataset(cfg)
    train, val, _ = splits(cfg, ds)
    local = local_from_checkpoint(load_stage_checkpoint(cfg, "local", "train-global"))
    plan = cfg.plan("global")
    kwargs = model_kwargs(cfg, {"global_d_proj": "d_proj", "global_hidden": "hidden",
                                "d_tissue": "d_tissue", "film_hidden": "film_hidden",
                                "smoothing": "smoothing"})
    model, log, info = train_global(train, val, plan, cfg.seed, local, **kwargs)
    ck = cfg.checkpoint("global")
    ck.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(str(ck), "global", model, ds.taxonomy, cfg.seed,
                    config_hash=h, extra={"training": info})
    log_path = write_training_log(cfg, "global", log, info, h)
    print(f"best val macro-F1 {info['best_val_macro_f1']:.4f} "
          f"at step {info['best_step']}; checkpoint {ck}; log {log_path}")
    return 0


def cmd_train_gate(args) -> int:
    cfg = load_config(args.config, args.seed, None)
    h = announce("train-gate", cfg)
    ds = load_dataset(cfg)
    train, val, _ = splits(cfg, ds)
    local = local_from_checkpoint(load_stage_checkpoint(cfg, "local", "train-gate"))
    glob = global_from_checkpoint(load_stage_checkpoint(cfg, "global", "train-gate"))
    plan = cfg.plan("gate")
    kwargs = model_kwargs(cfg, {"gate_d_proj": "d_proj", "smoothing": "smoothing"})
    if "gate_hidden" in cfg.model:
        kwargs["hidden"] = tuple(cfg.model["gate_hidden"])
    gate, log, info = train_gate(train, val, plan, cfg.seed, local, glob, **kwargs)
    ck = cfg.checkpoint("gate")
    ck.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(str(ck), "gate", gate, ds.taxonomy, cfg.seed,
                    config_hash=h, extra={"training": info})
    if plan.unfreeze_after_warmup:
        save_checkpoint(str(cfg.checkpoint("local")), "local", local, ds.taxonomy,
                        cfg.seed, config_hash=h, extra={"refined_by": "train-gate"})
        save_checkpoint(str(cfg.checkpoint("global")), "global", glob, ds.taxonomy,
                        cfg.seed, config_hash=h, extra={"refined_by": "train-gate"})
    log_path = write_training_log(cfg, "gate", log, info, h)
    print(f"best val macro-F1 {info['best_val_macro_f1']:.4f} "
          f"at step {info['best_step']}; checkpoint {ck}; log {log_path}")
    return 0


def load_models(cfg: RunConfig, command: str, mode: str):
    """The checkpoints a deployment mode needs, failing fast on gaps."""
    local = glob = gate = None
    if mode in ("local", "gate", "safe"):
        local = local_from_checkpoint(load_stage_checkpoint(cfg, "local", command))
    if mode in ("global", "gate", "safe"):
        glob = global_from_checkpoint(load_stage_checkpoint(cfg, "global", command))
    if mode in ("gate", "safe"):
        gate = gate_from_checkpoint(load_stage_checkpoint(cfg, "gate", command))
    return local, glob, gate


def cmd_calibrate_gate(args) -> int:
    cfg = load_config(args.config, args.seed, None)
    h = announce("calibrate-gate", cfg)
    ds = load_dataset(cfg)
    _, val, _ = splits(cfg, ds)
    local, glob, gate = load_models(cfg, "calibrate-gate", "safe")
    _, g, p_l, p_g = gate_values(gate, local, glob, val)
    calib = safe_calibrate(p_l, p_g, val.labels, ds.taxonomy.classes)
    calib = select_thresholds(p_l, p_g, g, val.labels, calib)
    out = Path(args.out).resolve() if args.out else cfg.report_path("calibration.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_calibration(calib, out, extra={"config_hash": h, "seed": cfg.seed})
    vm = calib.val_metrics
    print(f"calibrated tau={calib.tau} gamma_gap={calib.gamma_gap} "
          f"val_accuracy_safe={vm['val_accuracy_safe']:.4f} "
          f"constraint_met={vm['constraint_met']}; wrote {out}")
    return 0


def mode_probabilities(cfg: RunConfig, command: str, mode: str, ds_eval):
    """Test-set probability matrix for a deployment mode."""
    local, glob, gate = load_models(cfg, command, mode)
    if mode == "local":
        return predict_local(local, ds_eval)
    if mode == "global":
        return predict_global(glob, ds_eval)
    p_mix, g, p_l, p_g = gate_values(gate, local, glob, ds_eval)
    if mode == "gate":
        return p_mix
    calib_path = cfg.report_path("calibration.json")
    if not calib_path.is_file():
        raise data_error(
            f"calibration not found: {calib_path}; run calibrate-gate before {command}")
    try:
        calib = load_calibration(calib_path)
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise data_error(f"unreadable calibration {calib_path}: {e}")
    return safe_decide(p_l, p_g, g, calib).dist


def resolve_cohort(cfg: RunConfig, name: str):
    if name in cfg.cohorts:
        try:
            return load_projection(cfg.path(cfg.cohorts[name]))
        except (ProjectionError, json.JSONDecodeError, OSError) as e:
            raise data_error(f"bad projection file for cohort {name!r}: {e}")
    if name in BUILTIN_COHORTS:
        return cohort_matrix(name)
    raise config_error(
        f"unknown cohort {name!r}; config defines "
        f"{sorted(cfg.cohorts) or 'none'} and built-ins are {list(BUILTIN_COHORTS)}")


def report_name(mode: str, cohort: str | None) -> str:
    return f"report-{mode}{'-' + cohort if cohort else ''}.json"


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, args.seed, args.mode)
    h = announce("evaluate", cfg)
    ds = load_dataset(cfg)
    _, _, test = splits(cfg, ds)
    if len(test) == 0:
        raise data_error("test split is empty; adjust split fractions")
    p = mode_probabilities(cfg, "evaluate", cfg.mode, test)
    y = test.labels
    class_names = list(ds.taxonomy.classes)

    cohort = args.cohort
    if cohort is not None:
        matrix = resolve_cohort(cfg, cohort)
        if tuple(matrix.train_classes) != tuple(class_names):
            raise config_error(
                f"cohort {cohort!r} maps classes {list(matrix.train_classes)} "
                f"but the data has {class_names}")
        p = project(p, matrix).p_eval
        y = project_labels(y, matrix)
        class_names = list(matrix.eval_classes)

    try:
        report = build_report(p, y, class_names, b=cfg.bootstrap_b, seed=cfg.seed)
    except ValueError as e:
        raise data_error(str(e))
    report.extra = {"schema": REPORT_SCHEMA, "config_hash": h, "seed": cfg.seed,
                    "mode": cfg.mode, "cohort": cohort}
    text = report_to_json(report)
    out = Path(args.out).resolve() if args.out else cfg.report_path(
        report_name(cfg.mode, cohort))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    if args.format == "md":
        print(report_to_markdown(report), end="")
    elif args.format == "csv":
        print(report_to_csv(report), end="")
    ci_acc = report.ci.get("accuracy")
    ci_note = f" ci_accuracy={ci_acc[0]:.4f} ({ci_acc[1]:.4f}, {ci_acc[2]:.4f})" \
        if ci_acc else ""
    print(f"n={report.n_samples} accuracy={report.accuracy:.4f} "
          f"macro_f1={report.macro_f1:.4f}{ci_note}; wrote {out}")
    return 0


def cmd_project(args) -> int:
    cfg = load_config(args.config, args.seed, None)
    h = announce("project", cfg)
    cohort = args.cohort or "demo_merge"
    matrix = resolve_cohort(cfg, cohort)
    if args.probs is not None:
        try:
            p_train = np.array([float(v) for v in args.probs.split(",")])
        except ValueError:
            raise config_error("--probs must be a comma-separated list of numbers")
    else:
        p_train = np.array(DEMO_PROBS)
    if p_train.size != matrix.n_train:
        raise config_error(
            f"--probs has {p_train.size} entries, cohort {cohort!r} "
            f"expects {matrix.n_train}")
    if np.any(p_train < 0) or abs(p_train.sum() - 1.0) > 1e-6:
        raise config_error("--probs must be a probability distribution")
    try:
        result = project(p_train, matrix)
    except ProjectionError as e:
        raise data_error(str(e))
    print("[" + ", ".join(f"{v:.2f}" for v in result.p_eval) + "]")
    print(f"cohort={cohort} dropped_mass={result.dropped_mass:.4f} "
          f"renormalized={result.renormalized}")
    if args.out:
        write_artifact(Path(args.out).resolve(), {
            "schema": PROJECT_SCHEMA, "config_hash": h, "seed": cfg.seed,
            "cohort": cohort,
            "train_classes": list(matrix.train_classes),
            "eval_classes": list(matrix.eval_classes),
            "p_train": [float(v) for v in p_train],
            "p_eval": [float(v) for v in result.p_eval],
            "dropped_mass": float(result.dropped_mass),
        })
    return 0


def cmd_report(args) -> int:
    cfg = load_config(args.config, args.seed, args.mode)
    announce("report", cfg)
    src = cfg.report_path(report_name(cfg.mode, args.cohort))
    if not src.is_file():
        raise data_error(f"report not found: {src}; run evaluate first")
    text = src.read_text()
    try:
        doc = json.loads(text)
        report = report_from_json_dict(doc)
    except (json.JSONDecodeError, ValueError, KeyError, TypeError) as e:
        raise data_error(f"unreadable report {src}: {e}")
    if args.format == "md":
        rendered = report_to_markdown(report)
    elif args.format == "csv":
        rendered = report_to_csv(report)
    else:
        rendered = text
    if args.out:
        out = Path(args.out).resolve()
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(rendered)
        print(f"wrote {out}")
    else:
        print(rendered, end="")
    return 0


def cmd_grad_check(args) -> int:
    cfg = load_config(args.config, args.seed, None)
    announce("grad-check", cfg)
    from .checks import gradient_suite

    checks, failures = gradient_suite(seed=cfg.seed)
    for line in failures:
        print(f"FAIL {line}")
    if failures:
        raise CliError(EXIT_NUMERIC, "numerical",
                       f"{len(failures)} of {checks} gradient checks failed")
    print(f"all {checks} gradient checks passed")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nuclass",
        description="Tissue-conditioned two-expert cell classification pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode=False, cohort=False, out=False, fmt=False):
        p.add_argument("--config", help="JSON run configuration file")
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        if mode:
            p.add_argument("--mode", choices=MODES,
                           help="deployment mode (overrides the config)")
        if cohort:
            p.add_argument("--cohort", help="evaluation cohort name")
        if out:
            p.add_argument("--out", help="output file (overrides the default path)")
        if fmt:
            p.add_argument("--format", choices=("json", "csv", "md"),
                           default="json", help="rendering format")

    p = sub.add_parser("gen-data", help="generate the synthetic feature dataset")
    common(p, out=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-local", help="train the tissue-conditioned local expert")
    common(p)
    p.set_defaults(fn=cmd_train_local)

    p = sub.add_parser("train-global", help="train the context-fused global expert")
    common(p)
    p.set_defaults(fn=cmd_train_global)

    p = sub.add_parser("train-gate", help="train the fusion gate over frozen experts")
    common(p)
    p.set_defaults(fn=cmd_train_gate)

    p = sub.add_parser("calibrate-gate",
                       help="grid-search safe-mode thresholds on validation data")
    common(p, out=True)
    p.set_defaults(fn=cmd_calibrate_gate)

    p = sub.add_parser("evaluate", help="score the test split and write a report")
    common(p, mode=True, cohort=True, out=True, fmt=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("project",
                       help="project a probability vector into a cohort label space")
    common(p, cohort=True, out=True)
    p.add_argument("--probs", help="comma-separated training-space probabilities")
    p.set_defaults(fn=cmd_project)

    p = sub.add_parser("report", help="re-render a finished evaluation report")
    common(p, mode=True, cohort=True, out=True, fmt=True)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("grad-check", help="finite-difference audit of all gradients")
    common(p)
    p.set_defaults(fn=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on bad flags, which matches the config-error code,
        # but normalize the return value instead of letting SystemExit escape
        return int(e.code or 0)
    try:
        return args.fn(args)
    except CliError as e:
        print(f"nuclass: error code={e.code} kind={e.kind}: {e}", file=sys.stderr)
        return e.code
    except NumericalError as e:
        print(f"nuclass: error code={EXIT_NUMERIC} kind=numerical: {e}",
              file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError,) as e:
        print(f"nuclass: error code={EXIT_CONFIG} kind=config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as e:
        print(f"nuclass: error code={EXIT_DATA} kind=data: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
