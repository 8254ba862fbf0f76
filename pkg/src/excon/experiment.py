"""Experiment orchestration: flat-text configs, run directories, reports.

A run directory is self-describing. ``config.txt`` holds every setting as
``key = value`` lines and parses back to the exact same experiment, so a
rerun from the snapshot is bit-identical. Alongside it the run writes
``epochs.csv`` / ``epochs.jsonl`` (training curves), ``checkpoint.npz``
(best-validation weights), ``normalizer.json`` (train-split channel
stats), ``metrics.json`` (schema ``excon-metrics-v1``, deterministically
serialized), and ``metrics.csv``.

Config grammar: bare keys configure training (``epochs = 40``), dotted
prefixes route to the other blocks (``model.encoder_dim``,
``dataset.per_class``, ``augment.flip_prob``, ``eval.budgets``), and
``output_dir`` names the run directory. Floats accept fraction syntax
(``8/255``). The EXCON_SEED environment variable, when set, overrides the
seed after all other sources.
"""

import dataclasses
import hashlib
import json
import logging
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .augment import AugmentPolicy
from .data import ArrayDataset, DatasetSpec, Normalizer, load_dataset, split_train_val
from .errors import ConfigurationError
from .evaluation import (
    AttackConfig,
    ece,
    explanation_quality,
    model_confidences,
    robust_accuracy,
    top1_accuracy,
)
from .models import ModelConfig, load_checkpoint, save_checkpoint
from .training import FitResult, TrainConfig, fit

logger = logging.getLogger(__name__)

METRICS_SCHEMA = "excon-metrics-v1"
METRIC_GROUPS = ("acc", "xq", "fgsm", "ece")


@dataclass
class EvalConfig:
    """Which metric groups to compute and their knobs."""

    metrics: tuple[str, ...] = METRIC_GROUPS
    retentions: tuple[float, ...] = (15.0, 30.0, 45.0)
    budgets: tuple[float, ...] = (4 / 255, 8 / 255)
    num_bins: int = 10
    use_sign: bool = True
    xq_target: str = "predicted"

    def __post_init__(self):
        self.metrics = tuple(self.metrics)
        unknown = [m for m in self.metrics if m not in METRIC_GROUPS]
        if unknown:
            raise ConfigurationError(f"unknown metric group(s) {unknown}, expected subset of {METRIC_GROUPS}")
        if not self.metrics:
            raise ConfigurationError("eval.metrics must name at least one metric group")
        self.retentions = tuple(float(p) for p in self.retentions)
        self.budgets = tuple(float(b) for b in self.budgets)
        if any(not 0 < p <= 100 for p in self.retentions):
            raise ConfigurationError(f"retentions must lie in (0, 100], got {self.retentions}")
        if any(b <= 0 for b in self.budgets):
            raise ConfigurationError(f"budgets must be positive, got {self.budgets}")
        if self.num_bins < 1:
            raise ConfigurationError(f"eval.num_bins must be >= 1, got {self.num_bins}")
        if self.xq_target not in ("predicted", "true"):
            raise ConfigurationError(f"eval.xq_target must be 'predicted' or 'true', got {self.xq_target!r}")


@dataclass
class ExperimentSpec:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig | None = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    augment: AugmentPolicy | None = None
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/run"

    def resolved_model(self) -> ModelConfig:
        """Model config with shape/classes filled in from the dataset."""
        if self.model is not None:
            return self.model
        return ModelConfig(
            input_shape=(self.dataset.resolution, self.dataset.resolution, 3),
            num_classes=self.dataset.num_classes,
        )


_PREFIX_TO_CLS = {
    "model": ModelConfig,
    "dataset": DatasetSpec,
    "augment": AugmentPolicy,
    "eval": EvalConfig,
}


def _parse_scalar(text: str, target_type):
    text = text.strip()
    if target_type is bool:
        lowered = text.lower()
        if lowered in ("true", "yes", "1"):
            return True
        if lowered in ("false", "no", "0"):
            return False
        raise ValueError(f"expected true/false, got {text!r}")
    if target_type is int:
        return int(text)
    if target_type is float:
        if "/" in text:
            num, den = text.split("/", 1)
            return float(num) / float(den)
        return float(text)
    if target_type is str:
        return text
    raise ValueError(f"unsupported value type {target_type}")


def _parse_value(text: str, annotation):
    text = text.strip()
    if isinstance(annotation, types.UnionType):
        members = [a for a in typing.get_args(annotation) if a is not type(None)]
        if text.lower() in ("none", "null"):
            return None
        return _parse_value(text, members[0])
    origin = typing.get_origin(annotation)
    if origin is tuple or annotation is tuple:
        args = [a for a in typing.get_args(annotation) if a is not Ellipsis]
        if not text:
            return ()
        parts = [p for p in text.split(",") if p.strip()]
        if args and args[0] is str:
            return tuple(p.strip() for p in parts)
        elem = args[0] if args else float
        return tuple(_parse_scalar(p, elem) for p in parts)
    return _parse_scalar(text, annotation)


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _field_map(cls) -> dict:
    return {f.name: f for f in dataclasses.fields(cls) if f.init}


def parse_config_pairs(pairs: dict, env: dict | None = None) -> ExperimentSpec:
    """Build an ExperimentSpec from a flat {key: string-value} mapping.

    Unknown keys are rejected with the offending name before any compute.
    """
    env = os.environ if env is None else env
    buckets: dict[str, dict] = {name: {} for name in _PREFIX_TO_CLS}
    train_kwargs: dict = {}
    output_dir = None
    train_fields = _field_map(TrainConfig)

    for raw_key, raw_value in pairs.items():
        key = raw_key.strip()
        value = str(raw_value).strip()
        if key == "output_dir":
            output_dir = value
            continue
        if "." in key:
            prefix, _, name = key.partition(".")
            if prefix not in _PREFIX_TO_CLS:
                raise ConfigurationError(f"unknown config section {prefix!r} in key {key!r}")
            fields = _field_map(_PREFIX_TO_CLS[prefix])
            if name not in fields:
                raise ConfigurationError(f"unknown config key {key!r}")
            try:
                buckets[prefix][name] = _parse_value(value, fields[name].type)
            except (ValueError, TypeError) as exc:
                raise ConfigurationError(f"bad value for {key!r}: {exc}") from exc
            continue
        if key not in train_fields:
            raise ConfigurationError(f"unknown config key {key!r}")
        try:
            train_kwargs[key] = _parse_value(value, train_fields[key].type)
        except (ValueError, TypeError) as exc:
            raise ConfigurationError(f"bad value for {key!r}: {exc}") from exc

    seed_override = env.get("EXCON_SEED")
    if seed_override is not None:
        try:
            train_kwargs["seed"] = int(seed_override)
        except ValueError as exc:
            raise ConfigurationError(f"EXCON_SEED must be an integer, got {seed_override!r}") from exc

    try:
        dataset = DatasetSpec(**buckets["dataset"])
        train = TrainConfig(**train_kwargs)
        augment = AugmentPolicy(**buckets["augment"]) if buckets["augment"] else None
        eval_cfg = EvalConfig(**buckets["eval"])
        model_kwargs = buckets["model"]
        if model_kwargs:
            model_kwargs.setdefault(
                "input_shape", (dataset.resolution, dataset.resolution, 3)
            )
            model_kwargs.setdefault("num_classes", dataset.num_classes)
            model = ModelConfig(**model_kwargs)
        else:
            model = None
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc

    spec = ExperimentSpec(train=train, model=model, dataset=dataset,
                          augment=augment, eval=eval_cfg)
    if output_dir is not None:
        spec.output_dir = output_dir
    return spec


def parse_config_text(text: str, overrides: dict | None = None, env: dict | None = None) -> ExperimentSpec:
    """Parse ``key = value`` lines (# comments, blank lines allowed)."""
    pairs: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"config line {lineno} is not 'key = value': {line!r}")
        key, _, value = stripped.partition("=")
        pairs[key.strip()] = value.strip()
    if overrides:
        for key, value in overrides.items():
            pairs[str(key)] = str(value)
    return parse_config_pairs(pairs, env=env)


def load_config(path, overrides: dict | None = None, env: dict | None = None) -> ExperimentSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), overrides=overrides, env=env)


def config_text(spec: ExperimentSpec) -> str:
    """Canonical snapshot; ``parse_config_text`` inverts it exactly."""
    lines = []
    for f in dataclasses.fields(TrainConfig):
        if f.init:
            lines.append(f"{f.name} = {_format_value(getattr(spec.train, f.name))}")
    model = spec.resolved_model()
    sections = [("model", model), ("dataset", spec.dataset),
                ("augment", spec.augment), ("eval", spec.eval)]
    for prefix, obj in sections:
        if obj is None:
            continue
        for f in dataclasses.fields(type(obj)):
            if f.init:
                lines.append(f"{prefix}.{f.name} = {_format_value(getattr(obj, f.name))}")
    lines.append(f"output_dir = {spec.output_dir}")
    return "\n".join(lines) + "\n"


def _budget_label(budget: float) -> str:
    scaled = budget * 255.0
    if abs(scaled - round(scaled)) < 1e-9:
        return f"{int(round(scaled))}/255"
    return repr(budget)


def _retention_label(percent: float) -> str:
    return str(int(percent)) if float(percent).is_integer() else repr(percent)


def evaluate_model(
    model,
    train_set: ArrayDataset,
    val_set: ArrayDataset,
    normalizer: Normalizer,
    eval_cfg: EvalConfig,
) -> dict:
    """Metric groups requested by ``eval_cfg``, as a plain nested dict."""
    out: dict = {}
    if "acc" in eval_cfg.metrics:
        out["train_top1"] = top1_accuracy(model, train_set, normalizer)
        out["val_top1"] = top1_accuracy(model, val_set, normalizer)
    if "xq" in eval_cfg.metrics:
        xq = {}
        for p in eval_cfg.retentions:
            report = explanation_quality(
                model, val_set, normalizer, percent=p, target=eval_cfg.xq_target,
            )
            xq[_retention_label(p)] = {
                "average_drop_pct": report.average_drop_pct,
                "average_increase_pct": report.average_increase_pct,
                "rate_of_drop_pct": report.rate_of_drop_pct,
                "examples_evaluated": report.examples_evaluated,
                "examples_excluded": report.examples_excluded,
            }
        out["explanation_quality"] = xq
    if "fgsm" in eval_cfg.metrics:
        out["robust_top1"] = {
            _budget_label(b): robust_accuracy(
                model, val_set, normalizer,
                AttackConfig(budget=b, use_sign=eval_cfg.use_sign),
            )
            for b in eval_cfg.budgets
        }
    if "ece" in eval_cfg.metrics:
        conf, correct = model_confidences(model, val_set, normalizer)
        report = ece(conf, correct, num_bins=eval_cfg.num_bins)
        out["calibration"] = {
            "ece": report.ece_hat,
            "num_bins": report.num_bins,
            "bins": report.bins,
        }
    return out


_EPOCH_COLUMNS = (
    "epoch", "phase", "lr", "encoder_loss_mean", "encoder_loss_std",
    "classifier_loss", "val_top1", "branch_a", "branch_b", "branch_c",
    "background_total", "skipped_batches",
)


def _write_epoch_logs(logs, out_dir: Path):
    rows = [dataclasses.asdict(log) for log in logs]
    csv_lines = [",".join(_EPOCH_COLUMNS)]
    for row in rows:
        csv_lines.append(",".join(
            "" if row[c] is None else _format_value(row[c]) for c in _EPOCH_COLUMNS
        ))
    (out_dir / "epochs.csv").write_text("\n".join(csv_lines) + "\n")
    jsonl = "".join(json.dumps(row, sort_keys=True) + "\n" for row in rows)
    (out_dir / "epochs.jsonl").write_text(jsonl)


def build_metrics_report(spec: ExperimentSpec, result: FitResult, metrics: dict) -> dict:
    snapshot = config_text(spec)
    return {
        "schema": METRICS_SCHEMA,
        "method": spec.train.method,
        "seed": spec.train.seed,
        "config_sha256": hashlib.sha256(snapshot.encode()).hexdigest(),
        "best_epoch": result.best_epoch,
        "best_val_top1": result.best_val_top1,
        "epochs_run": len(result.logs),
        "train_examples": len(result.train_set),
        "val_examples": len(result.val_set),
        "metrics": metrics,
    }


def _flatten_metrics(metrics: dict) -> list:
    flat = []
    for key in ("train_top1", "val_top1"):
        if key in metrics:
            flat.append((key, metrics[key]))
    for label, entry in metrics.get("explanation_quality", {}).items():
        flat.append((f"drop@{label}", entry["average_drop_pct"]))
        flat.append((f"incr@{label}", entry["average_increase_pct"]))
        flat.append((f"rate@{label}", entry["rate_of_drop_pct"]))
    for label, value in metrics.get("robust_top1", {}).items():
        flat.append((f"robust@{label}", value))
    if "calibration" in metrics:
        flat.append(("ece", metrics["calibration"]["ece"]))
    return flat


def run_experiment(spec: ExperimentSpec, explainer=None) -> Path:
    """Train per ``spec`` and populate ``spec.output_dir``; returns the dir."""
    out_dir = Path(spec.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config_text(spec))

    dataset = load_dataset(spec.dataset)
    result = fit(spec.train, dataset, spec.resolved_model(),
                 policy=spec.augment, explainer=explainer)

    _write_epoch_logs(result.logs, out_dir)
    save_checkpoint(result.model, out_dir / "checkpoint.npz")
    (out_dir / "normalizer.json").write_text(json.dumps({
        "mean": [float(v) for v in result.normalizer.mean],
        "std": [float(v) for v in result.normalizer.std],
    }, sort_keys=True, indent=2) + "\n")

    metrics = evaluate_model(result.model, result.train_set, result.val_set,
                             result.normalizer, spec.eval)
    report = build_metrics_report(spec, result, metrics)
    (out_dir / "metrics.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n"
    )
    csv_lines = ["metric,value"] + [
        f"{name},{_format_value(value)}" for name, value in _flatten_metrics(metrics)
    ]
    (out_dir / "metrics.csv").write_text("\n".join(csv_lines) + "\n")
    logger.info("run complete: %s", out_dir)
    return out_dir


@dataclass
class RunArtifacts:
    """Lazy view over a finished run directory."""

    path: Path

    def __post_init__(self):
        self.path = Path(self.path)
        for name in ("config.txt", "metrics.json", "checkpoint.npz", "normalizer.json"):
            if not (self.path / name).is_file():
                raise ConfigurationError(f"{self.path} is not a run directory (missing {name})")

    def spec(self, env: dict | None = None) -> ExperimentSpec:
        # Snapshot seeds win over the ambient environment unless asked for.
        return parse_config_text((self.path / "config.txt").read_text(), env=env or {})

    def report(self) -> dict:
        return json.loads((self.path / "metrics.json").read_text())

    def model(self):
        return load_checkpoint(self.path / "checkpoint.npz")

    def normalizer(self) -> Normalizer:
        stats = json.loads((self.path / "normalizer.json").read_text())
        return Normalizer(
            mean=torch.tensor(stats["mean"], dtype=torch.float32),
            std=torch.tensor(stats["std"], dtype=torch.float32),
        )


def reopen_run(run_dir):
    """(run, spec, model, normalizer, train_set, val_set) for a finished run.

    The split is rebuilt from the snapshot seed, so it matches what training
    used; the normalizer comes from the persisted stats.
    """
    from .seeding import SeedStreams

    run = RunArtifacts(run_dir)
    spec = run.spec()
    dataset = load_dataset(spec.dataset)
    streams = SeedStreams(spec.train.seed)
    train_set, val_set = split_train_val(
        dataset, spec.train.val_fraction, streams.torch_gen("split")
    )
    return run, spec, run.model(), run.normalizer(), train_set, val_set


def _shared_section_pairs(spec: ExperimentSpec, prefixes=("dataset", "eval")) -> dict:
    pairs = {}
    objects = {"dataset": spec.dataset, "eval": spec.eval}
    for prefix in prefixes:
        obj = objects[prefix]
        for f in dataclasses.fields(type(obj)):
            if f.init:
                pairs[f"{prefix}.{f.name}"] = _format_value(getattr(obj, f.name))
    return pairs


# Whether a larger value wins the per-column highlight in compare tables.
_HIGHER_IS_BETTER = {
    "train_top1": True, "val_top1": True, "ece": False,
    "drop": False, "incr": True, "rate": False, "robust": True,
}


def _column_direction(name: str) -> bool:
    base = name.split("@", 1)[0]
    return _HIGHER_IS_BETTER.get(base, True)


@dataclass
class CompareResult:
    columns: list
    rows: list
    markdown: str
    csv: str


def compare_report(run_dirs) -> CompareResult:
    """Metric table across runs, one row each; refuses incomparable runs.

    Runs must share dataset and eval settings; on mismatch the error lists
    each differing key with both values. The markdown table bolds the best
    entry per metric column (direction-aware); the CSV is unadorned.
    """
    runs = [RunArtifacts(d) for d in run_dirs]
    if not runs:
        raise ConfigurationError("compare needs at least one run directory")
    reference = _shared_section_pairs(runs[0].spec())
    for run in runs[1:]:
        other = _shared_section_pairs(run.spec())
        diffs = [
            f"{key}: {reference[key]} vs {other[key]}"
            for key in sorted(reference)
            if reference[key] != other.get(key)
        ]
        if diffs:
            raise ConfigurationError(
                "runs are not comparable, dataset/eval settings differ:\n  "
                + "\n  ".join(diffs)
            )

    reports = [run.report() for run in runs]
    flat = [dict(_flatten_metrics(rep["metrics"])) for rep in reports]
    columns = [name for name, _ in _flatten_metrics(reports[0]["metrics"])]

    rows = []
    for run, rep, values in zip(runs, reports, flat):
        rows.append({
            "run": run.path.name,
            "method": rep["method"],
            "seed": rep["seed"],
            **{c: values.get(c) for c in columns},
        })

    best: dict = {}
    for col in columns:
        present = [r[col] for r in rows if r[col] is not None]
        if present:
            best[col] = max(present) if _column_direction(col) else min(present)

    def fmt(value, col=None, bold=False):
        if value is None:
            return ""
        text = f"{value:.4f}" if isinstance(value, float) else str(value)
        return f"**{text}**" if bold else text

    header = ["run", "method", "seed"] + columns
    md_lines = ["| " + " | ".join(header) + " |",
                "| " + " | ".join("---" for _ in header) + " |"]
    for row in rows:
        cells = [str(row["run"]), str(row["method"]), str(row["seed"])]
        for col in columns:
            value = row[col]
            is_best = col in best and value is not None and value == best[col]
            cells.append(fmt(value, col, bold=is_best))
        md_lines.append("| " + " | ".join(cells) + " |")
    markdown = "\n".join(md_lines) + "\n"

    csv_lines = [",".join(header)]
    for row in rows:
        cells = [str(row["run"]), str(row["method"]), str(row["seed"])]
        cells += ["" if row[c] is None else _format_value(row[c]) for c in columns]
        csv_lines.append(",".join(cells))
    csv = "\n".join(csv_lines) + "\n"
    return CompareResult(columns=columns, rows=rows, markdown=markdown, csv=csv)
