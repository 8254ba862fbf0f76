"""Command-line front end.

Subcommands: train, eval, explain, embed, compare, make-toy. Exit codes:
0 success, 2 configuration error (bad keys, missing files, malformed
values), 1 runtime failure. EXCON_SEED in the environment overrides the
configured seed for ``train``.
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .data import DatasetSpec, make_synthetic_toy, save_toy_dataset
from .errors import ConfigurationError, ExConError
from .evaluation import export_embeddings
from .experiment import (
    METRIC_GROUPS,
    EvalConfig,
    compare_report,
    evaluate_model,
    load_config,
    reopen_run,
    run_experiment,
)
from .explain import gradcam_batch, mask_below_threshold, normalize_upsample, retain_top_percent

logger = logging.getLogger(__name__)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="excon",
        description="Explanation-driven contrastive training and evaluation.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run an experiment from a config file")
    p.add_argument("--config", required=True, help="key = value config file")

    p = sub.add_parser("eval", help="recompute metrics for a finished run")
    p.add_argument("--checkpoint", required=True, help="run directory")
    p.add_argument("--metrics", default="all",
                   help="all or comma list of acc,xq,fgsm,ece")
    p.add_argument("--out", default=None, help="optional path for the metrics JSON")

    p = sub.add_parser("explain", help="saliency map and masked variants for one image")
    p.add_argument("--checkpoint", required=True, help="run directory")
    p.add_argument("--image", required=True, help="image file (decoded, resized to model input)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--target", default=None, type=int,
                   help="class index to explain (default: predicted class)")

    p = sub.add_parser("embed", help="export projection-space embeddings as CSV")
    p.add_argument("--checkpoint", required=True, help="run directory")
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--which", default="z", choices=("r", "z"),
                   help="encoder representation r or projection z")

    p = sub.add_parser("compare", help="metric table across runs")
    p.add_argument("dirs", nargs="+", help="run directories")
    p.add_argument("--out", default=None, help="directory for compare.md / compare.csv")

    p = sub.add_parser("make-toy", help="materialize a synthetic toy dataset")
    p.add_argument("--classes", required=True, type=int)
    p.add_argument("--per-class", required=True, type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", default=64, type=int)
    p.add_argument("--seed", default=0, type=int)
    return parser


def _overrides_from(extra: list) -> dict:
    """Turn leftover ``--key value`` pairs into a config override mapping."""
    overrides = {}
    i = 0
    while i < len(extra):
        flag = extra[i]
        if not flag.startswith("--") or len(flag) == 2:
            raise ConfigurationError(f"expected --key value overrides, got {flag!r}")
        if "=" in flag:
            key, _, value = flag[2:].partition("=")
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigurationError(f"override {flag!r} is missing a value")
            key, value = flag[2:], extra[i + 1]
            i += 2
        overrides[key] = value
    return overrides


def _cmd_train(args, extra) -> int:
    spec = load_config(args.config, overrides=_overrides_from(extra))
    out_dir = run_experiment(spec)
    report = json.loads((out_dir / "metrics.json").read_text())
    print(f"run written to {out_dir}")
    val = report["metrics"].get("val_top1")
    if val is not None:
        print(f"best epoch {report['best_epoch']}, val top-1 {val:.4f}")
    return 0


def _metric_selection(text: str) -> tuple:
    text = text.strip().lower()
    if text == "all":
        return METRIC_GROUPS
    groups = tuple(part.strip() for part in text.split(",") if part.strip())
    unknown = [g for g in groups if g not in METRIC_GROUPS]
    if unknown or not groups:
        raise ConfigurationError(
            f"--metrics must be 'all' or a comma list of {METRIC_GROUPS}, got {text!r}"
        )
    return groups


def _cmd_eval(args, extra) -> int:
    _reject_extra(extra)
    run, spec, model, normalizer, train_set, val_set = reopen_run(args.checkpoint)
    eval_cfg = dataclasses.replace(spec.eval, metrics=_metric_selection(args.metrics))
    metrics = evaluate_model(model, train_set, val_set, normalizer, eval_cfg)
    payload = json.dumps(metrics, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(payload + "\n")
        print(f"metrics written to {args.out}")
    else:
        print(payload)
    return 0


def _load_image(path: Path, resolution: int) -> torch.Tensor:
    from PIL import Image

    if not path.is_file():
        raise ConfigurationError(f"image not found: {path}")
    with Image.open(path) as img:
        img = img.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
        array = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(array).permute(2, 0, 1)


def _cmd_explain(args, extra) -> int:
    _reject_extra(extra)
    run, spec, model, normalizer, _, _ = reopen_run(args.checkpoint)
    height = model.config.input_shape[0]
    image = _load_image(Path(args.image), height)
    model_in = normalizer(image.unsqueeze(0))
    with torch.no_grad():
        probs = torch.softmax(model.logits(model_in), dim=1)[0]
    target = int(probs.argmax()) if args.target is None else args.target
    if not 0 <= target < model.config.num_classes:
        raise ConfigurationError(
            f"--target {target} out of range for {model.config.num_classes} classes"
        )

    raw = gradcam_batch(model, model_in, torch.tensor([target]))[0]
    saliency = normalize_upsample(raw, image.shape[-2:], target_class=target,
                                  example_id=Path(args.image).name)
    out_dir = Path(args.out)
    from .explain import export_saliency

    paths = export_saliency(saliency, out_dir, "saliency")
    from PIL import Image

    def save_rgb(tensor: torch.Tensor, name: str):
        array = np.round(tensor.clamp(0, 1).permute(1, 2, 0).numpy() * 255).astype(np.uint8)
        Image.fromarray(array).save(out_dir / name)

    save_rgb(image, "input.png")
    save_rgb(mask_below_threshold(image, saliency.values, threshold=0.5), "masked_threshold.png")
    for percent in spec.eval.retentions:
        save_rgb(retain_top_percent(image, saliency.values, percent),
                 f"retained_{int(percent)}.png")
    print(f"target class {target} (score {probs[target]:.4f})")
    print(f"saliency and masked previews written to {out_dir}")
    for kind, path in paths.items():
        logger.info("wrote %s: %s", kind, path)
    return 0


def _cmd_embed(args, extra) -> int:
    _reject_extra(extra)
    run, spec, model, normalizer, train_set, val_set = reopen_run(args.checkpoint)
    dataset = train_set if args.split == "train" else val_set
    out = export_embeddings(model, dataset, args.out, which=args.which, normalizer=normalizer)
    print(f"{len(dataset)} embeddings written to {out}")
    return 0


def _cmd_compare(args, extra) -> int:
    _reject_extra(extra)
    result = compare_report(args.dirs)
    print(result.markdown, end="")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "compare.md").write_text(result.markdown)
        (out_dir / "compare.csv").write_text(result.csv)
        print(f"table written to {out_dir}/compare.md and compare.csv")
    return 0


def _cmd_make_toy(args, extra) -> int:
    _reject_extra(extra)
    dataset = make_synthetic_toy(args.classes, args.per_class, args.resolution, args.seed)
    spec = DatasetSpec(
        source="synthetic_toy", num_classes=args.classes, per_class=args.per_class,
        resolution=args.resolution, data_seed=args.seed,
    )
    out = save_toy_dataset(dataset, spec, args.out)
    print(f"{len(dataset)} images ({args.classes} classes) written to {out}")
    return 0


def _reject_extra(extra: list):
    if extra:
        raise ConfigurationError(f"unrecognized arguments: {' '.join(extra)}")


_HANDLERS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "explain": _cmd_explain,
    "embed": _cmd_embed,
    "compare": _cmd_compare,
    "make-toy": _cmd_make_toy,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _HANDLERS[args.command](args, extra)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ExConError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        logger.exception("unhandled failure")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
