"""Walk the saliency pipeline end to end on the striped-shape toy task.

Stages, in order:
  1. train a small model on the 2-class toy (a minute or so on CPU)
  2. compute class-activation maps for a few validation images and render
     them next to the ground-truth shape masks as ASCII heat maps
  3. apply both masking operators and check the kept-pixel bookkeeping
  4. ask the model what it thinks of its own masked inputs at several
     retention levels
  5. build one explanation-driven training batch and show how its items
     were routed (masked view kept / background negative / dropped)

Run from the repository root:

    python demos/saliency_masking_walkthrough.py
"""

import torch

from excon import (
    AugmentPolicy,
    BatchRole,
    MaskSpec,
    ModelConfig,
    TrainConfig,
    build_multiview_batch,
    compute_saliency,
    fit,
    make_synthetic_toy,
    retain_top_percent,
    top_percent_keep_mask,
)

SHADES = " .:-=+*#%@"


def ascii_map(values: torch.Tensor, cell: int = 2) -> list[str]:
    """Downsample (H, W) values in [0, 1] to H/cell rows of shade characters."""
    pooled = torch.nn.functional.avg_pool2d(values[None, None].float(), cell)[0, 0]
    idx = (pooled * (len(SHADES) - 1)).round().long().clamp(0, len(SHADES) - 1)
    return ["".join(SHADES[int(v)] for v in row) for row in idx]


def side_by_side(left: list[str], right: list[str], gap: str = "   ") -> str:
    return "\n".join(l + gap + r for l, r in zip(left, right))


def main():
    print("[1] training a small model on the striped-shape toy task")
    toy = make_synthetic_toy(num_classes=2, per_class=24, resolution=32, seed=5)
    cfg = TrainConfig(
        method="excon", epochs=25, batch_size=16, base_lr=2e-3, optimizer="adam",
        warmup_epochs=3, excon_start_epoch=8, seed=4,
    )
    policy = AugmentPolicy(
        crop_scale=(0.6, 1.0), brightness=0.2, contrast=0.2, saturation=0.2,
        hue=0.05, grayscale_prob=0.0,
    )
    model_cfg = ModelConfig(input_shape=(32, 32, 3), encoder_dim=32,
                            projection_dim=8, num_classes=2)
    result = fit(cfg, toy, model_cfg, policy=policy)
    model, val, norm = result.model, result.val_set, result.normalizer
    model.eval()
    print(f"    best val top-1 {result.best_val_top1:.3f} at epoch {result.best_epoch}")

    print("\n[2] saliency next to the ground-truth mask (left: map, right: mask)")
    with torch.no_grad():
        preds = model.logits(norm(val.images)).argmax(dim=1)
    maps = compute_saliency(model, norm(val.images), preds)
    for i in (0, len(val) // 2):
        print(f"    image {val.ids[i]}, label {int(val.labels[i])}, "
              f"predicted {int(preds[i])}")
        print(side_by_side(ascii_map(maps[i]), ascii_map(val.masks[i].float())))
        print()

    print("[3] masking operators and their bookkeeping")
    pixels = maps.shape[1] * maps.shape[2]
    for percent in (15.0, 30.0, 45.0):
        keep = top_percent_keep_mask(maps, percent)
        counts = keep.sum(dim=(1, 2))
        in_mask = (keep & val.masks).sum(dim=(1, 2)).float() / counts.float()
        print(f"    top {percent:4.1f}%: every image keeps exactly "
              f"{int(counts[0])}/{pixels} pixels "
              f"(uniform: {bool((counts == counts[0]).all())}), "
              f"{float(in_mask.mean()):.0%} of kept pixels inside the true shape")

    print("\n[4] what the model thinks of its own masked inputs")
    with torch.no_grad():
        clean = model.logits(norm(val.images)).softmax(dim=1)
    clean_conf = clean[torch.arange(len(val)), val.labels]
    print(f"    clean: acc {float((clean.argmax(1) == val.labels).float().mean()):.3f}, "
          f"mean true-class confidence {float(clean_conf.mean()):.3f}")
    for percent in (45.0, 30.0, 15.0):
        masked = retain_top_percent(val.images, maps, percent)
        with torch.no_grad():
            probs = model.logits(norm(masked)).softmax(dim=1)
        acc = float((probs.argmax(1) == val.labels).float().mean())
        conf = float(probs[torch.arange(len(val)), val.labels].mean())
        print(f"    keep {percent:4.1f}%: acc {acc:.3f}, mean true-class confidence {conf:.3f}")

    print("\n[5] routing one explanation-driven batch (threshold mask, background on)")
    batch_images, batch_labels = toy.images[:8], toy.labels[:8]
    batch = build_multiview_batch(
        batch_images, batch_labels, toy.ids[:8], model, policy,
        background_mode=True, mask_spec=MaskSpec(mode="threshold", threshold=0.5),
        normalizer=norm,
    )
    roles = {role: 0 for role in BatchRole}
    for item in batch.items:
        roles[item.role] += 1
    print(f"    branch counts: {batch.branch_counts}")
    print(f"    (a = masked view confirmed, b = misclassified -> background, "
          f"c = unconfident -> dropped)")
    for role, count in roles.items():
        print(f"    {role.value:20s} {count}")
    anchors = len(batch.anchor_items())
    print(f"    anchors {anchors} = 2 x {batch.num_originals} originals; "
          f"background {batch.num_background} extra negatives")


if __name__ == "__main__":
    main()
