"""The evaluation metrics, worked by hand first and then checked by code.

Three stops: the explanation drop/increase statistics on a pair you can do
in your head, expected calibration error on four predictions, and an FGSM
budget sweep on a freshly trained toy model. Run it from the repository
root with no arguments; the training stop takes about half a minute.
"""

import torch

from excon import (
    AugmentPolicy,
    ModelConfig,
    TrainConfig,
    drop_increase_stats,
    ece,
    fgsm_attack,
    fit,
    make_synthetic_toy,
    model_confidences,
    robust_accuracy,
    top1_accuracy,
    AttackConfig,
)


def stop_1_drop_increase():
    print("stop 1: drop / increase / rate on two score pairs")
    print("  image A: full-image score Y=0.80, masked score O=0.40")
    print("  image B: full-image score Y=0.50, masked score O=0.75")
    print("  drop     = mean(max(0, Y-O)/Y) = mean(0.4/0.8, 0)  = 25%")
    print("  increase = mean(max(0, O-Y)/Y) = mean(0, 0.25/0.5) = 25%")
    print("  rate     = fraction with Y > O = 1/2               = 50%")
    drop, increase, rate = drop_increase_stats([0.8, 0.5], [0.4, 0.75])
    print(f"  code says drop={drop}, increase={increase}, rate={rate}")
    assert (drop, increase, rate) == (25.0, 25.0, 50.0)


def stop_2_ece():
    print("\nstop 2: expected calibration error, 2 bins over [0, 1]")
    conf = [0.3, 0.4, 0.8, 0.9]
    correct = [1, 0, 1, 1]
    print(f"  confidences {conf}, correctness {correct}")
    print("  bin (0, 0.5]: members 0.3, 0.4 -> acc 0.5, conf 0.35, gap 0.15")
    print("  bin (0.5, 1]: members 0.8, 0.9 -> acc 1.0, conf 0.85, gap 0.15")
    print("  ece = 2/4 * 0.15 + 2/4 * 0.15 = 0.15")
    report = ece(conf, correct, num_bins=2)
    print(f"  code says {report.ece_hat}")
    assert abs(report.ece_hat - 0.15) < 1e-12

    perfect = ece([1.0] * 8, [1] * 8, num_bins=10)
    print(f"  perfectly confident and always right -> ece {perfect.ece_hat}")
    assert perfect.ece_hat == 0.0


def reliability_table(report):
    print("  bin        count  confidence  accuracy   gap")
    for m, b in enumerate(report.bins):
        lo, hi = m / report.num_bins, (m + 1) / report.num_bins
        if b["count"] == 0:
            print(f"  ({lo:.1f},{hi:.1f}]   {b['count']:4d}       empty")
            continue
        gap = abs(b["accuracy"] - b["confidence"])
        print(f"  ({lo:.1f},{hi:.1f}]   {b['count']:4d}       {b['confidence']:.3f}"
              f"       {b['accuracy']:.3f}     {gap:.3f}")


def stop_3_fgsm():
    print("\nstop 3: FGSM budget sweep on a trained toy model")
    toy = make_synthetic_toy(num_classes=2, per_class=24, resolution=32, seed=5)
    cfg = TrainConfig(method="supcon", epochs=25, batch_size=16, base_lr=2e-3,
                      optimizer="adam", warmup_epochs=3, seed=4)
    policy = AugmentPolicy(crop_scale=(0.6, 1.0), brightness=0.2, contrast=0.2,
                           saturation=0.2, hue=0.05, grayscale_prob=0.0)
    mc = ModelConfig(input_shape=(32, 32, 3), encoder_dim=32, projection_dim=8,
                     num_classes=2)
    result = fit(cfg, toy, mc, policy=policy)
    model, val, norm = result.model, result.val_set, result.normalizer
    model.eval()
    print(f"  clean val top-1 {top1_accuracy(model, val, norm):.3f}")

    # budget 0 is the identity attack; fgsm_attack accepts it, the sweep
    # config type does not (a sweep of zeros measures nothing)
    adv0 = fgsm_attack(model, val.images, val.labels, 0.0, norm)
    assert torch.equal(adv0, val.images)
    print("  budget 0/255: perturbed images identical to the originals")

    for c in (1 / 255, 2 / 255, 4 / 255, 8 / 255, 16 / 255):
        adv = fgsm_attack(model, val.images, val.labels, c, norm)
        worst = float((adv - val.images).abs().max())
        acc = robust_accuracy(model, val, norm, AttackConfig(budget=c))
        print(f"  budget {c * 255:4.0f}/255: robust top-1 {acc:.3f}, "
              f"max |x'-x| {worst:.6f} (<= {c:.6f})")
        assert worst <= c + 1e-7

    conf, correct = model_confidences(model, val, norm)
    report = ece(conf, correct, num_bins=10)
    print(f"\n  reliability table on the clean validation set (ece {report.ece_hat:.4f}):")
    reliability_table(report)


if __name__ == "__main__":
    stop_1_drop_increase()
    stop_2_ece()
    stop_3_fgsm()
