# Train the four objectives on the same toy data and line the results up.
# - supcon_ori: two-stage, contrastive encoder then a frozen-encoder classifier
# - supcon:     single joint stage, no explanation machinery
# - excon:      saliency-masked views join the batch as extra positives
# - exconb:     masked views the model rejects become extra negatives
# Each method runs once into demos_out/compare/<method>; the comparison
# table refuses runs whose dataset or eval settings disagree, so every row
# is an apples-to-apples read. Expect a few minutes total on CPU.
#
#   python demos/method_comparison.py
#   python demos/method_comparison.py --epochs 12 --seed 1   # quicker, rougher

import argparse
from pathlib import Path

from excon import compare_report, parse_config_text, run_experiment

METHODS = ("supcon_ori", "supcon", "excon", "exconb")

BASE = """
method = {method}
epochs = {epochs}
batch_size = 16
base_lr = 0.002
optimizer = adam
warmup_epochs = 3
excon_start_epoch = 8
seed = {seed}

dataset.source = synthetic_toy
dataset.resolution = 32
dataset.num_classes = 2
dataset.per_class = 24
dataset.data_seed = 5

model.encoder_dim = 32
model.projection_dim = 8

augment.crop_scale = 0.6,1.0
augment.brightness = 0.2
augment.contrast = 0.2
augment.saturation = 0.2
augment.hue = 0.05
augment.grayscale_prob = 0.0

eval.retentions = 15,30
eval.budgets = 4/255,8/255
eval.num_bins = 10

output_dir = {out}/{method}
"""


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--epochs", type=int, default=25)
    parser.add_argument("--seed", type=int, default=4)
    parser.add_argument("--out", default="demos_out/compare")
    args = parser.parse_args()

    dirs = []
    for method in METHODS:
        spec = parse_config_text(BASE.format(
            method=method, epochs=args.epochs, seed=args.seed, out=args.out))
        print(f"training {method} ...", flush=True)
        dirs.append(run_experiment(spec))

    result = compare_report(dirs)
    print()
    print(result.markdown)
    report_path = Path(args.out) / "comparison.md"
    report_path.write_text(result.markdown)
    (Path(args.out) / "comparison.csv").write_text(result.csv)
    print(f"table written to {report_path} (best entry per column in bold)")


if __name__ == "__main__":
    main()
