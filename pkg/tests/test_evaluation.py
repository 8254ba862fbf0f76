"""Accuracy, explanation-quality, FGSM robustness, calibration, and export."""

import logging
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from excon import (
    ArrayDataset,
    AttackConfig,
    CalibrationReport,
    ConfigurationError,
    ContractViolation,
    ece,
    ExplanationQualityReport,
    explanation_quality,
    export_embeddings,
    fgsm_attack,
    model_confidences,
    robust_accuracy,
    top1_accuracy,
)
from excon.evaluation import drop_increase_stats
from oracles import drop_increase_oracle, ece_oracle


class _PixelCodeStub(torch.nn.Module):
    """Predicts the class painted into the image's mean intensity.

    Logits carry a zero-coefficient term in the input so FGSM can ask for an
    input gradient; that gradient is exactly zero everywhere.
    """

    def __init__(self, num_classes: int):
        super().__init__()
        self.num_classes = num_classes

    def logits(self, images: torch.Tensor) -> torch.Tensor:
        flat = images.flatten(1).sum(dim=1, keepdim=True) * 0.0
        mean = images.detach().mean(dim=(1, 2, 3))
        cls = (mean * self.num_classes).long().clamp(0, self.num_classes - 1)
        return flat + F.one_hot(cls, self.num_classes).float() * 9.0


class _ConstantClassStub(torch.nn.Module):
    """Always predicts one class, with a fixed confidence profile."""

    def __init__(self, num_classes: int, cls: int = 0, scale: float = 5.0):
        super().__init__()
        self.num_classes = num_classes
        self.cls = cls
        self.scale = scale

    def logits(self, images: torch.Tensor) -> torch.Tensor:
        out = torch.zeros(images.shape[0], self.num_classes)
        out[:, self.cls] = self.scale
        return out


def code_dataset(labels, num_classes: int, resolution: int = 8) -> ArrayDataset:
    """Constant images whose mean intensity encodes the class index."""
    images = torch.stack(
        [torch.full((3, resolution, resolution), (l + 0.5) / num_classes) for l in labels]
    )
    return ArrayDataset(
        images=images,
        labels=torch.tensor(labels),
        ids=[f"code/{i}" for i in range(len(labels))],
    )


class TestTop1Accuracy:
    def test_oracle_stub_scores_one(self):
        ds = code_dataset([0, 1, 2, 0, 1, 2], num_classes=3)
        assert top1_accuracy(_PixelCodeStub(3), ds) == 1.0

    def test_constant_stub_scores_chance_on_balanced_data(self):
        for k in (2, 4):
            ds = code_dataset(list(range(k)) * 6, num_classes=k)
            assert top1_accuracy(_ConstantClassStub(k, cls=0), ds) == pytest.approx(1 / k)

    def test_three_of_four_correct(self):
        ds = code_dataset([0, 1, 0, 1], num_classes=2)
        # Flip one true label so the content-reading stub misses exactly it.
        ds = ArrayDataset(
            images=ds.images, labels=torch.tensor([0, 1, 0, 0]), ids=ds.ids
        )
        assert top1_accuracy(_PixelCodeStub(2), ds) == 0.75

    def test_batching_does_not_change_the_answer(self):
        ds = code_dataset([0, 1, 1, 0, 1, 0, 0], num_classes=2)
        full = top1_accuracy(_PixelCodeStub(2), ds, batch_size=256)
        chunked = top1_accuracy(_PixelCodeStub(2), ds, batch_size=3)
        assert full == chunked

    def test_empty_dataset_rejected(self):
        empty = ArrayDataset(
            images=torch.zeros(0, 3, 8, 8), labels=torch.zeros(0, dtype=torch.long), ids=[]
        )
        with pytest.raises(ValueError):
            top1_accuracy(_PixelCodeStub(2), empty)

    def test_trained_model_reproduces_logged_val_accuracy(self, trained_toy):
        acc = top1_accuracy(trained_toy.model, trained_toy.val_set, trained_toy.normalizer)
        assert acc == pytest.approx(trained_toy.best_val_top1)


class TestDropIncreaseStats:
    def test_hand_example_is_exact(self):
        drop, increase, rate = drop_increase_stats([0.8, 0.5], [0.4, 0.75])
        assert drop == 25.0
        assert increase == 25.0
        assert rate == 50.0

    def test_hand_example_matches_oracle(self):
        pairs = [(0.8, 0.4), (0.5, 0.75)]
        stats = drop_increase_stats([y for y, _ in pairs], [o for _, o in pairs])
        assert stats == pytest.approx(drop_increase_oracle(pairs), abs=1e-12)

    def test_scores_all_rising_give_zero_drop_and_rate(self):
        drop, increase, rate = drop_increase_stats([0.2, 0.5, 0.4], [0.3, 0.9, 0.41])
        assert drop == 0.0
        assert rate == 0.0
        assert increase > 0.0

    def test_unchanged_scores_give_all_zero(self):
        assert drop_increase_stats([0.3, 0.6], [0.3, 0.6]) == (0.0, 0.0, 0.0)

    def test_nonpositive_full_score_rejected(self):
        with pytest.raises(ValueError):
            drop_increase_stats([0.5, 0.0], [0.1, 0.1])
        with pytest.raises(ValueError):
            drop_increase_stats([-0.1], [0.1])

    def test_empty_and_mismatched_rejected(self):
        with pytest.raises(ValueError):
            drop_increase_stats([], [])
        with pytest.raises(ValueError):
            drop_increase_stats([0.5, 0.5], [0.5])

    def test_each_example_contributes_to_at_most_one_side(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            y = float(rng.uniform(0.05, 1.0))
            o = float(rng.uniform(0.0, 1.0))
            drop, increase, _ = drop_increase_stats([y], [o])
            assert drop == 0.0 or increase == 0.0

    @given(
        pairs=st.lists(
            st.tuples(
                st.floats(min_value=0.01, max_value=1.0),
                st.floats(min_value=0.0, max_value=1.0),
            ),
            min_size=1,
            max_size=30,
        )
    )
    @settings(max_examples=60, deadline=None)
    def test_matches_oracle_and_bounds(self, pairs):
        drop, increase, rate = drop_increase_stats(
            [y for y, _ in pairs], [o for _, o in pairs]
        )
        expected = drop_increase_oracle(pairs)
        assert (drop, increase, rate) == pytest.approx(expected, abs=1e-9)
        assert drop >= 0.0 and increase >= 0.0
        assert 0.0 <= rate <= 100.0


def uniform_explainer(model, images, targets):
    return torch.ones(images.shape[0], images.shape[2], images.shape[3])


class TestExplanationQuality:
    def test_full_retention_changes_nothing(self, tiny_model, toy_small):
        ds = toy_small.subset(range(6))
        report = explanation_quality(tiny_model, ds, percent=100.0)
        assert isinstance(report, ExplanationQualityReport)
        assert report.retention_percent == 100.0
        assert report.average_drop_pct == 0.0
        assert report.average_increase_pct == 0.0
        assert report.rate_of_drop_pct == 0.0
        assert report.examples_evaluated == 6
        assert report.examples_excluded == 0

    def test_zero_score_examples_excluded_with_warning(self, caplog):
        class _Saturated(torch.nn.Module):
            def logits(self, images):
                out = torch.zeros(images.shape[0], 2)
                out[:, 1] = 800.0  # class-0 softmax underflows to exactly 0
                return out

        ds = code_dataset([0, 0, 1, 1], num_classes=2)
        with caplog.at_level(logging.WARNING):
            report = explanation_quality(
                _Saturated(), ds, target="true", explainer=uniform_explainer
            )
        assert report.examples_excluded == 2
        assert report.examples_evaluated == 2
        assert any("excluded 2" in rec.message for rec in caplog.records)

    def test_unknown_target_rejected(self, tiny_model, toy_small):
        with pytest.raises(ConfigurationError):
            explanation_quality(tiny_model, toy_small, target="argmax")

    def test_empty_dataset_rejected(self, tiny_model):
        empty = ArrayDataset(
            images=torch.zeros(0, 3, 32, 32), labels=torch.zeros(0, dtype=torch.long), ids=[]
        )
        with pytest.raises(ValueError):
            explanation_quality(tiny_model, empty)

    def test_trained_model_drops_when_salient_pixels_removed(self, trained_toy):
        report = explanation_quality(
            trained_toy.model,
            trained_toy.val_set,
            trained_toy.normalizer,
            percent=15.0,
        )
        assert report.examples_evaluated == len(trained_toy.val_set)
        assert 0.0 <= report.average_drop_pct <= 100.0
        assert report.average_increase_pct >= 0.0
        assert 0.0 <= report.rate_of_drop_pct <= 100.0

    def test_true_target_scores_the_true_label(self, caplog):
        class _WrongWay(torch.nn.Module):
            """Confident, always wrong: true-class scores are small but positive."""

            def logits(self, images):
                out = torch.zeros(images.shape[0], 2)
                out[:, 1] = 3.0
                return out

        ds = code_dataset([0, 0, 0, 0], num_classes=2)
        report = explanation_quality(
            _WrongWay(), ds, target="true", explainer=uniform_explainer
        )
        # Constant logits: masking cannot move the score, so nothing drops.
        assert report.average_drop_pct == 0.0
        assert report.examples_excluded == 0


class TestFgsmAttack:
    def test_perturbation_respects_max_norm_budget(self, tiny_model, rng):
        images = torch.tensor(
            rng.uniform(0.3, 0.7, size=(5, 3, 32, 32)), dtype=torch.float32
        )
        labels = torch.tensor([0, 1, 2, 0, 1])
        for budget in (4 / 255, 8 / 255):
            adv = fgsm_attack(tiny_model, images, labels, budget)
            delta = (adv - images).abs()
            assert float(delta.max()) <= budget + 1e-7
            # Interior pixels with nonzero gradient move by exactly the budget.
            assert float(delta.max()) == pytest.approx(budget, rel=1e-5)
            assert float(adv.min()) >= 0.0 and float(adv.max()) <= 1.0

    def test_zero_budget_is_identity(self, tiny_model, rng):
        images = torch.tensor(rng.uniform(size=(3, 3, 32, 32)), dtype=torch.float32)
        labels = torch.tensor([0, 1, 2])
        adv = fgsm_attack(tiny_model, images, labels, 0.0)
        assert torch.equal(adv, images)

    def test_negative_budget_rejected(self, tiny_model):
        with pytest.raises(ConfigurationError):
            fgsm_attack(
                tiny_model, torch.zeros(1, 3, 32, 32), torch.tensor([0]), -0.1
            )

    def test_raw_gradient_variant_matches_manual_autograd(self, tiny_model, rng):
        images = torch.tensor(rng.uniform(size=(4, 3, 32, 32)), dtype=torch.float32)
        labels = torch.tensor([0, 1, 2, 0])
        budget = 0.3
        adv = fgsm_attack(tiny_model, images, labels, budget, use_sign=False)

        x = images.clone().requires_grad_(True)
        loss = F.cross_entropy(tiny_model.logits(x), labels, reduction="sum")
        grad = torch.autograd.grad(loss, x)[0]
        expected = (images + budget * grad).clamp(0.0, 1.0)
        assert torch.allclose(adv, expected, atol=1e-6)

    def test_zero_gradient_examples_left_unperturbed_and_logged(self, caplog):
        ds = code_dataset([0, 1, 0], num_classes=2)
        with caplog.at_level(logging.INFO):
            adv = fgsm_attack(_PixelCodeStub(2), ds.images, ds.labels, 8 / 255)
        assert torch.equal(adv, ds.images)
        assert any("left unperturbed" in rec.message for rec in caplog.records)

    def test_attack_config_validation(self):
        cfg = AttackConfig(budget=4 / 255)
        assert cfg.use_sign is True
        with pytest.raises(ConfigurationError):
            AttackConfig(budget=0.0)
        with pytest.raises(ConfigurationError):
            AttackConfig(budget=-1.0)


class TestRobustAccuracy:
    def test_input_blind_oracle_keeps_clean_accuracy(self):
        ds = code_dataset([0, 1, 0, 1, 1, 0], num_classes=2)
        model = _PixelCodeStub(2)
        clean = top1_accuracy(model, ds)
        robust = robust_accuracy(model, ds, attack=AttackConfig(budget=8 / 255))
        assert clean == robust == 1.0

    def test_random_weight_model_stays_near_chance(self, tiny_config):
        from excon import ModelConfig, build_model, make_synthetic_toy

        cfg = ModelConfig(
            input_shape=(32, 32, 3), encoder_dim=32, projection_dim=8, num_classes=2
        )
        model = build_model(cfg, seed=123)
        ds = make_synthetic_toy(2, 50, 32, seed=9)
        acc = robust_accuracy(model, ds, attack=AttackConfig(budget=8 / 255))
        n = len(ds)
        assert abs(acc - 0.5) <= 3.0 / math.sqrt(n)

    def test_monotone_in_budget_on_trained_model(self, trained_toy):
        model, val, norm = trained_toy.model, trained_toy.val_set, trained_toy.normalizer
        clean = top1_accuracy(model, val, norm)
        rob4 = robust_accuracy(model, val, norm, AttackConfig(budget=4 / 255))
        rob8 = robust_accuracy(model, val, norm, AttackConfig(budget=8 / 255))
        assert rob8 <= rob4 <= clean

    def test_small_step_raises_loss_on_most_examples(self, trained_toy):
        model, val, norm = trained_toy.model, trained_toy.val_set, trained_toy.normalizer
        adv = fgsm_attack(model, val.images, val.labels, 1 / 255, norm)
        with torch.no_grad():
            before = F.cross_entropy(
                model.logits(norm(val.images)), val.labels, reduction="none"
            )
            after = F.cross_entropy(
                model.logits(norm(adv)), val.labels, reduction="none"
            )
        raised = (after >= before - 1e-9).float().mean()
        assert float(raised) >= 0.9

    def test_empty_dataset_rejected(self, tiny_model):
        empty = ArrayDataset(
            images=torch.zeros(0, 3, 32, 32), labels=torch.zeros(0, dtype=torch.long), ids=[]
        )
        with pytest.raises(ValueError):
            robust_accuracy(tiny_model, empty)


class TestEce:
    def test_perfectly_calibrated_perfectly_confident(self):
        report = ece([1.0] * 8, [1] * 8, num_bins=10)
        assert report.ece_hat == 0.0

    def test_single_bin_matched_confidence(self):
        conf = [0.7] * 10
        correct = [1] * 7 + [0] * 3
        report = ece(conf, correct, num_bins=1)
        assert report.ece_hat == pytest.approx(0.0, abs=1e-12)
        assert report.bins[0]["count"] == 10

    def test_two_bin_hand_example(self):
        conf = [0.3, 0.4, 0.8, 0.9]
        correct = [1, 0, 1, 1]
        report = ece(conf, correct, num_bins=2)
        assert report.ece_hat == pytest.approx(0.15, abs=1e-12)
        assert report.ece_hat == pytest.approx(ece_oracle(conf, correct, 2), abs=1e-15)
        assert [b["count"] for b in report.bins] == [2, 2]
        assert report.bins[0]["accuracy"] == pytest.approx(0.5)
        assert report.bins[1]["accuracy"] == pytest.approx(1.0)
        assert report.bins[0]["confidence"] == pytest.approx(0.35)
        assert report.bins[1]["confidence"] == pytest.approx(0.85)

    def test_bins_are_right_inclusive_with_zero_in_first(self):
        report = ece([0.0, 0.5, 1.0], [1, 1, 1], num_bins=2)
        assert [b["count"] for b in report.bins] == [2, 1]

    def test_bin_counts_partition_the_sample(self, rng):
        conf = rng.uniform(size=37)
        correct = rng.integers(0, 2, size=37)
        report = ece(conf, correct, num_bins=10)
        assert report.total == 37
        assert isinstance(report, CalibrationReport)

    def test_permutation_invariant(self, rng):
        conf = rng.uniform(size=25)
        correct = rng.integers(0, 2, size=25)
        base = ece(conf, correct, num_bins=7).ece_hat
        perm = rng.permutation(25)
        shuffled = ece(conf[perm], correct[perm], num_bins=7).ece_hat
        assert shuffled == pytest.approx(base, abs=1e-12)

    def test_degenerate_bins_recover_mean_absolute_gap(self, rng):
        n = 12
        conf = rng.uniform(0.01, 0.99, size=n)
        correct = rng.integers(0, 2, size=n).astype(float)
        report = ece(conf, correct, num_bins=10 * n)
        expected = float(np.mean(np.abs(correct - conf)))
        assert report.ece_hat == pytest.approx(expected, abs=1e-12)

    def test_value_bounded_by_unit_interval(self, rng):
        for _ in range(10):
            n = int(rng.integers(1, 40))
            conf = rng.uniform(size=n)
            correct = rng.integers(0, 2, size=n)
            value = ece(conf, correct, num_bins=int(rng.integers(1, 15))).ece_hat
            assert 0.0 <= value <= 1.0

    def test_matches_oracle_on_random_inputs(self, rng):
        for _ in range(20):
            n = int(rng.integers(1, 50))
            conf = rng.uniform(size=n)
            correct = rng.integers(0, 2, size=n)
            bins = int(rng.integers(1, 12))
            ours = ece(conf, correct, bins).ece_hat
            assert ours == pytest.approx(ece_oracle(conf, correct, bins), abs=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            ece([], [], num_bins=5)
        with pytest.raises(ValueError):
            ece([0.5, 0.5], [1], num_bins=5)
        with pytest.raises(ContractViolation):
            ece([1.2], [1], num_bins=5)
        with pytest.raises(ContractViolation):
            ece([-0.1], [1], num_bins=5)
        with pytest.raises(ConfigurationError):
            ece([0.5], [1], num_bins=0)


class TestModelConfidences:
    def test_stub_confidences_and_flags(self):
        ds = code_dataset([0, 1, 1, 0], num_classes=2)
        conf, correct = model_confidences(_PixelCodeStub(2), ds)
        assert conf.shape == (4,)
        expected_conf = float(F.softmax(torch.tensor([9.0, 0.0]), dim=0)[0])
        assert conf == pytest.approx([expected_conf] * 4)
        assert correct.astype(int).tolist() == [1, 1, 1, 1]

    def test_feeds_ece(self, trained_toy):
        conf, correct = model_confidences(
            trained_toy.model, trained_toy.val_set, trained_toy.normalizer
        )
        assert np.all(conf >= 1 / trained_toy.val_set.num_classes - 1e-6)
        assert np.all(conf <= 1.0 + 1e-12)
        report = ece(conf, correct, num_bins=10)
        assert 0.0 <= report.ece_hat <= 1.0

    def test_empty_dataset_rejected(self, tiny_model):
        empty = ArrayDataset(
            images=torch.zeros(0, 3, 32, 32), labels=torch.zeros(0, dtype=torch.long), ids=[]
        )
        with pytest.raises(ValueError):
            model_confidences(tiny_model, empty)


class TestExportEmbeddings:
    def test_projection_export_layout_and_unit_norm(self, tiny_model, toy_small, tmp_path):
        ds = toy_small.subset(range(10))
        path = export_embeddings(tiny_model, ds, tmp_path / "emb" / "z.csv", which="z")
        lines = path.read_text().splitlines()
        dim = tiny_model.config.projection_dim
        assert lines[0] == "id,label,role," + ",".join(f"e{j}" for j in range(dim))
        assert len(lines) == 11
        for i, line in enumerate(lines[1:]):
            fields = line.split(",")
            assert len(fields) == 3 + dim
            assert fields[0] == ds.ids[i]
            assert int(fields[1]) == int(ds.labels[i])
            assert fields[2] == "original"
            vec = np.array([float(v) for v in fields[3:]])
            assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-5)

    def test_reexport_is_byte_identical(self, tiny_model, toy_small, tmp_path):
        ds = toy_small.subset(range(10))
        first = export_embeddings(tiny_model, ds, tmp_path / "a.csv")
        payload = first.read_bytes()
        second = export_embeddings(tiny_model, ds, tmp_path / "b.csv")
        assert second.read_bytes() == payload

    def test_encoder_export_uses_encoder_width(self, tiny_model, toy_small, tmp_path):
        ds = toy_small.subset(range(4))
        path = export_embeddings(tiny_model, ds, tmp_path / "r.csv", which="r")
        header = path.read_text().splitlines()[0]
        embedding_cols = [c for c in header.split(",") if c.startswith("e") and c[1:].isdigit()]
        assert len(embedding_cols) == tiny_model.config.encoder_dim

    def test_roles_column(self, tiny_model, toy_small, tmp_path):
        ds = toy_small.subset(range(3))
        roles = ["original", "masked", "background"]
        path = export_embeddings(tiny_model, ds, tmp_path / "roles.csv", roles=roles)
        got = [line.split(",")[2] for line in path.read_text().splitlines()[1:]]
        assert got == roles

    def test_validation(self, tiny_model, toy_small, tmp_path):
        with pytest.raises(ConfigurationError):
            export_embeddings(tiny_model, toy_small, tmp_path / "x.csv", which="q")
        with pytest.raises(ConfigurationError):
            export_embeddings(
                tiny_model, toy_small.subset(range(3)), tmp_path / "x.csv", roles=["a"]
            )
