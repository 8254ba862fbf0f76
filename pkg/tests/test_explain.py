"""Saliency map computation, normalization, and the two masking operators."""

import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from excon import (
    ConfigurationError,
    ContractViolation,
    MaskSpec,
    ModelConfig,
    SaliencyMap,
    apply_mask,
    compute_saliency,
    mask_below_threshold,
    normalize_upsample,
    normalize_upsample_batch,
    retain_top_percent,
    top_percent_keep_mask,
)
from excon.explain import export_saliency, gradcam, gradcam_batch


class _UniformChannelStub(torch.nn.Module):
    """One conv channel with uniform activation; the logit is its mean.

    The symmetry makes the expected raw map uniform, which pins down the
    alpha-weighting arithmetic independent of any trained network.
    """

    def __init__(self, value=0.7, differentiable=True):
        super().__init__()
        self.config = ModelConfig(
            input_shape=(16, 16, 3), encoder_dim=2, projection_dim=2, num_classes=2
        )
        self.value = value
        self.differentiable = differentiable
        self._acts = None

    def encode_with_activations(self, images):
        n = images.shape[0]
        acts = images.new_full((n, 1, 4, 4), self.value)
        if self.differentiable:
            acts = acts.requires_grad_(True)
        self._acts = acts
        r = torch.cat([acts.mean(dim=(1, 2, 3), keepdim=True).squeeze(-1).squeeze(-1)] * 2, dim=1)
        return r, acts

    def classify(self, r):
        mean = self._acts.mean(dim=(1, 2, 3), keepdim=True).squeeze(-1).squeeze(-1)
        return torch.cat([mean, -mean], dim=1)


class TestGradcam:
    def test_nonnegative_and_shaped(self, tiny_model):
        x = torch.rand(3, 3, 32, 32)
        raw = gradcam_batch(tiny_model, x, torch.tensor([0, 1, 2]))
        assert raw.shape == (3, 8, 8)
        assert bool((raw >= 0).all())

    def test_single_image_wrapper_matches_batch(self, tiny_model):
        x = torch.rand(2, 3, 32, 32)
        batch_maps = gradcam_batch(tiny_model, x, torch.tensor([1, 1]))
        solo = gradcam(tiny_model, x[0], 1)
        assert torch.allclose(solo, batch_maps[0], atol=1e-6)

    def test_uniform_single_channel_gives_uniform_map(self):
        stub = _UniformChannelStub()
        raw = gradcam_batch(stub, torch.rand(2, 3, 16, 16), torch.tensor([0, 0]))
        assert torch.allclose(raw, raw[:, :1, :1].expand_as(raw))
        # and the normalized version of a constant map is all zeros
        sal = normalize_upsample_batch(raw, (16, 16))
        assert bool((sal == 0).all())

    def test_target_out_of_range_raises_index_error(self, tiny_model):
        x = torch.rand(1, 3, 32, 32)
        with pytest.raises(IndexError):
            gradcam_batch(tiny_model, x, torch.tensor([3]))
        with pytest.raises(IndexError):
            gradcam_batch(tiny_model, x, torch.tensor([-1]))

    def test_non_differentiable_path_raises_configuration_error(self):
        stub = _UniformChannelStub(differentiable=False)
        with pytest.raises(ConfigurationError):
            gradcam_batch(stub, torch.rand(1, 3, 16, 16), torch.tensor([0]))

    def test_batched_maps_match_per_example_passes(self, tiny_model):
        # one backward pass for the whole batch must not mix examples
        x = torch.rand(4, 3, 32, 32)
        targets = torch.tensor([0, 1, 2, 0])
        joint = gradcam_batch(tiny_model, x, targets)
        solo = torch.stack(
            [gradcam_batch(tiny_model, x[i : i + 1], targets[i : i + 1])[0] for i in range(4)]
        )
        assert torch.allclose(joint, solo, atol=1e-6)


class TestTrainedModelLocalization:
    def test_argmax_inside_object_bounding_box(self, trained_toy):
        model, norm, val = trained_toy.model, trained_toy.normalizer, trained_toy.val_set
        maps = compute_saliency(model, norm(val.images), val.labels)
        hits = 0
        for i in range(len(val)):
            peak = int(maps[i].flatten().argmax())
            pr, pc = peak // maps.shape[-1], peak % maps.shape[-1]
            ys, xs = np.nonzero(val.masks[i].numpy())
            hits += (ys.min() <= pr <= ys.max()) and (xs.min() <= pc <= xs.max())
        assert hits >= 0.7 * len(val)

    def test_occluding_object_changes_logit_more_than_occluding_background(self, trained_toy):
        model, norm, val = trained_toy.model, trained_toy.normalizer, trained_toy.val_set
        agree = 0
        for i in range(len(val)):
            x, m, y = val.images[i], val.masks[i], val.labels[i]
            no_object = x.clone()
            no_object[:, m] = 0.0
            no_background = x.clone()
            no_background[:, ~m] = 0.0
            with torch.no_grad():
                base = model.logits(norm(x[None]))[0, y]
                d_obj = abs(float(model.logits(norm(no_object[None]))[0, y] - base))
                d_bg = abs(float(model.logits(norm(no_background[None]))[0, y] - base))
            agree += d_obj > d_bg
        assert agree >= 0.7 * len(val)

    def test_saliency_invariant_to_positive_logit_scaling(self, trained_toy):
        import copy

        model, norm, val = trained_toy.model, trained_toy.normalizer, trained_toy.val_set
        x = norm(val.images[:4])
        targets = val.labels[:4]
        before = compute_saliency(model, x, targets)
        scaled = copy.deepcopy(model)
        with torch.no_grad():
            scaled.classifier.weight.mul_(3.7)
            scaled.classifier.bias.mul_(3.7)
        after = compute_saliency(scaled, x, targets)
        assert torch.allclose(before, after, atol=1e-6)
        assert torch.equal(
            before.flatten(1).argmax(dim=1), after.flatten(1).argmax(dim=1)
        )


class TestNormalizeUpsample:
    def test_constant_map_gives_all_zeros(self):
        sal = normalize_upsample(torch.full((4, 4), 2.5), (8, 8))
        assert bool((sal.values == 0).all())

    def test_single_positive_pixel(self):
        raw = torch.zeros(3, 3)
        raw[1, 1] = 5.0
        sal = normalize_upsample(raw, (12, 12))
        assert float(sal.values.max()) == 1.0
        assert float(sal.values.min()) == 0.0
        peak = int(sal.values.flatten().argmax())
        pr, pc = peak // 12, peak % 12
        # the bright source cell upsamples to the center of the image
        assert 4 <= pr <= 7 and 4 <= pc <= 7

    def test_bilinear_180_degree_symmetry(self):
        raw = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
        up = normalize_upsample_batch(raw.unsqueeze(0), (4, 4))[0]
        assert torch.allclose(up, torch.rot90(up, 2, dims=(0, 1)), atol=1e-7)

    def test_metadata_recorded(self):
        raw = torch.tensor([[0.0, 2.0], [1.0, 0.5]])
        sal = normalize_upsample(raw, (4, 4), target_class=1, example_id="ex-7")
        assert sal.target_class == 1
        assert sal.source_example_id == "ex-7"
        assert sal.raw_min == 0.0
        assert sal.raw_max == 2.0

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigurationError):
            normalize_upsample_batch(torch.rand(1, 2, 2), (4, 4), mode="bicubic")

    def test_nearest_mode_available(self):
        raw = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
        up = normalize_upsample_batch(raw.unsqueeze(0), (4, 4), mode="nearest")[0]
        assert set(up.flatten().tolist()) == {0.0, 1.0}


class TestSaliencyMapValidation:
    def test_out_of_range_rejected(self):
        with pytest.raises(ContractViolation):
            SaliencyMap(values=torch.full((2, 2), 1.5))
        with pytest.raises(ContractViolation):
            SaliencyMap(values=torch.full((2, 2), -0.1))

    def test_non_spanning_rejected(self):
        bad = torch.tensor([[0.2, 0.8], [0.5, 0.6]])
        with pytest.raises(ContractViolation):
            SaliencyMap(values=bad)

    def test_all_zero_accepted(self):
        SaliencyMap(values=torch.zeros(2, 2))

    def test_requires_two_dims(self):
        with pytest.raises(ContractViolation):
            SaliencyMap(values=torch.zeros(1, 2, 2))


def checkerboard(h, w):
    yy, xx = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
    return ((yy + xx) % 2).to(torch.float32)


class TestMaskBelowThreshold:
    def test_all_zero_map_blacks_out_image(self):
        img = torch.rand(3, 8, 8)
        out = mask_below_threshold(img, torch.zeros(8, 8), 0.5)
        assert torch.equal(out, torch.zeros_like(img))

    def test_all_one_map_is_identity(self):
        img = torch.rand(3, 8, 8)
        out = mask_below_threshold(img, torch.ones(8, 8), 0.5)
        assert torch.equal(out, img)

    def test_checkerboard_preserves_exactly_half(self):
        img = torch.rand(3, 8, 8)
        board = checkerboard(8, 8)
        out = mask_below_threshold(img, board, 0.5)
        keep = board >= 0.5
        assert int(keep.sum()) == 32
        assert torch.equal(out[:, keep], img[:, keep])
        assert bool((out[:, ~keep] == 0).all())

    def test_resolution_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            mask_below_threshold(torch.rand(3, 8, 8), torch.zeros(4, 4), 0.5)

    def test_threshold_zero_is_identity(self):
        # saliency maps are nonnegative, so every pixel clears s = 0
        img = torch.rand(3, 6, 6)
        sal = torch.rand(6, 6)
        sal[0, 0] = 0.0
        out = mask_below_threshold(img, sal, 0.0)
        assert torch.equal(out, img)

    def test_kept_pixels_bit_identical(self, rng):
        for _ in range(10):
            img = torch.from_numpy(rng.random((2, 3, 5, 5), dtype=np.float32))
            sal = torch.from_numpy(rng.random((2, 5, 5), dtype=np.float32))
            s = float(rng.uniform(0, 1))
            out = mask_below_threshold(img, sal, s)
            keep = (sal >= s).unsqueeze(1).expand_as(img)
            assert torch.equal(out[keep], img[keep])
            assert bool((out[~keep] == 0).all())

    def test_dataset_mean_fill(self):
        img = torch.rand(3, 4, 4)
        fill = torch.tensor([0.25, 0.5, 0.75])
        out = mask_below_threshold(img, torch.zeros(4, 4), 0.5, fill="dataset_mean", fill_value=fill)
        for ch in range(3):
            assert bool((out[ch] == fill[ch]).all())

    def test_dataset_mean_requires_fill_value(self):
        with pytest.raises(ConfigurationError):
            mask_below_threshold(torch.rand(3, 4, 4), torch.zeros(4, 4), 0.5, fill="dataset_mean")

    def test_accepts_saliency_map_object(self):
        img = torch.rand(3, 4, 4)
        sal = SaliencyMap(values=checkerboard(4, 4))
        out = mask_below_threshold(img, sal, 0.5)
        keep = sal.values >= 0.5
        assert torch.equal(out[:, keep], img[:, keep])


class TestRetainTopPercent:
    def test_p100_is_identity(self):
        img = torch.rand(3, 8, 8)
        out = retain_top_percent(img, torch.rand(8, 8), 100.0)
        assert torch.equal(out, img)

    def test_checkerboard_p50_keeps_the_ones(self):
        img = torch.rand(3, 8, 8)
        board = checkerboard(8, 8)
        out = retain_top_percent(img, board, 50.0)
        keep = board == 1.0
        assert torch.equal(out[:, keep], img[:, keep])
        assert bool((out[:, ~keep] == 0).all())

    @pytest.mark.parametrize("percent", [15.0, 30.0, 45.0])
    def test_preserved_count_is_exact(self, rng, percent):
        h = w = 16
        expected = int(np.ceil(percent * h * w / 100.0))
        for _ in range(5):
            sal = torch.from_numpy(rng.random((1, h, w), dtype=np.float32))
            keep = top_percent_keep_mask(sal, percent)
            assert int(keep.sum()) == expected

    def test_constant_map_row_major_tie_break(self):
        sal = torch.full((1, 4, 4), 0.3)
        keep = top_percent_keep_mask(sal, 25.0)  # ceil(4) = 4 pixels
        expected = torch.zeros(4, 4, dtype=torch.bool)
        expected.view(-1)[:4] = True
        assert torch.equal(keep[0], expected)

    def test_nested_preserved_sets(self, rng):
        for _ in range(10):
            sal = torch.from_numpy(rng.random((1, 8, 8), dtype=np.float32))
            # quantize to force ties so the tie-break matters
            sal = (sal * 4).round() / 4
            inner = top_percent_keep_mask(sal, 20.0)
            outer = top_percent_keep_mask(sal, 60.0)
            assert bool((inner & ~outer).sum() == 0)

    def test_invalid_percent_rejected(self):
        with pytest.raises(ConfigurationError):
            top_percent_keep_mask(torch.rand(1, 4, 4), 0.0)
        with pytest.raises(ConfigurationError):
            top_percent_keep_mask(torch.rand(1, 4, 4), 101.0)


@given(
    threshold=st.floats(min_value=0.0, max_value=1.0),
    seed=st.integers(min_value=0, max_value=2**31 - 1),
)
@settings(max_examples=30, deadline=None)
def test_threshold_partition_property(threshold, seed):
    """Every pixel is either bit-identical to the input or exactly the fill."""
    gen = np.random.default_rng(seed)
    img = torch.from_numpy(gen.random((1, 3, 6, 6), dtype=np.float32)) + 0.01
    sal = torch.from_numpy(gen.random((1, 6, 6), dtype=np.float32))
    out = mask_below_threshold(img, sal, threshold)
    keep = (sal >= threshold).unsqueeze(1).expand_as(img)
    assert torch.equal(out[keep], img[keep])
    assert bool((out[~keep] == 0).all())


class TestApplyMaskDispatch:
    def test_threshold_mode(self):
        img = torch.rand(3, 4, 4)
        spec = MaskSpec(mode="threshold", threshold=0.5)
        direct = mask_below_threshold(img, checkerboard(4, 4), 0.5)
        assert torch.equal(apply_mask(img, checkerboard(4, 4), spec), direct)

    def test_top_percent_mode(self):
        img = torch.rand(3, 4, 4)
        sal = torch.rand(4, 4)
        spec = MaskSpec(mode="top_percent", percent=30.0)
        direct = retain_top_percent(img, sal, 30.0)
        assert torch.equal(apply_mask(img, sal, spec), direct)

    def test_spec_validation(self):
        with pytest.raises(ConfigurationError):
            MaskSpec(mode="windowed")
        with pytest.raises(ConfigurationError):
            MaskSpec(threshold=1.5)
        with pytest.raises(ConfigurationError):
            MaskSpec(percent=0.0)
        with pytest.raises(ConfigurationError):
            MaskSpec(fill="noise")


class TestExport:
    def test_round_trip(self, tmp_path):
        values = normalize_upsample(torch.rand(4, 4), (8, 8), target_class=1, example_id="toy-3")
        paths = export_saliency(values, tmp_path, "map")
        flat = np.load(paths["npy"])
        assert flat.shape == (64,)
        assert np.array_equal(flat, values.values.numpy().flatten())
        sidecar = json.loads(paths["json"].read_text())
        assert sidecar["example_id"] == "toy-3"
        assert sidecar["target_class"] == 1
        assert sidecar["height"] == 8 and sidecar["width"] == 8
        with Image.open(paths["png"]) as img:
            arr = np.asarray(img)
        assert arr.shape == (8, 8)
        assert np.array_equal(arr, np.round(values.values.numpy() * 255).astype(np.uint8))
