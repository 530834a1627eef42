import numpy as np
import pytest

from mrad.membank import (
    build_bank,
    downsample_mask,
    patch_labels_for,
    region_prototypes,
    subsample_bank,
)
from mrad.types import (
    DegeneratePrototypeError,
    ImageRecord,
    PatchGrid,
    ValidationError,
)


def _brute_force_downsample(mask, grid):
    """Reference implementation: explicit per-cell fraction count."""
    out = np.zeros((grid.grid_h, grid.grid_w), dtype=np.uint8)
    for r in range(grid.grid_h):
        for c in range(grid.grid_w):
            r0 = round(r * grid.image_h / grid.grid_h)
            r1 = round((r + 1) * grid.image_h / grid.grid_h)
            c0 = round(c * grid.image_w / grid.grid_w)
            c1 = round((c + 1) * grid.image_w / grid.grid_w)
            block = mask[r0:r1, c0:c1] != 0
            if block.mean() >= 0.5:
                out[r, c] = 1
    return out


class TestDownsampleMask:
    def test_all_zero(self):
        g = PatchGrid(2, 2, 4, 4)
        assert not downsample_mask(np.zeros((4, 4)), g).any()

    def test_all_one(self):
        g = PatchGrid(2, 2, 4, 4)
        assert downsample_mask(np.ones((4, 4)), g).all()

    def test_top_left_block(self):
        g = PatchGrid(2, 2, 4, 4)
        mask = np.zeros((4, 4))
        mask[:2, :2] = 1
        np.testing.assert_array_equal(downsample_mask(mask, g), [[1, 0], [0, 0]])

    def test_half_fraction_is_anomalous(self):
        # 2 of 4 pixels marked: fraction exactly 0.5 crosses the threshold.
        g = PatchGrid(1, 1, 2, 2)
        mask = np.array([[1, 1], [0, 0]])
        assert downsample_mask(mask, g)[0, 0] == 1
        mask = np.array([[1, 0], [0, 0]])
        assert downsample_mask(mask, g)[0, 0] == 0

    @pytest.mark.parametrize("gh,gw,ih,iw", [(2, 2, 4, 4), (3, 2, 7, 5), (5, 3, 17, 11)])
    def test_matches_brute_force(self, rng, gh, gw, ih, iw):
        g = PatchGrid(gh, gw, ih, iw)
        for _ in range(25):
            mask = (rng.random((ih, iw)) < rng.uniform(0.2, 0.8)).astype(np.uint8)
            np.testing.assert_array_equal(
                downsample_mask(mask, g), _brute_force_downsample(mask, g)
            )

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            downsample_mask(np.zeros((5, 4)), PatchGrid(2, 2, 4, 4))

    def test_grid_finer_than_image(self):
        with pytest.raises(ValidationError):
            downsample_mask(np.zeros((2, 2)), PatchGrid(4, 4, 2, 2))


class TestRegionPrototypes:
    def test_all_normal(self, rng):
        feats = rng.standard_normal((5, 4))
        feats /= np.linalg.norm(feats, axis=1, keepdims=True)
        protos = region_prototypes(feats, np.zeros(5))
        assert protos.mu_anom is None
        mean = feats.mean(axis=0)
        np.testing.assert_allclose(
            protos.mu_norm, mean / np.linalg.norm(mean), atol=1e-12
        )

    def test_singleton_anomalous_is_the_feature(self):
        feats = np.array([[1.0, 0.0], [0.0, 1.0]])
        protos = region_prototypes(feats, np.array([0, 1]))
        np.testing.assert_allclose(protos.mu_anom, [0.0, 1.0], atol=1e-15)

    def test_orthonormal_pair_average(self):
        a = np.array([1.0, 0.0, 0.0])
        b = np.array([0.0, 1.0, 0.0])
        protos = region_prototypes(np.stack([a, b]), np.array([1, 1]))
        np.testing.assert_allclose(protos.mu_anom, (a + b) / np.sqrt(2), atol=1e-15)
        assert protos.mu_norm is None

    def test_degenerate_cancellation(self):
        a = np.array([1.0, 0.0])
        protos_input = np.stack([a, -a])
        with pytest.raises(DegeneratePrototypeError):
            region_prototypes(protos_input, np.array([1, 1]))

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            region_prototypes(np.eye(3), np.zeros(2))


class TestPatchLabels:
    def test_mask_drives_labels(self):
        g = PatchGrid(2, 2, 4, 4)
        mask = np.zeros((4, 4))
        mask[:2, :2] = 1
        rec = ImageRecord("a", 1, np.ones(3, np.float32), np.ones((4, 3), np.float32), mask)
        np.testing.assert_array_equal(patch_labels_for(rec, g), [1, 0, 0, 0])

    def test_normal_without_mask_is_all_zero(self):
        g = PatchGrid(2, 2, 4, 4)
        rec = ImageRecord("n", 0, np.ones(3, np.float32), np.ones((4, 3), np.float32))
        np.testing.assert_array_equal(patch_labels_for(rec, g), np.zeros(4))

    def test_anomalous_without_mask_is_underivable(self):
        g = PatchGrid(2, 2, 4, 4)
        rec = ImageRecord("x", 1, np.ones(3, np.float32), np.ones((4, 3), np.float32))
        assert patch_labels_for(rec, g) is None


def _toy_records(rng, grid, d, anomalous_mask=None):
    """Two normal images plus one anomalous image with the given mask."""

    def feats():
        f = rng.standard_normal((grid.u, d)).astype(np.float32)
        return f / np.linalg.norm(f, axis=1, keepdims=True)

    def cls():
        f = rng.standard_normal(d).astype(np.float32)
        return f / np.linalg.norm(f)

    records = [
        ImageRecord("n0", 0, cls(), feats()),
        ImageRecord("n1", 0, cls(), feats()),
    ]
    if anomalous_mask is None:
        anomalous_mask = np.zeros((grid.image_h, grid.image_w), dtype=np.uint8)
        anomalous_mask[:2, :2] = 1
    records.append(ImageRecord("a0", 1, cls(), feats(), anomalous_mask))
    return records


class TestBuildBank:
    def test_counts_two_normal_one_anomalous(self, rng):
        g = PatchGrid(2, 2, 4, 4)
        bank = build_bank(_toy_records(rng, g, 5), g)
        assert bank.N_c == 3
        # 1 normal prototype per normal image, plus normal + anomalous
        # prototypes from the masked image.
        assert bank.N_p == 4
        bank.validate()

    def test_vanishing_mask_keeps_image_entry_only(self, rng):
        g = PatchGrid(2, 2, 4, 4)
        sparse = np.zeros((4, 4), dtype=np.uint8)
        sparse[0, 0] = 1  # 1/4 of the cell, below the 0.5 threshold
        with pytest.warns(UserWarning, match="single label class"):
            bank = build_bank(_toy_records(rng, g, 5, anomalous_mask=sparse), g)
        assert bank.N_c == 3
        assert bank.N_p == 3  # three normal prototypes, no anomalous one
        assert bank.V_cls[:, 1].sum() == 1.0
        assert bank.V_pat[:, 1].sum() == 0.0

    def test_image_level_order_and_labels(self, rng):
        g = PatchGrid(2, 2, 4, 4)
        records = _toy_records(rng, g, 5)
        bank = build_bank(records, g)
        np.testing.assert_array_equal(bank.V_cls[:, 1], [0, 0, 1])
        for i, rec in enumerate(records):
            f = rec.cls_feature.astype(np.float64)
            np.testing.assert_allclose(
                bank.K_cls[i], (f / np.linalg.norm(f)).astype(np.float32), atol=0
            )

    def test_deterministic(self, rng):
        g = PatchGrid(2, 2, 4, 4)
        records = _toy_records(rng, g, 5)
        b1 = build_bank(records, g)
        b2 = build_bank(records, g)
        for name in ("K_cls", "V_cls", "K_pat", "V_pat"):
            assert np.array_equal(getattr(b1, name), getattr(b2, name))

    def test_empty_input(self):
        with pytest.raises(ValidationError):
            build_bank([], PatchGrid(2, 2, 4, 4))

    def test_single_class_warns(self, rng):
        g = PatchGrid(2, 2, 4, 4)
        records = _toy_records(rng, g, 5)[:2]  # normal images only
        with pytest.warns(UserWarning, match="single"):
            bank = build_bank(records, g)
        assert not bank.has_both_classes("cls")

    def test_keys_unit_norm(self, task, bank):
        bank.validate()
        assert bank.N_c == len(task.aux)


class TestSubsampleBank:
    def test_full_sample_is_permutation(self, bank):
        sub = subsample_bank(bank, bank.N_p, seed=3)
        assert sub.N_p == bank.N_p
        orig = {tuple(row) for row in np.asarray(bank.K_pat)}
        samp = {tuple(row) for row in np.asarray(sub.K_pat)}
        assert orig == samp

    def test_minimal_sample(self, bank):
        sub = subsample_bank(bank, 1, seed=0)
        assert sub.K_pat.shape == (1, bank.d)
        assert sub.V_pat.shape == (1, 2)

    def test_same_seed_same_bank(self, bank):
        a = subsample_bank(bank, 5, seed=42)
        b = subsample_bank(bank, 5, seed=42)
        assert np.array_equal(a.K_pat, b.K_pat)
        assert np.array_equal(a.V_pat, b.V_pat)

    def test_image_level_untouched(self, bank):
        sub = subsample_bank(bank, 3, seed=1)
        assert np.array_equal(sub.K_cls, bank.K_cls)
        assert np.array_equal(sub.V_cls, bank.V_cls)

    def test_rows_keep_key_value_pairing(self, bank):
        sub = subsample_bank(bank, 7, seed=9)
        pairs = {tuple(np.concatenate([k, v])) for k, v in zip(np.asarray(bank.K_pat), np.asarray(bank.V_pat))}
        for k, v in zip(np.asarray(sub.K_pat), np.asarray(sub.V_pat)):
            assert tuple(np.concatenate([k, v])) in pairs

    @pytest.mark.parametrize("n", [0, -1, 10_000])
    def test_out_of_range(self, bank, n):
        with pytest.raises(ValidationError):
            subsample_bank(bank, n, seed=0)
