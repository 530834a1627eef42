import numpy as np
import pytest

from mrad.types import (
    DatasetStats,
    ImageRecord,
    LossBreakdown,
    MemoryBank,
    MetricWeights,
    NumericalError,
    PatchGrid,
    RetrievalParams,
    TrainConfig,
    ValidationError,
    l2_normalize,
    one_hot_label,
    rows_are_one_hot,
    rows_are_unit_norm,
    validate_record,
)


class TestNormalization:
    def test_unit_norm_result(self, rng):
        x = rng.standard_normal((5, 7))
        n = l2_normalize(x)
        np.testing.assert_allclose(np.linalg.norm(n, axis=-1), 1.0, atol=1e-12)
        assert n.dtype == np.float64

    def test_zero_vector_rejected(self):
        with pytest.raises(NumericalError):
            l2_normalize(np.zeros(4))

    def test_non_finite_rejected(self):
        with pytest.raises(NumericalError):
            l2_normalize(np.array([1.0, np.nan]))

    def test_direction_preserved(self):
        v = np.array([3.0, 4.0])
        np.testing.assert_allclose(l2_normalize(v), [0.6, 0.8], atol=1e-15)


class TestLabels:
    def test_one_hot_values(self):
        assert np.array_equal(one_hot_label(0), [1.0, 0.0])
        assert np.array_equal(one_hot_label(1), [0.0, 1.0])

    def test_invalid_label(self):
        with pytest.raises(ValidationError):
            one_hot_label(2)

    def test_one_hot_detector(self):
        assert rows_are_one_hot(np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert not rows_are_one_hot(np.array([[0.5, 0.5]]))
        assert not rows_are_one_hot(np.array([[1.0, 1.0]]))
        assert not rows_are_one_hot(np.ones((2, 3)))

    def test_unit_norm_detector(self):
        assert rows_are_unit_norm(np.eye(3))
        assert not rows_are_unit_norm(2 * np.eye(3))


class TestPatchGrid:
    def test_counts(self):
        g = PatchGrid(37, 37, 518, 518)
        assert g.u == 1369
        assert g.pixels == 518 * 518

    def test_rejects_nonpositive(self):
        with pytest.raises(ValidationError):
            PatchGrid(0, 3, 10, 10)
        with pytest.raises(ValidationError):
            PatchGrid(3, 3, 10, -1)


class TestRecordValidation:
    def _record(self, grid, d, **kw):
        args = dict(
            id="r",
            label=0,
            cls_feature=np.ones(d, dtype=np.float32),
            patch_features=np.ones((grid.u, d), dtype=np.float32),
            mask=None,
        )
        args.update(kw)
        return ImageRecord(**args)

    def test_valid_passes(self):
        g = PatchGrid(2, 2, 4, 4)
        validate_record(self._record(g, 3), g, 3)

    def test_shape_mismatches(self):
        g = PatchGrid(2, 2, 4, 4)
        with pytest.raises(ValidationError):
            validate_record(self._record(g, 3, cls_feature=np.ones(4)), g, 3)
        with pytest.raises(ValidationError):
            validate_record(self._record(g, 3, patch_features=np.ones((3, 3))), g, 3)

    def test_bad_label(self):
        g = PatchGrid(2, 2, 4, 4)
        with pytest.raises(ValidationError):
            validate_record(self._record(g, 3, label=7), g, 3)

    def test_non_finite_features(self):
        g = PatchGrid(2, 2, 4, 4)
        bad = np.ones(3)
        bad[1] = np.inf
        with pytest.raises(NumericalError):
            validate_record(self._record(g, 3, cls_feature=bad), g, 3)

    def test_mask_shape(self):
        g = PatchGrid(2, 2, 4, 4)
        with pytest.raises(ValidationError):
            validate_record(self._record(g, 3, mask=np.zeros((5, 4))), g, 3)

    def test_normal_image_with_marked_pixels(self):
        g = PatchGrid(2, 2, 4, 4)
        m = np.zeros((4, 4))
        m[0, 0] = 1
        with pytest.raises(ValidationError):
            validate_record(self._record(g, 3, label=0, mask=m), g, 3)


class TestMemoryBank:
    def _bank(self):
        return MemoryBank(
            K_cls=np.eye(3)[:2],
            V_cls=np.array([[1.0, 0.0], [0.0, 1.0]]),
            K_pat=np.eye(3),
            V_pat=np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]),
            d=3,
        )

    def test_counts_and_dtypes(self):
        b = self._bank()
        assert (b.N_c, b.N_p, b.d) == (2, 3, 3)
        assert b.K_cls.dtype == np.float32
        assert b.V_pat.dtype == np.float32

    def test_validate_accepts_good_bank(self):
        self._bank().validate()

    def test_validate_rejects_bad_norm(self):
        b = self._bank()
        bad = MemoryBank(2 * b.K_cls, b.V_cls, b.K_pat, b.V_pat, d=3)
        with pytest.raises(ValidationError):
            bad.validate()

    def test_validate_rejects_non_one_hot(self):
        b = self._bank()
        bad = MemoryBank(b.K_cls, np.full((2, 2), 0.5), b.K_pat, b.V_pat, d=3)
        with pytest.raises(ValidationError):
            bad.validate()

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            MemoryBank(np.eye(3), np.eye(2), np.eye(4), np.eye(2), d=3)

    def test_class_coverage(self):
        b = self._bank()
        assert b.has_both_classes("cls")
        assert b.has_both_classes("pat")
        mono = MemoryBank(b.K_cls, np.array([[1.0, 0.0]] * 2), b.K_pat, b.V_pat, d=3)
        assert not mono.has_both_classes("cls")


class TestMetricWeights:
    def test_identity_round_numbers(self):
        w = MetricWeights.identity(4)
        assert w.d == 4
        assert w.is_identity()
        for m in w.matrices().values():
            assert m.dtype == np.float64

    def test_non_square_rejected(self):
        with pytest.raises(ValidationError):
            MetricWeights(np.ones((2, 3)), np.eye(2), np.eye(2), np.eye(2))

    def test_non_finite_rejected(self):
        bad = np.eye(2)
        bad[0, 0] = np.nan
        with pytest.raises(NumericalError):
            MetricWeights(bad, np.eye(2), np.eye(2), np.eye(2))

    def test_perturbed_not_identity(self):
        w = MetricWeights.identity(3)
        m = w.matrices()
        m["Wq_seg"] = m["Wq_seg"] + 1e-9
        assert not MetricWeights(**m).is_identity()


class TestParams:
    def test_defaults(self):
        p = RetrievalParams()
        assert p.tau == 1.0
        assert p.rho_cls == 0.05
        assert p.rho_seg == 0.20
        assert p.topk_fraction == 0.01

    @pytest.mark.parametrize(
        "kw",
        [
            {"tau": 0.0},
            {"tau": -1.0},
            {"rho_cls": 1.0},
            {"rho_seg": -0.1},
            {"topk_fraction": 0.0},
            {"topk_fraction": 1.5},
        ],
    )
    def test_rejects_out_of_range(self, kw):
        with pytest.raises(ValidationError):
            RetrievalParams(**kw)

    def test_train_config_bounds(self):
        TrainConfig()  # defaults valid
        with pytest.raises(ValidationError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValidationError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValidationError):
            TrainConfig(epochs=-1)
        with pytest.raises(ValidationError):
            TrainConfig(adam_beta1=1.0)


def test_loss_breakdown_total_is_exact_sum():
    lb = LossBreakdown(bce=0.25, dice=0.1, focal=0.0625)
    assert lb.total == 0.25 + 0.1 + 0.0625
    assert lb.to_dict()["total"] == lb.total


def test_dataset_stats_omits_absent():
    s = DatasetStats(
        AqAk=None, NqAk=0.3, AqNk=None, NqNk=0.7, margin_A=None, margin_N=None,
        n_anomalous_queries=0, n_normal_queries=9,
    )
    d = s.to_dict()
    assert "AqAk" not in d and "margin_A" not in d
    assert d["NqAk"] == 0.3 and d["NqNk"] == 0.7
    assert d["n_normal_queries"] == 9
