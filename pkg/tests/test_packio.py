import struct

import numpy as np
import pytest

from mrad.packio import (
    BANK_MAGIC,
    PACK_MAGIC,
    atomic_write_bytes,
    load_bank,
    load_weights,
    read_anomaly_map,
    read_feature_pack,
    save_bank,
    save_weights,
    write_anomaly_map,
    write_feature_pack,
)
from mrad.types import (
    ImageRecord,
    MetricWeights,
    NumericalError,
    PackFormatError,
    PatchGrid,
    ValidationError,
)


def _random_records(rng, grid, d, n, with_masks=True):
    records = []
    for i in range(n):
        label = int(i % 2)
        mask = None
        if with_masks and label == 1:
            mask = (rng.random((grid.image_h, grid.image_w)) < 0.3).astype(np.uint8)
        records.append(
            ImageRecord(
                id=f"img-{i:03d}",
                label=label,
                cls_feature=rng.standard_normal(d).astype(np.float32),
                patch_features=rng.standard_normal((grid.u, d)).astype(np.float32),
                mask=mask,
            )
        )
    return records


class TestFeaturePack:
    def test_exact_byte_count_single_record(self, tmp_path):
        # magic 8 + header 28 + (id_len 2 + id 1 + label 1 + mask flag 1)
        # + cls 4*4 + patches 4*4*4, no mask
        grid = PatchGrid(2, 2, 4, 4)
        rec = ImageRecord(
            id="a",
            label=0,
            cls_feature=np.zeros(4, dtype=np.float32),
            patch_features=np.zeros((4, 4), dtype=np.float32),
        )
        path = tmp_path / "one.fpk"
        write_feature_pack([rec], grid, 4, path)
        assert path.stat().st_size == 8 + 28 + (2 + 1 + 1 + 1) + 16 + 64

    def test_empty_pack_is_header_only(self, tmp_path):
        grid = PatchGrid(2, 2, 4, 4)
        path = tmp_path / "empty.fpk"
        write_feature_pack([], grid, 4, path)
        assert path.stat().st_size == 8 + 28
        records, g, d = read_feature_pack(path)
        assert records == [] and g == grid and d == 4

    def test_round_trip(self, tmp_path, rng):
        grid = PatchGrid(3, 2, 7, 5)  # deliberately non-square, odd sizes
        records = _random_records(rng, grid, 6, 5)
        path = tmp_path / "pack.fpk"
        write_feature_pack(records, grid, 6, path)
        back, g, d = read_feature_pack(path)
        assert g == grid and d == 6
        assert [r.id for r in back] == [r.id for r in records]
        for a, b in zip(records, back):
            assert a.label == b.label
            assert np.array_equal(a.cls_feature, b.cls_feature)
            assert np.array_equal(a.patch_features, b.patch_features)
            if a.mask is None:
                assert b.mask is None
            else:
                assert np.array_equal((a.mask != 0).astype(np.uint8), b.mask)

    def test_write_is_idempotent(self, tmp_path, rng):
        grid = PatchGrid(2, 2, 6, 6)
        records = _random_records(rng, grid, 4, 3)
        p1, p2 = tmp_path / "a.fpk", tmp_path / "b.fpk"
        write_feature_pack(records, grid, 4, p1)
        write_feature_pack(records, grid, 4, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.fpk"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 28)
        with pytest.raises(PackFormatError, match="magic"):
            read_feature_pack(path)

    def test_version_mismatch(self, tmp_path):
        grid = PatchGrid(2, 2, 4, 4)
        path = tmp_path / "v9.fpk"
        write_feature_pack([], grid, 4, path)
        raw = bytearray(path.read_bytes())
        raw[8:12] = struct.pack("<I", 9)
        path.write_bytes(bytes(raw))
        with pytest.raises(PackFormatError, match="version"):
            read_feature_pack(path)

    def test_truncation_names_record(self, tmp_path, rng):
        grid = PatchGrid(2, 2, 4, 4)
        records = _random_records(rng, grid, 4, 3, with_masks=False)
        path = tmp_path / "trunc.fpk"
        write_feature_pack(records, grid, 4, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 30])  # cut into the last record
        with pytest.raises(PackFormatError, match="record 2"):
            read_feature_pack(path)

    def test_trailing_bytes_rejected(self, tmp_path, rng):
        grid = PatchGrid(2, 2, 4, 4)
        records = _random_records(rng, grid, 4, 1, with_masks=False)
        path = tmp_path / "trail.fpk"
        write_feature_pack(records, grid, 4, path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(PackFormatError):
            read_feature_pack(path)

    def test_duplicate_ids_rejected(self, tmp_path, rng):
        grid = PatchGrid(2, 2, 4, 4)
        records = _random_records(rng, grid, 4, 2, with_masks=False)
        records[1] = ImageRecord(
            id=records[0].id,
            label=0,
            cls_feature=records[1].cls_feature,
            patch_features=records[1].patch_features,
        )
        with pytest.raises(ValidationError, match="duplicate"):
            write_feature_pack(records, grid, 4, tmp_path / "dupe.fpk")

    def test_non_finite_features_rejected(self, tmp_path):
        grid = PatchGrid(2, 2, 4, 4)
        cls = np.zeros(4, dtype=np.float32)
        cls[0] = np.nan
        rec = ImageRecord("x", 0, cls, np.zeros((4, 4), dtype=np.float32))
        with pytest.raises(NumericalError):
            write_feature_pack([rec], grid, 4, tmp_path / "nan.fpk")

    def test_oversized_id_rejected(self, tmp_path):
        grid = PatchGrid(2, 2, 4, 4)
        rec = ImageRecord(
            "x" * 70000, 0, np.zeros(4, np.float32), np.zeros((4, 4), np.float32)
        )
        with pytest.raises(ValidationError, match="65535"):
            write_feature_pack([rec], grid, 4, tmp_path / "longid.fpk")

    def test_mask_bit_packing_odd_width(self, tmp_path, rng):
        # Width 5 pads each mask row to one byte; padding must not leak back.
        grid = PatchGrid(1, 1, 3, 5)
        mask = (rng.random((3, 5)) < 0.5).astype(np.uint8)
        rec = ImageRecord(
            "m", 1, np.ones(2, np.float32), np.ones((1, 2), np.float32), mask
        )
        path = tmp_path / "mask.fpk"
        write_feature_pack([rec], grid, 2, path)
        back, _, _ = read_feature_pack(path)
        assert np.array_equal(back[0].mask, mask)

    def test_no_temp_files_left_behind(self, tmp_path):
        grid = PatchGrid(2, 2, 4, 4)
        write_feature_pack([], grid, 4, tmp_path / "clean.fpk")
        assert sorted(p.name for p in tmp_path.iterdir()) == ["clean.fpk"]


class TestBankAndWeightsFiles:
    def test_bank_round_trip_bitwise(self, tmp_path, bank):
        path = tmp_path / "bank.mrb"
        save_bank(bank, path)
        back = load_bank(path)
        assert back.d == bank.d and back.source_tag == bank.source_tag
        for name in ("K_cls", "V_cls", "K_pat", "V_pat"):
            assert np.array_equal(getattr(back, name), getattr(bank, name))

    def test_bank_save_idempotent(self, tmp_path, bank):
        p1, p2 = tmp_path / "a.mrb", tmp_path / "b.mrb"
        save_bank(bank, p1)
        save_bank(bank, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_load_bank_on_weights_file(self, tmp_path):
        path = tmp_path / "w.mrw"
        save_weights(MetricWeights.identity(3), path)
        with pytest.raises(PackFormatError, match="magic"):
            load_bank(path)

    def test_weights_identity_round_trip(self, tmp_path):
        path = tmp_path / "id.mrw"
        save_weights(MetricWeights.identity(5), path)
        back = load_weights(path)
        assert back.is_identity()

    def test_weights_round_trip_f32_exact(self, tmp_path, rng):
        # Storage is f32: values already representable in f32 survive exactly.
        mats = {
            name: rng.standard_normal((4, 4)).astype(np.float32).astype(np.float64)
            for name in ("Wq_cls", "Wk_cls", "Wq_seg", "Wk_seg")
        }
        path = tmp_path / "w.mrw"
        save_weights(MetricWeights(**mats), path)
        back = load_weights(path)
        for name, m in mats.items():
            assert np.array_equal(getattr(back, name), m)

    def test_tampered_bank_key_rejected(self, tmp_path, bank):
        path = tmp_path / "bad.mrb"
        save_bank(bank, path)
        raw = bytearray(path.read_bytes())
        # Payload starts after magic(8) + dims(3*4 + 2) + tag; blow up one key.
        offset = 8 + 14 + len(bank.source_tag.encode())
        raw[offset : offset + 4] = struct.pack("<f", 40.0)
        path.write_bytes(bytes(raw))
        with pytest.raises(ValidationError, match="unit norm"):
            load_bank(path)

    def test_truncated_bank(self, tmp_path, bank):
        path = tmp_path / "short.mrb"
        save_bank(bank, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-9])
        with pytest.raises(PackFormatError):
            load_bank(path)


class TestAnomalyMapFiles:
    def test_round_trip(self, tmp_path, rng):
        amap = rng.random((6, 9)).astype(np.float32).astype(np.float64)
        path = tmp_path / "m.amap"
        write_anomaly_map(amap, path)
        back = read_anomaly_map(path)
        assert back.shape == (6, 9)
        np.testing.assert_array_equal(back, amap.astype(np.float32))

    def test_header_is_dims_then_payload(self, tmp_path):
        path = tmp_path / "hdr.amap"
        write_anomaly_map(np.zeros((2, 3)), path)
        raw = path.read_bytes()
        assert struct.unpack("<2I", raw[:8]) == (2, 3)
        assert len(raw) == 8 + 2 * 3 * 4

    def test_non_finite_rejected(self, tmp_path):
        bad = np.zeros((2, 2))
        bad[0, 0] = np.inf
        with pytest.raises(NumericalError):
            write_anomaly_map(bad, tmp_path / "inf.amap")

    def test_truncated(self, tmp_path):
        path = tmp_path / "short.amap"
        write_anomaly_map(np.zeros((4, 4)), path)
        path.write_bytes(path.read_bytes()[:-2])
        with pytest.raises(PackFormatError):
            read_anomaly_map(path)


def test_atomic_write_replaces_existing(tmp_path):
    path = tmp_path / "out.bin"
    path.write_bytes(b"old")
    atomic_write_bytes(path, b"new content")
    assert path.read_bytes() == b"new content"
    assert sorted(p.name for p in tmp_path.iterdir()) == ["out.bin"]
