"""Binary file formats: feature packs (.fpk), memory banks (.mrb),
metric weights (.mrw), and anomaly maps (.amap).

All formats are little-endian and bit-exact: writing then reading yields
byte-identical content. Features and matrices are stored as float32;
masks are bit-packed per row (MSB first) with rows padded to a byte
boundary, since pixel masks dominate pack size at full resolution.
Files are written atomically (temp file + rename).
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .types import (
    ImageRecord,
    MemoryBank,
    MetricWeights,
    NumericalError,
    PackFormatError,
    PatchGrid,
    ValidationError,
    rows_are_one_hot,
    rows_are_unit_norm,
    validate_record,
)

PACK_MAGIC = b"MRADFP01"
BANK_MAGIC = b"MRADBK01"
WEIGHTS_MAGIC = b"MRADWT01"
PACK_VERSION = 1

_HEADER = struct.Struct("<7I")  # version, d, grid_h, grid_w, image_h, image_w, count


def atomic_write_bytes(path, data: bytes) -> None:
    """Write ``data`` to ``path`` via a temp file in the same directory."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".mrad-tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    """Cursor over a byte buffer that raises PackFormatError on truncation."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int, context: str) -> bytes:
        if self.pos + n > len(self.data):
            raise PackFormatError(
                f"{self.what}: truncated while reading {context} "
                f"(need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos})"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def done(self) -> None:
        if self.pos != len(self.data):
            raise PackFormatError(
                f"{self.what}: {len(self.data) - self.pos} trailing bytes after declared content"
            )


def _f32_bytes(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _read_f32(r: _Reader, count: int, context: str) -> np.ndarray:
    raw = r.take(4 * count, context)
    return np.frombuffer(raw, dtype="<f4").copy()


def _pack_mask(mask: np.ndarray) -> bytes:
    # Pack each row independently so rows stay byte-aligned.
    bits = np.ascontiguousarray(mask != 0, dtype=np.uint8)
    return np.packbits(bits, axis=1).tobytes()


def _unpack_mask(raw: bytes, h: int, w: int) -> np.ndarray:
    row_bytes = (w + 7) // 8
    packed = np.frombuffer(raw, dtype=np.uint8).reshape(h, row_bytes)
    return np.unpackbits(packed, axis=1)[:, :w].astype(np.uint8)


def write_feature_pack(records, grid: PatchGrid, d: int, path) -> None:
    """Serialize image records to a feature pack file.

    Every record must conform to ``grid`` and ``d``; ids must encode to at
    most 65535 UTF-8 bytes; features must be finite. Duplicate ids are a
    validation error since ids are the join key across artifacts.
    """
    records = list(records)
    seen: set[str] = set()
    chunks = [PACK_MAGIC, _HEADER.pack(
        PACK_VERSION, d, grid.grid_h, grid.grid_w, grid.image_h, grid.image_w, len(records)
    )]
    for rec in records:
        validate_record(rec, grid, d)
        if rec.id in seen:
            raise ValidationError(f"duplicate record id {rec.id!r}")
        seen.add(rec.id)
        id_bytes = rec.id.encode("utf-8")
        if len(id_bytes) > 0xFFFF:
            raise ValidationError(f"record id longer than 65535 bytes: {rec.id[:32]!r}...")
        chunks.append(struct.pack("<H", len(id_bytes)))
        chunks.append(id_bytes)
        chunks.append(struct.pack("<BB", rec.label, 1 if rec.mask is not None else 0))
        chunks.append(_f32_bytes(rec.cls_feature))
        chunks.append(_f32_bytes(rec.patch_features))
        if rec.mask is not None:
            chunks.append(_pack_mask(np.asarray(rec.mask)))
    atomic_write_bytes(path, b"".join(chunks))


def read_feature_pack(path):
    """Read a feature pack; returns ``(records, grid, d)``.

    Features come back exactly as written (float32, not re-normalized);
    normalization is the memory-bank builder's responsibility.
    """
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data, f"feature pack {path!s}")
    magic = r.take(len(PACK_MAGIC), "magic")
    if magic != PACK_MAGIC:
        raise PackFormatError(f"{path!s}: bad magic {magic!r}, expected {PACK_MAGIC!r}")
    version, d, gh, gw, ih, iw, count = _HEADER.unpack(r.take(_HEADER.size, "header"))
    if version != PACK_VERSION:
        raise PackFormatError(f"{path!s}: unsupported pack version {version}")
    grid = PatchGrid(int(gh), int(gw), int(ih), int(iw))
    u = grid.u
    records = []
    for i in range(count):
        ctx = f"record {i}"
        (id_len,) = struct.unpack("<H", r.take(2, f"{ctx} id length"))
        rec_id = r.take(id_len, f"{ctx} id").decode("utf-8")
        label, has_mask = struct.unpack("<BB", r.take(2, f"{ctx} flags"))
        cls = _read_f32(r, d, f"{ctx} cls feature")
        pat = _read_f32(r, u * d, f"{ctx} patch features").reshape(u, d)
        mask = None
        if has_mask:
            row_bytes = (iw + 7) // 8
            mask = _unpack_mask(r.take(ih * row_bytes, f"{ctx} mask"), ih, iw)
        records.append(ImageRecord(rec_id, int(label), cls, pat, mask))
    r.done()
    return records, grid, int(d)


def save_bank(bank: MemoryBank, path) -> None:
    tag = bank.source_tag.encode("utf-8")
    if len(tag) > 0xFFFF:
        raise ValidationError("source_tag longer than 65535 bytes")
    chunks = [
        BANK_MAGIC,
        struct.pack("<3IH", bank.N_c, bank.N_p, bank.d, len(tag)),
        tag,
        _f32_bytes(bank.K_cls),
        _f32_bytes(bank.V_cls),
        _f32_bytes(bank.K_pat),
        _f32_bytes(bank.V_pat),
    ]
    atomic_write_bytes(path, b"".join(chunks))


def load_bank(path) -> MemoryBank:
    """Load and validate a memory bank (unit-norm keys, one-hot values)."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data, f"memory bank {path!s}")
    magic = r.take(len(BANK_MAGIC), "magic")
    if magic != BANK_MAGIC:
        raise PackFormatError(f"{path!s}: bad magic {magic!r}, expected {BANK_MAGIC!r}")
    n_c, n_p, d, tag_len = struct.unpack("<3IH", r.take(14, "dimensions"))
    tag = r.take(tag_len, "source tag").decode("utf-8")
    k_cls = _read_f32(r, n_c * d, "K_cls").reshape(n_c, d)
    v_cls = _read_f32(r, n_c * 2, "V_cls").reshape(n_c, 2)
    k_pat = _read_f32(r, n_p * d, "K_pat").reshape(n_p, d)
    v_pat = _read_f32(r, n_p * 2, "V_pat").reshape(n_p, 2)
    r.done()
    bank = MemoryBank(k_cls, v_cls, k_pat, v_pat, int(d), tag)
    if not (rows_are_unit_norm(bank.K_cls) and rows_are_unit_norm(bank.K_pat)):
        raise ValidationError(f"{path!s}: bank keys are not unit norm")
    if not (rows_are_one_hot(bank.V_cls) and rows_are_one_hot(bank.V_pat)):
        raise ValidationError(f"{path!s}: bank values are not one-hot labels")
    return bank


def save_weights(weights: MetricWeights, path) -> None:
    """Persist metric weights; float32 is the storage precision."""
    chunks = [WEIGHTS_MAGIC, struct.pack("<I", weights.d)]
    for m in weights.matrices().values():
        chunks.append(_f32_bytes(m))
    atomic_write_bytes(path, b"".join(chunks))


def load_weights(path) -> MetricWeights:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data, f"metric weights {path!s}")
    magic = r.take(len(WEIGHTS_MAGIC), "magic")
    if magic != WEIGHTS_MAGIC:
        raise PackFormatError(f"{path!s}: bad magic {magic!r}, expected {WEIGHTS_MAGIC!r}")
    (d,) = struct.unpack("<I", r.take(4, "dimension"))
    mats = [_read_f32(r, d * d, name).reshape(d, d).astype(np.float64)
            for name in ("Wq_cls", "Wk_cls", "Wq_seg", "Wk_seg")]
    r.done()
    return MetricWeights(*mats)


def write_anomaly_map(scores: np.ndarray, path) -> None:
    """Write an anomaly map: 8-byte (H, W) u32 header then f32 row-major."""
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise ValidationError(f"anomaly map must be 2-D, got shape {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise NumericalError("anomaly map contains non-finite values")
    h, w = scores.shape
    atomic_write_bytes(path, struct.pack("<2I", h, w) + _f32_bytes(scores))


def read_anomaly_map(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data, f"anomaly map {path!s}")
    h, w = struct.unpack("<2I", r.take(8, "header"))
    scores = _read_f32(r, h * w, "scores").reshape(h, w)
    r.done()
    return scores.astype(np.float64)
