"""Binary container for per-image reinforcement records.

Layout (all little endian):

    magic "DRST" | version u16 | flags u16 | num_classes u32 | top_k u8 |
    samples_per_image u16 | num_images u64 | teacher id (u16 length + UTF-8)

followed by ``num_images * samples_per_image`` fixed-size records grouped by
image id.  A record interleaves top-k (class index u32, probability f32)
pairs with the augmentation parameter blocks selected by the flags:

    crop block (always):   4 x f32 crop rectangle + u8 flip        = 17 bytes
    scripted-op block:     2 x (i32 op, f32 magnitude) + 4 x f32   = 32 bytes
    mixing block:          (i32 partner, f32 blend) +
                           (i32 partner, 4 x f32 paste box)        = 28 bytes

Records never vary in size within a file, so record (image, slot) lives at
``header_size + (image * samples_per_image + slot) * record_size`` and any
reader can seek in O(1).  Within each image group records are sorted by
descending stored confidence (max probability); when the paired flag is set
they come in coefficient pairs and the sort key is the pair maximum.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import (
    FLAG_MIXING,
    FLAG_PAIRED,
    FLAG_RARE,
    FLAG_RRC,
    NUM_RA_SLOTS,
    RA_OP_NAMES,
    AugmentationDescriptor,
)
from .teacher import SparseProbs

MAGIC = b"DRST"
VERSION = 1
_HEADER = struct.Struct("<4sHHIBHQ")

PROB_ENTRY_BYTES = 8
CROP_BLOCK_BYTES = 17
RARE_BLOCK_BYTES = 32
MIXING_BLOCK_BYTES = 28

GIB = 1 << 30


class StoreError(ValueError):
    """Raised for malformed store files or misuse of the writer."""


def record_size(top_k: int, flags: int) -> int:
    """Bytes per record for a given top-k width and flag set."""
    if top_k < 1 or top_k > 255:
        raise ValueError(f"top_k {top_k} outside [1, 255]")
    if not flags & FLAG_RRC:
        raise ValueError("the crop block is mandatory (flags bit 0)")
    size = PROB_ENTRY_BYTES * top_k + CROP_BLOCK_BYTES
    if flags & FLAG_RARE:
        size += RARE_BLOCK_BYTES
    if flags & FLAG_MIXING:
        size += MIXING_BLOCK_BYTES
    return size


def record_dtype(top_k: int, flags: int) -> np.dtype:
    """Packed numpy dtype matching the on-disk record layout."""
    fields = [
        ("probs", [("idx", "<u4"), ("p", "<f4")], (top_k,)),
        ("crop", "<f4", (4,)),
        ("flip", "u1"),
    ]
    if flags & FLAG_RARE:
        fields.append(("ra", [("op", "<i4"), ("mag", "<f4")], (NUM_RA_SLOTS,)))
        fields.append(("erase", "<f4", (4,)))
    if flags & FLAG_MIXING:
        fields.append(("mix_partner", "<i4"))
        fields.append(("mix_lam", "<f4"))
        fields.append(("cut_partner", "<i4"))
        fields.append(("cut_box", "<f4", (4,)))
    dt = np.dtype(fields)
    assert dt.itemsize == record_size(top_k, flags)
    return dt


@dataclass(frozen=True)
class StoreHeader:
    flags: int
    num_classes: int
    top_k: int
    samples_per_image: int
    num_images: int
    teacher_id: str
    version: int = VERSION

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.samples_per_image < 1:
            raise ValueError("samples_per_image must be >= 1")
        if self.top_k > self.num_classes:
            raise ValueError(f"top_k {self.top_k} exceeds num_classes {self.num_classes}")
        record_size(self.top_k, self.flags)  # validates flags and top_k
        if self.flags & FLAG_PAIRED and self.samples_per_image % 2:
            raise ValueError("paired stores need an even samples_per_image")

    @property
    def record_size(self) -> int:
        return record_size(self.top_k, self.flags)

    @property
    def byte_size(self) -> int:
        return _HEADER.size + 2 + len(self.teacher_id.encode("utf-8"))

    def pack(self) -> bytes:
        tid = self.teacher_id.encode("utf-8")
        if len(tid) > 0xFFFF:
            raise ValueError("teacher id too long")
        return (
            _HEADER.pack(
                MAGIC,
                self.version,
                self.flags,
                self.num_classes,
                self.top_k,
                self.samples_per_image,
                self.num_images,
            )
            + struct.pack("<H", len(tid))
            + tid
        )

    @classmethod
    def unpack(cls, raw: bytes) -> "StoreHeader":
        if len(raw) < _HEADER.size + 2:
            raise StoreError(f"file too short for header: {len(raw)} bytes")
        magic, version, flags, num_classes, top_k, spi, num_images = _HEADER.unpack_from(raw, 0)
        if magic != MAGIC:
            raise StoreError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
        if version != VERSION:
            raise StoreError(f"unsupported version {version}")
        (tid_len,) = struct.unpack_from("<H", raw, _HEADER.size)
        end = _HEADER.size + 2 + tid_len
        if len(raw) < end:
            raise StoreError(f"truncated teacher id at offset {_HEADER.size + 2}")
        teacher_id = raw[_HEADER.size + 2 : end].decode("utf-8")
        return cls(
            flags=flags,
            num_classes=num_classes,
            top_k=top_k,
            samples_per_image=spi,
            num_images=num_images,
            teacher_id=teacher_id,
            version=version,
        )


def expected_file_size(header: StoreHeader) -> int:
    return header.byte_size + header.num_images * header.samples_per_image * header.record_size


def storage_breakdown(num_images: int, samples_per_image: int, top_k: int, flags: int) -> dict:
    """Per-block byte totals for a hypothetical store of this shape.

    Returns block name -> total bytes plus a "total" entry; header bytes are
    excluded (they are negligible and depend on the teacher id).
    """
    n = num_images * samples_per_image
    out = {"probs": n * PROB_ENTRY_BYTES * top_k, "crop": n * CROP_BLOCK_BYTES}
    if flags & FLAG_RARE:
        out["scripted"] = n * RARE_BLOCK_BYTES
    if flags & FLAG_MIXING:
        out["mixing"] = n * MIXING_BLOCK_BYTES
    out["total"] = sum(out.values())
    return out


# ---------------------------------------------------------------------------
# record codec


def encode_group(
    records: list[tuple[SparseProbs, AugmentationDescriptor]], top_k: int, flags: int
) -> np.ndarray:
    """Pack (probs, descriptor) pairs into a structured record array."""
    dt = record_dtype(top_k, flags)
    arr = np.zeros(len(records), dtype=dt)
    for i, (sp, desc) in enumerate(records):
        if sp.k != top_k:
            raise ValueError(f"record {i}: expected {top_k} prob entries, got {sp.k}")
        arr["probs"]["idx"][i] = sp.indices
        arr["probs"]["p"][i] = sp.probs
        arr["crop"][i] = desc.crop
        arr["flip"][i] = 1 if desc.flip else 0
        if flags & FLAG_RARE:
            arr["ra"]["op"][i] = [op for op, _ in desc.ra_ops]
            arr["ra"]["mag"][i] = [mag for _, mag in desc.ra_ops]
            arr["erase"][i] = desc.erase
        if flags & FLAG_MIXING:
            arr["mix_partner"][i] = desc.mix_partner
            arr["mix_lam"][i] = desc.mix_lam
            arr["cut_partner"][i] = desc.cut_partner
            arr["cut_box"][i] = desc.cut_box
    return arr


def decode_record(rec: np.void, flags: int) -> tuple[SparseProbs, AugmentationDescriptor]:
    """Unpack one structured record back into python objects."""
    sp = SparseProbs(
        indices=tuple(int(i) for i in rec["probs"]["idx"]),
        probs=tuple(float(p) for p in rec["probs"]["p"]),
    )
    kwargs = {
        "flags": flags & (FLAG_RRC | FLAG_RARE | FLAG_MIXING),
        "crop": tuple(float(v) for v in rec["crop"]),
        "flip": bool(rec["flip"]),
    }
    if flags & FLAG_RARE:
        kwargs["ra_ops"] = tuple(
            (int(op), float(mag)) for op, mag in zip(rec["ra"]["op"], rec["ra"]["mag"])
        )
        kwargs["erase"] = tuple(float(v) for v in rec["erase"])
    if flags & FLAG_MIXING:
        kwargs["mix_partner"] = int(rec["mix_partner"])
        kwargs["mix_lam"] = float(rec["mix_lam"])
        kwargs["cut_partner"] = int(rec["cut_partner"])
        kwargs["cut_box"] = tuple(float(v) for v in rec["cut_box"])
    return sp, AugmentationDescriptor(**kwargs)


# ---------------------------------------------------------------------------
# writer / reader


class StoreWriter:
    """Sequential writer; groups must arrive in image id order."""

    def __init__(self, path: str | Path, header: StoreHeader):
        self.path = Path(path)
        self.header = header
        self._dtype = record_dtype(header.top_k, header.flags)
        self._fh = open(self.path, "wb")
        self._fh.write(header.pack())
        self._written = 0

    def append_group(self, records: list[tuple[SparseProbs, AugmentationDescriptor]]) -> None:
        self.append_group_bytes(
            encode_group(records, self.header.top_k, self.header.flags).tobytes()
        )

    def append_group_bytes(self, raw: bytes) -> None:
        expect = self.header.samples_per_image * self.header.record_size
        if len(raw) != expect:
            raise StoreError(f"group is {len(raw)} bytes, expected {expect}")
        if self._written >= self.header.num_images:
            raise StoreError("all image groups already written")
        self._fh.write(raw)
        self._written += 1

    def close(self) -> None:
        self._fh.close()
        if self._written != self.header.num_images:
            raise StoreError(
                f"wrote {self._written} of {self.header.num_images} image groups"
            )

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self._fh.close()


class ReinforcementStore:
    """Read handle with O(1) record addressing via a read-only memmap."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        raw_head = self.path.read_bytes()[: _HEADER.size + 2 + 0xFFFF]
        self.header = StoreHeader.unpack(raw_head)
        h = self.header
        actual = self.path.stat().st_size
        expect = expected_file_size(h)
        if actual != expect:
            raise StoreError(f"file is {actual} bytes, expected {expect}")
        self._dtype = record_dtype(h.top_k, h.flags)
        if h.num_images * h.samples_per_image > 0:
            flat = np.memmap(self.path, dtype=self._dtype, mode="r", offset=h.byte_size)
            self._records = flat.reshape(h.num_images, h.samples_per_image)
        else:
            self._records = np.zeros((h.num_images, h.samples_per_image), dtype=self._dtype)

    @property
    def num_images(self) -> int:
        return self.header.num_images

    @property
    def samples_per_image(self) -> int:
        return self.header.samples_per_image

    def group(self, image_id: int) -> np.ndarray:
        return self._records[image_id]

    def record(self, image_id: int, slot: int) -> tuple[SparseProbs, AugmentationDescriptor]:
        return decode_record(self._records[image_id, slot], self.header.flags)

    def descriptor(self, image_id: int, slot: int) -> AugmentationDescriptor:
        return self.record(image_id, slot)[1]

    def confidences(self) -> np.ndarray:
        """(num_images, samples_per_image) float32 max-probability matrix."""
        return np.ascontiguousarray(self._records["probs"]["p"][:, :, 0])

    def record_offset(self, image_id: int, slot: int) -> int:
        return self.header.byte_size + (
            image_id * self.header.samples_per_image + slot
        ) * self.header.record_size

    def validate(self, max_violations: int = 100) -> list[str]:
        """Integrity scan; returns up to max_violations human-readable strings."""
        h = self.header
        out: list[str] = []

        def report(msg: str) -> bool:
            out.append(msg)
            return len(out) >= max_violations

        recs = self._records
        probs = recs["probs"]["p"].astype(np.float64)
        idx = recs["probs"]["idx"]
        for img in range(h.num_images):
            if out and len(out) >= max_violations:
                break
            for slot in range(h.samples_per_image):
                p = probs[img, slot]
                where = f"image {img} slot {slot}"
                if np.any(idx[img, slot] >= h.num_classes):
                    if report(f"{where}: class index >= {h.num_classes}"):
                        return out
                if np.any(p <= 0.0):
                    if report(f"{where}: non-positive probability"):
                        return out
                if np.any(np.diff(p) > 0.0):
                    if report(f"{where}: entries not sorted by descending probability"):
                        return out
                if len(set(int(i) for i in idx[img, slot])) != h.top_k:
                    if report(f"{where}: duplicate class index"):
                        return out
                crop = recs["crop"][img, slot]
                if crop[2] <= 0 or crop[3] <= 0 or np.any(crop < 0) or crop[0] + crop[2] > 1.0001 or crop[1] + crop[3] > 1.0001:
                    if report(f"{where}: crop rectangle outside the unit square"):
                        return out
                if recs["flip"][img, slot] > 1:
                    if report(f"{where}: flip byte not 0/1"):
                        return out
                if h.flags & FLAG_RARE:
                    for op, mag in zip(recs["ra"]["op"][img, slot], recs["ra"]["mag"][img, slot]):
                        if not -1 <= op < len(RA_OP_NAMES):
                            if report(f"{where}: op id {int(op)} out of range"):
                                return out
                        if op >= 0 and not 0.0 <= mag <= 10.0:
                            if report(f"{where}: magnitude {float(mag)} outside [0, 10]"):
                                return out
                    er = recs["erase"][img, slot]
                    if er[2] > 0 and (np.any(er < 0) or er[0] + er[2] > 1.0001 or er[1] + er[3] > 1.0001):
                        if report(f"{where}: erase box outside the unit square"):
                            return out
                if h.flags & FLAG_MIXING:
                    mp = int(recs["mix_partner"][img, slot])
                    cp = int(recs["cut_partner"][img, slot])
                    if mp >= 0 and cp >= 0:
                        if report(f"{where}: both mixing modes active"):
                            return out
                    for pid in (mp, cp):
                        if pid >= int(h.num_images):
                            if report(f"{where}: partner id {pid} out of range"):
                                return out
            # Confidence ordering within the group (pair maxima when paired).
            conf = probs[img, :, 0]
            if h.flags & FLAG_PAIRED:
                conf = conf.reshape(-1, 2).max(axis=1)
            if np.any(np.diff(conf) > 0.0):
                if report(f"image {img}: group not sorted by descending confidence"):
                    return out
        return out


def open_store(path: str | Path) -> ReinforcementStore:
    return ReinforcementStore(path)
