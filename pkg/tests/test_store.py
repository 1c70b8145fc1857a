import numpy as np
import pytest

from datareinforce.augment import (
    FLAG_MIXING,
    FLAG_PAIRED,
    FLAG_RARE,
    FLAG_RRC,
    AugmentationPolicy,
    sample_descriptor,
)
from datareinforce.rng import SeededRng
from datareinforce.store import (
    GIB,
    ReinforcementStore,
    StoreError,
    StoreHeader,
    StoreWriter,
    encode_group,
    expected_file_size,
    record_dtype,
    record_size,
    storage_breakdown,
)
from datareinforce.teacher import sparsify

VARIANT_BY_FLAGS = {
    FLAG_RRC: "rrc",
    FLAG_RRC | FLAG_RARE: "rrc-ra-re",
    FLAG_RRC | FLAG_MIXING: "rrc-mix",
    FLAG_RRC | FLAG_RARE | FLAG_MIXING: "rrc-ra-re-mix",
}


def random_store(tmp_path, rng, name, num_images=None, spi=None, top_k=None, flags=None):
    """Build a small random-but-valid store and return (path, header, groups)."""
    num_images = num_images or rng.integers(1, 5)
    spi = spi or rng.integers(1, 5)
    nc = rng.integers(4, 12)
    top_k = top_k or rng.integers(1, min(nc, 6) + 1)
    if flags is None:
        flags = list(VARIANT_BY_FLAGS)[rng.integers(0, 4)]
    if flags & FLAG_MIXING:
        num_images = max(2, num_images)
    policy = AugmentationPolicy(variant=VARIANT_BY_FLAGS[flags])
    header = StoreHeader(
        flags=flags,
        num_classes=nc,
        top_k=top_k,
        samples_per_image=spi,
        num_images=num_images,
        teacher_id=f"unit-test-teacher-{name}",
    )
    np_rng = np.random.default_rng(rng.integers(0, 2**31))
    groups = []
    path = tmp_path / f"{name}.drst"
    with StoreWriter(path, header) as w:
        for img in range(num_images):
            recs = []
            for r in range(spi):
                row = np_rng.random(nc) + 1e-3
                row /= row.sum()
                sp = sparsify(row, top_k)
                desc = sample_descriptor(policy, (16, 16), num_images, rng.derive(img, r))
                recs.append((sp, desc))
            recs.sort(key=lambda t: -t[0].confidence)
            groups.append(recs)
            w.append_group(recs)
    return path, header, groups


# ---------------------------------------------------------------------------
# sizes


def test_record_size_block_table():
    # Top-10 probabilities cost 80 bytes; the parameter blocks cost 17, 32,
    # and 28 bytes for crop, scripted-op, and mixing respectively.
    assert record_size(10, FLAG_RRC) == 80 + 17 == 97
    assert record_size(10, FLAG_RRC | FLAG_RARE) == 80 + 17 + 32 == 129
    assert record_size(10, FLAG_RRC | FLAG_MIXING) == 80 + 17 + 28
    assert record_size(10, FLAG_RRC | FLAG_RARE | FLAG_MIXING) == 80 + 17 + 32 + 28
    assert record_size(5, FLAG_RRC) == 57


def test_record_dtype_matches_declared_size():
    for flags in VARIANT_BY_FLAGS:
        for k in (1, 3, 10, 40):
            assert record_dtype(k, flags).itemsize == record_size(k, flags)


def test_record_size_rejects_missing_crop_block():
    with pytest.raises(ValueError, match="mandatory"):
        record_size(10, FLAG_RARE)


def test_storage_breakdown_large_scale():
    # 1,281,167 images x 400 samples at top-10: per-block totals land on the
    # published 38/8/15/13 GiB figures and the full-parameter total on 61.
    bd = storage_breakdown(1_281_167, 400, 10, FLAG_RRC | FLAG_RARE | FLAG_MIXING)
    assert abs(bd["probs"] / GIB - 38) <= 1.0
    assert abs(bd["crop"] / GIB - 8) <= 1.0
    assert abs(bd["scripted"] / GIB - 15) <= 1.0
    assert abs(bd["mixing"] / GIB - 13) <= 1.0
    main = storage_breakdown(1_281_167, 400, 10, FLAG_RRC | FLAG_RARE)
    assert abs(main["total"] / GIB - 61) <= 1.0


def test_expected_file_size_counts_header():
    h = StoreHeader(flags=FLAG_RRC, num_classes=10, top_k=2, samples_per_image=3,
                    num_images=4, teacher_id="t")
    assert expected_file_size(h) == h.byte_size + 4 * 3 * record_size(2, FLAG_RRC)


# ---------------------------------------------------------------------------
# codec roundtrip


def test_roundtrip_small_fuzz(tmp_path):
    rng = SeededRng(1001)
    for trial in range(200):
        path, header, groups = random_store(tmp_path, rng.derive(trial), f"t{trial}")
        store = ReinforcementStore(path)
        assert store.header == header
        for img, recs in enumerate(groups):
            for slot, (sp, desc) in enumerate(recs):
                got_sp, got_desc = store.record(img, slot)
                assert got_sp.indices == sp.indices
                assert got_sp.probs == tuple(float(np.float32(p)) for p in sp.probs)
                assert got_desc == desc
        assert store.validate() == []


def test_reencode_is_bit_exact(tmp_path):
    rng = SeededRng(77)
    path, header, groups = random_store(tmp_path, rng, "bits", num_images=3, spi=4)
    original = path.read_bytes()
    store = ReinforcementStore(path)
    rebuilt = header.pack()
    for img in range(3):
        recs = [store.record(img, s) for s in range(4)]
        rebuilt += encode_group(recs, header.top_k, header.flags).tobytes()
    assert rebuilt == original


def test_header_roundtrip_with_unicode_teacher_id():
    h = StoreHeader(flags=FLAG_RRC | FLAG_RARE, num_classes=1000, top_k=10,
                    samples_per_image=400, num_images=1_281_167, teacher_id="ens-αβ")
    assert StoreHeader.unpack(h.pack() + b"extra") == h


def test_seek_offset_matches_byte_layout(tmp_path):
    rng = SeededRng(5)
    path, header, groups = random_store(tmp_path, rng, "seek", num_images=4, spi=3)
    raw = path.read_bytes()
    store = ReinforcementStore(path)
    for img in (0, 2, 3):
        for slot in (0, 2):
            off = store.record_offset(img, slot)
            expect = encode_group([groups[img][slot]], header.top_k, header.flags).tobytes()
            assert raw[off : off + header.record_size] == expect


def test_empty_groups_not_allowed():
    with pytest.raises(ValueError, match="samples_per_image"):
        StoreHeader(flags=FLAG_RRC, num_classes=10, top_k=2, samples_per_image=0,
                    num_images=1, teacher_id="t")


def test_top_k_cannot_exceed_classes():
    with pytest.raises(ValueError, match="top_k"):
        StoreHeader(flags=FLAG_RRC, num_classes=5, top_k=10, samples_per_image=1,
                    num_images=1, teacher_id="t")


# ---------------------------------------------------------------------------
# writer misuse and corruption


def test_writer_rejects_extra_group(tmp_path):
    rng = SeededRng(9)
    path, header, groups = random_store(tmp_path, rng, "full", num_images=2, spi=2)
    header2 = StoreHeader(flags=header.flags, num_classes=header.num_classes,
                          top_k=header.top_k, samples_per_image=2, num_images=1,
                          teacher_id="t")
    w = StoreWriter(tmp_path / "over.drst", header2)
    w.append_group(groups[0])
    with pytest.raises(StoreError, match="already written"):
        w.append_group(groups[1])


def test_writer_close_checks_group_count(tmp_path):
    header = StoreHeader(flags=FLAG_RRC, num_classes=10, top_k=2, samples_per_image=1,
                         num_images=3, teacher_id="t")
    w = StoreWriter(tmp_path / "short.drst", header)
    with pytest.raises(StoreError, match="wrote 0 of 3"):
        w.close()


def test_bad_magic_rejected(tmp_path):
    rng = SeededRng(11)
    path, _, _ = random_store(tmp_path, rng, "magic")
    raw = bytearray(path.read_bytes())
    raw[:4] = b"JUNK"
    path.write_bytes(bytes(raw))
    with pytest.raises(StoreError, match="magic"):
        ReinforcementStore(path)


def test_truncated_file_rejected(tmp_path):
    rng = SeededRng(12)
    path, _, _ = random_store(tmp_path, rng, "trunc", num_images=2, spi=2)
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(StoreError, match="expected"):
        ReinforcementStore(path)


def test_tampered_class_index_fails_validation(tmp_path):
    rng = SeededRng(13)
    path, header, _ = random_store(tmp_path, rng, "tamper", num_images=2, spi=2)
    raw = bytearray(path.read_bytes())
    # Blow up the high byte of record (1, 0)'s first class index.
    store = ReinforcementStore(path)
    off = store.record_offset(1, 0) + 3
    del store
    raw[off] = 0xFF
    path.write_bytes(bytes(raw))
    violations = ReinforcementStore(path).validate()
    assert violations
    assert any("image 1" in v and "class index" in v for v in violations)


def test_tampered_confidence_order_detected(tmp_path):
    rng = SeededRng(14)
    path, header, groups = random_store(
        tmp_path, rng, "order", num_images=1, spi=3, top_k=2, flags=FLAG_RRC
    )
    # Rewrite with the group order reversed so confidence increases.
    recs = sorted(groups[0], key=lambda t: t[0].confidence)
    if recs[0][0].confidence == recs[-1][0].confidence:
        pytest.skip("degenerate draw, all confidences equal")
    with StoreWriter(path, header) as w:
        w.append_group(recs)
    violations = ReinforcementStore(path).validate()
    assert any("descending confidence" in v for v in violations)


def test_validation_clean_on_good_store(tmp_path):
    rng = SeededRng(15)
    for trial in range(20):
        path, _, _ = random_store(tmp_path, rng.derive(trial), f"ok{trial}")
        assert ReinforcementStore(path).validate() == []


def test_paired_flag_requires_even_samples():
    with pytest.raises(ValueError, match="even"):
        StoreHeader(flags=FLAG_RRC | FLAG_MIXING | FLAG_PAIRED, num_classes=10, top_k=2,
                    samples_per_image=3, num_images=1, teacher_id="t")
