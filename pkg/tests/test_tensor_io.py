import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from selftrain.tensor_io import (
    IGNORE,
    FormatError,
    ManifestRecord,
    ProbMap,
    ValidationError,
    load_label_map,
    load_prob_map,
    load_prob_map_raw,
    read_manifest,
    save_label_map,
    save_prob_map,
    write_manifest,
)


def _softmaxish(rng, c, h, w):
    x = rng.random((c, h, w)).astype(np.float32) + 0.01
    return (x / x.sum(axis=0, dtype=np.float32)).astype(np.float32)


def test_prob_map_roundtrip_small(tmp_path):
    m = ProbMap(np.array([[[0.3]], [[0.7]]], dtype=np.float32))
    save_prob_map(m, tmp_path / "a.pmap")
    back = load_prob_map(tmp_path / "a.pmap")
    assert back.values.tobytes() == m.values.tobytes()


def test_prob_map_golden_bytes(tmp_path):
    m = ProbMap(np.array([[[0.3]], [[0.7]]], dtype=np.float32))
    save_prob_map(m, tmp_path / "a.pmap")
    expected = bytes.fromhex(
        "504d4150"  # PMAP
        "0100"      # version 1
        "01"        # float32
        "00"        # flags
        "02000000" "01000000" "01000000"  # C, H, W
        "9a99993e"  # 0.3f
        "3333333f"  # 0.7f
    )
    assert (tmp_path / "a.pmap").read_bytes() == expected


def test_label_map_golden_bytes(tmp_path):
    save_label_map(np.array([[0, 1], [IGNORE, 2]], dtype=np.uint8), tmp_path / "a.lmap", 3)
    expected = b"LMAP" + struct.pack("<HBBIII", 1, 2, 0, 3, 2, 2) + bytes([0, 1, 255, 2])
    assert (tmp_path / "a.lmap").read_bytes() == expected


@settings(max_examples=40, deadline=None)
@given(c=st.integers(2, 6), h=st.integers(1, 9), w=st.integers(1, 9), seed=st.integers(0, 2**32 - 1))
def test_prob_map_roundtrip_random(tmp_path_factory, c, h, w, seed):
    path = tmp_path_factory.mktemp("pm") / "m.pmap"
    m = ProbMap(_softmaxish(np.random.default_rng(seed), c, h, w))
    save_prob_map(m, path)
    assert load_prob_map(path).values.tobytes() == m.values.tobytes()


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), seed=st.integers(0, 2**32 - 1))
def test_label_map_roundtrip_random(tmp_path_factory, h, w, seed):
    path = tmp_path_factory.mktemp("lm") / "m.lmap"
    rng = np.random.default_rng(seed)
    lab = rng.integers(0, 19, size=(h, w)).astype(np.uint8)
    lab[rng.random((h, w)) < 0.2] = IGNORE
    save_label_map(lab, path, 19)
    assert np.array_equal(load_label_map(path), lab)


def test_sum_violation_rejected(tmp_path):
    v = _softmaxish(np.random.default_rng(0), 3, 2, 2)
    v[:, 1, 0] *= 0.5
    save_prob_map(v, tmp_path / "bad.pmap")  # writer does not validate raw arrays
    with pytest.raises(ValidationError, match="sum"):
        load_prob_map(tmp_path / "bad.pmap")


def test_sum_within_tolerance_accepted(tmp_path):
    v = np.array([[[0.5]], [[0.50005]]], dtype=np.float32)
    save_prob_map(v, tmp_path / "ok.pmap")
    load_prob_map(tmp_path / "ok.pmap")


def test_bad_magic(tmp_path):
    p = tmp_path / "x.pmap"
    save_prob_map(ProbMap(np.full((2, 1, 1), 0.5, np.float32)), p)
    data = bytearray(p.read_bytes())
    data[:4] = b"NOPE"
    p.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="magic"):
        load_prob_map(p)


def test_truncated_and_trailing(tmp_path):
    p = tmp_path / "x.pmap"
    save_prob_map(ProbMap(np.full((2, 2, 2), 0.5, np.float32)), p)
    data = p.read_bytes()
    p.write_bytes(data[:-3])
    with pytest.raises(FormatError, match="truncated"):
        load_prob_map(p)
    p.write_bytes(data[:10])
    with pytest.raises(FormatError, match="truncated"):
        load_prob_map(p)
    p.write_bytes(data + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_prob_map(p)


def test_dimension_overflow(tmp_path):
    p = tmp_path / "x.pmap"
    p.write_bytes(b"PMAP" + struct.pack("<HBBIII", 1, 1, 0, 2**31, 2**31, 4))
    with pytest.raises(FormatError, match="overflow"):
        load_prob_map(p)


def test_prior_flag_skips_sum_check(tmp_path):
    q = np.full((2, 2, 2), 0.25, np.float32)  # sums over classes to 0.5
    save_prob_map(q, tmp_path / "q.pmap", prior=True)
    values, is_prior = load_prob_map_raw(tmp_path / "q.pmap")
    assert is_prior and np.array_equal(values, q)
    with pytest.raises(FormatError):
        load_prob_map(tmp_path / "q.pmap")


def test_label_map_all_ignore(tmp_path):
    lab = np.full((4, 4), IGNORE, np.uint8)
    save_label_map(lab, tmp_path / "a.lmap", 19)
    assert np.array_equal(load_label_map(tmp_path / "a.lmap"), lab)


def test_label_map_class_range(tmp_path):
    lab = np.zeros((2, 2), np.uint8)
    lab[1, 1] = 19
    save_label_map(lab, tmp_path / "a.lmap")  # C unknown at write time
    with pytest.raises(ValidationError, match="class-range"):
        load_label_map(tmp_path / "a.lmap", 19)
    lab[1, 1] = IGNORE
    save_label_map(lab, tmp_path / "b.lmap", 19)
    assert load_label_map(tmp_path / "b.lmap", 19)[1, 1] == IGNORE


def test_prob_map_invariants():
    with pytest.raises(ValidationError):
        ProbMap(np.ones((1, 2, 2), np.float32))  # C < 2
    with pytest.raises(ValidationError):
        ProbMap(np.array([[[1.5]], [[-0.5]]], np.float32))
    scaled = ProbMap.unchecked(np.full((2, 1, 1), 0.1, np.float32))
    assert scaled.values.sum() == pytest.approx(0.2)


def _write_maps(tmp_path, n_src, n_tgt, c=3):
    rng = np.random.default_rng(0)
    recs = []
    for i in range(n_src):
        p = tmp_path / f"s{i}.lmap"
        save_label_map(rng.integers(0, c, (4, 4)).astype(np.uint8), p, c)
        recs.append(ManifestRecord(f"s{i}", "source", None, p))
    for i in range(n_tgt):
        p = tmp_path / f"t{i}.pmap"
        save_prob_map(_softmaxish(rng, c, 4, 4), p)
        recs.append(ManifestRecord(f"t{i}", "target", p, None))
    return recs


def test_manifest_counts(tmp_path):
    write_manifest(tmp_path / "m.tsv", _write_maps(tmp_path, 2, 3), ["a", "b", "c"])
    m = read_manifest(tmp_path / "m.tsv")
    assert (m.num_source, m.num_target, m.num_classes) == (2, 3, 3)
    assert m.class_names == ["a", "b", "c"]
    assert m.by_role("target")[0].label_path is None


def test_manifest_duplicate_id(tmp_path):
    recs = _write_maps(tmp_path, 1, 1)
    write_manifest(tmp_path / "m.tsv", recs)
    text = (tmp_path / "m.tsv").read_text()
    (tmp_path / "m.tsv").write_text(text + text.splitlines()[-1] + "\n")
    with pytest.raises(FormatError, match="duplicate id 't0'"):
        read_manifest(tmp_path / "m.tsv")


def test_manifest_empty(tmp_path):
    (tmp_path / "m.tsv").write_text("")
    with pytest.raises(FormatError, match="empty manifest"):
        read_manifest(tmp_path / "m.tsv")


def test_manifest_missing_file(tmp_path):
    (tmp_path / "m.tsv").write_text("a\ttarget\tnope.pmap\t-\n")
    with pytest.raises(FormatError, match="missing file"):
        read_manifest(tmp_path / "m.tsv")


def test_manifest_inconsistent_classes(tmp_path):
    recs = _write_maps(tmp_path, 1, 1, c=3)
    save_label_map(np.zeros((4, 4), np.uint8), tmp_path / "x.lmap", 5)
    recs.append(ManifestRecord("x", "source", None, tmp_path / "x.lmap"))
    write_manifest(tmp_path / "m.tsv", recs)
    with pytest.raises(FormatError, match="inconsistent"):
        read_manifest(tmp_path / "m.tsv")
