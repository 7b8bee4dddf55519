"""Dataset loaders, model files and reports: round trips and failure modes."""
import gzip

import numpy as np
import pytest

from ilmpq import engine
from ilmpq.assignment import RowAssignment
from ilmpq.data import augment_images, load_idx_dataset, make_blobs, read_idx, write_idx
from ilmpq.errors import ConfigError, DomainError
from ilmpq.fileio import decode_model, encode_model, read_model, write_model
from ilmpq.model import build_model
from ilmpq.quant import RowKind
from ilmpq.report import decode_report, encode_report, summary_table


@pytest.mark.parametrize("dtype", ["u1", "i1", ">i2", ">i4", ">f4", ">f8"])
def test_idx_round_trip(tmp_path, dtype):
    arr = (np.arange(24).reshape(2, 3, 4) - 5).astype(dtype)
    if dtype == "u1":
        arr = np.arange(24, dtype="u1").reshape(2, 3, 4)
    p = tmp_path / "a.idx"
    write_idx(p, arr)
    back = read_idx(p)
    np.testing.assert_array_equal(back, arr)
    raw = p.read_bytes()
    write_idx(p, back)
    assert p.read_bytes() == raw


def test_idx_known_header_and_gzip(tmp_path):
    # magic 0x00000803: unsigned byte, 3 dims; then big-endian dims 2, 2, 2
    raw = bytes([0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2]) + bytes(range(8))
    p = tmp_path / "img.idx.gz"
    p.write_bytes(gzip.compress(raw))
    np.testing.assert_array_equal(read_idx(p), np.arange(8).reshape(2, 2, 2))


def test_idx_errors(tmp_path):
    p = tmp_path / "bad.idx"
    p.write_bytes(bytes([0, 0, 8, 2, 0, 0, 0, 3]))
    with pytest.raises(DomainError):
        read_idx(p)
    with pytest.raises(FileNotFoundError):
        read_idx(tmp_path / "missing.idx")


def test_load_idx_dataset_scales_and_adds_channel(tmp_path):
    write_idx(tmp_path / "x", np.full((3, 4, 4), 255, dtype="u1"))
    write_idx(tmp_path / "y", np.array([0, 1, 2], dtype="u1"))
    ds = load_idx_dataset(tmp_path / "x", tmp_path / "y")
    assert ds.x.shape == (3, 1, 4, 4) and ds.x.max() == 1.0
    np.testing.assert_array_equal(ds.y, [0, 1, 2])


def test_blobs_are_seeded_and_balanced():
    a, b = make_blobs(100, seed=4), make_blobs(100, seed=4)
    np.testing.assert_array_equal(a.x, b.x)
    assert np.bincount(a.y).tolist() == [10] * 10
    with pytest.raises(DomainError):
        make_blobs(0)


def test_augment_keeps_shape():
    x = np.random.default_rng(0).random((5, 2, 6, 6))
    out = augment_images(x, np.random.default_rng(1))
    assert out.shape == x.shape


def _model():
    m = build_model([{"kind": "conv2d", "out": 4, "kernel": 3, "padding": 1}, {"kind": "relu"},
                     {"kind": "avgpool"}, {"kind": "flatten"}, {"kind": "dense", "out": 3}], (1, 4, 4), seed=3)
    m.set_assignments({0: RowAssignment((RowKind.POT4, RowKind.POT4, RowKind.FIXED4, RowKind.FIXED8)),
                       4: RowAssignment((RowKind.POT4, RowKind.FIXED4, RowKind.FIXED8))})
    return m


def test_model_file_round_trip(tmp_path):
    m = _model()
    frozen = engine.frozen_codes(m)
    write_model(tmp_path / "m.ilmpq", m, frozen, {"note": "x"})
    m2, q2, meta = read_model(tmp_path / "m.ilmpq")
    assert meta == {"note": "x"}
    assert encode_model(m2, q2, meta) == (tmp_path / "m.ilmpq").read_bytes()
    for i in frozen:
        np.testing.assert_array_equal(frozen[i][0], q2[i][0])
    x = np.random.default_rng(0).random((3, 1, 4, 4))
    np.testing.assert_array_equal(m.predict(x, "qat"), m2.predict(x, "qat"))
    assert not list(tmp_path.glob(".*tmp"))


def test_float_model_file_has_no_codes():
    m = build_model([{"kind": "dense", "out": 2}], (3,))
    m2, q, _ = decode_model(encode_model(m))
    assert q is None and m2.layers[0].assignment is None


def test_model_file_rejects_garbage():
    with pytest.raises(ConfigError):
        decode_model(b"not a model file at all")
    data = encode_model(_model())
    with pytest.raises(ConfigError):
        decode_model(data[:-8])


def test_report_round_trip_and_summary():
    records = [{"type": "meta", "seed": 1, "config_hash": "ab", "version": "0.1.0", "command": "train"},
               {"type": "metrics", "method": "ILMPQ", "ratio": "60:35:5", "first_last_fixed8": False,
                "top1": 0.7073, "top5": 0.9, "throughput_gops": 421.1, "latency_ms": 8.6},
               {"type": "sweep", "ratio": "0:95:5", "throughput_gops": 1 / 3}]
    blob = encode_report(records)
    assert decode_report(blob) == records
    assert encode_report(decode_report(blob)) == blob
    table = summary_table(records).splitlines()
    assert table[0].split(" | ")[:2] == ["Method", "PoT-4:Fixed-4:Fixed-8"]
    assert "70.73" in table[2] and "421.10" in table[2] and "8.60" in table[2]
    with pytest.raises(ConfigError):
        encode_report([{"type": "unknown"}])
    with pytest.raises(ConfigError):
        decode_report(b"{not json}\n")
