"""Container format tests: round trips, integrity checks, byte stability."""

import numpy as np
import pytest

from mwpgen.snapshot import MAGIC, SnapshotError, load_arrays, save_arrays


def sample_arrays():
    rng = np.random.default_rng(3)
    return {
        "beta": rng.normal(size=(3, 4)),
        "alpha": rng.normal(size=(2,)),
        "gamma/nested.name": np.array([[1.5]]),
    }


def test_round_trip(tmp_path):
    path = tmp_path / "a.snap"
    arrays = sample_arrays()
    save_arrays(path, arrays, meta={"kind": "test", "note": "x"})
    loaded, meta = load_arrays(path)
    assert list(loaded) == list(arrays)  # insertion order preserved
    for name, arr in arrays.items():
        assert loaded[name].dtype == np.float64
        assert np.array_equal(loaded[name], arr)
    assert meta == {"kind": "test", "note": "x"}


def test_bytes_deterministic(tmp_path):
    a, b = tmp_path / "a.snap", tmp_path / "b.snap"
    save_arrays(a, sample_arrays(), meta={"kind": "test"})
    save_arrays(b, sample_arrays(), meta={"kind": "test"})
    assert a.read_bytes() == b.read_bytes()


def test_magic_prefix(tmp_path):
    path = tmp_path / "a.snap"
    save_arrays(path, {"x": np.zeros(2)}, meta={})
    assert path.read_bytes().startswith(MAGIC)


def test_corrupted_payload_detected(tmp_path):
    path = tmp_path / "a.snap"
    save_arrays(path, {"x": np.arange(4.0)}, meta={})
    blob = bytearray(path.read_bytes())
    blob[-3] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(SnapshotError):
        load_arrays(path)


def test_wrong_magic_rejected(tmp_path):
    path = tmp_path / "a.snap"
    path.write_bytes(b"NOTSNAP0" + b"\x00" * 64)
    with pytest.raises(SnapshotError):
        load_arrays(path)


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "a.snap"
    save_arrays(path, {"x": np.arange(16.0)}, meta={})
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 20])
    with pytest.raises(SnapshotError):
        load_arrays(path)


def test_corrupted_header_rejected(tmp_path):
    path = tmp_path / "a.snap"
    save_arrays(path, {"x": np.arange(4.0)}, meta={})
    blob = bytearray(path.read_bytes())
    blob[len(MAGIC) + 6] ^= 0xFF  # flip a byte inside the JSON header
    path.write_bytes(bytes(blob))
    with pytest.raises(SnapshotError):
        load_arrays(path)


def test_empty_mapping_rejected(tmp_path):
    with pytest.raises(SnapshotError):
        save_arrays(tmp_path / "a.snap", {}, meta={})


def test_non_finite_rejected(tmp_path):
    with pytest.raises(SnapshotError):
        save_arrays(tmp_path / "a.snap", {"x": np.array([1.0, np.nan])}, meta={})
    with pytest.raises(SnapshotError):
        save_arrays(tmp_path / "b.snap", {"x": np.array([np.inf])}, meta={})


def test_shapes_preserved(tmp_path):
    path = tmp_path / "a.snap"
    arrays = {"s": np.array(2.5), "v": np.zeros(3), "m": np.zeros((2, 5))}
    save_arrays(path, arrays, meta={})
    loaded, _ = load_arrays(path)
    assert loaded["s"].shape == ()
    assert loaded["v"].shape == (3,)
    assert loaded["m"].shape == (2, 5)


def test_meta_keys_sorted_in_header(tmp_path):
    path = tmp_path / "a.snap"
    save_arrays(path, {"x": np.zeros(1)}, meta={"zz": 1, "aa": 2})
    blob = path.read_bytes()
    assert blob.index(b'"aa"') < blob.index(b'"zz"')


def test_int_input_coerced_to_float64(tmp_path):
    path = tmp_path / "a.snap"
    save_arrays(path, {"x": np.array([1, 2, 3])}, meta={})
    loaded, _ = load_arrays(path)
    assert loaded["x"].dtype == np.float64
    assert np.array_equal(loaded["x"], [1.0, 2.0, 3.0])
