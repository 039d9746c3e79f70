import numpy as np
import pytest

from headfit import io
from headfit.errors import ValidationError


def test_hhm_roundtrip(tmp_path, rng):
    arrays = {"a": io.f32(rng.normal(size=(4, 3))), "idx": np.arange(7), "s": np.float64(2.5),
              "empty": np.zeros((0, 3))}
    io.write_hhm(tmp_path / "x.hhm", arrays, meta={"k": [1, 2], "name": "t"})
    back, meta = io.read_hhm(tmp_path / "x.hhm")
    assert meta == {"k": [1, 2], "name": "t"}
    assert list(back) == list(arrays)
    np.testing.assert_array_equal(back["a"], arrays["a"])
    np.testing.assert_array_equal(back["idx"], arrays["idx"])
    assert back["idx"].dtype == np.int64
    assert back["s"].shape == () and back["s"] == 2.5
    assert back["empty"].shape == (0, 3)


def test_hhm_bytes_are_stable(tmp_path):
    arrays = {"x": np.array([[1.0, 2.0], [3.0, 4.0]])}
    io.write_hhm(tmp_path / "a.hhm", arrays, meta={"b": 1, "a": 2})
    io.write_hhm(tmp_path / "b.hhm", arrays, meta={"a": 2, "b": 1})
    raw = (tmp_path / "a.hhm").read_bytes()
    assert raw == (tmp_path / "b.hhm").read_bytes()
    assert raw.startswith(b'HHM v1\nmeta {"a":2,"b":1}\narray x f4 2 2\nend\n')
    assert raw.endswith(np.array([1, 2, 3, 4], "<f4").tobytes())


def test_hhm_rejects_corruption(tmp_path):
    io.write_hhm(tmp_path / "x.hhm", {"x": np.ones(3)})
    raw = (tmp_path / "x.hhm").read_bytes()
    (tmp_path / "trail.hhm").write_bytes(raw + b"\0")
    (tmp_path / "short.hhm").write_bytes(raw[:-1])
    (tmp_path / "tag.hhm").write_bytes(b"HHM v2\n" + raw[7:])
    for name in ("trail", "short", "tag"):
        with pytest.raises(ValidationError):
            io.read_hhm(tmp_path / f"{name}.hhm")
    with pytest.raises(ValidationError):
        io.write_hhm(tmp_path / "bad.hhm", {"two words": np.ones(1)})


def test_pfm_roundtrip_bit_exact(tmp_path, rng):
    img = io.f32(rng.normal(size=(5, 7, 3)))
    io.write_pfm(tmp_path / "n.pfm", img)
    np.testing.assert_array_equal(io.read_pfm(tmp_path / "n.pfm"), img)
    depth = io.f32(rng.uniform(0.5, 1.0, size=(5, 7)))
    depth[0, 0] = np.inf
    io.write_pfm(tmp_path / "d.pfm", depth)
    back = io.read_pfm(tmp_path / "d.pfm")
    np.testing.assert_array_equal(back, depth)


def test_pfm_rows_bottom_to_top(tmp_path):
    img = np.array([[1.0, 2.0], [3.0, 4.0]])
    io.write_pfm(tmp_path / "x.pfm", img)
    raw = (tmp_path / "x.pfm").read_bytes()
    header = b"Pf\n2 2\n-1.0\n"
    assert raw.startswith(header)
    assert np.frombuffer(raw[len(header):], "<f4").tolist() == [3.0, 4.0, 1.0, 2.0]


def test_pgm_and_obj_roundtrip(tmp_path, rng):
    mask = rng.uniform(size=(6, 9)) > 0.5
    io.write_pgm(tmp_path / "m.pgm", mask)
    np.testing.assert_array_equal(io.read_pgm(tmp_path / "m.pgm"), mask)
    verts = io.f32(rng.normal(size=(5, 3)))
    faces = np.array([[0, 1, 2], [2, 3, 4]])
    io.write_obj(tmp_path / "m.obj", verts, faces)
    v, f = io.read_obj(tmp_path / "m.obj")
    np.testing.assert_array_equal(v, verts)
    np.testing.assert_array_equal(f, faces)


def test_landmark_csv(tmp_path, rng):
    uv = rng.normal(size=(3, 4, 2)) * 50
    valid = rng.uniform(size=(3, 4)) > 0.3
    io.write_landmarks_csv(tmp_path / "l.csv", uv, valid)
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "frame,landmark_id,u,v,valid"
    uv2, valid2 = io.read_landmarks_csv(tmp_path / "l.csv")
    np.testing.assert_array_equal(uv2, uv)
    np.testing.assert_array_equal(valid2, valid)
    (tmp_path / "bad.csv").write_text("frame,id,u,v\n0,0,1,2\n")
    with pytest.raises(ValidationError):
        io.read_landmarks_csv(tmp_path / "bad.csv")


def test_config_hash_is_order_independent():
    assert io.config_hash({"a": 1, "b": [1, 2]}) == io.config_hash({"b": [1, 2], "a": 1})
    assert io.config_hash({"a": 1}) != io.config_hash({"a": 2})
    assert len(io.config_hash({})) == 16
