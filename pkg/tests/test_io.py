import numpy as np
import pytest

from bladeforge.io import (read_cloud, read_latents, read_obj, read_ply, read_samples, read_stl, write_latents,
                           write_obj, write_ply, write_samples, write_stl, write_xyz_csv)


@pytest.mark.parametrize("binary", [False, True])
def test_ply_roundtrip(tmp_path, rng, binary):
    pts = rng.normal(size=(50, 3))
    write_ply(tmp_path / "c.ply", pts, binary=binary)
    np.testing.assert_allclose(read_ply(tmp_path / "c.ply"), pts, rtol=1e-6 if binary else 1e-15)
    np.testing.assert_allclose(read_cloud(tmp_path / "c.ply"), pts, rtol=1e-6)


def test_csv_cloud(tmp_path, rng):
    pts = rng.normal(size=(5, 3))
    write_xyz_csv(tmp_path / "c.csv", pts)
    np.testing.assert_allclose(read_cloud(tmp_path / "c.csv"), pts)


def test_mesh_formats(tmp_path):
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    t = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    write_obj(tmp_path / "m.obj", v, t)
    v2, t2 = read_obj(tmp_path / "m.obj")
    np.testing.assert_allclose(v2, v)
    np.testing.assert_array_equal(t2, t)
    write_stl(tmp_path / "m.stl", v, t)
    tri = read_stl(tmp_path / "m.stl")
    tri = tri[1] if isinstance(tri, tuple) else tri
    assert len(tri) == 4


def test_samples_and_latents(tmp_path, rng):
    xyz = rng.normal(size=(10, 3))
    s = rng.uniform(-0.1, 0.1, 10)
    write_samples(tmp_path / "s.bin", xyz, s, {"design_id": "d", "delta": 0.1})
    x2, s2, meta = read_samples(tmp_path / "s.bin")
    np.testing.assert_allclose(x2, xyz, rtol=1e-6)
    np.testing.assert_allclose(s2, s, rtol=1e-6)
    assert meta["design_id"] == "d"
    codes = rng.normal(size=(2, 4))
    write_latents(tmp_path / "z.csv", ["a", "b"], codes)
    ids, back = read_latents(tmp_path / "z.csv")
    assert list(ids) == ["a", "b"]
    np.testing.assert_allclose(back, codes)
