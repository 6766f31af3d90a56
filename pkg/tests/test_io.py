import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from admgs.io import read_pfm, read_ply, read_png, to_uint8, write_pfm, write_ply, write_png


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3])),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_pfm_round_trip(tmp_path_factory, data):
    data = data[..., 0] if data.shape[2] == 1 else data
    path = tmp_path_factory.mktemp("pfm") / "x.pfm"
    write_pfm(path, data)
    np.testing.assert_array_equal(read_pfm(path), data)


def test_pfm_bottom_to_top(tmp_path):
    data = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    write_pfm(tmp_path / "a.pfm", data)
    raw = (tmp_path / "a.pfm").read_bytes()
    assert raw.startswith(b"Pf\n2 2\n-1.0\n")
    np.testing.assert_array_equal(np.frombuffer(raw[-16:], "<f4"), [3.0, 4.0, 1.0, 2.0])


def test_pfm_rejects(tmp_path):
    with pytest.raises(ValueError):
        write_pfm(tmp_path / "a.pfm", np.zeros((2, 2, 2)))
    (tmp_path / "b.pfm").write_bytes(b"P6\n1 1\n255\n")
    with pytest.raises(ValueError):
        read_pfm(tmp_path / "b.pfm")
    (tmp_path / "c.pfm").write_bytes(b"PF\n2 2\n-1.0\n" + b"\0" * 8)
    with pytest.raises(ValueError):
        read_pfm(tmp_path / "c.pfm")


def test_ply_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pts, nrm = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
    write_ply(tmp_path / "p.ply", pts, nrm)
    p2, n2 = read_ply(tmp_path / "p.ply")
    np.testing.assert_allclose(p2, pts, rtol=1e-6)
    np.testing.assert_allclose(n2, nrm, rtol=1e-6)


def test_png(tmp_path):
    img = np.linspace(0, 1, 4 * 5 * 3).reshape(4, 5, 3)
    write_png(tmp_path / "a.png", img)
    np.testing.assert_array_equal(to_uint8(read_png(tmp_path / "a.png")), to_uint8(img))
    assert to_uint8(np.array([-1.0, 0.5, 2.0])).tolist() == [0, 128, 255]
