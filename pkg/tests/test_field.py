import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustfield.field import (FieldGradient, VoxelField, create_field, load_checkpoint, query_field,
                               query_field_adjoint, save_checkpoint, sh_basis, softplus, trilinear_weights)

BOUNDS = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


def random_field(rng, res=4, sh_degree=1):
    f = VoxelField((res,) * 3, BOUNDS, sh_degree)
    f.params[...] = rng.normal(0, 1, f.params.shape)
    return f


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_create_field_defaults():
    f = create_field(4, BOUNDS, sh_degree=0)
    assert f.n_sh == 1 and f.color_coeffs.shape == (4, 4, 4, 3, 1)
    assert create_field(4, BOUNDS, sh_degree=1).n_sh == 4
    sigma, rgb = query_field(f, np.zeros((5, 3)), unit(np.ones((5, 3))))
    np.testing.assert_allclose(sigma, 0.1, rtol=1e-12)
    assert np.all(rgb == 0.5)
    with pytest.raises(ValueError):
        create_field((1, 4, 4), BOUNDS)
    with pytest.raises(ValueError):
        create_field(4, BOUNDS, sh_degree=2)


def test_node_and_edge_interpolation():
    f = random_field(np.random.default_rng(0))
    node = np.array([-1 + 2 / 3, 1.0, -1.0])  # grid index (1, 3, 0)
    sigma, _ = query_field(f, node, np.array([0, 0, 1.0]))
    assert sigma == pytest.approx(softplus(f.density_raw[1, 3, 0]), rel=1e-14)
    mid = node + np.array([1 / 3, 0, 0])
    sigma, _ = query_field(f, mid, np.array([0, 0, 1.0]))
    assert sigma == pytest.approx(softplus(0.5 * (f.density_raw[1, 3, 0] + f.density_raw[2, 3, 0])), rel=1e-12)


def test_outside_points():
    f = random_field(np.random.default_rng(1))
    sigma, rgb = query_field(f, np.array([[1.5, 0, 0], [0, -1.01, 0]]), unit([[1, 0, 0], [0, 1, 0]]))
    assert np.all(sigma == 0) and np.all(rgb == 0.5)


def test_non_unit_direction_rejected():
    with pytest.raises(ValueError):
        query_field(create_field(4, BOUNDS), np.zeros(3), np.array([0, 0, 2.0]))


def test_sh_basis_constants():
    b = sh_basis(np.array([0.6, 0.0, 0.8]), 1)
    np.testing.assert_allclose(b, [0.28209479, 0.0, 0.48860251 * 0.8, 0.48860251 * 0.6])


@settings(max_examples=50, deadline=None)
@given(x=st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_trilinear_partition_of_unity(x):
    f = create_field(5, BOUNDS)
    _, w, inside = trilinear_weights(f, np.array(x))
    assert inside[0]
    assert abs(w.sum() - 1.0) <= 1e-12
    assert np.all(w >= 0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_sigma_nonnegative_and_degree_zero_view_independent(seed):
    rng = np.random.default_rng(seed)
    f = random_field(rng, sh_degree=0)
    f.params[..., 0] *= 30
    x = rng.uniform(-1, 1, (20, 3))
    s1, c1 = query_field(f, x, unit(rng.normal(size=(20, 3))))
    s2, c2 = query_field(f, x, unit(rng.normal(size=(20, 3))))
    assert np.all(s1 >= 0)
    assert np.array_equal(c1, c2) and np.array_equal(s1, s2)


def _adjoint_vs_fd(rng, f, n=7, h=1e-5):
    x = rng.uniform(-0.95, 0.95, (n, 3))
    d = unit(rng.normal(size=(n, 3)))
    ds = rng.normal(size=n)
    dc = rng.normal(size=(n, 3))

    def objective(params):
        g = VoxelField(f.resolution, BOUNDS, f.sh_degree, params)
        s, c = query_field(g, x, d)
        return float(ds @ s + np.sum(dc * c))

    acc = query_field_adjoint(f, x, d, ds, dc, FieldGradient(f))
    fd = np.zeros_like(f.params)
    p = f.params.copy()
    for idx in np.ndindex(p.shape):
        old = p[idx]
        p[idx] = old + h
        up = objective(p)
        p[idx] = old - h
        dn = objective(p)
        p[idx] = old
        fd[idx] = (up - dn) / (2 * h)
    return acc.data, fd


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_query_adjoint_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    got, fd = _adjoint_vs_fd(rng, random_field(rng))
    assert _rel(got, fd) <= 1e-6


def test_adjoint_zero_upstream_and_node_example():
    f = random_field(np.random.default_rng(3))
    acc = FieldGradient(f)
    query_field_adjoint(f, np.zeros((2, 3)), unit(np.ones((2, 3))), 0.0, np.zeros((2, 3)), acc)
    assert not acc.data.any()
    node = np.array([[-1 + 2 / 3, 1.0, -1.0]])
    query_field_adjoint(f, node, np.array([[0, 0, 1.0]]), 1.0, np.zeros((1, 3)), acc)
    raw = f.density_raw[1, 3, 0]
    expected = np.zeros_like(f.density_raw)
    expected[1, 3, 0] = 1 / (1 + np.exp(-raw))
    np.testing.assert_allclose(acc.density_raw, expected, rtol=1e-14, atol=1e-300)


def test_outside_points_contribute_nothing():
    f = random_field(np.random.default_rng(4))
    acc = query_field_adjoint(f, np.array([[2.0, 0, 0]]), np.array([[1.0, 0, 0]]), 1.0, np.ones((1, 3)),
                              FieldGradient(f))
    assert not acc.data.any()


def test_gradient_shape_check():
    with pytest.raises(ValueError):
        query_field_adjoint(create_field(4, BOUNDS), np.zeros(3), np.array([1.0, 0, 0]), 1.0, np.ones(3),
                            FieldGradient(create_field(5, BOUNDS)))


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    f = random_field(np.random.default_rng(5), res=6).astype(np.float32)
    f.params[0, 0, 0, 0] = np.float32(1e-39)  # subnormal survives
    save_checkpoint(f, tmp_path / "f.rfv", {"steps": 12, "note": "x"})
    g, meta = load_checkpoint(tmp_path / "f.rfv")
    assert g.params.dtype == np.float32
    assert g.params.tobytes() == f.params.tobytes()
    assert g.resolution == f.resolution and g.sh_degree == 1
    np.testing.assert_array_equal(g.lo, f.lo)
    assert meta["steps"] == 12 and meta["resolution"] == [6, 6, 6]
    save_checkpoint(g, tmp_path / "g.rfv", meta)
    assert (tmp_path / "f.rfv").read_bytes() == (tmp_path / "g.rfv").read_bytes()
    assert (tmp_path / "f.rfv.json").read_bytes() == (tmp_path / "g.rfv.json").read_bytes()


def test_checkpoint_layout(tmp_path):
    f = create_field((2, 3, 4), BOUNDS, sh_degree=0, dtype=np.float32)
    f.params[..., 0] = np.arange(24).reshape(2, 3, 4)
    save_checkpoint(f, tmp_path / "c.rfv")
    buf = (tmp_path / "c.rfv").read_bytes()
    assert buf[:8] == b"RFVOXEL\0"
    header = 8 + 4 + 12 + 48 + 4
    dens = np.frombuffer(buf, "<f4", count=24, offset=header)
    np.testing.assert_array_equal(dens, np.arange(24))
    assert len(buf) == header + 4 * 24 * 4


def test_checkpoint_errors(tmp_path):
    (tmp_path / "bad.rfv").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.rfv")
    f = create_field(3, BOUNDS, dtype=np.float32)
    save_checkpoint(f, tmp_path / "t.rfv")
    data = (tmp_path / "t.rfv").read_bytes()
    (tmp_path / "t.rfv").write_bytes(data[:-4])
    with pytest.raises(ValueError, match="expected"):
        load_checkpoint(tmp_path / "t.rfv")
    (tmp_path / "m.rfv").write_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(ValueError, match="not a voxel"):
        load_checkpoint(tmp_path / "m.rfv")
