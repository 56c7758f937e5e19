from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stable_homog.errors import ConfigurationError, DomainError
from stable_homog.lattice import (
    GridFunction,
    LatticeBox,
    average,
    block_averages,
    box_points,
    embed_piecewise_constant,
    l2_distance,
    multiscale_centers,
    read_grid_binary,
    read_grid_csv,
    write_grid_binary,
    write_grid_csv,
)


def test_box_enumeration_examples():
    b = box_points(1, 1, 2)
    assert b.points.tolist() == [[0, 0], [0, 1], [1, 0], [1, 1]]
    assert box_points(2, 1, 1).points[:, 0].tolist() == [-0.5, 0.0, 0.5, 1.0]
    assert box_points(4, 2, 2).size == 256
    assert box_points(3, Fraction(1, 2), 1).size == 3


def test_box_requires_integer_side():
    with pytest.raises(ConfigurationError):
        LatticeBox(3, Fraction(1, 4), 1)
    with pytest.raises(ConfigurationError):
        LatticeBox(0, 1, 1)


@given(k=st.integers(1, 6), M=st.integers(1, 3), d=st.integers(1, 3),
       c=st.lists(st.integers(-5, 5), min_size=3, max_size=3))
def test_index_round_trip_and_bounds(k, M, d, c):
    box = LatticeBox(k, M, d, tuple(c[:d]))
    pts = box.int_points
    assert len(pts) == (2 * M * k) ** d
    assert np.array_equal(box.index_of(pts), np.arange(box.size))
    rel = box.points - np.array(c[:d]) / k
    assert np.all(rel > -M) and np.all(rel <= M)
    # row-major: last coordinate fastest
    if box.size > 1:
        assert pts[1, -1] == pts[0, -1] + 1


def test_unit_cube_has_unit_measure():
    for k in (1, 2, 5):
        box = LatticeBox(k, Fraction(1, 2), 2, (k // 2 if k % 2 == 0 else 0,) * 2)
        assert box.size * k ** (-2) == pytest.approx(1.0)


def test_average_examples():
    box = LatticeBox(4, 1, 1)
    f = GridFunction(box, box.points[:, 0].copy())
    direct = sum(i / 4 for i in range(-3, 5)) / 8
    assert average(f) == pytest.approx(direct)
    assert average(f) == pytest.approx(1 / 8)
    assert average(GridFunction(box, np.full(box.size, 2.5))) == 2.5
    ind = GridFunction(box, (box.points[:, 0] > 0).astype(float))
    assert average(ind) == 0.5
    sub = LatticeBox(4, Fraction(1, 2), 1)
    assert average(f, sub) == pytest.approx(np.mean([i / 4 for i in range(-1, 3)]))


@pytest.mark.parametrize("d", [1, 2, 3])
def test_dyadic_partition_exact(d):
    for m in range(0, 7 if d < 3 else 5):
        box = LatticeBox(1, 1 << m, d)
        for n in range(0, m + 1):
            dec = multiscale_centers(m, n, d)
            assert dec.count == 2 ** (d * (m - n))
            cells = dec.cell_of(box.int_points)
            counts = np.bincount(cells, minlength=dec.count)
            assert np.all(counts == (2 ** (n + 1)) ** d)
            # every point lies in the cell whose box contains it
            for i in np.random.default_rng(m + n).choice(dec.count, min(dec.count, 4), replace=False):
                sub = dec.cell_box(i)
                assert np.all(cells[box.index_of(sub.int_points)] == i)


def test_dyadic_examples():
    assert multiscale_centers(3, 3, 2).centers.tolist() == [[0, 0]]
    dec = multiscale_centers(2, 1, 1)
    assert dec.centers[:, 0].tolist() == [-2, 2]
    assert multiscale_centers(5, 2, 2).count == 64
    with pytest.raises(DomainError):
        multiscale_centers(2, 3, 1)
    assert np.all(dec.centers % 2 == 0) and np.all((dec.centers // 2) % 2 != 0)


def test_block_averages_single_block():
    box = LatticeBox(1, 4, 2)
    vals = np.random.default_rng(0).standard_normal(box.size)
    f = GridFunction(box, vals)
    assert block_averages(f, multiscale_centers(2, 2, 2))[0] == pytest.approx(vals.mean())


def test_piecewise_constant_cells():
    box = LatticeBox(2, Fraction(3, 4), 1)  # points -0.5, 0, 0.5
    u = GridFunction(box, np.array([1.0, 2.0, 3.0]))
    ext = embed_piecewise_constant(u)
    assert ext(box.points).tolist() == [1.0, 2.0, 3.0]
    # the cell of z is (z - 1/k, z]
    assert ext([[-0.5 + 0.25]]).tolist() == [2.0]
    assert ext([[0.0 + 0.25]]).tolist() == [3.0]
    assert ext([[-0.75]]).tolist() == [1.0]
    assert ext([[-1.0]]).tolist() == [0.0]
    assert ext([[2.0]]).tolist() == [0.0]


@given(seed=st.integers(0, 1000), k=st.integers(1, 5))
def test_extension_norm_identity(seed, k):
    box = LatticeBox(k, 1, 2)
    u = GridFunction(box, np.random.default_rng(seed).standard_normal(box.size))
    ext = embed_piecewise_constant(u)
    assert ext.l2_norm() == pytest.approx(u.norm(), rel=1e-14)
    # Monte Carlo of the extension over the box agrees with the cell sum
    x = np.random.default_rng(seed + 1).uniform(-1, 1, (20000, 2))
    mc = 4.0 * np.mean(ext(x) ** 2)
    assert mc == pytest.approx(u.norm() ** 2, rel=0.15)


def test_l2_distance_examples():
    box = LatticeBox(4, 2, 2)
    g = lambda x: np.sin(x[:, 0]) * np.cos(x[:, 1])
    u = GridFunction(box, g(box.points))
    assert l2_distance(u, g) == 0.0
    c = 0.3
    shifted = GridFunction(box, u.values + c)
    assert l2_distance(shifted, g) == pytest.approx(c * (2 * 2) ** (2 / 2))
    r = GridFunction(box, np.random.default_rng(1).standard_normal(box.size))
    direct = np.sqrt(sum(v * v for v in r.values) / 16)
    assert l2_distance(r, lambda x: np.zeros(len(x))) == pytest.approx(direct, rel=1e-12)


@pytest.mark.parametrize("ncomp", [1, 2])
def test_persistence_round_trip(tmp_path, ncomp):
    box = LatticeBox(3, Fraction(2, 3), 2, (1, -2))
    shape = (box.size,) if ncomp == 1 else (box.size, ncomp)
    u = GridFunction(box, np.random.default_rng(0).standard_normal(shape))
    write_grid_binary(u, tmp_path / "u.bin")
    v = read_grid_binary(tmp_path / "u.bin")
    assert v.box.same_as(box) and np.array_equal(v.values, u.values)
    write_grid_csv(u, tmp_path / "u.csv")
    w = read_grid_csv(tmp_path / "u.csv")
    assert w.box.same_as(box) and np.array_equal(w.values, u.values)


def test_binary_rejects_truncated_file(tmp_path):
    box = LatticeBox(2, 1, 1)
    write_grid_binary(GridFunction(box, np.arange(4.0)), tmp_path / "u.bin")
    data = (tmp_path / "u.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(data[:-8])
    with pytest.raises(ConfigurationError):
        read_grid_binary(tmp_path / "t.bin")
