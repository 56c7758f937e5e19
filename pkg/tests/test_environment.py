import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stable_homog.environment import (
    ConductanceLaw,
    Environment,
    box_pairs,
    conductance,
    conductances,
    fluctuation,
    parse_law,
)
from stable_homog.errors import ConfigurationError, DomainError

M64 = (1 << 64) - 1


def _mix(z):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
    return z ^ (z >> 31)


def _pack(p):
    w = 0
    for c in p:
        w = ((w << 21) | ((c << 1) ^ (c >> 63)) & M64) & M64
    return w


def oracle_uniform(seed, a, b):
    """Plain-integer rendition of the pair hash."""
    lo, hi = (a, b) if tuple(a) < tuple(b) else (b, a)
    g = 0x9E3779B97F4A7C15
    h = _mix((seed + g) & M64)
    h = _mix(h ^ _pack(lo))
    h = _mix(((h + g) & M64) ^ _pack(hi))
    return (h >> 11) / 2.0**53


points = st.lists(st.integers(-1000, 1000), min_size=2, max_size=2).map(tuple)
laws = st.sampled_from(["constant", "uniform:1", "uniform:0.3", "bernoulli:0.5", "bernoulli:0.05"])


def test_parse_law_grammar():
    assert parse_law("constant") == ConductanceLaw("constant")
    assert parse_law("uniform:0.5") == ConductanceLaw("uniform", 0.5)
    assert parse_law("bernoulli:0.25").upper_bound == 4.0
    for bad in ["gauss:1", "uniform", "bernoulli:0", "bernoulli:1.5", "uniform:2", "constant:1", "uniform:x"]:
        with pytest.raises(ConfigurationError):
            parse_law(bad)


def test_constant_law_gives_unit_weights():
    env = Environment(7, "constant", 2)
    assert conductance(env, (0, 0), (3, -1)) == 1.0
    assert fluctuation(env, (0, 0), (3, -1)) == 0.0


@given(seed=st.integers(0, 2**63), law=laws, x=points, y=points)
def test_symmetry_and_bounds(seed, law, x, y):
    if x == y:
        return
    env = Environment(seed, law, 2)
    w = conductance(env, x, y)
    assert w == conductance(env, y, x)
    assert 0.0 <= w <= env.upper_bound


@given(seed=st.integers(0, 2**64 - 1), x=points, y=points)
def test_hash_matches_integer_oracle(seed, x, y):
    if x == y:
        return
    env = Environment(seed, "uniform:1", 2)
    u = oracle_uniform(seed, x, y)
    assert conductance(env, x, y) == 1.0 - 1.0 + 2.0 * u


def test_determinism_across_instances():
    a = Environment(99, "bernoulli:0.3", 3)
    b = Environment(99, parse_law("bernoulli:0.3"), 3)
    xs = np.random.default_rng(0).integers(-50, 50, (500, 3))
    ys = xs + np.array([1, 0, 0])
    assert np.array_equal(conductances(a, xs, ys), conductances(b, xs, ys))


def test_errors():
    env = Environment(0, "uniform:1", 2)
    with pytest.raises(DomainError):
        conductance(env, (1, 1), (1, 1))
    with pytest.raises(DomainError):
        conductance(env, (1, 1, 0), (1, 2, 0))
    with pytest.raises(ConfigurationError):
        Environment(0, "constant", 4)


def _many_pairs(n, d=2, seed=0):
    rng = np.random.default_rng(seed)
    xs = rng.integers(-(1 << 19), 1 << 19, (n, d))
    ys = xs + rng.integers(1, 50, (n, d))
    return xs, ys


def test_bernoulli_marginal():
    env = Environment(3, "bernoulli:0.5", 2)
    w = conductances(env, *_many_pairs(10**6))
    assert set(np.unique(w)) <= {0.0, 2.0}
    # 3 sigma of the mean of 1e6 variance-1 draws
    assert abs(w.mean() - 1.0) <= 0.005
    assert set(np.unique(w - 1.0)) <= {-1.0, 1.0}


def test_uniform_fluctuation_marginal():
    env = Environment(4, "uniform:1", 2)
    xi = conductances(env, *_many_pairs(10**6, seed=1)) - 1.0
    assert xi.min() >= -1.0 and xi.max() <= 1.0
    assert abs(xi.mean()) <= 0.004


def test_independence_across_seeds():
    pairs = [((0, 0), (1, 0)), ((0, 0), (0, 1)), ((0, 0), (1, 1)), ((5, 5), (6, 5))]
    n_seeds = 10**4
    W = np.array([[conductance(Environment(s, "uniform:1", 2), x, y) for x, y in pairs] for s in range(n_seeds)])
    C = np.corrcoef(W.T)
    off = C[~np.eye(len(pairs), dtype=bool)]
    assert np.all(np.abs(off) <= 4 / np.sqrt(n_seeds))


def test_box_pairs_counts():
    env = Environment(1, "bernoulli:0.5", 2)
    xs, ys, w = box_pairs(env, 2)
    assert len(w) == 16 * 15 // 2
    assert np.array_equal(w, conductances(env, ys, xs))
