"""The compiled and the numpy kernels must agree to rounding."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrlrooms import _accel, kernels
from hrlrooms.approx import GaussianCoder, StateGoalNet
from hrlrooms.env import Variant, generate_layout, wall_mask

pytestmark = pytest.mark.skipif(not _accel.USE_NUMBA, reason="numba backend disabled")


def net_and_codes(seed):
    net = StateGoalNet((20, 20), seed=seed, init_scale=0.5)
    return net, net.codes


def test_backend_name_matches_flag():
    assert _accel.backend_name() == "numba"
    assert kernels.forward is kernels.forward_nb


@settings(max_examples=30, deadline=None)
@given(px=st.floats(0, 1), py=st.floats(0, 1))
def test_gaussian_and_gates(px, py):
    c = GaussianCoder(5, 5)
    np.testing.assert_allclose(kernels.gaussian_code_nb(px, py, c.centers, c.sigma),
                               kernels.gaussian_code_np(px, py, c.centers, c.sigma), rtol=1e-14)
    np.testing.assert_array_equal(kernels.gate_rows_nb(px, py, c.centers, c.sigma, 0.1),
                                  kernels.gate_rows_np(px, py, c.centers, c.sigma, 0.1))


@settings(max_examples=60, deadline=None)
@given(x=st.lists(st.integers(-3, 3).map(float), min_size=1, max_size=30), data=st.data())
def test_kwta_mask_with_ties(x, data):
    k = data.draw(st.integers(1, len(x)))
    np.testing.assert_array_equal(kernels.kwta_mask_nb(np.array(x), k),
                                  kernels.kwta_mask_np(np.array(x), k))


@pytest.mark.parametrize("seed", range(5))
def test_forward_and_backprop(seed):
    net, codes = net_and_codes(seed)
    rows = net.gates((0.3, 0.6))
    code = codes[seed * 37 % 400]
    h1 = np.empty((len(rows), net.n_hidden))
    h2 = np.empty_like(h1)
    q1 = kernels.forward_nb(net.w1, net.w2, code, rows, net.k, h1)
    q2 = kernels.forward_np(net.w1, net.w2, code, rows, net.k, h2)
    np.testing.assert_allclose(q1, q2, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(h1, h2, rtol=1e-12, atol=1e-14)
    a1, b1 = net.w1.copy(), net.w2.copy()
    a2, b2 = net.w1.copy(), net.w2.copy()
    kernels.backprop_nb(a1, b1, code, rows, h1, 1, 0.7, 0.05, net.k)
    kernels.backprop_np(a2, b2, code, rows, h1, 1, 0.7, 0.05, net.k)
    np.testing.assert_allclose(a1, a2, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(b1, b2, rtol=1e-13, atol=1e-15)


def test_td_batch():
    net, codes = net_and_codes(3)
    rng = np.random.default_rng(0)
    n = 64
    args = (codes, rng.integers(400, size=n), rng.integers(400, size=n), rng.random((n, 2)),
            rng.integers(4, size=n), rng.choice([-2.0, -1.0, 1.0], size=n), rng.random(n) < 0.7,
            0.99, 0.01, net.k, net.goal_coder.centers, net.goal_coder.sigma, 0.1)
    a1, b1, a2, b2 = net.w1.copy(), net.w2.copy(), net.w1.copy(), net.w2.copy()
    d1 = kernels.td_batch_nb(a1, b1, *args)
    d2 = kernels.td_batch_np(a2, b2, *args)
    np.testing.assert_allclose(d1, d2, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(a1, a2, rtol=1e-10, atol=1e-13)


def test_td_slots_matches_td_batch():
    net, codes = net_and_codes(4)
    rng = np.random.default_rng(1)
    m = 50
    s = rng.integers(20, size=(m, 2))
    nxt = rng.integers(20, size=(m, 2))
    goals = rng.random((m, 2))
    acts = rng.integers(4, size=m)
    r = rng.choice([-2.0, -1.0, 1.0], size=m)
    att = rng.random(m) < 0.3
    term = rng.random(m) < 0.1
    slots = rng.integers(m, size=32)
    common = (0.99, 0.01, net.k, net.goal_coder.centers, net.goal_coder.sigma, 0.1)
    a1, b1 = net.w1.copy(), net.w2.copy()
    kernels.td_slots_nb(a1, b1, codes, 20, s, nxt, goals, acts, r, att, term, slots, *common)
    a2, b2 = net.w1.copy(), net.w2.copy()
    kernels.td_slots_np(a2, b2, codes, 20, s, nxt, goals, acts, r, att, term, slots, *common)
    a3, b3 = net.w1.copy(), net.w2.copy()
    kernels.td_batch_np(a3, b3, codes, s[slots, 1] * 20 + s[slots, 0],
                        nxt[slots, 1] * 20 + nxt[slots, 0], goals[slots], acts[slots], r[slots],
                        ~(att[slots] | term[slots]), *common)
    np.testing.assert_allclose(a1, a2, rtol=1e-10, atol=1e-13)
    np.testing.assert_allclose(a2, a3, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(b1, b3, rtol=1e-10, atol=1e-13)


def test_kmeans_kernels():
    rng = np.random.default_rng(2)
    pts = rng.random((500, 2))
    cents = rng.random((6, 2))
    np.testing.assert_array_equal(kernels.assign_nb(pts, cents), kernels.assign_np(pts, cents))
    assert kernels.nearest_nb(0.5, 0.5, cents) == kernels.nearest_np(0.5, 0.5, cents)
    l1, c1, n1, i1 = kernels.lloyd_step_nb(pts, cents)
    l2, c2, n2, i2 = kernels.lloyd_step_np(pts, cents)
    np.testing.assert_array_equal(l1, l2)
    np.testing.assert_array_equal(n1, n2)
    np.testing.assert_allclose(c1, c2, rtol=1e-12)
    assert i1 == pytest.approx(i2, rel=1e-12)


def test_meta_kernels():
    rng = np.random.default_rng(3)
    n = 40
    index_table = rng.integers(6, size=400)
    s0 = rng.integers(20, size=(n, 2))
    end = rng.integers(20, size=(n, 2))
    g = rng.integers(6, size=n)
    ret = rng.normal(size=n) * 10
    term = rng.random(n) < 0.2
    steps = rng.integers(1, 50, size=n)
    slots = rng.integers(n, size=64)
    for power in (True, False):
        t1 = rng.normal(size=(6, 6))
        t2 = t1.copy()
        kernels.meta_slots_nb(t1, index_table, 20, s0, g, ret, end, term, steps, slots, 0.99, power, 0.1)
        kernels.meta_slots_np(t2, index_table, 20, s0, g, ret, end, term, steps, slots, 0.99, power, 0.1)
        np.testing.assert_allclose(t1, t2, rtol=1e-13)


def test_sarsa_episode():
    lay = generate_layout(Variant.FOUR_ROOM_KEY_LOCK, 0)
    net, codes = net_and_codes(5)
    rows = np.arange(net.n_rows, dtype=np.int64)
    rng = np.random.default_rng(4)
    u = rng.random(201)
    rand_a = rng.integers(4, size=201)
    walls = wall_mask(lay)
    out = []
    for fn in (kernels.sarsa_episode_nb, kernels.sarsa_episode_np):
        w1, w2 = net.w1.copy(), net.w2.copy()
        acts = np.full(200, -1, dtype=np.int64)
        res = fn(w1, w2, codes, rows, net.k, walls, 3, 3, lay.key_pos.x, lay.key_pos.y,
                 lay.reward_pos.x, lay.reward_pos.y, 40.0, 200, 0.2, u, rand_a, 0.99, 0.001, acts)
        out.append((res, acts, w1, w2))
    (r1, a1, w11, w21), (r2, a2, w12, w22) = out
    assert r1[1:] == r2[1:] and r1[0] == pytest.approx(r2[0])
    np.testing.assert_array_equal(a1, a2)
    np.testing.assert_allclose(w11, w12, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(w21, w22, rtol=1e-9, atol=1e-12)
