import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrlrooms.discovery import (AnomalyDetector, KMeansState, SubgoalKind, SubgoalSet,
                                StateIndexer, assign_cluster, detect_anomaly, discover,
                                kmeans_fit, memory_points, subgoal_attained)
from hrlrooms.env import GridPos
from hrlrooms.errors import ContractViolation
from hrlrooms.memory import ReplayBuffer, Transition, push
from hrlrooms.trainer import TrainConfig, build_layout, run_random_walk


def t(s, r, s_next):
    return Transition(GridPos(*s), 0, float(r), GridPos(*s_next), False)


@pytest.fixture(scope="module")
def walk():
    # seed 0's walk picks up both the key and the key-then-lock reward
    cfg = TrainConfig(walk_episodes=100, walk_policy="random", seed=0)
    layout = build_layout(cfg)
    memory = run_random_walk(cfg, layout, None)
    assert sorted(set(memory.column("r")[memory.column("r") > 0])) == [10.0, 40.0]
    return cfg, layout, memory


@pytest.mark.parametrize("r,flag", [(10.0, True), (40.0, True), (1.0, True), (0.0, False),
                                    (-2.0, False), (0.99, False)])
def test_positive_reward_flags(r, flag):
    assert AnomalyDetector().is_anomalous(t((1, 1), r, (1, 2))) is flag


def test_feature_distance_flag_optional():
    jump = t((0, 0), 0.0, (19, 19))
    assert not AnomalyDetector().is_anomalous(jump)
    assert AnomalyDetector(feature_distance_threshold=0.5).is_anomalous(jump)
    assert not AnomalyDetector(feature_distance_threshold=0.5).is_anomalous(t((0, 0), 0, (0, 1)))


def test_detect_anomaly_registers_once():
    gset = SubgoalSet((20, 20))
    det = AnomalyDetector()
    assert detect_anomaly(det, t((3, 3), 10, (3, 4)), gset)
    assert not detect_anomaly(det, t((3, 5), 10, (3, 4)), gset)
    # the neighbouring cell is one merge radius away and stays distinct
    assert detect_anomaly(det, t((3, 4), 10, (3, 5)), gset)
    assert len(gset.anomalies) == 2


def test_anomaly_mask_matches_scalar_test(walk):
    cfg, _, memory = walk
    det = AnomalyDetector(feature_distance_threshold=0.06)
    mask = det.anomaly_mask(memory)
    assert mask.tolist() == [det.is_anomalous(e) for e in memory]


def lloyd_reference(points, centroids, iters=200):
    c = centroids.copy()
    for _ in range(iters):
        d = ((points[:, None, :] - c[None]) ** 2).sum(axis=2)
        lab = d.argmin(axis=1)
        new = np.array([points[lab == j].mean(axis=0) if (lab == j).any() else c[j]
                        for j in range(len(c))])
        if np.allclose(new, c, atol=0, rtol=0):
            break
        c = new
    return c


def test_k1_centroid_is_mean():
    rng = np.random.default_rng(0)
    pts = rng.random((300, 2))
    st_ = kmeans_fit(pts, KMeansState(1))
    np.testing.assert_allclose(st_.centroids[0], pts.mean(axis=0), atol=1e-12)


def test_blob_means_recovered_within_two_sigma():
    rng = np.random.default_rng(5)
    means = np.array([[0.2, 0.2], [0.8, 0.2], [0.2, 0.8], [0.8, 0.8]])
    sigma = 0.05
    pts = np.concatenate([m + sigma * rng.standard_normal((250, 2)) for m in means])
    fit = kmeans_fit(pts, KMeansState(4), seed=1)
    for m in means:
        assert np.linalg.norm(fit.centroids - m, axis=1).min() < 2 * sigma
    assert sorted(fit.counts.tolist()) == [250] * 4


def test_fit_matches_plain_lloyd():
    rng = np.random.default_rng(9)
    pts = rng.random((400, 2))
    start = pts[:5].copy()
    ours = kmeans_fit(pts, KMeansState(5, start.copy()), max_iters=500, tol=0.0)
    np.testing.assert_allclose(ours.centroids, lloyd_reference(pts, start), atol=1e-12)


def test_warm_start_on_converged_is_identity():
    rng = np.random.default_rng(3)
    pts = rng.random((200, 2))
    first = kmeans_fit(pts, KMeansState(4), max_iters=500, tol=0.0)
    again = kmeans_fit(pts, first, max_iters=500, tol=0.0)
    np.testing.assert_array_equal(again.centroids, first.centroids)


def test_cold_start_needs_k_points():
    st_ = kmeans_fit(np.zeros((2, 2)), KMeansState(4))
    assert not st_.ready


def test_empty_cluster_is_reseeded():
    pts = np.array([[0.0, 0.0], [0.0, 0.1], [1.0, 1.0], [1.0, 0.9]])
    far = np.array([[0.0, 0.05], [1.0, 0.95], [5.0, 5.0]])
    fit = kmeans_fit(pts, KMeansState(3, far))
    assert fit.reseeds >= 1
    assert (fit.counts > 0).all()


def test_assign_ties_go_to_lowest_index():
    st_ = KMeansState(2, np.array([[0.0, 0.0], [1.0, 0.0]]))
    assert assign_cluster(st_, (0.5, 0.0)) == 0
    st_ = KMeansState(3, np.array([[0.3, 0.3], [0.7, 0.7], [0.3, 0.3]]))
    assert assign_cluster(st_, (0.3, 0.3)) == 0


def test_point_at_centroid_assigns_to_it():
    c = np.array([[0.1, 0.2], [0.5, 0.5], [0.9, 0.1]])
    st_ = KMeansState(3, c)
    for i, p in enumerate(c):
        assert assign_cluster(st_, p) == i


def test_assign_before_fit_raises():
    with pytest.raises(ContractViolation):
        assign_cluster(KMeansState(4), (0.0, 0.0))


def test_no_positive_rewards_gives_only_centroids():
    memory = ReplayBuffer(Transition, 1000)
    rng = np.random.default_rng(1)
    for _ in range(500):
        x, y = rng.integers(20, size=2)
        push(memory, t((x, y), -2.0 if x % 3 == 0 else 0.0, (x, y)))
    gset, kstate, memory = discover(memory, AnomalyDetector(), KMeansState(4), SubgoalSet((20, 20)))
    assert len(gset.anomalies) == 0 and len(gset.centroids) == 4
    assert len(memory) == 500


def test_walk_discovery_finds_key_and_lock(walk):
    cfg, layout, memory = walk
    gset, kstate, rest = discover(memory.copy(), AnomalyDetector(), KMeansState(4),
                                  SubgoalSet((20, 20)))
    assert {g.cell for g in gset.anomalies} == {layout.key_pos, layout.reward_pos}
    assert len(gset.centroids) == 4
    assert not (rest.column("r") >= 1.0).any()
    assert [g.id for g in gset] == list(range(len(gset)))


def test_discover_is_idempotent(walk):
    _, _, memory = walk
    det = AnomalyDetector()
    gset, kstate, rest = discover(memory.copy(), det, KMeansState(4), SubgoalSet((20, 20)), tol=0.0,
                                  max_iters=500)
    before = gset.to_dict()
    size = len(rest)
    gset2, kstate2, rest2 = discover(rest, det, kstate, gset, tol=0.0, max_iters=500)
    assert gset2.to_dict() == before and len(rest2) == size
    np.testing.assert_array_equal(kstate2.centroids, kstate.centroids)


def test_subgoal_attained_rules(walk):
    _, layout, memory = walk
    gset, kstate, _ = discover(memory.copy(), AnomalyDetector(), KMeansState(4), SubgoalSet((20, 20)))
    key = next(g for g in gset.anomalies if g.cell == layout.key_pos)
    assert subgoal_attained(gset, key.id, kstate, layout.key_pos)
    nb = GridPos(layout.key_pos.x + (1 if layout.key_pos.x < 19 else -1), layout.key_pos.y)
    assert not subgoal_attained(gset, key.id, kstate, nb)
    for cell in layout.free_cells[::7]:
        c = assign_cluster(kstate, gset.normalize(cell))
        for g in gset.centroids:
            assert subgoal_attained(gset, g.id, kstate, cell) == (g.cluster == c)
    with pytest.raises(ContractViolation):
        subgoal_attained(gset, len(gset), kstate, nb)


def test_state_indexer_prefers_anomalies(walk):
    _, layout, memory = walk
    gset, kstate, _ = discover(memory.copy(), AnomalyDetector(), KMeansState(4), SubgoalSet((20, 20)))
    idx = StateIndexer(gset, kstate)
    for g in gset.anomalies:
        assert idx(g.cell) == g.id
    cell = GridPos(0, 0)
    g = gset[idx(cell)]
    assert g.kind is SubgoalKind.CENTROID and g.cluster == assign_cluster(kstate, gset.normalize(cell))
    with pytest.raises(ContractViolation):
        StateIndexer(SubgoalSet((20, 20)), KMeansState(4))(cell)


def test_subgoal_json_roundtrip(walk, tmp_path):
    _, _, memory = walk
    gset, _, _ = discover(memory.copy(), AnomalyDetector(), KMeansState(4), SubgoalSet((20, 20)))
    gset.save(tmp_path / "g.json")
    assert SubgoalSet.load(tmp_path / "g.json").to_dict() == gset.to_dict()


def test_memory_points_in_unit_square(walk):
    _, _, memory = walk
    pts = memory_points(memory, (20, 20))
    assert pts.min() >= 0.0 and pts.max() <= 1.0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(8, 120), k=st.integers(1, 6))
def test_inertia_never_rises(seed, n, k):
    pts = np.random.default_rng(seed).random((n, 2))
    fit = kmeans_fit(pts, KMeansState(k), seed=seed, tol=0.0)
    h = np.array(fit.inertia)
    assert (np.diff(h) <= 1e-12 * (1 + h[:-1])).all()


@settings(max_examples=40, deadline=None)
@given(rewards=st.lists(st.sampled_from([-2.0, 0.0, 10.0, 40.0]), min_size=5, max_size=60),
       seed=st.integers(0, 1000))
def test_discover_leaves_no_anomalous_transition(rewards, seed):
    rng = np.random.default_rng(seed)
    memory = ReplayBuffer(Transition, 100)
    for r in rewards:
        x, y = rng.integers(20, size=2)
        push(memory, t((x, y), r, (x, y)))
    gset, kstate, rest = discover(memory, AnomalyDetector(), KMeansState(2), SubgoalSet((20, 20)))
    assert not (rest.column("r") >= 1.0).any()
    assert len(rest) == sum(r < 1.0 for r in rewards)
    assert len(gset.centroids) == (2 if len(rest) >= 2 else 0)
