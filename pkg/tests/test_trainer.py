import json

import numpy as np
import pytest

from hrlrooms.agents import intrinsic_reward
from hrlrooms.env import GOAL_REWARD, KEY_REWARD, LOCK_REWARD, GridPos, reset, step, with_goal
from hrlrooms.trainer import (ConfigError, RunArtifacts, TrainConfig, build_layout,
                              cluster_value_diagnostic, evaluate, load_artifacts, read_metrics,
                              run_baseline, run_intrinsic_pretraining, run_random_walk,
                              run_unified, save_artifacts)

from oracles import bfs_distances, bfs_first_action

TINY = dict(episodes=40, pretrain_episodes=30, walk_episodes=10, eval_interval=20,
            eval_episodes=5, final_eval_episodes=10, discovery_interval=500)


@pytest.fixture(scope="module")
def tiny_run():
    return run_unified(TrainConfig(seed=3, **TINY))


# -- config ---------------------------------------------------------------------

def test_config_rejects_out_of_range():
    with pytest.raises(ConfigError) as err:
        TrainConfig(gamma=1.5)
    assert err.value.key == "gamma" and err.value.value == 1.5
    assert "[0.0, 1.0]" in str(err.value)


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError) as err:
        TrainConfig.from_dict({"gamma": 0.9, "learning_rate": 0.1})
    assert err.value.key == "learning_rate"


def test_config_rejects_bad_choice_and_types():
    with pytest.raises(ConfigError):
        TrainConfig(variant="five_room")
    with pytest.raises(ConfigError):
        TrainConfig(k=2.5)
    with pytest.raises(ConfigError):
        TrainConfig(kwta_k=60)
    with pytest.raises(ConfigError):
        TrainConfig(eps1_start=0.1, eps1_end=0.3)


def test_config_roundtrip_and_coercion():
    cfg = TrainConfig.from_dict({"k": "6", "alpha1": "0.01", "merge_radius": "none"})
    assert cfg.k == 6 and cfg.alpha1 == 0.01 and cfg.merge_radius is None
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.replace(k=8).k == 8


# -- pretraining ------------------------------------------------------------------

def test_zero_pretraining_gives_empty_memories():
    pre = run_intrinsic_pretraining(TrainConfig(pretrain_episodes=0))
    assert len(pre.memory) == 0 and len(pre.controller_memory) == 0
    ctl, mem = pre
    assert ctl is pre.controller and mem is pre.memory


def test_pretraining_memories_agree():
    pre = run_intrinsic_pretraining(TrainConfig(pretrain_episodes=40, seed=1))
    assert len(pre.memory) == len(pre.controller_memory) > 0
    for t, it in zip(pre.memory, pre.controller_memory):
        assert (t.s, t.a, t.s_next) == (it.s, it.a, it.s_next)
        assert it.r_tilde == intrinsic_reward(it.s_next, it.attained, t.r)


def test_pretraining_reaches_held_out_goals_on_8x8():
    cfg = TrainConfig(variant="single_room_dynamic_goal", width=8, height=8,
                      pretrain_episodes=5000, seed=0)
    layout = build_layout(cfg)
    ctl = run_intrinsic_pretraining(cfg, layout).controller
    net = ctl.net
    rng = np.random.default_rng(12345)
    cells = layout.free_cells
    ok = 0
    trials = 300
    for _ in range(trials):
        s, g = (cells[i] for i in rng.choice(len(cells), size=2, replace=False))
        shortest = bfs_distances(8, 8, set(), s)[tuple(g)]
        state = reset(with_goal(layout, g), None, start=s, max_steps=2 * shortest)
        rows = net.gates(g)
        while not state.done:
            state, _ = step(state, int(np.argmax(net.q(state.agent, g, rows))))
        ok += state.success
    assert ok / trials >= 0.9


# -- random walk -------------------------------------------------------------------

def test_walk_size_bound_and_determinism():
    cfg = TrainConfig(walk_episodes=100, walk_policy="random", seed=6)
    a = run_random_walk(cfg)
    b = run_random_walk(cfg)
    assert len(a) <= 100 * 200
    assert list(a) == list(b)


def test_walk_key_frequency_report():
    hits = 0
    for seed in range(20):
        mem = run_random_walk(TrainConfig(walk_episodes=100, walk_policy="random", seed=seed))
        hits += bool((mem.column("r") == KEY_REWARD).any())
    print(f"walks with a key pickup: {hits}/20")
    assert hits >= 1


def test_controller_walk_runs():
    cfg = TrainConfig(walk_episodes=5, walk_policy="controller", pretrain_episodes=10, seed=2)
    ctl = run_intrinsic_pretraining(cfg).controller
    mem = run_random_walk(cfg, controller=ctl)
    assert 0 < len(mem) <= 5 * 200


# -- unified loop ------------------------------------------------------------------

def test_unified_is_bit_reproducible(tiny_run, tmp_path):
    again = run_unified(TrainConfig(seed=3, **TINY))
    save_artifacts(tiny_run, tmp_path / "a")
    save_artifacts(again, tmp_path / "b")
    for name in ("metrics.csv", "eval.csv", "controller.bin", "meta.bin", "subgoals.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_seed_changes_run(tiny_run):
    other = run_unified(TrainConfig(seed=4, **TINY))
    assert [r.row() for r in other.records] != [r.row() for r in tiny_run.records]


def test_one_meta_transition_per_segment():
    art = run_unified(TrainConfig(seed=5, gamma=1.0, **TINY))
    mmem = list(art.meta_memory)
    assert len(mmem) == sum(r.attempts for r in art.records)
    i = 0
    for rec in art.records:
        segs = mmem[i:i + rec.attempts]
        i += rec.attempts
        # with gamma = 1 each segment's G is its plain reward sum
        assert sum(m.G for m in segs) == pytest.approx(rec.ret)
        assert sum(m.steps for m in segs) == rec.steps
        assert all(1 <= m.steps <= art.config.subgoal_steps for m in segs)
        assert [m.end_terminal for m in segs[:-1]] == [False] * (len(segs) - 1)
        assert segs[-1].end_terminal == rec.success
    assert art.env_steps == sum(r.steps for r in art.records)


def test_meta_returns_are_discounted(tiny_run):
    g = tiny_run.config.gamma
    for m in tiny_run.meta_memory:
        # a segment can hold at most one key and one lock reward; any mix of bumps sits below
        assert m.G <= KEY_REWARD + LOCK_REWARD
        assert m.G >= -2.0 * sum(g ** t for t in range(m.steps)) - 1e-9


def test_metrics_file_roundtrip(tiny_run, tmp_path):
    files = save_artifacts(tiny_run, tmp_path)
    text = (tmp_path / "metrics.csv").read_text().splitlines()
    assert text[0] == "# format_version=1"
    assert text[1].startswith("episode,return,steps,success,eps1,eps2,n_subgoals")
    assert read_metrics(tmp_path / "metrics.csv") == tiny_run.records
    for p in files:
        if p.suffix == ".json":
            assert json.loads(p.read_text())["format_version"] == 1


def test_artifacts_reload_and_evaluate_identically(tiny_run, tmp_path):
    save_artifacts(tiny_run, tmp_path)
    again = load_artifacts(tmp_path)
    assert again.kind == "hrl"
    assert again.records == tiny_run.records
    assert again.evals == tiny_run.evals and again.final_eval == tiny_run.final_eval
    a = evaluate(tiny_run, 20, 7)
    b = evaluate(again, 20, 7)
    assert a == b


# -- baseline ----------------------------------------------------------------------

def test_baseline_deterministic_and_budget_parity():
    cfg = TrainConfig(seed=2, **TINY)
    a = run_baseline(cfg)
    b = run_baseline(cfg)
    assert [r.row() for r in a.records] == [r.row() for r in b.records]
    assert a.baseline.net.n_params == run_unified(cfg).controller.net.n_params
    assert len(a.records) == cfg.episodes
    assert all(r.steps <= cfg.max_steps for r in a.records)


def test_baseline_rejects_single_room():
    from hrlrooms.errors import ContractViolation
    with pytest.raises(ContractViolation):
        run_baseline(TrainConfig(variant="single_room_dynamic_goal", width=8, height=8, **TINY))


# -- evaluation --------------------------------------------------------------------

def test_untrained_agent_scores_nothing():
    art = run_unified(TrainConfig(seed=0, episodes=0, pretrain_episodes=0, walk_episodes=10,
                                  final_eval_episodes=0))
    res = evaluate(art, 50, 1)
    assert res.success_rate <= 0.05 and res.mean_return <= 0


def test_evaluate_is_deterministic(tiny_run):
    assert evaluate(tiny_run, 30, 11) == evaluate(tiny_run, 30, 11)


def scripted(layout):
    """Shortest-path policy: to the key first (when there is one), then to the reward cell."""
    walls = set(map(tuple, layout.walls))

    def rollout(art, state, rng=None):
        ret, dret, disc = 0.0, 0.0, 1.0
        while not state.done:
            target = layout.key_pos if layout.key_pos is not None and not state.has_key \
                else layout.reward_pos
            a = bfs_first_action(layout.width, layout.height, walls, state.agent, target)
            state, out = step(state, a)
            ret += out.reward
            dret += disc * out.reward
            disc *= art.config.gamma
        return state, ret, dret
    return rollout


def test_scripted_optimal_policy_on_5x5():
    cfg = TrainConfig(variant="single_room_dynamic_goal", width=5, height=5, gamma=0.9)
    layout = build_layout(cfg)
    art = RunArtifacts(cfg, layout)
    res = evaluate(art, 200, 3, rollout=scripted(layout))
    assert res.success_rate == 1.0
    # starts drawn on the goal cell itself end at once with nothing collected
    assert res.max_return == GOAL_REWARD and 0.9 < res.mean_return <= GOAL_REWARD
    # discounted return matches the BFS distance exactly
    dist = bfs_distances(5, 5, set(), layout.reward_pos)
    for cell in layout.free_cells:
        if cell == layout.reward_pos:
            continue
        _, _, dret = scripted(layout)(art, reset(layout, None, start=cell))
        assert dret == pytest.approx(0.9 ** (dist[tuple(cell)] - 1) * GOAL_REWARD)


def test_value_one_step_from_key():
    cfg = TrainConfig(seed=0, gamma=0.99)
    layout = build_layout(cfg)
    art = RunArtifacts(cfg, layout)
    walls = set(map(tuple, layout.walls))
    t2 = bfs_distances(20, 20, walls, layout.key_pos)[tuple(layout.reward_pos)]
    key = layout.key_pos
    for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        cell = GridPos(key.x + dx, key.y + dy)
        if layout.is_open(cell) and cell != layout.reward_pos:
            _, _, v = scripted(layout)(art, reset(layout, None, start=cell))
            # rewards are counted from the first move: 10 now, 40 after t2 more moves
            assert v == pytest.approx(KEY_REWARD + 0.99 ** t2 * LOCK_REWARD)


def test_zero_discount_keeps_first_reward():
    cfg = TrainConfig(seed=0, gamma=0.0)
    layout = build_layout(cfg)
    art = RunArtifacts(cfg, layout)
    key = layout.key_pos
    cell = next(GridPos(key.x + dx, key.y + dy) for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1))
                if layout.is_open(GridPos(key.x + dx, key.y + dy)))
    _, _, v = scripted(layout)(art, reset(layout, None, start=cell))
    assert v == KEY_REWARD


def test_cluster_diagnostic_shape(tiny_run):
    diag = cluster_value_diagnostic(tiny_run, 5, 0)
    assert diag["format_version"] == 1
    assert set(diag["clusters"]) == set(range(tiny_run.config.k))
    for stats in diag["clusters"].values():
        assert stats["n"] == min(5, stats["cells"]) and stats["std"] >= 0
    assert diag["adjacent_gaps"]
