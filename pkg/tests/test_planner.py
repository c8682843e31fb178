import pytest

from mimir.services.kernel import ConfigurationError
from mimir.services.planner import LoadStats, Move, plan_rebalance


def stats(owners, weights, otms=None):
    return LoadStats.build(weights, owners, otms or sorted(set(owners.values())))


def test_loads_inside_the_band_give_an_empty_plan():
    plan = plan_rebalance(stats({0: "otm0", 1: "otm1"}, {0: 50, 1: 40}), t_high=80, t_low=10)
    assert plan.empty and not plan.saturated


def test_overloaded_otm_moves_the_partition_that_suffices():
    owners = {0: "otm0", 1: "otm0", 2: "otm1"}
    plan = plan_rebalance(stats(owners, {0: 60, 1: 50, 2: 5}), t_high=80, t_low=10)
    assert plan.moves == [Move(partition=1, src="otm0", dst="otm1")]
    assert plan.spawns == 0 and plan.retires == []


def test_single_hot_partition_saturates_and_blocks_retire():
    owners = {0: "otm0", 5: "otm1"}
    plan = plan_rebalance(stats(owners, {0: 90, 5: 3}), t_high=80, t_low=10)
    assert plan.empty
    assert plan.saturated == ["otm0"]


def test_spawn_when_no_existing_otm_can_absorb():
    owners = {0: "otm0", 1: "otm0"}
    plan = plan_rebalance(stats(owners, {0: 70, 1: 60}), t_high=80, t_low=10)
    assert plan.spawns == 1
    assert plan.moves == [Move(partition=1, src="otm0", dst="spawn:0")]


def test_lightest_otm_below_t_low_is_retired():
    owners = {0: "otm0", 1: "otm1"}
    plan = plan_rebalance(stats(owners, {0: 50, 1: 3}), t_high=80, t_low=10)
    assert plan.retires == ["otm1"]
    assert plan.moves == [Move(partition=1, src="otm1", dst="otm0")]


def test_empty_otm_retires_without_moves():
    plan = plan_rebalance(stats({0: "otm0"}, {0: 20}, otms=["otm0", "otm1"]), t_high=80, t_low=10)
    assert plan.retires == ["otm1"] and plan.moves == []


def test_retire_respects_min_otms():
    owners = {0: "otm0", 1: "otm1"}
    plan = plan_rebalance(stats(owners, {0: 50, 1: 3}), t_high=80, t_low=10, min_otms=2)
    assert plan.empty


def test_ties_break_on_lowest_node_index():
    owners = {0: "otm0", 1: "otm1", 2: "otm2"}
    plan = plan_rebalance(stats(owners, {0: 2, 1: 2, 2: 50}), t_high=80, t_low=10)
    assert plan.retires == ["otm0"]
    assert plan.moves == [Move(partition=0, src="otm0", dst="otm1")]


def test_t_low_must_be_below_t_high():
    with pytest.raises(ConfigurationError):
        plan_rebalance(stats({0: "otm0"}, {0: 1}), t_high=10, t_low=10)


def test_repeated_planning_reaches_a_fixed_point():
    owners = {p: "otm0" for p in range(6)}
    weights = {0: 40, 1: 35, 2: 30, 3: 25, 4: 20, 5: 10}
    otms = ["otm0"]
    for _ in range(10):
        plan = plan_rebalance(stats(owners, weights, otms), t_high=80, t_low=5)
        if plan.empty:
            break
        names = {f"spawn:{i}": f"otm{len(otms) + i}" for i in range(plan.spawns)}
        otms = otms + list(names.values())
        for move in plan.moves:
            owners[move.partition] = names.get(move.dst, move.dst)
        otms = [o for o in otms if o not in plan.retires]
    assert plan.empty
    loads = {o: sum(w for p, w in weights.items() if owners[p] == o) for o in otms}
    assert max(loads.values()) <= 80
