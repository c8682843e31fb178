import json
from pathlib import Path

import pytest
from pydantic import ValidationError

from mimir.harness.checkers import run_checks
from mimir.harness.corpus import format_table, run_one, verdict
from mimir.harness.runner import run_scenario
from mimir.harness.scenario import FaultAction, Scenario, ScenarioError, SweepSpec, Trigger, WorkloadSpec, load_scenario
from mimir.services.kernel import TraceKind, dump_trace

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def small(**overrides) -> Scenario:
    fields = dict(
        name="small",
        seed=3,
        key_space=60,
        partitions=2,
        otms=2,
        htms=1,
        elastic=False,
        duration=6_000,
        workload=WorkloadSpec(clients=3, rate=300, mix={"read_only": 0.2, "txn": 0.6, "mtx": 0.2}),
    )
    fields.update(overrides)
    return Scenario(**fields)


def test_zero_clients_commit_nothing_and_pass_every_checker():
    trace, metrics = run_scenario(small(workload=WorkloadSpec(clients=0)))
    assert metrics.committed == 0
    assert run_checks(trace) == []


def test_same_seed_gives_byte_identical_traces():
    first, _ = run_scenario(small())
    again, _ = run_scenario(small())
    assert dump_trace(first) == dump_trace(again)


def test_committed_count_matches_client_outcomes():
    trace, metrics = run_scenario(small())
    done = [e for e in trace if e.kind == TraceKind.LOCAL and e.event == "TXN_DONE"]
    assert metrics.committed > 0
    assert metrics.committed == sum(e.payload["outcome"] == "COMMITTED" for e in done)


def test_fault_free_runs_are_clean():
    for seed in (1, 2, 3):
        trace, _ = run_scenario(small(seed=seed))
        assert run_checks(trace) == [], f"seed {seed}"


def test_mix_without_mtx_sends_no_minitransactions():
    trace, _ = run_scenario(small(workload=WorkloadSpec(clients=3, rate=300, mix={"txn": 1.0})))
    assert not [e for e in trace if e.kind == TraceKind.SEND and e.payload["type"] == "MtxSubmit"]


def test_crash_and_restart_of_an_otm_keeps_commits():
    faults = [
        FaultAction(at=2_500, action="crash", node="otm0"),
        FaultAction(at=3_000, action="restart", node="otm0"),
    ]
    trace, metrics = run_scenario(small(lease_duration=1_500, safety_margin=200, duration=9_000, faults=faults))
    assert [e for e in trace if e.kind == TraceKind.CRASH and e.node == "otm0"]
    assert run_checks(trace) == []
    harness = [e.event for e in trace if e.node == "harness"]
    assert harness == ["SCENARIO", "FAULT", "FAULT"]
    assert not [e for e in trace if e.node == "metadata0" and e.event in ("SCENARIO", "FAULT")]


@pytest.mark.parametrize(
    "name, checker",
    [
        ("skip_forced_commit", "durability"),
        ("disable_safety_margin", "single_ownership"),
        ("apply_mtx_on_vote", "mtx_atomicity"),
    ],
)
def test_mutations_trip_their_checker(name, checker):
    scenario = load_scenario(SCENARIOS / "mutations" / f"{name}.json")
    assert checker in scenario.expect_violations
    row = run_one(scenario)
    assert any(v.startswith(f"[{checker}]") for v in row.violations)
    assert row.passed


def test_verdict_is_a_subset_check():
    assert verdict(set(), [])
    assert not verdict({"durability"}, [])
    assert verdict({"durability", "serializability"}, ["durability"])
    assert not verdict({"serializability"}, ["durability"])


def test_sweep_expands_one_run_per_event_and_nth():
    template = FaultAction(after=Trigger(node="master0", event="MIGRATE_PHASE1"), action="crash", node="otm0")
    sweep = SweepSpec(action=template, events=["MIGRATE_PHASE1", "MIGRATE_PHASE2"], nths=[1, 3])
    scenario = small(name="race", sweep=sweep)
    runs = scenario.expand()
    assert [r.name for r in runs] == [
        "race#MIGRATE_PHASE1:1",
        "race#MIGRATE_PHASE1:3",
        "race#MIGRATE_PHASE2:1",
        "race#MIGRATE_PHASE2:3",
    ]
    assert all(r.sweep is None and r.faults[-1].after.node == "master0" for r in runs)


def test_seed_sweep_runs_consecutive_seeds():
    runs = small(name="nf", seed=4, sweep=SweepSpec(seeds=3)).expand()
    assert [(r.name, r.seed, r.header()["seed"]) for r in runs] == [("nf@4", 4, 4), ("nf@5", 5, 5), ("nf@6", 6, 6)]


def test_seed_sweep_multiplies_fault_variants():
    template = FaultAction(after=Trigger(event="COMMIT"), action="crash", node="otm0")
    runs = small(name="c", seed=1, sweep=SweepSpec(action=template, nths=[1, 2], seeds=2)).expand()
    assert [r.name for r in runs] == ["c#COMMIT:1@1", "c#COMMIT:1@2", "c#COMMIT:2@1", "c#COMMIT:2@2"]


def test_sweep_without_template_needs_more_than_one_seed():
    with pytest.raises(ValidationError):
        SweepSpec()


@pytest.mark.parametrize("name,count", [("no_fault", 200), ("split_brain", 100)])
def test_shipped_seed_families(name, count):
    runs = load_scenario(SCENARIOS / f"{name}.json").expand()
    assert len({r.seed for r in runs}) == len({r.name for r in runs}) == count


def test_every_shipped_scenario_loads():
    for path in sorted(SCENARIOS.rglob("*.json")):
        scenario = load_scenario(path)
        assert scenario.expand()


def test_bad_scenarios_are_rejected(tmp_path):
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ScenarioError):
        load_scenario(broken)
    inverted = tmp_path / "inverted.json"
    inverted.write_text(json.dumps({"t_high": 5, "t_low": 5}))
    with pytest.raises(ScenarioError):
        load_scenario(inverted)
    with pytest.raises(ScenarioError):
        load_scenario(tmp_path / "missing.json")


def test_scenario_name_defaults_to_the_file_stem(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({"duration": 100}))
    assert load_scenario(path).name == "tiny"


def test_corpus_table_reports_failures():
    rows = [run_one(small(workload=WorkloadSpec(clients=0), duration=500))]
    table = format_table(rows)
    assert "PASS" in table and table.endswith("1/1 passed")
