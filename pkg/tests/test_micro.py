from mimir.harness.checkers import ORACLE_LIMIT
from mimir.harness.micro import MAX_KEYS, gen_micro_history, judge_micro, run_micro
from mimir.services.kernel import dump_trace


def test_micro_histories_are_seeded():
    assert dump_trace(gen_micro_history(9)) == dump_trace(gen_micro_history(9))


def test_micro_histories_stay_small():
    for seed in range(50):
        trace = gen_micro_history(seed)
        commits = [e for e in trace if e.event == "COMMIT"]
        keys = {e.payload["key"] for e in trace if e.event == "TXN_READ"}
        assert 1 <= len(commits) <= ORACLE_LIMIT and 1 <= len(keys) <= MAX_KEYS


def test_every_written_key_is_read_first():
    for seed in range(50):
        trace = gen_micro_history(seed)
        for commit in (e for e in trace if e.event == "COMMIT"):
            assert set(commit.payload["writes"]) <= set(commit.payload["reads"])


def test_conflict_graph_matches_the_serial_oracle_on_500_histories():
    report = run_micro(500)
    assert report.histories == 500
    assert report.passed, [m.seed for m in report.mismatches]
    # both verdicts come up
    assert 0 < report.serializable < 500


def test_single_transaction_is_serializable():
    verdict = next(judge_micro(s) for s in range(200) if judge_micro(s).transactions == 1)
    assert verdict.graph_ok and verdict.oracle_ok and verdict.checker_ok
