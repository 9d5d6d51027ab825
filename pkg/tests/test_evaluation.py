import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from midtree import evaluation as ev
from midtree import geometry as geo
from midtree.config import PG_CYCLES
from midtree.exceptions import InvalidInputError

E2D = geo.make_env("euclid2d_obstacles")
FREE = geo.obstacle_free_euclid2d()


def line_path(xs, y=0.2):
    return np.column_stack([xs, np.full(len(xs), y)])


def report(success, lengths):
    return ev.EvalReport(np.array(success, dtype=bool), list(lengths))


class StraightLine:
    """Policy stub: evenly spaced waypoints on the chord."""
    method = "straight"

    def generate(self, s, g, depth):
        t = np.linspace(0, 1, 2 ** depth + 1)[None, :, None]
        return s[:, None] + t * (g - s)[:, None]


# -- spec and pair sets -----------------------------------------------------

def test_task_spec_validation():
    assert ev.EvalTaskSpec(16, 0.1).depth == 4
    with pytest.raises(InvalidInputError):
        ev.EvalTaskSpec(12, 0.1)
    with pytest.raises(InvalidInputError):
        ev.EvalTaskSpec(8, 0.0)


def test_eval_set_deterministic(tmp_path):
    spec = ev.EvalTaskSpec(16, 0.1, 100, seed=3)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    pairs = ev.make_eval_set(E2D, spec, a)
    ev.make_eval_set(E2D, spec, b)
    assert a.read_bytes() == b.read_bytes()
    assert pairs.shape == (100, 4)
    assert np.all(geo.is_free(E2D, pairs[:, :2])) and np.all(geo.is_free(E2D, pairs[:, 2:]))
    np.testing.assert_array_equal(ev.read_pairs(a), pairs)
    assert a.read_text().splitlines()[0] == "s0,s1,g0,g1"


def test_pairs_digest():
    p = np.arange(8.0).reshape(2, 4)
    assert ev.pairs_digest(p) == ev.pairs_digest(p.copy())
    assert ev.pairs_digest(p) != ev.pairs_digest(p[::-1])


def test_check_env_compat():
    with pytest.raises(InvalidInputError):
        ev.check_env_compat(E2D, np.zeros((3, 5)))


# -- success judgement ------------------------------------------------------

def test_judge_success_and_failure():
    ok = line_path([0.0, 0.09, 0.18])
    bad = line_path([0.0, 0.09, 0.20])
    rep = ev.judge_paths(FREE, [ok, bad], 0.1)
    np.testing.assert_array_equal(rep.success, [True, False])
    assert rep.lengths[0] == pytest.approx(0.18)
    assert rep.lengths[1] is None
    assert rep.success_rate == 0.5
    assert rep.max_costs[1] == pytest.approx(0.11)


def test_success_in_obstacle_env_keeps_waypoints_free():
    # a waypoint inside an obstacle costs c_P = 10 on the way in
    entering = np.array([[-0.3, 0.0], [-0.36, 0.0], [-0.3, 0.0]])
    rep = ev.judge_paths(E2D, [entering], 0.1)
    assert not rep.success[0]
    assert rep.violations == 0


def test_violations_count_bad_successes():
    # both waypoints inside one obstacle: no penalty applies, the check must still flag it
    inside = np.array([[-0.45, 0.0], [-0.44, 0.0]])
    rep = ev.judge_paths(E2D, [inside], 0.1)
    assert rep.success[0] and rep.violations == 1


def test_evaluate_success_straight_policy():
    spec = ev.EvalTaskSpec(16, 0.2, 20, seed=1)
    pairs = ev.make_eval_set(FREE, spec)
    rep = ev.evaluate_success(StraightLine(), FREE, pairs, spec, timestep=5)
    # chords of length <= 2*sqrt(2) split into 16 pieces are always short enough
    assert rep.success.all()
    np.testing.assert_allclose(rep.lengths, np.linalg.norm(pairs[:, 2:] - pairs[:, :2], axis=1))
    assert rep.timestep == 5 and rep.method == "straight"
    assert rep.pairs_id == ev.pairs_digest(pairs)
    again = ev.evaluate_success(StraightLine(), FREE, pairs, spec, timestep=5)
    np.testing.assert_array_equal(again.success, rep.success)
    assert again.lengths == rep.lengths


@given(st.lists(st.floats(0.0, 0.3), min_size=1, max_size=12),
       st.floats(0.01, 0.3), st.floats(0.0, 0.3))
def test_success_monotone_in_epsilon(steps, eps, extra):
    path = line_path(np.concatenate([[0.0], np.cumsum(steps)]) - 0.9)
    path[:, 0] = np.clip(path[:, 0], -1, 1)
    low = ev.judge_paths(FREE, [path], eps)
    high = ev.judge_paths(FREE, [path], eps + extra)
    assert high.success[0] or not low.success[0]


# -- winning rates ----------------------------------------------------------

def test_winning_rate_example():
    a = report([True, True], [1.0, 2.0])
    b = report([True, True], [1.1, 1.9])
    assert ev.winning_rate(a, b) == (50.0, 100.0)
    assert ev.format_cell(*ev.winning_rate(a, b)) == "50 (100)"


def test_winning_rate_ties_and_self():
    a = report([True, True], [1.0, 2.0])
    assert ev.winning_rate(a, a) == (0.0, 100.0)


def test_winning_rate_disjoint():
    a = report([True, False], [1.0, None])
    b = report([False, True], [None, 1.0])
    rate, joint = ev.winning_rate(a, b)
    assert rate is ev.UNDEFINED and joint == 0.0
    assert ev.format_cell(rate, joint) == "—"


def test_winning_rate_rejects_mismatched_pairs():
    a = report([True], [1.0])
    b = report([True], [1.0])
    a.pairs_id, b.pairs_id = "x", "y"
    with pytest.raises(InvalidInputError):
        ev.winning_rate(a, b)
    with pytest.raises(InvalidInputError):
        ev.winning_rate(report([True], [1.0]), report([True, True], [1.0, 1.0]))


@given(st.lists(st.tuples(st.booleans(), st.booleans(),
                          st.sampled_from([1.0, 1.5, 2.0]), st.sampled_from([1.0, 1.5, 2.0])),
                min_size=1, max_size=20))
def test_winning_rates_sum_at_most_100(rows):
    a = report([r[0] for r in rows], [r[2] if r[0] else None for r in rows])
    b = report([r[1] for r in rows], [r[3] if r[1] else None for r in rows])
    ab, joint = ev.winning_rate(a, b)
    ba, _ = ev.winning_rate(b, a)
    if ab is ev.UNDEFINED:
        assert ba is ev.UNDEFINED
        return
    ties = any(r[0] and r[1] and r[2] == r[3] for r in rows)
    assert ab + ba <= 100.0 + 1e-9
    assert (abs(ab + ba - 100.0) < 1e-9) == (not ties)


def test_winning_table_layout():
    reps = {"A": report([True, True], [1.0, 2.0]),
            "B": report([True, True], [1.1, 1.9]),
            "C": report([False, False], [None, None])}
    names, rows = ev.winning_table(reps)
    assert names == ["A", "B", "C"]
    assert rows[1][1][0] == "50 (100)"  # A beats B on one of two pairs
    assert rows[2][1][:2] == ["—", "—"]
    assert rows[0][1] == ["", "", ""]
    text = ev.render_table(names, rows)
    assert text.splitlines()[2].startswith("B")


def test_report_roundtrip(tmp_path):
    rep = ev.judge_paths(E2D, [line_path([0.0, 0.05, 0.1]), line_path([0.0, 0.5])], 0.1,
                         timestep=42, method="our_t")
    rep.pairs_id = "abc"
    path = tmp_path / "r.csv"
    ev.write_report(path, rep)
    back = ev.read_report(path)
    np.testing.assert_array_equal(back.success, rep.success)
    assert back.lengths == rep.lengths
    assert (back.timestep, back.method, back.pairs_id, back.violations) == (42, "our_t", "abc", 0)
    np.testing.assert_array_equal(back.max_costs, rep.max_costs)


# -- timestep ledger --------------------------------------------------------

def test_ledger_examples():
    led = ev.TimestepLedger()
    for _ in range(3):
        led.record("tree", 2)
    assert led.total() == 12
    led = ev.TimestepLedger()
    led.record("seq", count=5)
    led.record("tree", 3)
    assert led.total() == 13
    with pytest.raises(InvalidInputError):
        led.record("eval")


def test_ledger_pg_matsumoto_budget():
    # 30 episodes of 10 generations per cycle
    led = ev.TimestepLedger()
    for depth, cycles in enumerate(PG_CYCLES["matsumoto"], start=1):
        led.record("tree", depth, count=cycles * 30 * 10)
    assert led.total() == 20_613_600
