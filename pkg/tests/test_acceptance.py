"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict (see the ``verdict`` fixture) and then
asserts at the stated tolerance. The two training checks take about an hour
each on one CPU core and carry the ``slow`` marker.
"""
import time

import numpy as np
import pytest

from fixtures import ExactEuclideanCritic, constant_actor, wide_plane
from midtree import cli
from midtree import evaluation as ev
from midtree import geometry as geo
from midtree import learner as L
from midtree import neural as nn
from midtree import oracle as orc
from midtree.baselines import seq
from midtree.config import ExperimentConfig
from gradcheck import numeric_grad, rel_error

SEEDS = range(5)


def test_criterion_1_metric_unit_values(verdict):
    t0 = time.perf_counter()
    mats = geo.make_env("matsumoto")
    car = geo.make_env("carlike")
    p = np.array([0.5, 0.0])
    heading0 = np.array([0.0, 0.0, 1.0, 0.0])
    got = [geo.finsler_norm(mats, p, [1.0, 0.0]), geo.finsler_norm(mats, p, [-1.0, 0.0])]
    want = [2 / (np.sqrt(2) + 1), 2 * (np.sqrt(2) + 1)]
    for v, w in (([1, 0, 0], 1.0), ([0, 1, 0], np.sqrt(101)), ([-1, 0, 0], np.sqrt(101)), ([0, 0, 1], 2.0)):
        got.append(geo.finsler_norm(car, heading0, np.array(v, dtype=float)))
        want.append(w)
    err = float(np.max(np.abs(np.array(got) - np.array(want))))
    dt = time.perf_counter() - t0
    ok = verdict(1, err < 1e-9 and dt < 1.0, f"max abs error {err:.1e}, {dt:.3f} s")
    assert ok


def test_criterion_2_algebraic_identities(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    a, b = rng.uniform(0, 1, (2, 100_000))
    worst = 0.0
    for crit in (orc.midpoint_criterion, orc.two_one_criterion):
        lhs, rhs = crit(a, b)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    dt = time.perf_counter() - t0
    ok = verdict(2, worst <= 1e-12 and dt < 5.0, f"max deviation {worst:.1e} over 1e5 pairs, {dt:.2f} s")
    assert ok


def test_criterion_3_gradient_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for k in range(100):
        act = ("relu", "tanh")[k % 2]
        sizes = [int(rng.integers(1, 5)) for _ in range(int(rng.integers(2, 5)))]
        net = nn.init_mlp(sizes, act, rng)
        for b in net.biases:
            b[:] = rng.normal(scale=0.1, size=b.shape)
        x = rng.normal(size=(3, sizes[0]))
        w = rng.normal(size=(3, sizes[-1]))
        _, cache = nn.forward(net, x)
        grads, gin = nn.backward(net, cache, w)
        f = lambda: float((nn.forward(net, x)[0] * w).sum())
        for arr, g in zip(net.arrays + [x], grads + [gin]):
            worst = max(worst, rel_error(g, numeric_grad(f, arr, h=1e-5)))
    dt = time.perf_counter() - t0
    ok = verdict(3, worst < 1e-4 and dt < 30.0, f"max relative error {worst:.1e} on 100 nets, {dt:.1f} s")
    assert ok


def test_criterion_4_value_iteration_desk_check(verdict):
    t0 = time.perf_counter()
    nodes = orc.Analytic1D.grid(129)
    table, _ = orc.vi_converge(orc.vi_init(nodes, orc.Analytic1D.cost), 8,
                               orc.Analytic1D.distance_matrix(nodes), tol=0.0)
    rel = abs(table.V[0, -1] - 1.5) / 1.5
    mid = nodes[table.mid_index[0, -1], 0]
    analytic_ok = rel < 0.03 and abs(mid - 0.581139) <= 1 / 128

    grid = orc.euclid_grid(17)
    ref = np.linalg.norm(grid[:, None] - grid[None], axis=-1)
    _, report = orc.vi_converge(orc.vi_init(grid, geo.obstacle_free_euclid2d()), 8, ref)
    euclid_err = report["max_rel_err"]
    dt = time.perf_counter() - t0
    ok = verdict(4, analytic_ok and euclid_err < 1e-9 and dt < 120,
                 f"analytic rel err {rel:.2e}, midpoint {mid:.4f}; "
                 f"euclid 17x17 max rel err {euclid_err:.3e} (needs < 1e-9); {dt:.1f} s")
    assert analytic_ok, "analytic 1D fixture"
    assert euclid_err < 1e-9, "euclidean grid is not a fixed point"
    assert ok


def test_criterion_5_bookkeeping(verdict):
    t0 = time.perf_counter()
    env = geo.make_env("matsumoto")
    rng = np.random.default_rng(5)
    actor = L.Actor.create(env, [16], rng, "relu")
    counts_ok, worst = True, 0.0
    for D in range(7):
        batch = L.collect_data(actor, env, D, rng)
        counts_ok &= len(batch) == (2**D + 1) + (2 ** (D + 1) - 1)
        npts = 2**D + 1
        leaves = batch.c[npts: npts + 2**D]
        worst = max(worst, abs(batch.c[-1] - leaves.sum()) / max(leaves.sum(), 1e-300))
    ledger = ev.TimestepLedger()
    cfg = ExperimentConfig(environment={"kind": "matsumoto"}, method="pg").pg_config()
    for D, cycles in enumerate(cfg.cycles, start=1):
        ledger.record("tree", D, count=cycles * cfg.episodes_per_cycle * cfg.samples_per_episode)
    dt = time.perf_counter() - t0
    ok = verdict(5, counts_ok and worst <= 1e-12 and ledger.total() == 20_613_600 and dt < 10,
                 f"tuple counts {'ok' if counts_ok else 'WRONG'}, root/leaf rel gap {worst:.1e}, "
                 f"PG budget {ledger.total():,}, {dt:.2f} s")
    assert ok


def _matsumoto_run(seed):
    cfg = ExperimentConfig(environment={"kind": "matsumoto"}, method="our_c", seed=seed,
                           T=1_000_000, D_max=4, epsilon=0.2)
    env = cfg.env
    spec = ev.EvalTaskSpec(2**cfg.D_max, cfg.epsilon, cfg.pair_count, cfg.pair_seed)
    pairs = ev.make_eval_set(env, spec)
    lcfg = cfg.learner_config()
    untrained = L.init_state(env, lcfg)
    before = ev.evaluate_success(L.TreePolicy(untrained.actor, env), env, pairs, spec).success_rate
    state = L.train(env, lcfg, pairs)
    after = ev.evaluate_success(L.TreePolicy(state.actor, env), env, pairs, spec).success_rate
    return before, after


@pytest.mark.slow
def test_criterion_6_matsumoto_learning(verdict):
    t0 = time.perf_counter()
    results = [_matsumoto_run(seed) for seed in SEEDS]
    trained = [a for _, a in results]
    untrained = [b for b, _ in results]
    wins = sum(a >= 0.70 for a in trained)
    baseline_ok = all(b < 0.30 for b in untrained)
    dt = time.perf_counter() - t0
    ok = verdict(6, wins >= 3 and baseline_ok,
                 f"trained {['%.2f' % a for a in trained]} ({wins}/5 >= 0.70, need 3), "
                 f"untrained {['%.2f' % b for b in untrained]}, {dt / 60:.0f} min")
    assert baseline_ok
    assert ok


def test_criterion_7_obstacle_successes_stay_free(verdict):
    env = geo.make_env("euclid2d_obstacles")
    spec = ev.EvalTaskSpec(16, 0.1, 100, seed=7)
    pairs = ev.make_eval_set(env, spec)
    cfg = ExperimentConfig(environment=env.to_dict(), method="our_t", seed=7, T=20_000, D_max=4,
                           epsilon=0.1, hyper={"hidden": [32, 32]}).learner_config()
    state = L.train(env, cfg, pairs)
    d = env.d_rep

    class RandomWalk:
        def generate(self, s, g, depth):
            rng = np.random.default_rng(7)
            t = np.linspace(0, 1, 2**depth + 1)[None, :, None]
            pts = s[:, None] + t * (g - s)[:, None]
            pts[:, 1:-1] += rng.normal(scale=0.02, size=pts[:, 1:-1].shape)
            return np.clip(pts, -1, 1)

    class Straight:
        def generate(self, s, g, depth):
            t = np.linspace(0, 1, 2**depth + 1)[None, :, None]
            return s[:, None] + t * (g - s)[:, None]

    policies = [L.TreePolicy(L.init_state(env, cfg).actor, env), L.TreePolicy(state.actor, env),
                Straight(), RandomWalk()]
    violations, successes, direct = 0, 0, 0
    for pol in policies:
        report = ev.evaluate_success(pol, env, pairs, spec)
        paths = pol.generate(pairs[:, :d], pairs[:, d:], spec.depth)
        violations += report.violations
        successes += int(report.success.sum())
        direct += sum(not np.all(geo.is_free(env, p)) for p, ok in zip(paths, report.success) if ok)
    ok = verdict(7, violations == 0 and direct == 0,
                 f"{successes} successes over 4 planners, {violations} reported / {direct} recounted violations")
    assert ok


@pytest.mark.slow
def test_criterion_8_sequential_baseline(verdict):
    t0 = time.perf_counter()
    env = geo.obstacle_free_euclid2d()
    rates = []
    for seed in SEEDS:
        cfg = ExperimentConfig(environment=env.to_dict(), method="seq", seed=seed, T=500_000,
                               D_max=4, epsilon=0.1)
        spec = ev.EvalTaskSpec(16, 0.1, cfg.pair_count, cfg.pair_seed)
        pairs = ev.make_eval_set(env, spec)
        agent, _ = seq.ppo_train(env, cfg.ppo_config(), None)
        rates.append(ev.evaluate_success(agent, env, pairs, spec).success_rate)
    wins = sum(r >= 0.60 for r in rates)
    dt = time.perf_counter() - t0
    ok = verdict(8, wins >= 3, f"success {['%.2f' % r for r in rates]} ({wins}/5 >= 0.60, need 3), "
                 f"{dt / 60:.0f} min")
    assert ok


def test_criterion_9_variant_divergence_witness(verdict):
    t0 = time.perf_counter()
    env = wide_plane()
    critic = ExactEuclideanCritic()
    s, g = np.array([[0.0, 0.0]]), np.array([[2.0, 0.0]])
    noise = np.zeros((L.N_ACTOR_NOISE, 1, 2))
    zs = np.linspace(0.0, 2.0, 1001)
    mid, inter = [], []
    actor = constant_actor(env, [0.0, 0.0])
    for z in zs:
        actor.params.biases[-1][0] = z
        mid.append(L.actor_loss(actor, critic, s, g, L.VariantConfig("midpoint"), noise)[0])
        inter.append(L.actor_loss(actor, critic, s, g, L.VariantConfig("inter"), noise)[0])
    mid, inter = np.array(mid), np.array(inter)
    best = np.flatnonzero(mid == mid.min())
    unique = len(best) == 1 and zs[best[0]] == 1.0
    spread = float(inter.max() - inter.min())
    dt = time.perf_counter() - t0
    ok = verdict(9, unique and spread < 1e-12 and dt < 1.0,
                 f"midpoint argmin z = {zs[best].tolist()}, inter spread {spread:.1e}, {dt:.2f} s")
    assert ok


def test_criterion_10_determinism(verdict, tmp_path):
    configs = {
        "tree": "environment: {kind: euclid2d_obstacles}\nmethod: our_t\nT: 800\nD_max: 2\n"
                "epsilon: 0.2\npair_count: 10\nhyper: {hidden: [16, 16]}\n",
        "seq": "environment: {kind: matsumoto}\nmethod: seq\nT: 512\nD_max: 2\nepsilon: 0.2\n"
               "pair_count: 10\nhyper: {hidden: [16], n_steps: 128}\n",
        "pg": "environment: {kind: carlike}\nmethod: pg\nD_max: 2\nepsilon: 0.3\npair_count: 10\n"
              "hyper: {hidden: [16], cycles: [3, 3]}\n",
    }
    mismatched = []
    for name, text in configs.items():
        cfg = tmp_path / f"{name}.yaml"
        cfg.write_text(text)
        runs = [tmp_path / f"{name}_{k}" for k in range(2)]
        for run in runs:
            assert cli.main(["train", "--config", str(cfg), "--out", str(run)]) == 0
            ckpt = run / "checkpoints" / "final.ckpt"
            assert cli.main(["eval", "--checkpoint", str(ckpt), "--pairs",
                             str(run / "reports" / "pairs.csv"), "--out", str(run), "--plot", "2"]) == 0
            assert cli.main(["make-pairs", "--config", str(cfg), "--out", str(run / "mp")]) == 0
        files = sorted(p.relative_to(runs[0]) for p in runs[0].rglob("*") if p.is_file())
        for rel in files:
            if (runs[0] / rel).read_bytes() != (runs[1] / rel).read_bytes():
                mismatched.append(f"{name}/{rel}")
    for k in range(2):
        assert cli.main(["oracle", "--fixture", "analytic1d", "--grid", "33",
                         "--out", str(tmp_path / f"oracle_{k}")]) == 0
    oa = (tmp_path / "oracle_0" / "reports" / "oracle_analytic1d.json").read_bytes()
    if oa != (tmp_path / "oracle_1" / "reports" / "oracle_analytic1d.json").read_bytes():
        mismatched.append("oracle")
    ok = verdict(10, not mismatched, f"train/eval/plot/make-pairs/oracle outputs byte-identical"
                 if not mismatched else f"differing outputs: {mismatched}")
    assert ok
