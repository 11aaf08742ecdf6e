"""Acceptance criteria 1-11, one test each.

Every test records a single PASS/FAIL line, printed in the pytest terminal
summary under "acceptance criteria". The minibreakout trials are shared by
criteria 2 and 3. Expect roughly a quarter of an hour on one core.
"""

import itertools
import json
import time

import numpy as np
import pytest

from dslab import dqn, harness, lfa, nn, reprreg
from dslab.cli import main as cli_main
from dslab.config import default_config
from dslab.dqn import EpsilonSchedule, QNetwork
from dslab.envs import GridWorld, TaskSpec, make_env, probe_states
from dslab.replay import Batch, ReplayBuffer
from dslab.reprreg import PairBatch
from dslab.seeding import derive_seed, rng_for

pytestmark = pytest.mark.slow


@pytest.fixture(scope="session")
def minibreakout_trials():
    """T=3, R=5 trials on minibreakout for both algorithms, same master seed."""
    out = {}
    start = time.perf_counter()
    for algorithm in ("dsdqn", "vanilla"):
        cfg = default_config("minibreakout", algorithm=algorithm, trials=3, runs=5, seed=0)
        out[algorithm] = harness.run_trials(cfg)
    out["seconds"] = time.perf_counter() - start
    return out


# ---------------------------------------------------------------- 1


@pytest.mark.criterion(1)
def test_low_vs_high_correlation_features_on_gridworld(criterion):
    cfg = default_config("gridworld", seed=0)
    task = TaskSpec("gridworld")
    probes = probe_states(task)
    exit = lfa.ExitCondition.from_config(cfg)

    t0 = time.perf_counter()
    res = dqn.train(cfg.task, cfg, seed=derive_seed(cfg.seed, "trial", 0))
    low_corr = harness.measure_mean_correlation(res.checkpoint, probes)
    low = lfa.run_transfer(lfa.TrunkFeatures(res.checkpoint), task, exit, cfg, derive_seed(cfg.seed, "run", 0, 0))
    low_secs = time.perf_counter() - t0

    t0 = time.perf_counter()
    bad = harness.high_correlation_trunk(2, cfg.feature_dim, np.random.default_rng(derive_seed(cfg.seed, "bad-trunk")))
    high_corr = harness.measure_mean_correlation(bad, probes)
    high = lfa.run_transfer(lfa.TrunkFeatures(bad), task, exit, cfg, derive_seed(cfg.seed, "run", 0, 0))
    high_secs = time.perf_counter() - t0
    high_len = float(np.mean(high.lengths[-cfg.exit_window:]))

    ok = (
        low_corr <= 0.2 and low.exited and low.episodes_to_exit < 500
        and high_corr >= 0.8 and high.episodes_to_exit == 2000 and high_len >= 80
        and low_secs <= 120 and high_secs <= 120
    )
    criterion(ok, f"low corr {low_corr:.3f} exits at episode {low.episodes_to_exit} ({low_secs:.0f}s); "
                  f"high corr {high_corr:.4f} -> {high.episodes_to_exit}, final length {high_len:.1f} ({high_secs:.0f}s)")


# ---------------------------------------------------------------- 2


@pytest.mark.criterion(2)
def test_regularized_features_are_less_correlated(criterion, minibreakout_trials):
    grid_gaps = []
    for t in range(3):
        seed = derive_seed(0, "trial", t)
        corr = {}
        for algorithm in ("dsdqn", "vanilla"):
            cfg = default_config("gridworld", algorithm=algorithm)
            corr[algorithm] = dqn.train(cfg.task, cfg, seed=seed).final_corr
        grid_gaps.append(corr["vanilla"] - corr["dsdqn"])
    ds = [t.final_corr for t in minibreakout_trials["dsdqn"].trials]
    va = [t.final_corr for t in minibreakout_trials["vanilla"].trials]
    mb_gaps = [v - d for d, v in zip(ds, va)]
    ok = sum(g >= 0.2 for g in grid_gaps) >= 2 and sum(g >= 0.2 for g in mb_gaps) >= 2
    criterion(ok, "vanilla minus DS-DQN correlation, gridworld "
                  + ", ".join(f"{g:.3f}" for g in grid_gaps) + "; minibreakout " + ", ".join(f"{g:.3f}" for g in mb_gaps))


# ---------------------------------------------------------------- 3


@pytest.mark.criterion(3)
def test_regularized_features_transfer_faster(criterion, minibreakout_trials):
    ds = minibreakout_trials["dsdqn"]
    va = minibreakout_trials["vanilla"]
    secs = minibreakout_trials["seconds"]
    ok = (not ds.incomplete and not va.incomplete and ds.grand_mean < va.grand_mean and secs <= 1800)
    criterion(ok, f"minibreakout episodes to exit: DS-DQN {ds.grand_mean:.1f} +/- {ds.std:.1f}, "
                  f"vanilla {va.grand_mean:.1f} +/- {va.std:.1f} ({secs / 60:.1f} min)")


# ---------------------------------------------------------------- 4


@pytest.mark.criterion(4)
def test_raw_observation_lfa_never_exits(criterion):
    parts, ok = [], True
    for env in ("minibreakout", "mountaincar"):
        cfg = default_config(env, seed=0)
        summary, _ = harness.run_raw_baseline(cfg, runs=3)
        ok &= summary.episodes_to_exit == [cfg.lfa_max_episodes] * 3
        parts.append(f"{env} {summary.episodes_to_exit} (cap {cfg.lfa_max_episodes})")
    criterion(ok, "; ".join(parts))


# ---------------------------------------------------------------- 5


def _kink_free_trunk(rng, obs, widths):
    """Random relu trunk plus inputs kept away from relu kinks and from |r| = 1.

    At |r| = 1 the correlation gradient vanishes, so a relative error there
    only measures finite-difference noise.
    """
    while True:
        trunk = nn.DenseNet.init([obs, *widths], "relu", rng)
        for layer in trunk.layers:
            layer.bias[:] = rng.normal(scale=0.5, size=layer.bias.shape)
        x = rng.normal(size=(6, obs))
        if nn.min_abs_preactivation(trunk, x) > 1e-3:
            phi = nn.predict(trunk, x)
            r = [abs(reprreg.pearson(phi[i], phi[i + 1])) for i in (0, 2, 4)]
            if (phi.std(axis=1) > 1e-3).all() and max(r) < 0.999:
                return trunk, x


@pytest.mark.criterion(5)
def test_analytic_gradients_match_finite_differences(criterion):
    rng = np.random.default_rng(2024)
    worst = {"l1": 0.0, "pearson": 0.0, "l2": 0.0}
    start = time.perf_counter()
    for _ in range(100):
        obs = int(rng.integers(2, 5))
        widths = [int(w) for w in rng.integers(3, 7, size=int(rng.integers(1, 3)))]
        trunk, x = _kink_free_trunk(rng, obs, widths)
        n = trunk.output_dim
        net = QNetwork(trunk, dqn.LinearHead(rng.normal(size=(3, n))))
        batch = Batch(x[:4], rng.integers(0, 3, size=4), rng.normal(size=4), x[2:6], np.array([0, 1, 0, 0], bool))
        y = rng.normal(size=4)
        _, g_trunk, g_head = dqn.td_loss(net, batch, y)
        numeric = nn.numeric_gradient(trunk.params() + net.head.params(), lambda: dqn.td_loss(net, batch, y)[0], 1e-6)
        worst["l1"] = max(worst["l1"], nn.max_relative_error(g_trunk.arrays + g_head.arrays, numeric))

        a, b = rng.normal(size=n), rng.normal(size=n)
        ga, gb = reprreg.pearson_grad(a, b)
        num = nn.numeric_gradient([a, b], lambda: reprreg.pearson(a, b), 1e-6)
        worst["pearson"] = max(worst["pearson"], nn.max_relative_error([ga, gb], num))

        pairs = PairBatch(x, np.array([0, 2, 4]), np.array([1, 3, 5]))
        _, g2, _ = reprreg.l2_loss(trunk, pairs)
        num = nn.numeric_gradient(trunk.params(), lambda: reprreg.l2_loss(trunk, pairs, with_grad=False)[0], 1e-6)
        worst["l2"] = max(worst["l2"], nn.max_relative_error(g2.arrays, num))
    secs = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-5 and secs <= 10
    criterion(ok, "worst relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" ({secs:.1f}s)")


# ---------------------------------------------------------------- 6


@pytest.mark.criterion(6)
def test_one_hot_lfa_equals_tabular_q_learning(criterion):
    grid = GridWorld()
    feats = lfa.OneHotFeatures(grid.cell_index, 16)
    q = lfa.LinearQ(4, 16)
    table = np.zeros((16, 4))
    rng = np.random.default_rng(7)
    eps = 0.3
    alpha, gamma = 0.1, 0.95
    obs = grid.reset()
    worst = 0.0
    for step in range(10_000):
        s = grid.cell_index(obs)
        a = int(rng.integers(4)) if rng.random() < eps else int(np.argmax(table[s]))
        res = grid.step(a)
        s2 = grid.cell_index(res.next_observation)
        lfa.lfa_update(q, feats(obs), a, res.reward, feats(res.next_observation), res.terminal, alpha, gamma)
        target = res.reward if res.terminal else res.reward + gamma * table[s2].max()
        table[s, a] += alpha * (target - table[s, a])
        worst = max(worst, float(np.max(np.abs(table - q.weights.T))))
        obs = grid.reset() if res.terminal else res.next_observation
    criterion(worst <= 1e-12, f"max |Q_table - w.onehot| over 10000 steps = {worst:.1e}")


# ---------------------------------------------------------------- 7


def _reference_vanilla_dqn(cfg, seed, episodes):
    """Plain DQN written out from the primitives: no regularizer, no pair sampling."""
    env = make_env(cfg.task)
    net = QNetwork.init(env.obs_dim, cfg.hidden_sizes, cfg.feature_dim, env.n_actions, rng_for(seed, "init"))
    target = net.copy()
    opt_trunk, opt_head = nn.adam(cfg.alpha), nn.adam(cfg.beta)
    act_rng, replay_rng = rng_for(seed, "act"), rng_for(seed, "replay")
    buf = ReplayBuffer(cfg.buffer_capacity, env.obs_dim, env.n_actions)
    eps = EpsilonSchedule(cfg.eps_start, cfg.eps_end, cfg.eps_decay_steps)
    warmup = max(cfg.learning_starts, cfg.batch_size)
    digests, step = [], 0
    for episode in range(episodes):
        s = env.reset(derive_seed(seed, "episode", episode))
        for _ in range(cfg.episode_steps):
            a = dqn.select_action(net, s, eps.value(step), act_rng)
            res = env.step(a)
            buf.push(s, a, res.reward, res.next_observation, res.terminal)
            step += 1
            if len(buf) >= warmup:
                batch = buf.sample_batch(cfg.batch_size, replay_rng)
                _, g_trunk, g_head = dqn.td_loss(net, batch, dqn.td_targets(target, batch, cfg.gamma))
                nn.apply_update(net.trunk, g_trunk, opt_trunk)
                nn.apply_update(net.head, g_head, opt_head)
            if step % cfg.target_sync == 0:
                target = net.copy()
            s = res.next_observation
            if res.terminal:
                break
        digests.append(net.digest())
    return digests


@pytest.mark.criterion(7)
def test_zero_lambda_is_bitwise_vanilla_dqn(criterion):
    seed, episodes = 11, 50
    base = default_config("gridworld", train_episodes=episodes, seed=seed)
    reference = _reference_vanilla_dqn(base, seed, episodes)
    results = {}
    for name, cfg in {
        "dsdqn clustered": base.with_overrides(lambda_delta=0.0, lambda_max=0.0),
        "dsdqn uniform": base.with_overrides(lambda_delta=0.0, lambda_max=0.0, clusters=0),
        "vanilla": base.with_overrides(algorithm="vanilla"),
    }.items():
        trace = []
        dqn.train(cfg.task, cfg, on_episode=lambda e, net: trace.append(net.digest()))
        results[name] = trace == reference
    criterion(all(results.values()), f"{episodes}-episode parameter digests equal reference: {results}")


# ---------------------------------------------------------------- 8


@pytest.mark.criterion(8)
def test_pearson_property_suite(criterion):
    rng = np.random.default_rng(8)
    failures = {"symmetry": 0, "range": 0, "affine": 0, "sign": 0, "guard": 0}
    for i in range(10_000):
        n = int(rng.integers(2, 20))
        x = rng.normal(size=n) * 10 ** rng.uniform(-3, 3)
        y = rng.normal(size=n) * 10 ** rng.uniform(-3, 3)
        r = reprreg.pearson(x, y)
        failures["symmetry"] += r != reprreg.pearson(y, x)
        failures["range"] += not (-1 - 1e-12 <= r <= 1 + 1e-12)
        # offset is kept to the spread of a*x: a far larger one only adds cancellation error
        a = 10 ** rng.uniform(-2, 2)
        b = rng.normal() * 5 * np.std(a * x)
        # below the variance floor the guard answers 0 instead, by design
        want = r if np.var(a * x) >= 2 * reprreg.VARIANCE_FLOOR else 0.0
        failures["affine"] += abs(reprreg.pearson(a * x + b, y) - want) > 1e-12
        failures["sign"] += abs(reprreg.pearson(-a * x + b, y) + want) > 1e-12
        const = np.full(n, rng.normal()) + (rng.normal(size=n) * 1e-9 if i % 2 else 0.0)
        failures["guard"] += reprreg.pearson(const, y) != 0.0 or reprreg.pearson(y, const) != 0.0
    criterion(not any(failures.values()), f"failures over 10000 cases: {failures}")


# ---------------------------------------------------------------- 9


def _brute_force_inertia(x, k):
    n = len(x)
    labels = np.array(list(itertools.product(range(k), repeat=n)))
    best = np.inf
    for lab in labels:
        total = 0.0
        for c in range(k):
            pts = x[lab == c]
            if len(pts):
                total += float(((pts - pts.mean(axis=0)) ** 2).sum())
        best = min(best, total)
    return best


@pytest.mark.criterion(9)
def test_kmeans_matches_brute_force_optimum(criterion):
    rng = np.random.default_rng(9)
    worst, checked = 0.0, 0
    while checked < 50:
        n, d, k = int(rng.integers(3, 9)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
        x = rng.normal(size=(n, d))
        if len(np.unique(x, axis=0)) < k:
            continue
        model = reprreg.kmeans_fit(x, k, iters=200, rng=np.random.default_rng(checked), n_init=10)
        worst = max(worst, abs(model.inertia - _brute_force_inertia(x, k)))
        checked += 1
    criterion(worst <= 1e-9, f"max |inertia - optimum| over 50 instances = {worst:.1e}")


# ---------------------------------------------------------------- 10


@pytest.mark.criterion(10)
def test_lambda_trace_is_exact(criterion):
    rng = np.random.default_rng(10)
    configs = [(0.002, 0.01), (0.0, 0.05), (0.3, 0.1), (0.01, 0.0)]
    configs += [(float(rng.uniform(0, 0.05)), float(rng.uniform(0, 0.2))) for _ in range(3)]
    bad = []
    for delta, cap in configs:
        cfg = default_config("gridworld", train_episodes=20, lambda_delta=delta, lambda_max=cap)
        trace = [r.lam for r in dqn.train(cfg.task, cfg).log]
        if trace != [min(e * delta, cap) for e in range(20)]:
            bad.append((delta, cap))
    criterion(not bad, f"{len(configs)} (delta, lambda_max) configs, mismatches: {bad}")


# ---------------------------------------------------------------- 11


@pytest.mark.criterion(11)
def test_trials_rerun_is_bitwise_identical(criterion, tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"env_id": "gridworld", "trials": 2, "runs": 3}))
    digests = []
    for rep in ("a", "b"):
        out = tmp_path / rep
        assert cli_main(["trials", "--config", str(conf), "--seed", "42", "--out", str(out), "--no-plot"]) == 0
        digests.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    same = digests[0] == digests[1]
    criterion(same, f"trial_report.json and CSVs identical across reruns: {same} ({sorted(digests[0])})")
