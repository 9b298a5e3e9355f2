"""End-to-end acceptance criteria.

Each test checks one numbered criterion at its stated tolerance and records a
PASS/FAIL line that is printed in the pytest terminal summary.  Run just these
with ``pytest -m acceptance``; they take several minutes in total.
"""

import time

import numpy as np
import pytest

from metagrad import cli
from metagrad.estimators import (
    estimate_hessian,
    estimate_policy_gradient,
    estimate_reward_jacobian,
    importance_weighted_gradient,
)
from metagrad.lola import LolaConfig, run_lola_experiment
from metagrad.mdp import (
    exact_policy_gradient,
    exact_policy_hessian,
    exact_reward_jacobian,
    exact_value,
    generate_random_mdp,
    state_values,
)
from metagrad.meta import (
    ALL_CODES,
    EstimatorAssignment,
    InnerLoopConfig,
    MetaProblem,
    exact_inner_loop,
    exact_meta_gradient,
    measure,
    measure_compositional_bias,
)
from metagrad.oracle import enumerate_trajectories, expected_estimate

from conftest import central_diff, record_criterion, rel_err, tiny_mdp

pytestmark = pytest.mark.acceptance


def monotone(values, strict=False):
    d = np.diff(np.asarray(values, dtype=np.float64))
    return bool(np.all(d > 0) if strict else np.all(d >= 0))


def check(number, title, passed, detail):
    record_criterion(number, title, passed, detail)
    assert passed, f"criterion {number}: {detail}"


# 1 ----------------------------------------------------------------------------------

def derivative_instance(i):
    rng = np.random.default_rng([i, 101])
    S, A = int(rng.integers(2, 6)), int(rng.integers(2, 4))
    mdp = generate_random_mdp([i, 101], S, A, float(rng.choice([0.1, 1.0])),
                              int(rng.integers(2, 7)), float(rng.uniform(0.7, 0.99)))
    return mdp, rng.normal(size=(S, A)), rng


def test_criterion_1_derivatives_match_finite_differences():
    start = time.perf_counter()
    worst = dict(gradient=0.0, hessian=0.0, jacobian=0.0, meta=0.0)
    for i in range(20):
        mdp, theta, rng = derivative_instance(i)
        g = exact_policy_gradient(mdp, theta)
        worst["gradient"] = max(worst["gradient"],
                                rel_err(g, central_diff(lambda t: exact_value(mdp, t), theta, 1e-5)))
        H_fd = central_diff(lambda t: exact_policy_gradient(mdp, t), theta, 1e-5)
        worst["hessian"] = max(worst["hessian"], rel_err(exact_policy_hessian(mdp, theta), H_fd))
        J_fd = central_diff(lambda R: exact_policy_gradient(mdp, theta, R), mdp.reward, 1e-5)
        worst["jacobian"] = max(worst["jacobian"], rel_err(exact_reward_jacobian(mdp, theta), J_fd))
        # end to end through K exact inner steps, MAML and LIRPG alternating
        config = InnerLoopConfig((1, 3, 5)[i % 3], 1.0)
        if i % 2 == 0:
            def outer(t):
                return exact_value(mdp, exact_inner_loop(MetaProblem.maml(mdp, t), config)[-1])
            got = exact_meta_gradient(MetaProblem.maml(mdp, theta), config)
            fd = central_diff(outer, theta, 1e-5)
        else:
            phi = 0.3 * rng.normal(size=theta.shape)

            def outer(p):
                return exact_value(mdp, exact_inner_loop(MetaProblem.lirpg(mdp, p, theta), config)[-1])
            got = exact_meta_gradient(MetaProblem.lirpg(mdp, phi, theta), config)
            fd = central_diff(outer, phi, 1e-5)
        worst["meta"] = max(worst["meta"], rel_err(got, fd))
    elapsed = time.perf_counter() - start
    passed = (worst["gradient"] <= 1e-6 and worst["hessian"] <= 1e-6 and worst["jacobian"] <= 1e-6
              and worst["meta"] <= 1e-5 and elapsed < 60)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s"
    check(1, "exact derivatives vs finite differences (20 instances)", passed, detail)


# 2 ----------------------------------------------------------------------------------

def test_criterion_2_enumeration_unbiasedness():
    start = time.perf_counter()
    worst = 0.0
    cases = [(2, 2, 2, 0), (2, 2, 3, 1), (3, 2, 2, 2), (3, 2, 3, 3), (2, 3, 2, 4), (3, 3, 2, 5)]
    for S, A, H, seed in cases:
        mdp = tiny_mdp(seed, S, A, H)
        theta = np.random.default_rng(seed).normal(size=(S, A))
        paths = enumerate_trajectories(mdp, theta)
        base = state_values(mdp, theta)
        g, Hx = exact_policy_gradient(mdp, theta), exact_policy_hessian(mdp, theta)
        gaps = [
            expected_estimate(paths, lambda b: estimate_policy_gradient("dice", b, theta).value) - g,
            expected_estimate(paths, lambda b: estimate_hessian("dice", b, theta).value) - Hx,
            expected_estimate(paths, lambda b: estimate_policy_gradient("loaded_dice", b, theta, base).value) - g,
            expected_estimate(paths, lambda b: estimate_hessian("loaded_dice", b, theta, base).value) - Hx,
            expected_estimate(paths, lambda b: estimate_reward_jacobian("lvc", b, theta).value)
            - exact_reward_jacobian(mdp, theta),
        ]
        mu = np.random.default_rng(seed + 50).normal(size=(S, A))
        off = enumerate_trajectories(mdp, mu)
        gaps.append(expected_estimate(off, lambda b: importance_weighted_gradient(b, theta).value) - g)
        worst = max(worst, max(float(np.max(np.abs(x))) for x in gaps))
    mdp = tiny_mdp(0, 2, 2, 3)
    theta = np.random.default_rng(0).normal(size=(2, 2))
    paths = enumerate_trajectories(mdp, theta)
    ad_gap = float(np.linalg.norm(
        expected_estimate(paths, lambda b: estimate_hessian("ad", b, theta, state_values(mdp, theta)).value)
        - exact_policy_hessian(mdp, theta)))
    elapsed = time.perf_counter() - start
    passed = worst <= 1e-12 and ad_gap > 1e-6 and elapsed < 60
    check(2, "enumeration expectations equal exact values; AD Hessian biased", passed,
          f"max gap {worst:.1e}, AD Hessian gap {ad_gap:.2e}; {elapsed:.1f}s")


# 3 ----------------------------------------------------------------------------------

def test_criterion_3_compositional_bias_scaling():
    batches = [10, 100, 1000, 10000]
    parts, ok = [], True
    for k in (1, 3):
        config = InnerLoopConfig(k, 10.0)
        bias = []
        for n in batches:
            per_mdp = [measure_compositional_bias(MetaProblem.maml(generate_random_mdp([0, j])),
                                                  config, n, 20, 0) for j in range(10)]
            bias.append(float(np.mean(per_mdp)))
        slope = float(np.polyfit(np.log(batches), np.log(bias), 1)[0])
        ok &= -0.7 <= slope <= -0.3 and monotone(bias[::-1])
        parts.append(f"K={k} slope {slope:.3f} bias {' > '.join(f'{b:.3g}' for b in bias)}")
    check(3, "compositional bias log-log slope in [-0.7, -0.3], non-increasing", ok, "; ".join(parts))


# 4 ----------------------------------------------------------------------------------

def test_criterion_4_bias_grows_with_steps_and_learning_rate():
    steps = range(1, 11)
    see = EstimatorAssignment.from_code("SEE", "lvc", 10)
    by_k = np.array([[r.bias_norm for r in measure("maml", InnerLoopConfig(k, 3.0), see, 10, 40, 0).per_mdp]
                     for k in steps]).T
    k_count = sum(monotone(row) for row in by_k)
    alphas = [0.5, 1.0, 2.0, 4.0, 8.0]
    by_a = np.array([[r.bias_norm for r in measure("maml", InnerLoopConfig(2, a), see, 10, 20, 0).per_mdp]
                     for a in alphas]).T
    a_count = sum(monotone(row) for row in by_a)
    check(4, "bias non-decreasing in K (alpha=3) and in alpha (K=2) on >= 8/10 MDPs",
          k_count >= 8 and a_count >= 8,
          f"K sweep {k_count}/10 monotone, alpha sweep {a_count}/10 monotone")


# 5 ----------------------------------------------------------------------------------

def test_criterion_5_hessian_injection():
    cs = [round(0.1 * i, 1) for i in range(11)]
    exact = EstimatorAssignment.exact()
    zero_at_c0, parts, ok = True, [], True
    for k in (1, 2, 3):
        for alpha in (1.0, 10.0):
            B = np.array([[r.bias_norm for r in
                           measure("maml", InnerLoopConfig(k, alpha, c, 0), exact, 10, 2, 0).per_mdp]
                          for c in cs]).T
            zero_at_c0 &= bool(np.all(B[:, 0] == 0.0))
            if k >= 2:
                count = sum(monotone(row, strict=True) for row in B)
                ok &= count >= 8
                parts.append(f"K={k} alpha={alpha:g}: {count}/10 strictly increasing")
    check(5, "injected Hessian error: zero bias at c=0, strictly increasing for K>=2",
          ok and zero_at_c0, f"c=0 bias exactly 0: {zero_at_c0}; " + "; ".join(parts))


# 6 ----------------------------------------------------------------------------------

def test_criterion_6_estimator_ordering():
    batches = [10, 100, 1000]
    cfg = InnerLoopConfig(1, 10.0)
    acc = {(kind, code, n): measure("maml", cfg, EstimatorAssignment.from_code(code, kind, n), 10, 20, 0)
           .mean_correlation for kind in ("lvc", "ad") for code in ALL_CODES for n in batches}
    small, large = batches[0], batches[-1]
    lvc = {c: acc[("lvc", c, small)] for c in ("SEE", "ESE", "SSE")}
    lvc_ok = (abs(lvc["SEE"] - lvc["ESE"]) <= 0.05 and lvc["SEE"] - lvc["SSE"] >= 0.05
              and lvc["ESE"] - lvc["SSE"] >= 0.05)
    ad_gaps = [acc[("ad", "SEE", n)] - acc[("ad", "ESE", n)] for n in batches]
    ad_large = {c: acc[("ad", c, large)] for c in ALL_CODES}
    only_see = ad_large["SEE"] >= 0.95 and all(v < 0.95 for c, v in ad_large.items() if c != "SEE")
    runner_up = max((v, c) for c, v in ad_large.items() if c != "SEE")

    cfg5 = InnerLoopConfig(5, 10.0)
    lirpg = {kind: measure("lirpg", cfg5, EstimatorAssignment.from_code("ESE", kind, 10), 10, 20, 0)
             .mean_correlation for kind in ("lvc", "ad")}
    lirpg_ok = lirpg["lvc"] - lirpg["ad"] >= 0.1
    passed = lvc_ok and min(ad_gaps) >= 0.05 and only_see and lirpg_ok
    detail = (f"LVC@{small} SEE {lvc['SEE']:.3f} ESE {lvc['ESE']:.3f} SSE {lvc['SSE']:.3f}; "
              f"AD SEE-ESE gaps {', '.join(f'{g:.3f}' for g in ad_gaps)}; "
              f"AD@{large} SEE {ad_large['SEE']:.3f}, next {runner_up[1]} {runner_up[0]:.3f}; "
              f"LIRPG K=5 ESE LVC {lirpg['lvc']:.3f} vs AD {lirpg['ad']:.3f}")
    check(6, "correlation ordering of estimator assignments", passed, detail)


# 7 ----------------------------------------------------------------------------------

def test_criterion_7_lola_returns():
    start = time.perf_counter()
    base = LolaConfig()
    exact = run_lola_experiment(base, 10, "exact").final_mean
    on128 = run_lola_experiment(base, 10, "dice_on_policy").final_mean
    on1024 = run_lola_experiment(LolaConfig(inner_batch=1024), 10, "dice_on_policy").final_mean
    off128 = run_lola_experiment(base, 10, "dice_off_policy").final_mean
    elapsed = time.perf_counter() - start
    passed = exact > -1.2 and on1024 - on128 >= 0.2 and off128 >= on128
    detail = (f"exact {exact:.3f}, on-policy 1024 {on1024:.3f} vs 128 {on128:.3f} "
              f"(gap {on1024 - on128:.3f}), off-policy 128 {off128:.3f}; {elapsed:.0f}s")
    check(7, "LOLA final returns over 10 seeds", passed, detail)


# 8 ----------------------------------------------------------------------------------

DETERMINISM_CONFIGS = {
    "maml-ablation": "n_states = 4\nn_actions = 3\ndensity = 1.0\nhorizon = 5\nn_mdps = 2\n"
                     "n_trials = 3\nbatch_sizes = [5, 10]\n",
    "lirpg-ablation": "n_states = 4\nn_actions = 3\ndensity = 1.0\nhorizon = 5\nn_mdps = 2\n"
                      "n_trials = 3\nk_steps = [1, 2]\nbatch_sizes = [5]\n",
    "bias-scaling": "n_mdps = 2\nn_trials = 3\nk_steps = [1, 2]\nbatch_sizes = [10, 100]\n",
    "hessian-injection": "n_mdps = 2\nk_steps = [1, 2]\ncoefficients = [0.0, 0.5, 1.0]\n",
    "lola": "n_seeds = 2\nn_updates = 20\nrollout_length = 20\ninner_batches = [16]\n"
            "outer_batch = 16\nbuffer_sample = 16\n",
}


def test_criterion_8_reruns_reproduce_csv_bytes(tmp_path):
    same = []
    for name, body in DETERMINISM_CONFIGS.items():
        conf = tmp_path / f"{name}.conf"
        conf.write_text(f"experiment = {name}\n{body}")
        outputs = []
        for run in ("first", "second"):
            out = tmp_path / f"{name}-{run}"
            assert cli.main(["run", str(conf), "--out-dir", str(out), "--quiet"]) == 0
            outputs.append((out / "results.csv").read_bytes())
        same.append(outputs[0] == outputs[1])
    check(8, "identical configs reproduce CSV bytes", all(same),
          f"{sum(same)}/{len(same)} experiments byte-identical")
