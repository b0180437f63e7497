"""Acceptance suite: one pass/fail line per criterion.

Each test records a line in ``conftest.ACCEPTANCE``; the lines are printed
in the terminal summary. The Monte Carlo criteria share module-scoped runs
at S = 200 and take several minutes on one core.
"""
import time

import numpy as np
import pytest
from scipy.special import expit

from netdr.allocation import pi_joint, pi_neighborhood
from netdr.estimators import (MARGINAL, NetworkContext, drbc_mean, drbc_mean_marginal, estimate_means,
                              ipw_mean, ipw_mean_marginal, ipwls_mean, reg_mean, reg_mean_marginal)
from netdr.graph import NodeData, load_graph
from netdr.outcome import OutcomeDesign, OutcomeFit
from netdr.propensity import PropensityFit, gh_rule, log_integral
from netdr.simulate import DgpConfig, run_scenarios

from conftest import ACCEPTANCE, random_data, random_graph
from oracles import assignment_law, observed, potential_table, true_mean, with_outcomes
from test_propensity import trapezoid_integral

S = 200
SEED = 20240
REFERENCE_ESTIMANDS = [("DE", 0.2, None), ("DE", 0.5, None), ("DE", 0.8, None),
            ("IE", 0.5, 0.2), ("IE", 0.8, 0.2), ("IE", 0.8, 0.5)]


def record(num, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {num:2d}. {title}: {detail}"
    ACCEPTANCE[num] = line
    print(line)
    assert ok, line


# -- shared Monte Carlo runs -----------------------------------------------------------

@pytest.fixture(scope="module")
def scheme1():
    return run_scenarios(DgpConfig(scheme="balanced", seed=SEED), ["a", "b", "c", "d"], S,
                         estimands=[("DE", 0.6, None)], threads=None)


@pytest.fixture(scope="module")
def latent():
    return run_scenarios(DgpConfig(scheme="balanced", seed=SEED), ["latent"], S,
                         estimators=("IPW", "DRBC"), estimands=REFERENCE_ESTIMANDS, se=False, threads=None)


@pytest.fixture(scope="module")
def scheme2():
    return run_scenarios(DgpConfig(scheme="multilevel", m=100, seed=SEED), ["a", "b"], S,
                         estimands=[("DE", 0.6, None)], threads=None)


# -- exactness criteria --------------------------------------------------------------

def test_01_allocation_normalisation():
    t0 = time.perf_counter()
    worst = 0.0
    for d in range(65):
        s = np.arange(d + 1)
        for a in np.linspace(0, 1, 101):
            worst = max(worst, abs(pi_neighborhood(s, d, a).sum() - 1.0),
                        abs(pi_joint(0, s, d, a).sum() + pi_joint(1, s, d, a).sum() - 1.0))
    secs = time.perf_counter() - t0
    record(1, "allocation normalisation", worst < 1e-12 and secs < 5.0,
           f"max |sum - 1| = {worst:.2e} (tol 1e-12), {secs:.2f} s (limit 5 s)")


def test_02_quadrature_accuracy():
    rng = np.random.default_rng(2)
    t, w = gh_rule(10)
    t0 = time.perf_counter()
    worst = 0.0
    n_bad = 0
    for _ in range(1000):
        d = int(rng.integers(0, 7))
        eta = rng.uniform(-5, 5, d + 1)
        z = rng.integers(0, 2, d + 1)
        phi = rng.uniform(0, 4)
        gh = np.exp(log_integral(eta, z, phi, t, w))
        ref = trapezoid_integral(eta, z, phi) if phi > 0 else gh
        rel = abs(gh - ref) / ref
        worst = max(worst, rel)
        n_bad += rel > 1e-6
    secs = time.perf_counter() - t0
    record(2, "GH Q=10 vs trapezoid", worst < 1e-6 and secs < 10.0,
           f"max rel err = {worst:.2e} (tol 1e-6), {n_bad}/1000 instances over tol, {secs:.1f} s")


def test_03_ipw_unbiasedness_by_enumeration():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(50):
        n = 12 if k < 5 else int(rng.integers(3, 13))
        g = random_graph(rng, n, float(rng.uniform(0.1, 0.4)))
        data = random_data(rng, n)
        fit = PropensityFit.from_parameters(rng.normal(0, 0.5, 3), float(rng.uniform(0, 2)),
                                            ("x1", "x2"), Q=6)
        y = potential_table(rng, n)
        Zs, prob = assignment_law(fit.linear_predictor(data), g.component_of, fit.phi_b,
                                  fit.gh_nodes, fit.gh_weights)
        alpha = float(rng.uniform(0.05, 0.95))
        targets = [(0, alpha), (1, alpha), (MARGINAL, alpha)]
        acc = np.zeros(3)
        for Z, pr in zip(Zs, prob):
            ctx = NetworkContext(g, with_outcomes(data, Z, observed(g, y, Z)), fit.design_columns, Q=6)
            mu = estimate_means(ctx, "IPW", targets, fit).mu
            acc += pr * np.array([mu[key] for key in targets])
        want = np.array([true_mean(g, y, 0, alpha), true_mean(g, y, 1, alpha),
                         true_mean(g, y, "marginal", alpha)])
        worst = max(worst, float(np.abs(acc - want).max()))
    secs = time.perf_counter() - t0
    record(3, "IPW unbiasedness by enumeration", worst < 1e-10 and secs < 60.0,
           f"max |E[IPW] - truth| = {worst:.2e} over 50 graphs (tol 1e-10), {secs:.1f} s (limit 60 s)")


def test_04_collapse_identities():
    rng = np.random.default_rng(4)
    exact = True
    worst_ipwls = 0.0
    for _ in range(10):
        n = 60
        g = random_graph(rng, n, float(rng.uniform(0.03, 0.1)))
        data = random_data(rng, n)
        fit_p = PropensityFit.from_parameters(rng.normal(0, 0.5, 3), float(rng.uniform(0, 1.5)),
                                              ("x1", "x2"))
        design = OutcomeDesign(("x1", "x2"), interaction=True)
        beta = rng.standard_normal(6)
        fit = OutcomeFit(beta, "OLS", design, column_names=data.column_names)
        zero = OutcomeFit(np.zeros(6), "OLS", design, column_names=data.column_names)
        ctx = NetworkContext(g, data, None, design)
        fitted = NodeData(data.X, data.Z, ctx.fitted_obs(beta), data.column_names)
        a = float(rng.uniform(0.05, 0.95))
        for z in (0, 1):
            exact &= drbc_mean(g, fitted, fit_p, fit, z, a).value == reg_mean(g, fitted, fit, z, a).value
            exact &= drbc_mean(g, data, fit_p, zero, z, a).value == ipw_mean(g, data, fit_p, z, a).value
        exact &= (drbc_mean_marginal(g, fitted, fit_p, fit, a).value
                  == reg_mean_marginal(g, fitted, fit, a).value)
        exact &= (drbc_mean_marginal(g, data, fit_p, zero, a).value
                  == ipw_mean_marginal(g, data, fit_p, a).value)

        # balanced components: 12 five-cycles
        groups = np.repeat(np.arange(12), 5)
        gb = load_graph([(5 * c + j, 5 * c + (j + 1) % 5) for c in range(12) for j in range(5)], n, groups)
        arm_design = OutcomeDesign(("x1", "x2"))
        ctxb = NetworkContext(gb, data, fit_p.design_columns, arm_design)
        f, _ = ctxb.propensity(fit_p.gamma, fit_p.phi_b)
        for z in (0, 1):
            est = ipwls_mean(gb, data, fit_p, arm_design, z, a)
            b = est.info["arm_fits"][(z, a)].beta
            v = ctxb.reg_nodes(z, a, b, arm=True) + ctxb.weights(f, z, a) * (ctxb.Y - ctxb.fitted_obs(b, arm=True))
            worst_ipwls = max(worst_ipwls, abs(est.value - ctxb.pool(v)[0]))
    record(4, "collapse identities", bool(exact) and worst_ipwls < 1e-8,
           f"DR-BC=REG and DR-BC=IPW bit-exact: {bool(exact)}; "
           f"max |IPWLS - DR-BC at WLS coef| = {worst_ipwls:.2e} (tol 1e-8)")


# -- Monte Carlo criteria --------------------------------------------------------------

def _bias(report, sc, est, estimand="DE(0.6)"):
    return report.row(sc, est, estimand)["bias"]


def test_05_scheme1_bias(scheme1):
    reg_b, dr_b = _bias(scheme1, "b", "REG"), _bias(scheme1, "b", "DRBC")
    ipw_c, dr_c = _bias(scheme1, "c", "IPW"), _bias(scheme1, "c", "DRBC")
    ok = (-0.45 <= reg_b <= -0.22 and abs(dr_b) < 0.05 and -0.48 <= ipw_c <= -0.24 and abs(dr_c) < 0.05)
    record(5, "scheme 1 bias, DE(0.6)", ok,
           f"(b) REG {reg_b:+.3f} in [-0.45,-0.22], DR-BC {dr_b:+.3f} |.|<0.05; "
           f"(c) IPW {ipw_c:+.3f} in [-0.48,-0.24], DR-BC {dr_c:+.3f} |.|<0.05")


def test_06_scheme1_coverage(scheme1):
    cov = {sc: scheme1.row(sc, "DRBC", "DE(0.6)")["coverage"] for sc in "abcd"}
    ok = all(0.90 <= cov[sc] <= 0.99 for sc in "abc") and cov["d"] < 0.80
    others = ", ".join(f"{e} {scheme1.row('d', e, 'DE(0.6)')['coverage']:.3f}" for e in ("IPW", "REG", "IPWLS"))
    record(6, "DR-BC coverage, DE(0.6)", ok,
           "(a) {a:.3f} (b) {b:.3f} (c) {c:.3f} in [0.90,0.99]; (d) {d:.3f} < 0.80".format(**cov)
           + f" [other estimators in (d): {others}]")


def test_07_latent_homophily(latent):
    ipw, dr = _bias(latent, "latent", "IPW", "DE(0.2)"), _bias(latent, "latent", "DRBC", "DE(0.2)")
    record(7, "latent homophily, DE(0.2)", abs(ipw + 0.140) <= 0.05 and abs(dr) < 0.04,
           f"IPW bias {ipw:+.3f} within 0.05 of -0.140; DR-BC bias {dr:+.3f} |.|<0.04")


def test_08_multilevel_ipwls(scheme2):
    ipwls, dr = _bias(scheme2, "b", "IPWLS"), _bias(scheme2, "b", "DRBC")
    record(8, "multilevel IP-WLS, scenario (b), m=100", abs(ipwls) > 0.05 and abs(dr) < 0.03,
           f"IP-WLS bias {ipwls:+.3f} |.|>0.05; DR-BC bias {dr:+.3f} |.|<0.03")


def test_09_sandwich_ratio(scheme2):
    ratio = {}
    for est in ("IPW", "REG", "DRBC"):
        row = scheme2.row("a", est, "DE(0.6)")
        ratio[est] = row["ase"] / row["ese"]
    ok = all(0.85 <= r <= 1.15 for r in ratio.values())
    record(9, "ASE/ESE, scheme 2 (a), m=100", ok,
           ", ".join(f"{k} {v:.3f}" for k, v in ratio.items()) + " in [0.85,1.15]")


def test_10_truth(latent):
    want = {"DE(0.2)": 2.200, "DE(0.5)": 2.499, "DE(0.8)": 2.797, "IE(0.8,0.2)": 0.597}
    got = {k: latent.row("latent", "DRBC", k)["truth"] for k in want}
    ok = all(abs(got[k] - want[k]) < 0.01 for k in want)
    record(10, "truth vs reference values", ok,
           ", ".join(f"{k} {got[k]:.3f} (ref {want[k]:.3f})" for k in want) + "; tol 0.01")
