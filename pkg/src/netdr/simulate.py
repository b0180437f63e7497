"""Simulation engine: data generation, truth, and replicated scenario runs.

Two generating schemes are available. ``balanced`` uses ``m`` components of
fixed size with independent outcome errors. ``multilevel`` draws component
sizes from two Poisson laws and adds a component intercept to the outcome.

The network is drawn once per run; each replicate redraws covariates,
noise, random intercepts and treatments.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .allocation import pi_neighborhood
from .estimators import (KINDS, MARGINAL, NetworkContext, contrast_terms, estimate_means,
                         fit_arm_models, arm_keys)
from .graph import ComponentGraph, NeighborSets, NodeData, load_graph
from .mestimation import EstimatingStack, SandwichError, contrast_se
from .outcome import OutcomeDesign, fit_lmm, fit_ols
from .propensity import fit_propensity

log = logging.getLogger(__name__)

COLUMNS = ("X1", "X2", "H")


@dataclass(frozen=True)
class DgpConfig:
    """Data-generating process.

    Attributes
    ----------
    scheme : {"balanced", "multilevel"}
    m : int
        Number of components.
    component_size : int
        Size of every component in the balanced scheme.
    large_share, large_mean, small_mean : float
        Multilevel scheme: the first ``large_share * m`` components have
        Poisson(``large_mean``) nodes, the rest Poisson(``small_mean``).
        Zero draws are redrawn.
    tie_coef : (float, float)
        Dyad log-odds ``tie_coef[0] + tie_coef[1] * 1{H_i == H_j}``.
    treat_coef : tuple
        Coefficients on ``(1, |X1|, X2|X1|, H)`` of the treatment log-odds.
    phi_b : float
        Variance of the treatment random intercept.
    outcome_coef : tuple
        Coefficients on ``(1, z, h, z*h, |X1|, X2, |X1|X2)``.
    noise_sd, cluster_sd : float
        Outcome error SD and (multilevel scheme) component-intercept SD.
    interference : {"first", "phi_tilde", "second_order"}
        Exposure driving the potential outcomes: treated share of first-order
        neighbors, of first-order neighbors sharing ``X2``, or of first- and
        second-order neighbors together.
    seed : int
    """
    scheme: str = "balanced"
    m: int = 30
    component_size: int = 30
    large_share: float = 0.6
    large_mean: float = 35.0
    small_mean: float = 12.0
    tie_coef: tuple = (-2.5, 1.5)
    treat_coef: tuple = (0.1, 0.2, 0.2, -1.0)
    phi_b: float = 1.0
    outcome_coef: tuple = (2.0, 2.0, 1.0, 1.0, -1.5, 2.0, -3.0)
    noise_sd: float = 1.0
    cluster_sd: float = 1.0
    interference: str = "first"
    seed: int = 20240

    def __post_init__(self):
        if self.scheme not in ("balanced", "multilevel"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.m < 2:
            raise ValueError("need at least two components")
        if self.interference not in ("first", "phi_tilde", "second_order"):
            raise ValueError(f"unknown interference {self.interference!r}")
        if self.component_size < 1 or not 0 < self.large_share <= 1:
            raise ValueError("invalid component size settings")
        if self.phi_b < 0 or self.noise_sd < 0 or self.cluster_sd < 0:
            raise ValueError("variances must be non-negative")
        object.__setattr__(self, "tie_coef", tuple(self.tie_coef))
        object.__setattr__(self, "treat_coef", tuple(self.treat_coef))
        object.__setattr__(self, "outcome_coef", tuple(self.outcome_coef))

    @property
    def multilevel(self) -> bool:
        return self.scheme == "multilevel"

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("tie_coef", "treat_coef", "outcome_coef"):
            d[k] = list(d[k])
        return d


# -- generation -----------------------------------------------------------------

def component_sizes(cfg: DgpConfig, rng) -> np.ndarray:
    if cfg.scheme == "balanced":
        return np.full(cfg.m, cfg.component_size, dtype=np.int64)
    n_large = int(round(cfg.large_share * cfg.m))
    means = np.where(np.arange(cfg.m) < n_large, cfg.large_mean, cfg.small_mean)
    sizes = rng.poisson(means)
    while np.any(sizes == 0):
        zero = sizes == 0
        sizes[zero] = rng.poisson(means[zero])
    return sizes.astype(np.int64)


def gen_network(cfg: DgpConfig, rng) -> tuple[ComponentGraph, np.ndarray]:
    """Draw the component graph and the homophily attribute ``H``.

    Within a component each dyad is present independently with probability
    ``expit(tie_coef[0] + tie_coef[1] * 1{H_i == H_j})``; this is the exact
    distribution of an edges-plus-nodematch random graph model, which is
    dyad independent. There are no edges between components.
    """
    sizes = component_sizes(cfg, rng)
    groups = np.repeat(np.arange(cfg.m), sizes)
    H = rng.integers(0, 2, size=len(groups))
    edges = []
    start = 0
    for n in sizes:
        ids = np.arange(start, start + n)
        iu, ju = np.triu_indices(n, k=1)
        h = H[ids]
        prob = expit(cfg.tie_coef[0] + cfg.tie_coef[1] * (h[iu] == h[ju]))
        keep = rng.random(len(iu)) < prob
        edges.append(np.column_stack([ids[iu[keep]], ids[ju[keep]]]))
        start += n
    e = np.concatenate(edges) if edges else np.zeros((0, 2), dtype=np.int64)
    return load_graph(e, len(groups), groups), H


def exposure_sets(g: ComponentGraph, X2, kind: str) -> NeighborSets:
    """Sets whose treated share drives the outcome under interference ``kind``."""
    if kind == "first":
        return g.nbrs
    if kind == "second_order":
        return g.neighbor_sets(2)
    if kind == "phi_tilde":
        rows = np.repeat(np.arange(g.n_nodes), g.nbrs.sizes)
        return g.nbrs.filter(X2[rows] == X2[g.nbrs.indices])
    raise ValueError(f"unknown exposure kind {kind!r}")


@dataclass(eq=False)
class PotentialOutcomes:
    """Queryable potential outcomes ``y_i(z, s)``.

    ``s`` is the number of treated nodes in node ``i``'s exposure set (of
    size ``d_i``), and ``y_i(z, s) = base_i + bz z + (bh + bzh z) s / d_i``
    with the share taken as 0 when ``d_i = 0``.
    """
    base: np.ndarray
    sets: NeighborSets
    bz: float
    bh: float
    bzh: float

    @property
    def d(self) -> np.ndarray:
        return self.sets.sizes

    def y(self, z, s, nodes=None) -> np.ndarray:
        idx = slice(None) if nodes is None else nodes
        d = self.d[idx]
        s = np.asarray(s, dtype=float)
        h = np.divide(s, d, out=np.zeros(np.broadcast(s, d).shape), where=d > 0)
        z = np.asarray(z, dtype=float)
        return self.base[idx] + self.bz * z + (self.bh + self.bzh * z) * h

    def observed(self, Z) -> np.ndarray:
        return self.y(Z, self.sets.count(Z))


def gen_covariates(n: int, rng):
    X1 = rng.standard_normal(n)
    X2 = rng.integers(0, 2, size=n).astype(float)
    return X1, X2


def gen_potential_outcomes(g: ComponentGraph, X1, X2, cfg: DgpConfig, rng) -> PotentialOutcomes:
    """Draw noise (and component intercepts) and return the outcome oracle."""
    b0, bz, bh, bzh, b_abs, b_x2, b_int = cfg.outcome_coef
    eps = cfg.noise_sd * rng.standard_normal(g.n_nodes)
    c = np.zeros(g.n_nodes)
    if cfg.multilevel:
        c = (cfg.cluster_sd * rng.standard_normal(g.n_components))[g.component_of]
    a1 = np.abs(X1)
    base = b0 + b_abs * a1 + b_x2 * X2 + b_int * a1 * X2 + c + eps
    return PotentialOutcomes(base, exposure_sets(g, X2, cfg.interference), bz, bh, bzh)


def gen_treatment(g: ComponentGraph, X1, X2, H, cfg: DgpConfig, rng) -> np.ndarray:
    """Treatments from the random-intercept logistic model."""
    g0, g1, g2, g3 = cfg.treat_coef
    b = (np.sqrt(cfg.phi_b) * rng.standard_normal(g.n_components))[g.component_of]
    a1 = np.abs(X1)
    p = expit(g0 + g1 * a1 + g2 * X2 * a1 + g3 * H + b)
    return (rng.random(g.n_nodes) < p).astype(np.int64)


# -- truth ------------------------------------------------------------------------

@dataclass
class TruthTable:
    """True average potential outcomes and contrasts for one dataset."""
    mu: dict
    values: dict = field(default_factory=dict)

    def value(self, kind, alpha, alpha_prime=None) -> float:
        key = (kind, float(alpha), None if alpha_prime is None else float(alpha_prime))
        if key not in self.values:
            self.values[key] = _contrast(self.mu, *key)
        return self.values[key]


def _contrast(mu, kind, alpha, alpha_prime):
    if kind == "TE":
        # as the sum DE + IE so that the identity holds exactly
        return ((mu[(1, alpha)] - mu[(0, alpha)])
                + (mu[(0, alpha)] - mu[(0, alpha_prime)]))
    terms = contrast_terms(kind, alpha, alpha_prime)
    return mu[terms[0][1]] - mu[terms[1][1]]


def individual_average(oracle: PotentialOutcomes, z, alpha) -> np.ndarray:
    """``ybar_i(z; alpha) = sum_s y_i(z, s) pi(s; d_i, alpha)`` by explicit summation."""
    d = oracle.d
    out = np.zeros(len(d))
    for dd in np.unique(d):
        nodes = np.flatnonzero(d == dd)
        for s in range(dd + 1):
            out[nodes] += oracle.y(z, s, nodes) * pi_neighborhood(s, dd, alpha)
    return out


def compute_truth(oracle: PotentialOutcomes, g: ComponentGraph, alphas, estimands=()) -> TruthTable:
    """Average potential outcomes over components, then the requested contrasts.

    ``estimands`` is a sequence of ``(kind, alpha, alpha_prime)``; the
    alphas they use are added to ``alphas`` automatically.
    """
    alphas = {float(a) for a in alphas}
    for kind, a, ap in estimands:
        alphas.add(float(a))
        if ap is not None:
            alphas.add(float(ap))
    C = g.component_matrix()
    sizes = g.component_sizes
    mu = {}
    for a in sorted(alphas):
        y0 = individual_average(oracle, 0, a)
        y1 = individual_average(oracle, 1, a)
        mu[(0, a)] = float(np.mean((C @ y0) / sizes))
        mu[(1, a)] = float(np.mean((C @ y1) / sizes))
        mu[(MARGINAL, a)] = float(np.mean((C @ (a * y1 + (1 - a) * y0)) / sizes))
    table = TruthTable(mu)
    for kind, a, ap in estimands:
        table.value(kind, a, ap)
    return table


# -- scenarios ---------------------------------------------------------------------

TREATMENT_MODELS = {
    "correct": ("abs(X1)", "abs(X1):X2", "H"),
    "incorrect": ("X1", "H"),
    "latent": ("abs(X1)", "abs(X1):X2"),
}
OUTCOME_TERMS = {
    "correct": ("abs(X1)", "X2", "abs(X1):X2"),
    "incorrect": ("X1", "X2"),
}


@dataclass(frozen=True)
class Scenario:
    """Fitted-model menu for one scenario.

    Attributes
    ----------
    treatment, outcome : str
        Keys of :data:`TREATMENT_MODELS` and :data:`OUTCOME_TERMS`.
    exposure : {"first", "phi_tilde", "second_order"}
        Exposure used by the fitted outcome model.
    weight_order : {1, 2}
        Neighborhood order of the joint propensity and allocation weights.
    requires : str or None
        Interference setting of the generating process this scenario is
        meant for.
    """
    name: str
    treatment: str
    outcome: str
    exposure: str = "first"
    weight_order: int = 1
    requires: str | None = None


SCENARIOS = {s.name: s for s in [
    Scenario("a", "correct", "correct"),
    Scenario("b", "correct", "incorrect"),
    Scenario("c", "incorrect", "correct"),
    Scenario("d", "incorrect", "incorrect"),
    Scenario("latent", "latent", "correct"),
    Scenario("phi-correct", "correct", "correct", "phi_tilde", 1, "phi_tilde"),
    Scenario("phi-incorrect", "correct", "correct", "first", 1, "phi_tilde"),
    Scenario("so-a", "correct", "correct", "second_order", 2, "second_order"),
    Scenario("so-b", "correct", "correct", "first", 2, "second_order"),
    Scenario("so-c", "correct", "correct", "second_order", 1, "second_order"),
    Scenario("so-d", "correct", "correct", "first", 1, "second_order"),
]}


def resolve_scenarios(names, cfg: DgpConfig) -> list[Scenario]:
    out = []
    for name in names:
        if name not in SCENARIOS:
            raise ValueError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
        sc = SCENARIOS[name]
        if sc.requires is not None and sc.requires != cfg.interference:
            raise ValueError(f"scenario {name!r} needs interference={sc.requires!r}")
        out.append(sc)
    return out


# -- replicate loop -------------------------------------------------------------------

def replicate_rng(seed: int, r: int):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, r)))


def network_rng(seed: int):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))


def gen_replicate(cfg: DgpConfig, g: ComponentGraph, H, rng):
    """Covariates, outcome oracle, treatments and observed data for one replicate."""
    X1, X2 = gen_covariates(g.n_nodes, rng)
    oracle = gen_potential_outcomes(g, X1, X2, cfg, rng)
    Z = gen_treatment(g, X1, X2, H, cfg, rng)
    data = NodeData(np.column_stack([X1, X2, H]), Z, oracle.observed(Z), COLUMNS)
    return data, oracle


@dataclass
class RunSettings:
    scenarios: tuple
    estimators: tuple = KINDS
    estimands: tuple = (("DE", 0.6, None),)
    multilevel: bool = False
    se: bool = True
    Q: int = 10


def _fail(rows, sc, kinds, estimands, truth, cause):
    for kind in kinds:
        for est in estimands:
            rows.append(dict(scenario=sc.name, estimator=kind, estimand=_label(est),
                             point=np.nan, se=np.nan, truth=truth.value(*est), status=cause))


def _label(est) -> str:
    kind, a, ap = est
    return f"{kind}({a:g})" if ap is None else f"{kind}({a:g},{ap:g})"


def run_replicate(cfg: DgpConfig, g: ComponentGraph, H, r: int, settings: RunSettings) -> list[dict]:
    """Fit every scenario on replicate ``r``; one record per scenario x estimator x estimand."""
    rng = replicate_rng(cfg.seed, r)
    data, oracle = gen_replicate(cfg, g, H, rng)
    estimands = [(k, float(a), None if ap is None else float(ap)) for k, a, ap in settings.estimands]
    truth = compute_truth(oracle, g, (), estimands)
    targets = []
    for est in estimands:
        for _, key in contrast_terms(*est):
            if key not in targets:
                targets.append(key)
    sets_cache = {}
    prop_cache, out_cache = {}, {}
    rows = []
    for sc in settings.scenarios:
        if sc.exposure not in sets_cache:
            sets_cache[sc.exposure] = exposure_sets(g, data.column("X2"), sc.exposure)
        out_design = OutcomeDesign(OUTCOME_TERMS[sc.outcome], "proportion", True,
                                   None if sc.exposure == "first" else sets_cache[sc.exposure])
        prop_terms = TREATMENT_MODELS[sc.treatment]
        weight_sets = g.neighbor_sets(sc.weight_order)
        ctx = NetworkContext(g, data, prop_terms, out_design, weight_sets, settings.Q)

        fit_p = None
        need_p = [k for k in settings.estimators if k in ("IPW", "DRBC", "IPWLS")]
        if need_p:
            if sc.treatment not in prop_cache:
                try:
                    fp = fit_propensity(g, data, prop_terms, settings.Q)
                    prop_cache[sc.treatment] = fp if fp.converged else "propensity non-convergence"
                except Exception as exc:  # recorded as an exclusion cause
                    prop_cache[sc.treatment] = f"propensity failure: {exc}"
            fit_p = prop_cache[sc.treatment]
            if isinstance(fit_p, str):
                _fail(rows, sc, need_p, estimands, truth, fit_p)
                fit_p = None

        fit_o = None
        need_o = [k for k in settings.estimators if k in ("REG", "DRBC")]
        okey = (sc.outcome, sc.exposure)
        if need_o:
            if okey not in out_cache:
                try:
                    out_cache[okey] = (fit_lmm if settings.multilevel else fit_ols)(g, data, out_design)
                except Exception as exc:
                    out_cache[okey] = f"outcome failure: {exc}"
            fit_o = out_cache[okey]
            if isinstance(fit_o, str):
                _fail(rows, sc, [k for k in need_o if not (k == "DRBC" and fit_p is None)],
                      estimands, truth, fit_o)
                fit_o = None

        for kind in settings.estimators:
            if kind in ("IPW", "DRBC", "IPWLS") and fit_p is None:
                continue
            if kind in ("REG", "DRBC") and fit_o is None:
                continue
            arm_fits = None
            try:
                if kind == "IPWLS":
                    arm_fits = fit_arm_models(ctx, fit_p, arm_keys(targets), settings.multilevel)
                means = estimate_means(ctx, kind, targets, fit_p, fit_o, arm_fits)
            except Exception as exc:
                _fail(rows, sc, [kind], estimands, truth, f"estimation failure: {exc}")
                continue
            stack = None
            status = "ok"
            if settings.se:
                try:
                    stack = EstimatingStack(ctx, kind, targets, fit_p, fit_o, arm_fits, means.mu)
                    res = stack.sandwich()
                except (SandwichError, np.linalg.LinAlgError) as exc:
                    status = f"sandwich failure: {exc}"
            for est in estimands:
                terms = contrast_terms(*est)
                if est[0] == "TE":
                    point = ((means.mu[(1, est[1])] - means.mu[(0, est[1])])
                             + (means.mu[(0, est[1])] - means.mu[(0, est[2])]))
                else:
                    point = means.mu[terms[0][1]] - means.mu[terms[1][1]]
                se = np.nan
                if settings.se and status == "ok":
                    try:
                        se, _ = contrast_se(res, stack.tau(*est))
                    except SandwichError as exc:
                        status = f"sandwich failure: {exc}"
                rows.append(dict(scenario=sc.name, estimator=kind, estimand=_label(est),
                                 point=float(point) if status == "ok" else np.nan,
                                 se=float(se), truth=truth.value(*est), status=status))
    for row in rows:
        row["replicate"] = r
    return rows


# -- aggregation ------------------------------------------------------------------------

SUMMARY_FIELDS = ("scenario", "estimator", "estimand", "truth", "bias", "mse", "ese", "ase",
                  "coverage", "n_used", "n_excluded")


def summarize(records: list[dict], level_z: float = 1.959963984540054) -> list[dict]:
    """Bias, MSE, ESE, ASE and Wald coverage per scenario x estimator x estimand.

    Records with a non-``ok`` status are excluded and counted. Bias and MSE
    are taken against each replicate's own truth.
    """
    groups = {}
    for rec in records:
        key = (rec["scenario"], rec["estimator"], rec["estimand"])
        groups.setdefault(key, []).append(rec)
    out = []
    for key in sorted(groups, key=lambda k: (k[0], KINDS.index(k[1]) if k[1] in KINDS else 9, k[2])):
        recs = sorted(groups[key], key=lambda d: d["replicate"])
        used = [d for d in recs if d["status"] == "ok"]
        n_used = len(used)
        row = dict(scenario=key[0], estimator=key[1], estimand=key[2],
                   n_used=n_used, n_excluded=len(recs) - n_used)
        if n_used:
            point = np.array([d["point"] for d in used])
            truth = np.array([d["truth"] for d in used])
            se = np.array([d["se"] for d in used])
            err = point - truth
            row.update(truth=float(truth.mean()), bias=float(err.mean()),
                       mse=float(np.mean(err ** 2)),
                       ese=float(point.std(ddof=1)) if n_used > 1 else np.nan)
            if np.all(np.isfinite(se)):
                row["ase"] = float(se.mean())
                row["coverage"] = float(np.mean(np.abs(err) <= level_z * se))
            else:
                row["ase"] = np.nan
                row["coverage"] = np.nan
        else:
            row.update(truth=np.nan, bias=np.nan, mse=np.nan, ese=np.nan, ase=np.nan,
                       coverage=np.nan)
        out.append({k: row[k] for k in SUMMARY_FIELDS})
    return out


@dataclass
class ScenarioReport:
    """Per-replicate records plus their summary."""
    config: dict
    summary: list
    records: list

    def row(self, scenario, estimator, estimand) -> dict:
        for r in self.summary:
            if (r["scenario"], r["estimator"], r["estimand"]) == (scenario, estimator, estimand):
                return r
        raise KeyError((scenario, estimator, estimand))


def _worker(args):
    cfg, g, H, r, settings = args
    return run_replicate(cfg, g, H, r, settings)


def run_scenarios(cfg: DgpConfig, scenarios, S: int, estimators=KINDS,
                  estimands=(("DE", 0.6, None),), multilevel: bool | None = None,
                  se: bool = True, threads: int | None = 1, Q: int = 10,
                  progress=None) -> ScenarioReport:
    """Replicated simulation over a scenario list.

    Parameters
    ----------
    cfg : DgpConfig
    scenarios : sequence of str
        Names from :data:`SCENARIOS`.
    S : int
        Number of replicates (at least 2).
    estimators : sequence of str
    estimands : sequence of (kind, alpha, alpha_prime)
    multilevel : bool, optional
        Fit mixed outcome models (and weighted mixed arm models for IP-WLS).
        Defaults to ``cfg.multilevel``.
    se : bool
        Compute sandwich standard errors and coverage.
    threads : int, optional
        Worker processes; ``None`` uses all available cores.
    """
    if S < 2:
        raise ValueError("need at least two replicates")
    for k in estimators:
        if k not in KINDS:
            raise ValueError(f"unknown estimator {k!r}")
    scs = tuple(resolve_scenarios(scenarios, cfg))
    settings = RunSettings(scs, tuple(estimators),
                           tuple((k, float(a), None if ap is None else float(ap))
                                 for k, a, ap in estimands),
                           cfg.multilevel if multilevel is None else bool(multilevel), se, Q)
    g, H = gen_network(cfg, network_rng(cfg.seed))
    threads = (os.cpu_count() or 1) if threads is None else max(1, int(threads))
    jobs = [(cfg, g, H, r, settings) for r in range(S)]
    records = []
    if threads == 1:
        for r, job in enumerate(jobs):
            records.extend(_worker(job))
            if progress is not None:
                progress(r + 1, S)
    else:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            for r, recs in enumerate(ex.map(_worker, jobs)):
                records.extend(recs)
                if progress is not None:
                    progress(r + 1, S)
    config = dict(dgp=cfg.to_dict(), scenarios=list(scenarios), S=S, estimators=list(estimators),
                  estimands=[list(e) for e in settings.estimands], multilevel=settings.multilevel,
                  se=se, Q=Q, seed=cfg.seed)
    return ScenarioReport(config, summarize(records), records)


def replicate_truths(cfg: DgpConfig, S: int, estimands) -> list[TruthTable]:
    """Truth tables of replicates ``0..S-1``, regenerated from the seed alone."""
    g, H = gen_network(cfg, network_rng(cfg.seed))
    out = []
    for r in range(S):
        _, oracle = gen_replicate(cfg, g, H, replicate_rng(cfg.seed, r))
        out.append(compute_truth(oracle, g, (), estimands))
    return out
