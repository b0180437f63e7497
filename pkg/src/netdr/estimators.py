"""IPW, regression, DR-BC and IP-WLS estimators of average potential outcomes.

Every estimator is an average over components of a within-component node
average. Targets are keyed by ``(z, alpha)`` with ``z`` in ``{0, 1}`` for
the arm-specific means ``mu_{z, alpha}`` and ``z = MARGINAL`` for the
marginal mean ``mu_alpha``.

The functions in the first half work on a :class:`NetworkContext`, which
caches everything that does not depend on the model parameters. The
stacked estimating equations in :mod:`netdr.mestimation` reuse these
kernels at perturbed parameter values.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .allocation import _check_alpha, expected_exposure, vector_probability
from .graph import ComponentGraph, NeighborSets, NodeData, check_aligned
from .outcome import (OutcomeDesign, OutcomeError, OutcomeFit, arm_weights, fit_wlmm_weighted,
                      fit_wls_weighted, outcome_arrays)
from .propensity import (PROPENSITY_FLOOR, PropensityFit, PropensityModel, floor_propensity)

log = logging.getLogger(__name__)

MARGINAL = "marginal"
KINDS = ("IPW", "REG", "DRBC", "IPWLS")


class EstimationError(RuntimeError):
    pass


@dataclass
class MeanEstimate:
    """One pooled mean with its per-component building blocks."""
    kind: str
    z: object
    alpha: float
    value: float
    per_component: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def key(self):
        return (self.z, self.alpha)


@dataclass
class PotentialOutcomeMeans:
    """Pooled and per-component means of one estimator kind."""
    estimator_kind: str
    mu: dict = field(default_factory=dict)
    per_component: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def add(self, entry: MeanEstimate):
        self.mu[entry.key] = entry.value
        self.per_component[entry.key] = entry.per_component
        for k, v in entry.info.items():
            self.info[k] = max(self.info.get(k, 0), v) if isinstance(v, (int, float)) else v
        return self


@dataclass
class EffectEstimate:
    """A causal contrast with optional sandwich standard error."""
    kind: str
    estimator: str
    alpha: float
    alpha_prime: float | None
    point: float
    se: float | None = None
    ci: tuple | None = None
    diagnostics: str = ""

    @property
    def label(self) -> str:
        if self.alpha_prime is None:
            return f"{self.kind}({self.alpha:g})"
        return f"{self.kind}({self.alpha:g},{self.alpha_prime:g})"


class NetworkContext:
    """Parameter-free arrays shared by all estimators on one dataset.

    Parameters
    ----------
    g, data :
        Graph and node data.
    prop_design : sequence of str, optional
        Terms of the treatment model.
    out_design : OutcomeDesign, optional
    weight_sets : NeighborSets, optional
        Neighborhoods that enter the allocation weights and the joint
        propensity (first-order by default).
    Q : int
        Gauss-Hermite points for propensities.
    floor : float
        Propensity floor.
    pooling : {"component", "global"}
        ``"component"`` averages component averages (the estimand's
        definition). ``"global"`` averages over all nodes and is provided
        only for comparison.
    """

    def __init__(self, g: ComponentGraph, data: NodeData, prop_design=None,
                 out_design: OutcomeDesign | None = None, weight_sets: NeighborSets | None = None,
                 Q: int = 10, floor: float = PROPENSITY_FLOOR, pooling: str = "component"):
        check_aligned(g, data)
        if pooling not in ("component", "global"):
            raise ValueError("pooling must be 'component' or 'global'")
        self.g = g
        self.data = data
        self.C = g.component_matrix()
        self.m = g.n_components
        self.sizes = g.component_sizes.astype(float)
        self.pooling = pooling
        self.Y = data.Y
        self.Z = data.Z
        self.weight_sets = g.nbrs if weight_sets is None else weight_sets
        self.s_w = self.weight_sets.count(data.Z)
        self.k_w = self.weight_sets.sizes
        self.floor = floor
        self.Q = Q
        self.prop_design = None if prop_design is None else tuple(prop_design)
        self.pmodel = None
        if prop_design is not None:
            from .propensity import gh_rule
            from .design import covariate_matrix
            D = np.column_stack([np.ones(data.n), covariate_matrix(self.prop_design, data)])
            t, w = gh_rule(Q)
            self.pmodel = PropensityModel(g, D, data.Z, t, w)
        self.out_design = out_design
        if out_design is not None:
            self.out = outcome_arrays(g, data, out_design)
            d = self.out
            self.L_obs = out_design.matrix(d.Z, d.h_obs, d.Xc)
            self.L_arm_obs = out_design.matrix(0, d.h_obs, d.Xc, arm=True)
        self._hbar = {}

    # -- pooling ---------------------------------------------------------------
    def per_component(self, v) -> np.ndarray:
        s = self.C @ v
        if self.pooling == "component":
            return s / self.sizes
        return s * self.m / self.g.n_nodes

    def pool(self, v):
        pc = self.per_component(v)
        return float(pc.mean()), pc

    # -- propensity ------------------------------------------------------------
    def propensity(self, gamma, phi_b):
        """Floored joint propensities of the observed treatments and the floor count."""
        if self.pmodel is None:
            raise EstimationError("context has no treatment model")
        return floor_propensity(self.pmodel.log_joint(gamma, phi_b, self.weight_sets), self.floor)

    def weights(self, f, z, alpha) -> np.ndarray:
        if z == MARGINAL:
            own = vector_probability(self.Z, 1, alpha)
            w = own * vector_probability(self.s_w, self.k_w, alpha) / f
        else:
            w = arm_weights(self.Z, self.s_w, self.k_w, f, z, alpha)
        if not np.all(np.isfinite(w)):
            raise EstimationError("non-finite inverse-probability weight")
        return w

    # -- outcome ---------------------------------------------------------------
    def hbar(self, alpha) -> np.ndarray:
        """Exact expected exposure ``sum_s h(s, d_i) pi(s; d_i, alpha)`` per node."""
        a = float(alpha)
        if a not in self._hbar:
            self._hbar[a] = expected_exposure(self.out_design.h, self.out.d_exp, a)
        return self._hbar[a]

    def reg_nodes(self, z, alpha, beta, arm: bool = False) -> np.ndarray:
        """Node terms ``sum_s m_i(z, s, X_i) pi(s; alpha)`` of a linear outcome model.

        The model is linear in ``h``, so the ``s``-sum equals the model at
        the expected exposure.
        """
        L = self.out_design.matrix(z, self.hbar(alpha), self.out.Xc, arm=arm)
        return L @ beta

    def fitted_obs(self, beta, arm: bool = False) -> np.ndarray:
        return (self.L_arm_obs if arm else self.L_obs) @ beta

    # -- node contributions ------------------------------------------------------
    def ipw_nodes(self, z, alpha, f):
        return self.Y * self.weights(f, z, alpha)

    def reg_nodes_any(self, z, alpha, beta):
        if z == MARGINAL:
            a = float(alpha)
            return a * self.reg_nodes(1, a, beta) + (1 - a) * self.reg_nodes(0, a, beta)
        return self.reg_nodes(z, alpha, beta)

    def drbc_nodes(self, z, alpha, beta, f):
        resid = self.Y - self.fitted_obs(beta)
        return self.reg_nodes_any(z, alpha, beta) + self.weights(f, z, alpha) * resid

    def ipwls_nodes(self, z, alpha, arm_betas: dict):
        """``arm_betas`` maps ``(arm, alpha)`` to arm-specific WLS coefficients."""
        a = float(alpha)
        if z == MARGINAL:
            return (a * self.reg_nodes(1, a, arm_betas[(1, a)], arm=True)
                    + (1 - a) * self.reg_nodes(0, a, arm_betas[(0, a)], arm=True))
        return self.reg_nodes(z, a, arm_betas[(int(z), a)], arm=True)


def _check_key(z, alpha):
    if z != MARGINAL and z not in (0, 1):
        raise ValueError(f"z must be 0, 1 or {MARGINAL!r}")
    _check_alpha(alpha)
    return z, float(alpha)


def arm_keys(targets) -> list:
    """Arm fits ``(z, alpha)`` needed by IP-WLS for the given targets."""
    keys = []
    for z, a in targets:
        for k in ([(0, a), (1, a)] if z == MARGINAL else [(int(z), a)]):
            if k not in keys:
                keys.append(k)
    return keys


def fit_arm_models(ctx: NetworkContext, fit_p: PropensityFit, keys, multilevel: bool = False) -> dict:
    """IP-weighted arm fits for every ``(z, alpha)`` in ``keys``."""
    f, n_floor = ctx.propensity(fit_p.gamma, fit_p.phi_b)
    fits = {}
    for z, a in keys:
        w = ctx.weights(f, z, a)
        if not np.any(w > 0):
            raise OutcomeError(f"all arm-{z} weights are zero at alpha={a}")
        if multilevel:
            fit = fit_wlmm_weighted(ctx.g, ctx.data, ctx.out_design, w, z)
        else:
            fit = fit_wls_weighted(ctx.g, ctx.data, ctx.out_design, w, z)
        fit.alpha = a
        fit.info["n_floored"] = n_floor
        fits[(z, a)] = fit
    return fits


def estimate_means(ctx: NetworkContext, kind: str, targets, fit_p: PropensityFit | None = None,
                   fit_o: OutcomeFit | None = None, arm_fits: dict | None = None
                   ) -> PotentialOutcomeMeans:
    """Pooled and per-component means of ``kind`` for every ``(z, alpha)`` target."""
    if kind not in KINDS:
        raise ValueError(f"unknown estimator kind {kind!r}")
    out = PotentialOutcomeMeans(kind)
    f = None
    if kind in ("IPW", "DRBC", "IPWLS"):
        if fit_p is None:
            raise EstimationError(f"{kind} needs a fitted treatment model")
        f, n_floor = ctx.propensity(fit_p.gamma, fit_p.phi_b)
        out.info["n_floored"] = n_floor
    if kind in ("REG", "DRBC") and fit_o is None:
        raise EstimationError(f"{kind} needs a fitted outcome model")
    if kind == "IPWLS" and arm_fits is None:
        arm_fits = fit_arm_models(ctx, fit_p, arm_keys(targets))
    for z, a in targets:
        z, a = _check_key(z, a)
        if kind == "IPW":
            v = ctx.ipw_nodes(z, a, f)
        elif kind == "REG":
            v = ctx.reg_nodes_any(z, a, fit_o.beta)
        elif kind == "DRBC":
            v = ctx.drbc_nodes(z, a, fit_o.beta, f)
        else:
            v = ctx.ipwls_nodes(z, a, {k: ft.beta for k, ft in arm_fits.items()})
        val, pc = ctx.pool(v)
        out.add(MeanEstimate(kind, z, a, val, pc))
    if kind == "IPWLS":
        out.info["arm_fits"] = arm_fits
    return out


# -- single-mean API -------------------------------------------------------------

def _ctx(g, data, fit_p=None, fit_o=None, design=None, sets=None, floor=PROPENSITY_FLOOR,
         pooling="component"):
    od = design if design is not None else (fit_o.design if fit_o is not None else None)
    pd_ = fit_p.design_columns if fit_p is not None else None
    Q = fit_p.Q if fit_p is not None else 10
    return NetworkContext(g, data, pd_, od, sets, Q, floor, pooling)


def _single(ctx, kind, z, alpha, fit_p=None, fit_o=None, arm_fits=None) -> MeanEstimate:
    res = estimate_means(ctx, kind, [(z, alpha)], fit_p, fit_o, arm_fits)
    key = (z, float(alpha))
    return MeanEstimate(kind, z, float(alpha), res.mu[key], res.per_component[key],
                        {k: v for k, v in res.info.items() if k != "arm_fits"})


def ipw_mean(g, data, fit_p, z, alpha, sets=None, **kw) -> MeanEstimate:
    """IPW estimate of ``mu_{z, alpha}``."""
    return _single(_ctx(g, data, fit_p, sets=sets, **kw), "IPW", z, alpha, fit_p)


def ipw_mean_marginal(g, data, fit_p, alpha, sets=None, **kw) -> MeanEstimate:
    """IPW estimate of the marginal mean ``mu_alpha``."""
    return _single(_ctx(g, data, fit_p, sets=sets, **kw), "IPW", MARGINAL, alpha, fit_p)


def reg_mean(g, data, fit_o, z, alpha, **kw) -> MeanEstimate:
    """Regression estimate of ``mu_{z, alpha}``."""
    return _single(_ctx(g, data, fit_o=fit_o, **kw), "REG", z, alpha, fit_o=fit_o)


def reg_mean_marginal(g, data, fit_o, alpha, **kw) -> MeanEstimate:
    return _single(_ctx(g, data, fit_o=fit_o, **kw), "REG", MARGINAL, alpha, fit_o=fit_o)


def drbc_mean(g, data, fit_p, fit_o, z, alpha, sets=None, **kw) -> MeanEstimate:
    """Bias-corrected doubly robust estimate of ``mu_{z, alpha}``."""
    return _single(_ctx(g, data, fit_p, fit_o, sets=sets, **kw), "DRBC", z, alpha, fit_p, fit_o)


def drbc_mean_marginal(g, data, fit_p, fit_o, alpha, sets=None, **kw) -> MeanEstimate:
    return _single(_ctx(g, data, fit_p, fit_o, sets=sets, **kw), "DRBC", MARGINAL, alpha,
                   fit_p, fit_o)


def ipwls_mean(g, data, fit_p, design: OutcomeDesign, z, alpha, multilevel: bool = False,
               sets=None, **kw) -> MeanEstimate:
    """IP-WLS estimate: the regression form at arm-specific weighted coefficients.

    With ``multilevel=True`` the arm fits use the weighted random-intercept
    pseudolikelihood instead of weighted least squares.
    """
    ctx = _ctx(g, data, fit_p, design=design, sets=sets, **kw)
    z, a = _check_key(z, alpha)
    fits = fit_arm_models(ctx, fit_p, arm_keys([(z, a)]), multilevel)
    est = _single(ctx, "IPWLS", z, a, fit_p, arm_fits=fits)
    est.info["arm_fits"] = fits
    return est


def ipwls_mean_marginal(g, data, fit_p, design, alpha, multilevel=False, sets=None, **kw):
    return ipwls_mean(g, data, fit_p, design, MARGINAL, alpha, multilevel, sets, **kw)


# -- contrasts -------------------------------------------------------------------

CONTRASTS = {
    # kind: ((coef, z, which-alpha), ...) with which-alpha 0 -> alpha, 1 -> alpha_prime
    "DE": ((1.0, 1, 0), (-1.0, 0, 0)),
    "IE": ((1.0, 0, 0), (-1.0, 0, 1)),
    "TE": ((1.0, 1, 0), (-1.0, 0, 1)),
    "OE": ((1.0, MARGINAL, 0), (-1.0, MARGINAL, 1)),
}


def contrast_terms(kind: str, alpha, alpha_prime=None):
    """``[(coefficient, (z, alpha)), ...]`` defining a causal contrast."""
    if kind not in CONTRASTS:
        raise ValueError(f"unknown estimand {kind!r}")
    if kind != "DE" and alpha_prime is None:
        raise ValueError(f"{kind} needs a reference allocation alpha_prime")
    al = (float(alpha), None if alpha_prime is None else float(alpha_prime))
    return [(c, (z, al[w])) for c, z, w in CONTRASTS[kind]]


def effects(means: PotentialOutcomeMeans, alpha, alpha_prime=None,
            kinds=("DE", "IE", "TE", "OE")) -> list[EffectEstimate]:
    """Causal contrasts available from the computed means.

    Contrasts whose means were not computed are skipped, not fabricated.
    ``DE`` needs only ``alpha``; the others also need ``alpha_prime``.
    """
    points = {}
    for kind in ("DE", "IE", "TE", "OE"):
        if kind != "DE" and alpha_prime is None:
            continue
        terms = contrast_terms(kind, alpha, alpha_prime if kind != "DE" else None)
        if not all(k in means.mu for _, k in terms):
            continue
        if kind == "TE":
            # keep TE = DE + IE exact in floating point
            points[kind] = points["DE"] + points["IE"]
        else:
            points[kind] = means.mu[terms[0][1]] - means.mu[terms[1][1]]
    return [EffectEstimate(k, means.estimator_kind, float(alpha),
                           None if k == "DE" else float(alpha_prime), float(points[k]))
            for k in kinds if k in points]
