"""Outcome regressions m_i(z, s, x; beta).

Four variants are provided: ordinary least squares, inverse-probability
weighted least squares within one treatment arm, a random-intercept linear
mixed model fitted by marginal maximum likelihood, and the weighted
random-intercept pseudolikelihood used for arm-specific multilevel fits.

Pooled designs have columns ``[1, Z, h, (Z*h), covariates]``. Arm-specific
designs drop the constant ``Z`` columns: ``[1, h, covariates]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize

from .allocation import vector_probability
from .design import DesignError, check_rank, covariate_matrix, parse_term, term_label
from .graph import ComponentGraph, NeighborSets, NodeData, check_aligned
from .propensity import PROPENSITY_FLOOR, PropensityFit, joint_propensity_observed

log = logging.getLogger(__name__)


class OutcomeError(RuntimeError):
    pass


def _proportion(s, d):
    s = np.asarray(s, dtype=float)
    d = np.asarray(d, dtype=float)
    return np.divide(s, d, out=np.zeros(np.broadcast(s, d).shape), where=d > 0)


def _count(s, d):
    return np.asarray(s, dtype=float) + 0 * np.asarray(d)


@dataclass(frozen=True, eq=False)
class OutcomeDesign:
    """Specification of the outcome regression.

    Attributes
    ----------
    terms : tuple of str
        Covariate terms (same syntax as the treatment model).
    exposure : {"proportion", "count"} or callable
        Summary ``h(s, d)`` of ``s`` treated among ``d`` exposure neighbors.
        ``"proportion"`` is ``s / d`` with ``h = 0`` when ``d = 0``. A callable
        must be vectorised over array ``s`` and ``d``.
    interaction : bool
        Add the ``Z * h`` column.
    exposure_sets : NeighborSets, optional
        Sets whose treated count drives the exposure. Defaults to the
        first-order neighborhoods of the graph.
    """
    terms: tuple = ()
    exposure: object = "proportion"
    interaction: bool = False
    exposure_sets: NeighborSets | None = None

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        for t in self.terms:
            parse_term(t)
        if not callable(self.exposure) and self.exposure not in ("proportion", "count"):
            raise DesignError(f"unknown exposure summary {self.exposure!r}")

    @property
    def h(self) -> Callable:
        if callable(self.exposure):
            return self.exposure
        return _proportion if self.exposure == "proportion" else _count

    def sets(self, g: ComponentGraph) -> NeighborSets:
        return g.nbrs if self.exposure_sets is None else self.exposure_sets

    def labels(self, arm: bool = False) -> tuple:
        cov = tuple(term_label(parse_term(t)) for t in self.terms)
        if arm:
            return ("(Intercept)", "h") + cov
        return ("(Intercept)", "Z", "h") + (("Z:h",) if self.interaction else ()) + cov

    def matrix(self, z, h, Xc, arm: bool = False) -> np.ndarray:
        """Design rows for treatments ``z``, exposures ``h`` and covariate columns ``Xc``."""
        n = len(Xc)
        z = np.broadcast_to(np.asarray(z, dtype=float), (n,))
        h = np.broadcast_to(np.asarray(h, dtype=float), (n,))
        cols = [np.ones(n)]
        if not arm:
            cols.append(z)
        cols.append(h)
        if self.interaction and not arm:
            cols.append(z * h)
        return np.column_stack(cols + [Xc])


@dataclass(eq=False)
class OutcomeArrays:
    """Observed-data arrays an outcome design needs."""
    Xc: np.ndarray
    s_exp: np.ndarray
    d_exp: np.ndarray
    h_obs: np.ndarray
    Z: np.ndarray
    Y: np.ndarray


def outcome_arrays(g: ComponentGraph, data: NodeData, design: OutcomeDesign) -> OutcomeArrays:
    check_aligned(g, data)
    sets = design.sets(g)
    s = sets.count(data.Z)
    d = sets.sizes
    return OutcomeArrays(covariate_matrix(design.terms, data), s, d, design.h(s, d),
                         data.Z.astype(float), data.Y)


@dataclass(eq=False)
class OutcomeFit:
    """Fitted outcome regression.

    Attributes
    ----------
    beta : ndarray
    variant : {"OLS", "WLS", "LMM", "WLMM"}
    design : OutcomeDesign
    sigma2_eps, sigma2_c : float
        Variance components (NaN for OLS/WLS).
    arm : int or None
        Treatment arm of WLS/WLMM fits; their design omits the ``Z`` columns.
    alpha : float or None
        Allocation probability of the weights for WLS/WLMM fits.
    """
    beta: np.ndarray
    variant: str
    design: OutcomeDesign
    sigma2_eps: float = np.nan
    sigma2_c: float = np.nan
    arm: int | None = None
    alpha: float | None = None
    loglik: float = np.nan
    converged: bool = True
    column_names: tuple = ()
    boundary: bool = False
    n_iter: int = 0
    info: dict = field(default_factory=dict)

    @property
    def is_arm(self) -> bool:
        return self.variant in ("WLS", "WLMM")

    @property
    def multilevel(self) -> bool:
        return self.variant in ("LMM", "WLMM")

    @property
    def labels(self) -> tuple:
        return self.design.labels(arm=self.is_arm)

    @property
    def theta(self) -> np.ndarray:
        """Nuisance parameter block in stacked estimating-equation order."""
        if self.multilevel:
            return np.concatenate([self.beta, [self.sigma2_eps, self.sigma2_c]])
        return np.asarray(self.beta, dtype=float)

    def predict(self, z, h, Xc, beta=None) -> np.ndarray:
        beta = self.beta if beta is None else beta
        return self.design.matrix(z, h, Xc, arm=self.is_arm) @ beta


def predict_marginal(fit: OutcomeFit, z, s, d, x) -> float:
    """Fixed-effects prediction ``m(z, s, x)`` for a node with ``d`` exposure neighbors.

    ``x`` is a covariate row aligned with ``fit.column_names``. The random
    intercept, if any, is set to its zero mean.
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    row = NodeData(x, [0], [0.0], fit.column_names)
    Xc = covariate_matrix(fit.design.terms, row)
    h = fit.design.h(np.array([s]), np.array([d]))
    return float(fit.predict(z, h, Xc)[0])


# -- weights -----------------------------------------------------------------

def arm_weights(Z, s, k, f, z, alpha) -> np.ndarray:
    """``1(Z_i = z) alpha^s (1 - alpha)^(k - s) / f_i``.

    This equals the allocation probability of the observed neighbor count
    divided by the number of vectors with that count and by the joint
    propensity ``f_i``.
    """
    return (np.asarray(Z) == z) * vector_probability(s, k, alpha) / f


def ip_weights(g: ComponentGraph, data: NodeData, fit_p: PropensityFit, z, alpha,
               sets: NeighborSets | None = None, floor: float = PROPENSITY_FLOOR):
    """Arm weights ``omega^{z, alpha}`` from a fitted treatment model.

    Returns the weights and the number of floored propensities.
    """
    sets = g.nbrs if sets is None else sets
    f, n_floor = joint_propensity_observed(fit_p, g, data, sets, floor)
    w = arm_weights(data.Z, sets.count(data.Z), sets.sizes, f, z, alpha)
    if not np.all(np.isfinite(w)):
        raise OutcomeError("non-finite inverse-probability weight")
    return w, n_floor


# -- least squares -----------------------------------------------------------

def weighted_ls(L, y, w=None):
    """Solve the (weighted) normal equations through a QR-based least squares."""
    if w is None:
        beta, *_ = np.linalg.lstsq(L, y, rcond=None)
        return beta
    sw = np.sqrt(w)
    beta, *_ = np.linalg.lstsq(L * sw[:, None], y * sw, rcond=None)
    return beta


def fit_ols(g: ComponentGraph, data: NodeData, design: OutcomeDesign) -> OutcomeFit:
    """Least squares fit of the pooled outcome design."""
    arr = outcome_arrays(g, data, design)
    L = design.matrix(arr.Z, arr.h_obs, arr.Xc)
    check_rank(L, design.labels())
    beta = weighted_ls(L, arr.Y)
    r = arr.Y - L @ beta
    s2 = float(r @ r / len(r))
    ll = -0.5 * len(r) * (np.log(2 * np.pi * s2) + 1) if s2 > 0 else np.inf
    return OutcomeFit(beta, "OLS", design, loglik=ll, column_names=data.column_names)


def fit_wls_weighted(g: ComponentGraph, data: NodeData, design: OutcomeDesign, w, z) -> OutcomeFit:
    """Weighted least squares on arm ``z`` with given node weights ``w``."""
    arr = outcome_arrays(g, data, design)
    w = np.asarray(w, dtype=float)
    keep = (arr.Z == z) & (w > 0)
    L = design.matrix(z, arr.h_obs, arr.Xc, arm=True)
    if keep.sum() < L.shape[1] + 1:
        raise OutcomeError(f"only {int(keep.sum())} arm-{z} nodes with positive weight "
                           f"for {L.shape[1]} coefficients")
    check_rank(L[keep], design.labels(arm=True))
    beta = weighted_ls(L[keep], arr.Y[keep], w[keep])
    return OutcomeFit(beta, "WLS", design, arm=int(z), column_names=data.column_names)


def fit_wls(g: ComponentGraph, data: NodeData, design: OutcomeDesign, fit_p: PropensityFit,
            z, alpha, sets: NeighborSets | None = None,
            floor: float = PROPENSITY_FLOOR) -> OutcomeFit:
    """Inverse-probability weighted least squares for arm ``z`` under strategy ``alpha``."""
    w, n_floor = ip_weights(g, data, fit_p, z, alpha, sets, floor)
    if not np.any(w > 0):
        raise OutcomeError("all weights are zero")
    fit = fit_wls_weighted(g, data, design, w, z)
    fit.alpha = float(alpha)
    fit.info["n_floored"] = n_floor
    return fit


# -- random intercept models -------------------------------------------------

def _sums(C, w, r):
    """Per-component ``A = sum w``, ``S1 = sum w r`` and ``S2 = sum w r^2``."""
    return C @ w, C @ (w * r), C @ (w * r * r)


def ri_component_loglik(A, S1, S2, s2e, s2c) -> np.ndarray:
    """Per-component (pseudo) log-likelihood of the random-intercept model.

    With unit weights this is the exact Gaussian log-likelihood with
    covariance ``s2e I + s2c 11'``; with weights each node's conditional
    density is raised to the power ``w_i`` before the intercept is
    integrated out.
    """
    D = s2e + A * s2c
    return (-0.5 * A * np.log(2 * np.pi * s2e) - 0.5 * np.log(D / s2e)
            - S2 / (2 * s2e) + s2c * S1 ** 2 / (2 * s2e * D))


def ri_gls(L, y, w, C, s2e, s2c):
    """Generalised least squares for ``beta`` given variance components.

    Uses the rank-one (Sherman-Morrison) form of the per-component inverse
    covariance; no dense inversion.
    """
    A = C @ w
    c = s2c / (s2e + A * s2c)
    G = C @ (L * w[:, None])                     # (m, p) per-component sum w L
    gy = C @ (w * y)
    M = L.T @ (L * w[:, None]) - G.T @ (G * c[:, None])
    b = L.T @ (w * y) - G.T @ (c * gy)
    return np.linalg.solve(M, b)


def ri_component_scores(L, y, w, C, beta, s2e, s2c) -> np.ndarray:
    """Per-component gradient with respect to ``(beta, s2e, s2c)``."""
    r = y - L @ beta
    A, S1, S2 = _sums(C, w, r)
    D = s2e + A * s2c
    G = C @ (L * w[:, None])
    GR = C @ (L * (w * r)[:, None])
    s_beta = (GR - (s2c * S1 / D)[:, None] * G) / s2e
    s_e = (-A / (2 * s2e) - 1 / (2 * D) + 1 / (2 * s2e) + S2 / (2 * s2e ** 2)
           - s2c * S1 ** 2 * (D + s2e) / (2 * s2e ** 2 * D ** 2))
    s_c = -A / (2 * D) + S1 ** 2 / (2 * D ** 2)
    return np.column_stack([s_beta, s_e, s_c])


def fit_random_intercept(L, y, w, C, maxiter: int = 500, tol: float = 1e-8):
    """Maximise the (weighted) random-intercept likelihood.

    ``beta`` is profiled by GLS; ``(log s2e, log s2c)`` are searched with
    Nelder-Mead followed by BFGS. If the likelihood decreases in ``s2c`` at
    ``s2c = 0`` the boundary solution is returned.

    Returns
    -------
    dict with keys beta, s2e, s2c, loglik, converged, boundary, n_iter
    """
    beta0 = weighted_ls(L, y, w)
    r0 = y - L @ beta0
    A, S1, S2 = _sums(C, w, r0)
    s2e0 = float(S2.sum() / A.sum())
    if s2e0 <= 0:
        raise OutcomeError("outcome residual variance is zero")
    score_c0 = float(np.sum(-A / (2 * s2e0) + S1 ** 2 / (2 * s2e0 ** 2)))
    ll_b = float(ri_component_loglik(A, S1, S2, s2e0, 0.0).sum())
    if score_c0 <= 0:
        return dict(beta=beta0, s2e=s2e0, s2c=0.0, loglik=ll_b, converged=True,
                    boundary=True, n_iter=0)

    def profile(x):
        s2e, s2c = np.exp(x)
        beta = ri_gls(L, y, w, C, s2e, s2c)
        r = y - L @ beta
        return beta, _sums(C, w, r), s2e, s2c

    def negll(x):
        if np.any(np.abs(x) > 50):
            return 1e300
        _, (A, S1, S2), s2e, s2c = profile(x)
        return -float(ri_component_loglik(A, S1, S2, s2e, s2c).sum())

    def grad(x):
        beta, _, s2e, s2c = profile(x)
        s = ri_component_scores(L, y, w, C, beta, s2e, s2c).sum(axis=0)
        return -np.array([s[-2] * s2e, s[-1] * s2c])

    # method-of-moments style start: split the residual variance
    x0 = np.log([0.5 * s2e0, 0.5 * s2e0])
    nm = optimize.minimize(negll, x0, method="Nelder-Mead",
                           options={"maxiter": maxiter, "xatol": 1e-5, "fatol": 1e-10})
    bf = optimize.minimize(negll, nm.x, jac=grad, method="BFGS",
                           options={"maxiter": maxiter, "gtol": 1e-7})
    x = bf.x if bf.fun <= nm.fun else nm.x
    ll = -min(bf.fun, nm.fun)
    beta, _, s2e, s2c = profile(x)
    gnorm = float(np.max(np.abs(grad(x))))
    converged = bool(bf.success) or gnorm < 1e-5 * (1 + abs(ll))
    if ll < ll_b or s2c < 1e-10 * s2e:
        return dict(beta=beta0, s2e=s2e0, s2c=0.0, loglik=ll_b, converged=True,
                    boundary=True, n_iter=int(nm.nit + bf.nit))
    return dict(beta=beta, s2e=float(s2e), s2c=float(s2c), loglik=float(ll),
                converged=converged, boundary=False, n_iter=int(nm.nit + bf.nit))


def fit_lmm(g: ComponentGraph, data: NodeData, design: OutcomeDesign) -> OutcomeFit:
    """Random-intercept linear mixed model by marginal maximum likelihood (not REML)."""
    if g.n_components < 2:
        raise OutcomeError("a mixed model needs at least two components")
    arr = outcome_arrays(g, data, design)
    L = design.matrix(arr.Z, arr.h_obs, arr.Xc)
    check_rank(L, design.labels())
    res = fit_random_intercept(L, arr.Y, np.ones(len(L)), g.component_matrix())
    if not res["converged"]:
        raise OutcomeError("mixed model fit did not converge")
    return OutcomeFit(res["beta"], "LMM", design, res["s2e"], res["s2c"], loglik=res["loglik"],
                      converged=True, column_names=data.column_names,
                      boundary=res["boundary"], n_iter=res["n_iter"])


def fit_wlmm_weighted(g: ComponentGraph, data: NodeData, design: OutcomeDesign, w, z) -> OutcomeFit:
    """Weighted random-intercept pseudolikelihood fit on arm ``z``."""
    if g.n_components < 2:
        raise OutcomeError("a mixed model needs at least two components")
    arr = outcome_arrays(g, data, design)
    w = np.where(arr.Z == z, np.asarray(w, dtype=float), 0.0)
    keep = w > 0
    L = design.matrix(z, arr.h_obs, arr.Xc, arm=True)
    if keep.sum() < L.shape[1] + 1:
        raise OutcomeError(f"only {int(keep.sum())} arm-{z} nodes with positive weight "
                           f"for {L.shape[1]} coefficients")
    check_rank(L[keep], design.labels(arm=True))
    res = fit_random_intercept(L, arr.Y, w, g.component_matrix())
    if not res["converged"]:
        raise OutcomeError("weighted mixed model fit did not converge")
    return OutcomeFit(res["beta"], "WLMM", design, res["s2e"], res["s2c"], arm=int(z),
                      loglik=res["loglik"], column_names=data.column_names,
                      boundary=res["boundary"], n_iter=res["n_iter"])


def fit_wlmm(g: ComponentGraph, data: NodeData, design: OutcomeDesign, fit_p: PropensityFit,
             z, alpha, sets: NeighborSets | None = None,
             floor: float = PROPENSITY_FLOOR) -> OutcomeFit:
    """Arm-``z`` weighted random-intercept fit with weights ``omega^{z, alpha}``."""
    w, n_floor = ip_weights(g, data, fit_p, z, alpha, sets, floor)
    if not np.any(w > 0):
        raise OutcomeError("all weights are zero")
    fit = fit_wlmm_weighted(g, data, design, w, z)
    fit.alpha = float(alpha)
    fit.info["n_floored"] = n_floor
    return fit
