"""Stacked estimating equations and the empirical sandwich covariance.

Components are the independent units. For a stack ``psi(O_nu; theta)``::

    U = -m^-1 sum_nu d psi(O_nu; theta) / d theta'
    V =  m^-1 sum_nu psi psi'
    Sigma = U^-1 V U^-T

and ``Var(theta_hat)`` is approximated by ``Sigma / m``. ``U`` is obtained
by central finite differences of the per-component estimating functions.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .estimators import (EstimationError, NetworkContext, arm_keys, contrast_terms)
from .outcome import OutcomeFit, arm_weights, ri_component_scores
from .propensity import PropensityFit

log = logging.getLogger(__name__)

COND_LIMIT = 1e10
Z_975 = 1.959963984540054


class SandwichError(RuntimeError):
    pass


@dataclass
class SandwichResult:
    """Sandwich covariance of a stacked estimator.

    Attributes
    ----------
    Sigma_m : ndarray
        ``U^-1 V U^-T``; the covariance of ``theta_hat`` is ``Sigma_m / m``.
    U_m, V_m : ndarray
    theta : ndarray
        Point at which the stack was evaluated.
    names : list of str
    m : int
        Number of components.
    cond : float
        Condition number of ``U_m``.
    """
    Sigma_m: np.ndarray
    U_m: np.ndarray
    V_m: np.ndarray
    theta: np.ndarray
    names: list
    m: int
    cond: float
    info: dict = field(default_factory=dict)

    def index(self, name) -> int:
        return self.names.index(name)

    @property
    def variance(self) -> np.ndarray:
        return self.Sigma_m / self.m


def fd_jacobian(fun, theta, lower=None):
    """Central-difference Jacobian of the component-mean of ``fun``.

    ``fun(theta)`` returns an (m, p) array. Step for coordinate ``k`` is
    ``eps^(1/3) (1 + |theta_k|)``. Where ``theta_k - h`` would cross a
    lower bound a second-order forward difference is used instead.
    """
    theta = np.asarray(theta, dtype=float)
    p = len(theta)
    lower = np.full(p, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    eps = np.finfo(float).eps ** (1 / 3)
    J = None
    f0 = None
    for k in range(p):
        h = eps * (1 + abs(theta[k]))
        up = theta.copy()
        up[k] += h
        if theta[k] - h < lower[k]:
            up2 = theta.copy()
            up2[k] += 2 * h
            if f0 is None:
                f0 = fun(theta).mean(axis=0)
            col = (-3 * f0 + 4 * fun(up).mean(axis=0) - fun(up2).mean(axis=0)) / (2 * h)
        else:
            dn = theta.copy()
            dn[k] -= h
            col = (fun(up).mean(axis=0) - fun(dn).mean(axis=0)) / (2 * h)
        if J is None:
            J = np.empty((len(col), p))
        J[:, k] = col
    return J


def sandwich_from_psi(psi, theta_hat, names=None, lower=None, small_sample: bool = False,
                      cond_limit: float = COND_LIMIT) -> SandwichResult:
    """Empirical sandwich for a per-component estimating function.

    Parameters
    ----------
    psi : callable
        ``psi(theta)`` returns the (m, p) matrix of per-component values.
    theta_hat : array
        Root of ``sum_nu psi`` (taken from the fitted models).
    small_sample : bool
        Inflate ``V`` by ``m / (m - p)``. Off by default.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    P = psi(theta_hat)
    m, p = P.shape
    if p != len(theta_hat):
        raise SandwichError("psi returns a different number of equations than parameters")
    if m < p + 1:
        log.warning("only %d components for %d parameters; the sandwich may be unreliable", m, p)
    U = -fd_jacobian(psi, theta_hat, lower)
    V = P.T @ P / m
    if small_sample and m > p:
        V = V * m / (m - p)
    if not np.all(np.isfinite(U)) or not np.all(np.isfinite(V)):
        raise SandwichError("non-finite bread or meat matrix")
    cond = float(np.linalg.cond(U))
    if not np.isfinite(cond) or cond > cond_limit:
        raise SandwichError(f"bread matrix is ill-conditioned (condition number {cond:.3g})")
    A = np.linalg.solve(U, V)                 # U^-1 V
    Sigma = np.linalg.solve(U, A.T)           # U^-1 (U^-1 V)' = U^-1 V U^-T
    Sigma = 0.5 * (Sigma + Sigma.T)
    names = list(names) if names is not None else [f"theta{k}" for k in range(p)]
    return SandwichResult(Sigma, U, V, theta_hat, names, m, cond,
                          {"psi_sum": P.sum(axis=0)})


def contrast_se(res: SandwichResult, tau, m: int | None = None, level: float = 0.95):
    """Standard error and Wald interval of ``tau' theta``.

    Returns ``(se, (lo, hi))``. ``m`` defaults to the number of components
    the sandwich was computed on.
    """
    from scipy.stats import norm
    tau = np.asarray(tau, dtype=float)
    if tau.shape != res.theta.shape:
        raise ValueError("contrast vector does not match the parameter vector")
    m = res.m if m is None else m
    q = float(tau @ res.Sigma_m @ tau) / m
    if q < -1e-10:
        raise SandwichError(f"negative variance {q:.3g} for contrast")
    se = float(np.sqrt(max(q, 0.0)))
    crit = Z_975 if level == 0.95 else float(norm.ppf(0.5 + level / 2))
    point = float(tau @ res.theta)
    return se, (point - crit * se, point + crit * se)


# -- stacks for the network estimators --------------------------------------------

def _target_name(key):
    z, a = key
    return f"mu[{z},{a:g}]"


class EstimatingStack:
    """Stacked per-component estimating functions for one estimator kind.

    The parameter vector starts with the target means (in the order of
    ``targets``), followed by the nuisance blocks:

    * REG: outcome coefficients (and ``sigma2_eps, sigma2_c`` for a mixed model)
    * IPW: treatment model ``gamma`` and ``phi_b``
    * DRBC: outcome block, then treatment block
    * IPWLS: one arm-fit block per ``(z, alpha)``, then treatment block

    Variance parameters sitting on the zero boundary are held fixed and left
    out of the stack.
    """

    def __init__(self, ctx: NetworkContext, kind: str, targets, fit_p: PropensityFit | None = None,
                 fit_o: OutcomeFit | None = None, arm_fits: dict | None = None,
                 mu_hat: dict | None = None):
        self.ctx = ctx
        self.kind = kind
        self.targets = [(z, float(a)) for z, a in targets]
        self.fit_p = fit_p
        self.fit_o = fit_o
        self.arm_fits = arm_fits
        self.names, self.lower, theta = [], [], []
        for key in self.targets:
            self.names.append(_target_name(key))
            self.lower.append(-np.inf)
            theta.append(mu_hat[key] if mu_hat is not None else np.nan)
        self.blocks = []
        if kind in ("REG", "DRBC"):
            if fit_o is None:
                raise EstimationError(f"{kind} stack needs an outcome fit")
            self._add_outcome_block("beta", fit_o, theta, None)
        if kind == "IPWLS":
            if arm_fits is None:
                raise EstimationError("IPWLS stack needs arm fits")
            for key in arm_keys(self.targets):
                self._add_outcome_block(f"beta[{key[0]},{key[1]:g}]", arm_fits[key], theta, key)
        if kind in ("IPW", "DRBC", "IPWLS"):
            if fit_p is None:
                raise EstimationError(f"{kind} stack needs a treatment fit")
            start = len(theta)
            theta.extend(fit_p.gamma)
            self.names += [f"gamma{k}" for k in range(len(fit_p.gamma))]
            self.lower += [-np.inf] * len(fit_p.gamma)
            free_phi = fit_p.phi_b > 0
            if free_phi:
                theta.append(fit_p.phi_b)
                self.names.append("phi_b")
                self.lower.append(0.0)
            self.blocks.append(("prop", slice(start, len(theta)), free_phi))
        self.theta_hat = np.asarray(theta, dtype=float)
        if mu_hat is None:
            # targets are explicit functions of the nuisances
            P = self.psi(np.where(np.isnan(self.theta_hat), 0.0, self.theta_hat))
            self.theta_hat[:len(self.targets)] = P[:, :len(self.targets)].mean(axis=0)

    def _add_outcome_block(self, label, fit: OutcomeFit, theta, key):
        start = len(theta)
        theta.extend(fit.beta)
        self.names += [f"{label}{k}" for k in range(len(fit.beta))]
        self.lower += [-np.inf] * len(fit.beta)
        free = []
        if fit.multilevel:
            theta.append(fit.sigma2_eps)
            self.names.append(f"{label}:sigma2_eps")
            self.lower.append(0.0)
            free.append("e")
            if fit.sigma2_c > 0:
                theta.append(fit.sigma2_c)
                self.names.append(f"{label}:sigma2_c")
                self.lower.append(0.0)
                free.append("c")
        self.blocks.append(("out", slice(start, len(theta)), (fit, key, tuple(free))))

    @property
    def n_params(self) -> int:
        return len(self.theta_hat)

    def psi(self, theta) -> np.ndarray:
        """(m, p) matrix of per-component estimating-function values."""
        ctx = self.ctx
        theta = np.asarray(theta, dtype=float)
        cols = [None] * len(self.targets)
        f = None
        prop_scores = None
        betas = {}
        for kind, sl, extra in self.blocks:
            if kind == "prop":
                vals = theta[sl]
                p = len(self.fit_p.gamma)
                gamma = vals[:p]
                phi = vals[p] if extra else 0.0
                f, _ = ctx.propensity(gamma, phi)
                sc = ctx.pmodel.component_scores(gamma, phi)
                prop_scores = sc if extra else sc[:, :-1]
        out_cols = []
        for kind, sl, extra in self.blocks:
            if kind != "out":
                continue
            fit, key, free = extra
            vals = theta[sl]
            nb = len(fit.beta)
            beta = vals[:nb]
            betas[key] = beta
            arm = key is not None
            L = ctx.L_arm_obs if arm else ctx.L_obs
            if arm:
                w = arm_weights(ctx.Z, ctx.s_w, ctx.k_w, f, key[0], key[1])
            else:
                w = np.ones(ctx.g.n_nodes)
            if fit.multilevel:
                s2e = vals[nb]
                s2c = vals[nb + 1] if "c" in free else 0.0
                sc = ri_component_scores(L, ctx.Y, w, ctx.C, beta, s2e, s2c)
                out_cols.append(sc if "c" in free else sc[:, :-1])
            else:
                r = ctx.Y - L @ beta
                out_cols.append(ctx.C @ (L * (w * r)[:, None]))
        mu = theta[:len(self.targets)]
        for j, (z, a) in enumerate(self.targets):
            if self.kind == "IPW":
                v = ctx.ipw_nodes(z, a, f)
            elif self.kind == "REG":
                v = ctx.reg_nodes_any(z, a, betas[None])
            elif self.kind == "DRBC":
                v = ctx.drbc_nodes(z, a, betas[None], f)
            else:
                v = ctx.ipwls_nodes(z, a, betas)
            cols[j] = (ctx.per_component(v) - mu[j])[:, None]
        mats = cols + out_cols + ([prop_scores] if prop_scores is not None else [])
        return np.hstack(mats)

    def sandwich(self, small_sample: bool = False) -> SandwichResult:
        return sandwich_from_psi(self.psi, self.theta_hat, self.names, self.lower, small_sample)

    def tau(self, kind: str, alpha, alpha_prime=None) -> np.ndarray:
        """Contrast vector of a causal estimand over this stack."""
        tau = np.zeros(self.n_params)
        for c, key in contrast_terms(kind, alpha, alpha_prime):
            key = (key[0], float(key[1]))
            if key not in self.targets:
                raise KeyError(f"target {key} is not in the stack")
            tau[self.targets.index(key)] += c
        return tau


def component_psi(kind, theta, nu, ctx: NetworkContext, targets, fit_p=None, fit_o=None,
                  arm_fits=None) -> np.ndarray:
    """Estimating-function vector of component ``nu`` at ``theta``."""
    stack = EstimatingStack(ctx, kind, targets, fit_p, fit_o, arm_fits)
    return stack.psi(theta)[nu]


def sandwich(kind, ctx: NetworkContext, targets, fit_p=None, fit_o=None, arm_fits=None,
             small_sample: bool = False):
    """Build the stack for ``kind`` and return ``(stack, SandwichResult)``."""
    stack = EstimatingStack(ctx, kind, targets, fit_p, fit_o, arm_fits)
    return stack, stack.sandwich(small_sample)


def stack_targets(estimands) -> list:
    """Target means needed for a list of ``(kind, alpha, alpha_prime)`` estimands."""
    keys = []
    for kind, a, ap in estimands:
        for _, key in contrast_terms(kind, a, ap):
            key = (key[0], float(key[1]))
            if key not in keys:
                keys.append(key)
    return keys
