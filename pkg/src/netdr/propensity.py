"""Random-intercept logistic treatment model and joint neighborhood propensities.

Within component ``nu`` treatments are independent given a shared intercept
``b_nu ~ N(0, phi_b)``::

    P(Z_j = 1 | X_j, b) = expit(gamma' x_j + b)

The joint propensity of node ``i`` is the probability of the observed (or a
hypothetical) treatment vector on ``{i} + N_i`` with ``b`` integrated out.
All integrals over ``b`` use a fixed Gauss-Hermite rule, so quadrature
nodes sit at ``b = sqrt(2 phi_b) t_q``.
"""
from __future__ import annotations

import logging
from functools import lru_cache
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy import optimize
from scipy.special import expit, log_expit, logsumexp

from .design import check_rank, covariate_matrix
from .graph import ComponentGraph, NeighborSets, NodeData, check_aligned

log = logging.getLogger(__name__)

PROPENSITY_FLOOR = 1e-12
# below this variance the phi-score switches to the second-derivative form
_PHI_SMALL = 1e-12


class PropensityError(RuntimeError):
    pass


@lru_cache(maxsize=16)
def _gh(Q: int):
    t, w = hermgauss(Q)
    return t, w / np.sqrt(np.pi)


def gh_rule(Q: int):
    """Gauss-Hermite abscissae and weights normalised to sum to one."""
    if Q < 1:
        raise ValueError("need at least one quadrature point")
    t, w = _gh(int(Q))
    return t.copy(), w.copy()


@dataclass(frozen=True, eq=False)
class PropensityFit:
    """Fitted treatment model.

    Attributes
    ----------
    gamma : ndarray
        Intercept followed by one coefficient per design term.
    phi_b : float
        Random-intercept variance, ``>= 0``.
    gh_nodes, gh_weights : ndarray
        Quadrature rule (weights sum to one).
    design_columns : tuple of str
        Design terms, excluding the intercept.
    loglik : float
        Maximised marginal log-likelihood.
    converged : bool
    """
    gamma: np.ndarray
    phi_b: float
    gh_nodes: np.ndarray
    gh_weights: np.ndarray
    design_columns: tuple
    loglik: float = np.nan
    converged: bool = True
    n_iter: int = 0
    message: str = ""
    boundary: bool = False
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.phi_b < 0:
            raise ValueError("phi_b must be non-negative")
        if len(self.gh_nodes) < 1 or not np.all(np.isfinite(self.gh_weights)) \
                or np.any(self.gh_weights <= 0):
            raise ValueError("invalid quadrature rule")

    @property
    def Q(self) -> int:
        return len(self.gh_nodes)

    @property
    def theta(self) -> np.ndarray:
        return np.append(self.gamma, self.phi_b)

    def design_matrix(self, data: NodeData) -> np.ndarray:
        X = covariate_matrix(self.design_columns, data)
        return np.column_stack([np.ones(data.n), X])

    def linear_predictor(self, data: NodeData) -> np.ndarray:
        return self.design_matrix(data) @ self.gamma

    @classmethod
    def from_parameters(cls, gamma, phi_b, design_columns=(), Q: int = 10):
        """Build a fit from known parameters (oracle propensities, tests)."""
        t, w = gh_rule(Q)
        return cls(np.asarray(gamma, dtype=float), float(phi_b), t, w,
                   tuple(design_columns))


def _node_logbern(eta, Z, b):
    """log P(Z_j | eta_j + b_q) as an (n, Q) array."""
    s = eta[:, None] + b[None, :]
    return np.where(np.asarray(Z)[:, None] == 1, log_expit(s), log_expit(-s))


def log_integral(eta, z, phi_b, nodes, weights) -> float:
    """log of E_b[prod_j P(Z_j = z_j | eta_j + b)], ``b ~ N(0, phi_b)``."""
    eta = np.asarray(eta, dtype=float)
    b = np.sqrt(2.0 * phi_b) * nodes
    L = _node_logbern(eta, np.asarray(z), b).sum(axis=0)
    return float(logsumexp(L, b=weights))


class PropensityModel:
    """Array-level evaluator of the treatment likelihood on one dataset.

    Holds the design matrix and component structure so that the likelihood,
    its per-component scores and the joint propensities can be evaluated
    cheaply at any ``(gamma, phi_b)``.
    """

    def __init__(self, g: ComponentGraph, D: np.ndarray, Z, nodes, weights):
        self.g = g
        self.D = np.asarray(D, dtype=float)
        self.Z = np.asarray(Z, dtype=np.int64)
        self.t = np.asarray(nodes, dtype=float)
        self.w = np.asarray(weights, dtype=float)
        self.logw = np.log(self.w)
        self.C = g.component_matrix()
        self.comp = g.component_of
        self._joint_mats = {}

    @property
    def n_params(self) -> int:
        return self.D.shape[1] + 1

    def _terms(self, gamma, phi_b):
        eta = self.D @ gamma
        b = np.sqrt(2.0 * max(phi_b, 0.0)) * self.t
        return eta, b, _node_logbern(eta, self.Z, b)

    def component_loglik(self, gamma, phi_b) -> np.ndarray:
        _, _, LB = self._terms(gamma, phi_b)
        A = self.C @ LB
        return logsumexp(A + self.logw, axis=1)

    def loglik(self, gamma, phi_b) -> float:
        return float(self.component_loglik(gamma, phi_b).sum())

    def component_scores(self, gamma, phi_b) -> np.ndarray:
        """Per-component gradient of the quadrature log-likelihood.

        Returns an (m, p + 1) array; the last column is the derivative with
        respect to ``phi_b``. These are exact derivatives of the quadrature
        approximation. For ``phi_b`` at (or numerically at) zero the
        ``phi_b`` column uses the equivalent second-derivative form, which
        is the limit of the exact expression.
        """
        eta, b, LB = self._terms(gamma, phi_b)
        A = self.C @ LB + self.logw
        P = np.exp(A - logsumexp(A, axis=1, keepdims=True))        # (m, Q)
        p = expit(eta[:, None] + b[None, :])
        R = self.Z[:, None] - p                                      # (n, Q)
        r = np.einsum("nq,nq->n", P[self.comp], R)
        s_gamma = self.C @ (self.D * r[:, None])
        S1 = self.C @ R                                              # (m, Q)
        if phi_b > _PHI_SMALL:
            s_phi = (P * S1) @ self.t / np.sqrt(2.0 * phi_b)
        else:
            V = self.C @ (p * (1 - p))
            s_phi = 0.5 * np.sum(P * (S1 ** 2 - V), axis=1)
        return np.column_stack([s_gamma, s_phi])

    def component_scores_fd(self, gamma, phi_b) -> np.ndarray:
        """Central finite-difference version of :meth:`component_scores`."""
        theta = np.append(gamma, phi_b)
        eps = np.finfo(float).eps ** (1 / 3)
        cols = []
        for k in range(len(theta)):
            h = eps * (1 + abs(theta[k]))
            up, dn = theta.copy(), theta.copy()
            up[k] += h
            if k == len(theta) - 1 and theta[k] - h < 0:
                dn[k] = theta[k]
                f_up = self.component_loglik(up[:-1], up[-1])
                f_0 = self.component_loglik(dn[:-1], dn[-1])
                up2 = theta.copy()
                up2[k] += 2 * h
                f_up2 = self.component_loglik(up2[:-1], up2[-1])
                cols.append((-3 * f_0 + 4 * f_up - f_up2) / (2 * h))
                continue
            dn[k] -= h
            cols.append((self.component_loglik(up[:-1], up[-1])
                         - self.component_loglik(dn[:-1], dn[-1])) / (2 * h))
        return np.column_stack(cols)

    def joint_matrix(self, sets: NeighborSets):
        # keyed by identity; the sets object is kept alive alongside its matrix
        key = id(sets)
        if key not in self._joint_mats:
            self._joint_mats[key] = (sets.matrix(include_self=True), sets)
        return self._joint_mats[key][0]

    def log_joint(self, gamma, phi_b, sets: NeighborSets | None = None) -> np.ndarray:
        """log joint propensity of the observed treatments on ``{i}`` plus ``sets[i]``."""
        sets = self.g.nbrs if sets is None else sets
        _, _, LB = self._terms(gamma, phi_b)
        A = self.joint_matrix(sets) @ LB
        return logsumexp(A + self.logw, axis=1)


def floor_propensity(logf, floor: float = PROPENSITY_FLOOR):
    """Exponentiate, floor tiny values and count how many were floored."""
    f = np.exp(logf)
    low = f < floor
    if low.any():
        f = np.where(low, floor, f)
    return f, int(low.sum())


def _logistic_irls(D, Z, maxiter=100, tol=1e-10):
    beta = np.zeros(D.shape[1])
    ll_old = -np.inf
    for it in range(maxiter):
        eta = D @ beta
        p = expit(eta)
        W = p * (1 - p)
        grad = D.T @ (Z - p)
        H = D.T @ (D * W[:, None])
        step = np.linalg.solve(H, grad)
        beta = beta + step
        ll = float(np.sum(np.where(Z == 1, log_expit(D @ beta), log_expit(-(D @ beta)))))
        if abs(ll - ll_old) <= tol * (1 + abs(ll)):
            return beta, ll, True, it + 1
        ll_old = ll
    return beta, ll_old, False, maxiter


def fit_propensity(g: ComponentGraph, data: NodeData, design, Q: int = 10,
                   maxiter: int = 500, tol: float = 1e-8, phi_start: float = 1.0) -> PropensityFit:
    """Maximum likelihood fit of the random-intercept logistic treatment model.

    Parameters
    ----------
    g : ComponentGraph
    data : NodeData
    design : sequence of str
        Design terms for the linear predictor (intercept added).
    Q : int
        Number of Gauss-Hermite points.
    maxiter, tol :
        Iteration cap and relative log-likelihood tolerance.
    phi_start : float
        Starting value of ``phi_b`` for the interior search.

    Notes
    -----
    The search runs over ``(gamma, log phi_b)``: a Nelder-Mead pass from the
    plain logistic fit, then BFGS with analytic gradients. If the
    log-likelihood is non-increasing in ``phi_b`` at ``phi_b = 0`` (given
    the logistic fit), the boundary solution ``phi_b = 0`` is returned.
    """
    check_aligned(g, data)
    design = tuple(design)
    Xc = covariate_matrix(design, data)
    D = np.column_stack([np.ones(data.n), Xc])
    check_rank(D, ("(Intercept)",) + design)
    Z = data.Z
    t, w = gh_rule(Q)
    model = PropensityModel(g, D, Z, t, w)
    p = D.shape[1]

    gamma0, ll0, ok0, it0 = _logistic_irls(D, Z)
    if not np.all(np.isfinite(gamma0)):
        raise PropensityError("logistic starting fit diverged (separation?)")
    s_phi0 = model.component_scores(gamma0, 0.0)[:, -1].sum()
    if s_phi0 <= 0:
        return PropensityFit(gamma0, 0.0, t, w, design, ll0, ok0, it0,
                             "boundary phi_b = 0", boundary=True)

    def negll(x):
        v = -model.loglik(x[:p], np.exp(x[p]))
        return v if np.isfinite(v) else 1e300

    def grad(x):
        phi = np.exp(x[p])
        s = model.component_scores(x[:p], phi).sum(axis=0)
        return -np.append(s[:p], s[p] * phi)

    x0 = np.append(gamma0, np.log(phi_start))
    nm = optimize.minimize(negll, x0, method="Nelder-Mead",
                           options={"maxiter": maxiter, "xatol": 1e-4, "fatol": 1e-6})
    bf = optimize.minimize(negll, nm.x, jac=grad, method="BFGS",
                           options={"maxiter": maxiter, "gtol": 1e-6})
    x = bf.x
    ll = -bf.fun
    gnorm = np.max(np.abs(grad(x)))
    converged = bool(bf.success) or gnorm < 1e-4 * (1 + abs(ll))
    n_iter = int(nm.nit + bf.nit)
    if ll < ll0 or np.exp(x[p]) < 1e-8:
        # the search drifted to the boundary; keep the logistic solution
        return PropensityFit(gamma0, 0.0, t, w, design, ll0, ok0, n_iter,
                             "boundary phi_b = 0", boundary=True)
    if not converged:
        log.info("propensity fit did not converge: %s", bf.message)
    return PropensityFit(x[:p].copy(), float(np.exp(x[p])), t, w, design, float(ll),
                         converged, n_iter, str(bf.message))


def _model_for(fit: PropensityFit, g: ComponentGraph, data: NodeData) -> PropensityModel:
    return PropensityModel(g, fit.design_matrix(data), data.Z, fit.gh_nodes, fit.gh_weights)


def joint_propensity(fit: PropensityFit, g: ComponentGraph, data: NodeData, i: int, z, z_nbr,
                     floor: float = PROPENSITY_FLOOR) -> float:
    """Joint probability that node ``i`` has treatment ``z`` and its neighbors ``z_nbr``.

    ``z_nbr`` is ordered like ``g.neighbors(i)``. Values below ``floor`` are
    floored (see :func:`joint_propensity_observed` for counted flooring).
    """
    nb = g.nbrs.members(i)
    z_nbr = np.asarray(z_nbr, dtype=np.int64).ravel()
    if len(z_nbr) != len(nb):
        raise ValueError(f"node {i} has {len(nb)} neighbors but {len(z_nbr)} treatments were given")
    eta = fit.linear_predictor(data)
    idx = np.concatenate([[i], nb])
    zz = np.concatenate([[z], z_nbr])
    return max(float(np.exp(log_integral(eta[idx], zz, fit.phi_b, fit.gh_nodes, fit.gh_weights))),
               floor)


def joint_propensity_second_order(fit: PropensityFit, g: ComponentGraph, data: NodeData, i: int,
                                  z, z_nbr1, z_nbr2, floor: float = PROPENSITY_FLOOR) -> float:
    """As :func:`joint_propensity`, also covering the second-order neighbors of ``i``.

    ``z_nbr2`` is ordered like ``second_order_neighbors(g, i)``.
    """
    from .graph import second_order_neighbors
    nb1 = g.nbrs.members(i)
    nb2 = np.asarray(second_order_neighbors(g, i), dtype=np.int64)
    z1 = np.asarray(z_nbr1, dtype=np.int64).ravel()
    z2 = np.asarray(z_nbr2, dtype=np.int64).ravel()
    if len(z1) != len(nb1) or len(z2) != len(nb2):
        raise ValueError("neighbor treatment vectors do not match the neighborhoods")
    eta = fit.linear_predictor(data)
    idx = np.concatenate([[i], nb1, nb2]).astype(np.int64)
    zz = np.concatenate([[z], z1, z2])
    return max(float(np.exp(log_integral(eta[idx], zz, fit.phi_b, fit.gh_nodes, fit.gh_weights))),
               floor)


def joint_propensity_observed(fit: PropensityFit, g: ComponentGraph, data: NodeData,
                              sets: NeighborSets | None = None,
                              floor: float = PROPENSITY_FLOOR):
    """Joint propensities of the observed treatments for every node.

    Parameters
    ----------
    sets : NeighborSets, optional
        Neighborhoods entering the product besides the node itself;
        first-order neighborhoods by default.

    Returns
    -------
    f : ndarray
        Floored joint propensities.
    n_floored : int
        Number of values raised to ``floor``.
    """
    model = _model_for(fit, g, data)
    return floor_propensity(model.log_joint(fit.gamma, fit.phi_b, sets), floor)


def propensity_score_equations(fit: PropensityFit, g: ComponentGraph, data: NodeData,
                               method: str = "analytic") -> np.ndarray:
    """Per-component scores of the treatment model at the fitted parameters.

    Returns an (m, p + 1) array with columns ``(gamma..., phi_b)``.
    ``method="fd"`` uses central finite differences on the quadrature
    log-likelihood instead of the exact derivative.
    """
    model = _model_for(fit, g, data)
    if method == "fd":
        return model.component_scores_fd(fit.gamma, fit.phi_b)
    return model.component_scores(fit.gamma, fit.phi_b)
