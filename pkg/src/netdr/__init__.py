"""Doubly robust estimation of causal effects on networks of disjoint components."""
from .allocation import AllocationPolicy, expected_exposure, pi_joint, pi_neighborhood, vector_probability
from .estimators import (KINDS, MARGINAL, EffectEstimate, NetworkContext, effects, estimate_means,
                         drbc_mean, ipw_mean, ipwls_mean, reg_mean)
from .graph import ComponentGraph, GraphError, NodeData, load_graph, second_order_neighbors
from .mestimation import EstimatingStack, SandwichError, contrast_se, sandwich
from .outcome import OutcomeDesign, fit_lmm, fit_ols, fit_wlmm, fit_wls
from .propensity import PropensityFit, fit_propensity, joint_propensity
from .simulate import DgpConfig, compute_truth, run_scenarios

__version__ = "0.1.0"
