"""Covariate column specs shared by the treatment and outcome models.

A term is written as a string: a column name (``"X1"``), an absolute value
(``"abs(X1)"``), or a product of two such factors joined by ``:``
(``"abs(X1):X2"``). An intercept column is always prepended.
"""
from __future__ import annotations

import re

import numpy as np

from .graph import NodeData

_FACTOR = re.compile(r"^\s*(abs\(\s*([^()\s]+)\s*\)|([^():\s]+))\s*$")


class DesignError(ValueError):
    pass


def parse_factor(text: str) -> tuple[str, str]:
    m = _FACTOR.match(text)
    if m is None:
        raise DesignError(f"cannot parse design factor {text!r}")
    if m.group(2) is not None:
        return m.group(2), "abs"
    return m.group(3), "identity"


def parse_term(text: str) -> tuple[tuple[str, str], ...]:
    """Parse ``"abs(X1):X2"`` into ``(("X1", "abs"), ("X2", "identity"))``."""
    parts = text.split(":")
    if not 1 <= len(parts) <= 2:
        raise DesignError(f"term {text!r}: only single factors and pairwise products are supported")
    return tuple(parse_factor(p) for p in parts)


def term_label(term) -> str:
    return ":".join(f"abs({c})" if t == "abs" else c for c, t in term)


def term_values(term, data: NodeData) -> np.ndarray:
    out = np.ones(data.n)
    for col, transform in term:
        v = data.column(col)
        out = out * (np.abs(v) if transform == "abs" else v)
    return out


def covariate_matrix(terms, data: NodeData) -> np.ndarray:
    """Columns for the given term strings, without intercept."""
    parsed = [parse_term(t) for t in terms]
    for term in parsed:
        for col, _ in term:
            if col not in data.column_names:
                raise DesignError(f"design refers to unknown column {col!r}")
    if not parsed:
        return np.zeros((data.n, 0))
    return np.column_stack([term_values(t, data) for t in parsed])


def check_rank(M: np.ndarray, labels):
    """Raise :class:`DesignError` naming dependent columns if ``M`` is rank deficient."""
    if M.shape[0] < M.shape[1]:
        raise DesignError(f"{M.shape[0]} rows for {M.shape[1]} design columns")
    rank = np.linalg.matrix_rank(M)
    if rank == M.shape[1]:
        return
    # walk the columns and report the ones that add nothing
    bad, kept = [], []
    for k in range(M.shape[1]):
        trial = kept + [k]
        if np.linalg.matrix_rank(M[:, trial]) == len(trial):
            kept = trial
        else:
            bad.append(labels[k])
    raise DesignError("design matrix is rank deficient; dependent columns: " + ", ".join(bad))
