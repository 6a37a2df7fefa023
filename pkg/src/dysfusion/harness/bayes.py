"""Enumeration check that three forms of the class decision rule agree.

For a finite joint table P(S=s, T=t, C=c) the decision for each (s, t) is
computed as the argmax over c of

  (a) the posterior P(c | s, t),
  (b) the joint likelihood times prior, P(s, t | c) P(c),
  (c) the chain-rule factorization P(s | t, c) P(t | c) P(c).

All three are proportional in c for fixed (s, t), so the argmaxes must match.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TIE_RTOL = 1e-12


class DegenerateTableError(ValueError):
    pass


def argmax_low_tie(values: np.ndarray, rtol: float = TIE_RTOL) -> int:
    """Index of the maximum; values within ``rtol`` of it count as ties -> lowest index."""
    values = np.asarray(values, dtype=np.float64)
    top = values.max()
    return int(np.flatnonzero(values >= top - rtol * abs(top))[0])


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(np.broadcast_shapes(num.shape, den.shape))
    np.divide(num, den, out=out, where=np.broadcast_to(den > 0, out.shape))
    return out


@dataclass
class BayesReport:
    decisions: np.ndarray   # (n_s, n_t, 3): posterior, likelihood*prior, chain rule
    agree: bool

    @property
    def n_cells(self) -> int:
        return self.decisions.shape[0] * self.decisions.shape[1]


def decision_paths(joint: np.ndarray) -> np.ndarray:
    joint = np.asarray(joint, dtype=np.float64)
    if joint.ndim != 3:
        raise DegenerateTableError("joint table must be indexed [s, t, c]")
    if (joint < 0).any() or not np.isclose(joint.sum(), 1.0, atol=1e-9):
        raise DegenerateTableError("joint table must be non-negative and sum to 1")
    p_st = joint.sum(axis=2)
    if (p_st <= 0).any():
        raise DegenerateTableError("some (s, t) pair has zero marginal probability")
    p_c = joint.sum(axis=(0, 1))
    p_tc = joint.sum(axis=0)

    posterior = joint / p_st[:, :, None]
    likelihood = _safe_div(joint, p_c[None, None, :])
    s_given_tc = _safe_div(joint, p_tc[None, :, :])
    t_given_c = _safe_div(p_tc, p_c[None, :])

    path_a = posterior
    path_b = likelihood * p_c
    path_c = s_given_tc * t_given_c[None, :, :] * p_c

    n_s, n_t, _ = joint.shape
    out = np.empty((n_s, n_t, 3), dtype=np.int64)
    for s in range(n_s):
        for t in range(n_t):
            out[s, t] = [argmax_low_tie(path_a[s, t]), argmax_low_tie(path_b[s, t]),
                         argmax_low_tie(path_c[s, t])]
    return out


def bayes_oracle_check(joint: np.ndarray) -> BayesReport:
    d = decision_paths(joint)
    return BayesReport(d, bool((d == d[:, :, :1]).all()))


def random_joint(rng: np.random.Generator, shape=(4, 4, 4)) -> np.ndarray:
    table = rng.random(shape)
    return table / table.sum()


def run_bayes_suite(n_tables: int = 1000, seed: int = 0, shape=(4, 4, 4)) -> tuple[int, int]:
    """(agreeing tables, total tables) over seeded random joints."""
    rng = np.random.default_rng(seed)
    ok = sum(bayes_oracle_check(random_joint(rng, shape)).agree for _ in range(n_tables))
    return ok, n_tables
