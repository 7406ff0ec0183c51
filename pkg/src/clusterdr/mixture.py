"""Finite mixture over cluster types for discrete unit data.

When the cluster-level heterogeneity is believed to take finitely many
values, each cluster's units are modeled as draws from one of ``p``
component distributions over the observed (covariates, treatment)
cells. Fitting is plain expectation-maximization on per-cluster cell
counts; the fitted per-cluster posterior over components then serves as
a learned cluster summary that plugs into the estimation pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dataset import Dataset
from .exceptions import EstimationError, InputError
from .suffstats import AugmentedDesign

__all__ = [
    "MixtureModel",
    "PosteriorStat",
    "em_fit",
    "posterior_suffstat",
    "augment_with_posterior",
]

_PMF_FLOOR = 1e-9
_DEFAULT_SUPPORT_CAP = 512


def _cell_key(x_row: np.ndarray, w: int) -> tuple:
    return tuple(float(v) for v in x_row) + (int(w),)


def _enumerate_cells(d: Dataset, support_cap: int):
    """Map units to cells of the discrete (x, w) support.

    Returns (sorted cell list, cell index per unit). Raises when the
    support exceeds ``support_cap``, which is the signal that the
    covariates are not discrete.
    """
    keys = {}
    for i in range(d.n):
        key = _cell_key(d.x[i], int(d.w[i]))
        if key not in keys:
            keys[key] = None
            if len(keys) > support_cap:
                raise InputError(
                    f"more than {support_cap} distinct (x, w) cells; "
                    "mixture fitting needs discrete covariates"
                )
    cells = sorted(keys)
    cell_id = {key: idx for idx, key in enumerate(cells)}
    unit_cell = np.fromiter(
        (cell_id[_cell_key(d.x[i], int(d.w[i]))] for i in range(d.n)),
        dtype=np.int64,
        count=d.n,
    )
    return cells, unit_cell


@dataclass(frozen=True)
class MixtureModel:
    """Fitted mixture: weights ``pi`` (p,), per-component cell
    distributions ``component_pmfs`` (p, n_cells), and the cell list
    ``support`` in canonical sorted order. ``ll_path`` records the
    log-likelihood after every completed iteration of the winning
    restart."""

    p: int
    pi: np.ndarray
    component_pmfs: np.ndarray
    support: tuple
    loglik: float
    ll_path: tuple
    n_iter: int
    converged: bool
    restarts: int

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "pi": [float(v) for v in self.pi],
            "component_pmfs": [
                [float(v) for v in row] for row in self.component_pmfs
            ],
            "support": [list(cell) for cell in self.support],
            "loglik": self.loglik,
            "n_iter": self.n_iter,
            "converged": self.converged,
        }


def _counts_matrix(d: Dataset, unit_cell: np.ndarray, n_cells: int):
    counts = np.zeros((d.c, n_cells))
    np.add.at(counts, (d.cluster_index, unit_cell), 1.0)
    return counts


def _loglik_and_resp(counts, log_pi, log_pmf):
    """Log-likelihood of cluster counts plus per-cluster responsibilities."""
    # (c, p): log pi_k + sum over cells of count * log pmf_k
    joint = counts @ log_pmf.T + log_pi[None, :]
    top = joint.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.sum(np.exp(joint - top), axis=1))
    resp = np.exp(joint - lse[:, None])
    return float(lse.sum()), resp


def _m_step(counts, resp):
    """Responsibility-weighted frequencies, floored and renormalized."""
    weighted = resp.T @ counts  # (p, n_cells)
    totals = weighted.sum(axis=1, keepdims=True)
    totals[totals == 0.0] = 1.0
    pmf = weighted / totals
    pmf = np.maximum(pmf, _PMF_FLOOR)
    pmf /= pmf.sum(axis=1, keepdims=True)
    pi = resp.mean(axis=0)
    pi = np.maximum(pi, 1e-12)
    pi /= pi.sum()
    return pi, pmf


def em_fit(
    d: Dataset,
    p: int,
    seed: int = 0,
    tol: float = 1e-8,
    max_iter: int = 500,
    restarts: int = 5,
    support_cap: int = _DEFAULT_SUPPORT_CAP,
) -> MixtureModel:
    """Fit a ``p``-component mixture of cell distributions to clusters.

    Each restart initializes responsibilities from a seeded Dirichlet
    draw, runs expectation-maximization until the log-likelihood gain
    falls below ``tol * (1 + |loglik|)``, and the best final
    log-likelihood wins. The log-likelihood never decreases across
    iterations (the cell-probability floor is far below any cell that
    carries responsibility). With ``p=1`` the fit reduces to pooled
    empirical cell frequencies.
    """
    if p < 1:
        raise InputError(f"need at least one component, got {p}")
    if p > d.c:
        raise InputError(
            f"{p} components exceed the {d.c} clusters available"
        )
    if restarts < 1:
        raise InputError("restarts must be >= 1")
    cells, unit_cell = _enumerate_cells(d, support_cap)
    counts = _counts_matrix(d, unit_cell, len(cells))

    best = None
    seed_seqs = np.random.SeedSequence(seed).spawn(restarts)
    for restart_idx in range(restarts):
        rng = np.random.default_rng(seed_seqs[restart_idx])
        resp0 = rng.dirichlet(np.ones(p), size=d.c)
        pi, pmf = _m_step(counts, resp0)
        path = []
        converged = False
        iters = 0
        for iters in range(1, max_iter + 1):
            ll, resp = _loglik_and_resp(counts, np.log(pi), np.log(pmf))
            path.append(ll)
            if iters > 1 and path[-1] - path[-2] <= tol * (1.0 + abs(ll)):
                converged = True
                break
            pi, pmf = _m_step(counts, resp)
        if not converged:
            # One extra evaluation so the reported value matches the
            # parameters actually returned.
            ll, _ = _loglik_and_resp(counts, np.log(pi), np.log(pmf))
            path.append(ll)
        candidate = MixtureModel(
            p=p,
            pi=pi,
            component_pmfs=pmf,
            support=tuple(cells),
            loglik=path[-1],
            ll_path=tuple(path),
            n_iter=iters,
            converged=converged,
            restarts=restarts,
        )
        if best is None or candidate.loglik > best.loglik:
            best = candidate
    return best


@dataclass(frozen=True)
class PosteriorStat:
    """Per-cluster posterior over mixture components (rows sum to one)."""

    cluster_posterior: np.ndarray

    @property
    def p(self) -> int:
        return self.cluster_posterior.shape[1]


def posterior_suffstat(model: MixtureModel, d: Dataset) -> PosteriorStat:
    """Posterior component probabilities for each cluster of ``d``.

    Computed in log space from per-cluster cell counts. Raises when a
    unit's (x, w) cell is outside the model's support.
    """
    cell_id = {cell: idx for idx, cell in enumerate(model.support)}
    unit_cell = np.empty(d.n, dtype=np.int64)
    for i in range(d.n):
        key = _cell_key(d.x[i], int(d.w[i]))
        if key not in cell_id:
            raise EstimationError(
                f"unit {i} falls in cell {key} outside the fitted support"
            )
        unit_cell[i] = cell_id[key]
    counts = _counts_matrix(d, unit_cell, len(model.support))
    _, resp = _loglik_and_resp(
        counts, np.log(model.pi), np.log(model.component_pmfs)
    )
    return PosteriorStat(cluster_posterior=resp)


def augment_with_posterior(d: Dataset, model: MixtureModel) -> AugmentedDesign:
    """Use mixture posteriors as the cluster summary columns.

    The summary for every unit of cluster c is the posterior over
    components given that cluster's data. Rows sum to one, so the last
    component's column is redundant given an intercept and is omitted
    from the design.
    """
    post = posterior_suffstat(model, d).cluster_posterior
    cols = post[:, : max(model.p - 1, 1)]
    s_bar = cols[d.cluster_index, :]
    names = tuple(f"posterior{k}" for k in range(cols.shape[1]))
    return AugmentedDesign(
        x=d.x,
        w=d.w.astype(float),
        s_bar=s_bar,
        n_c=d.n_c[d.cluster_index].astype(float),
        cluster_index=d.cluster_index,
        term_names=names,
        a=np.ones(d.n, dtype=np.int8),
    )
