"""Jackknife error estimation over epochs.

Replicates delete one live epoch at a time from the stored per-window
accumulations and rerun the reported-free-energy pipeline; no
re-simulation is involved.  The MSE combines the squared replicate
deviations with the epoch length fractions so that the estimator is
asymptotically chi-squared.  Error bars are reported as +/- 2 sqrt(MSE).
"""

from __future__ import annotations

import numpy as np

__all__ = ["InsufficientCoverage", "jackknife_replicates", "mse"]


class InsufficientCoverage(RuntimeError):
    """Deleting some epoch empties a window needed for the requested rungs."""

    def __init__(self, message, failing=None):
        super().__init__(message)
        self.failing = failing or []


def jackknife_replicates(ledger, layout, reported_solve, required_rungs=None) -> dict:
    """Delete-one-epoch reported free energies, one (B, K) array per live epoch.

    ``reported_solve`` maps a delete-one ``WindowEstimates`` to reported
    estimates (recomputing the rung density when it is estimated on the
    fly).  Windows unvisited under some deletion simply drop out of that
    replicate; if ``required_rungs`` lose their estimate under a deletion,
    ``InsufficientCoverage`` is raised listing the failing (window, epoch)
    pairs.
    """
    replicates = {}
    failing = []
    for m in list(ledger.live):
        est = ledger.combine_epochs(skip=m)
        if not np.any(est.visited):
            failing.append((None, m))
            continue
        rep = reported_solve(est)
        replicates[m] = rep.F
        if required_rungs is not None:
            for k in required_rungs:
                if not np.all(np.isfinite(rep.F[:, k])):
                    bad = [int(j) for j in np.nonzero(~est.visited.all(axis=0))[0]]
                    failing.append(((int(k), bad), m))
    if failing:
        raise InsufficientCoverage(
            f"jackknife deletions lose coverage: {failing}", failing=failing
        )
    return replicates


def mse(replicates: dict, full_estimate: np.ndarray, a: np.ndarray, pairs) -> dict:
    """Jackknife MSE of free energy differences for the requested rung pairs.

    ``replicates`` maps epoch -> (B, K) reported free energies with that
    epoch deleted; ``a`` holds the live-epoch length fractions in the same
    epoch order; ``full_estimate`` is the all-epoch (B, K) result.  Returns
    {(k, k'): (B,) MSE}; the estimator is symmetric in the pair and zero
    on the diagonal.
    """
    epochs = sorted(replicates)
    if len(epochs) < 2:
        raise ValueError("jackknife needs at least two live epochs")
    a = np.asarray(a, dtype=float)
    if a.shape != (len(epochs),):
        raise ValueError("one length fraction per live epoch is required")
    out = {}
    norm = 1.0 / (len(epochs) - 1)
    for k, k2 in pairs:
        if k == k2:
            out[(k, k2)] = np.zeros(full_estimate.shape[0])
            continue
        full_diff = full_estimate[:, k2] - full_estimate[:, k]
        acc = np.zeros(full_estimate.shape[0])
        for weight, m in zip(a, epochs):
            rep = replicates[m]
            diff = rep[:, k2] - rep[:, k]
            acc += ((1.0 - weight) ** 2 / weight) * (diff - full_diff) ** 2
        out[(k, k2)] = norm * acc
    return out
