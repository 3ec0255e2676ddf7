"""Asymptotic rung densities: Fisher metric estimates and regularization.

The coordinate-invariant density weights each rung by the square root of
the determinant of the covariance of dH/dlambda (a standard deviation for
one-dimensional grids), times the rung's volume element.  Gradients are
second-order central differences along the original grid edges, falling
back to one-sided first-order differences at the boundary; they never
depend on the window decomposition.  Fixed densities (model overrides or
config vectors) bypass estimation entirely.
"""

from __future__ import annotations

import numpy as np

from .models import ModelFamily
from .windows import WindowLayout

__all__ = [
    "DegenerateDensity",
    "grad_lambda",
    "gradient_observables",
    "metric_from_psi",
    "gamma_regularized",
    "conditional_density",
    "fixed_global_density",
    "GammaSpec",
    "resolve_gamma",
]


class DegenerateDensity(ValueError):
    """All metric weights vanished and no regularization can rescue them."""


def _neighbor_pairs(family: ModelFamily):
    """(lower, upper) finite-difference partners per rung along grid edges."""
    count = family.count
    lower = np.full(count, -1)
    upper = np.full(count, -1)
    for k in range(count):
        for nbr in family.grid.neighbors(k):
            if nbr < k:
                lower[k] = max(lower[k], nbr)
            elif nbr > k:
                upper[k] = nbr if upper[k] < 0 else min(upper[k], nbr)
    return lower, upper


def grad_lambda(family: ModelFamily, k: int, x) -> np.ndarray:
    """Finite-difference dH/dlambda at rung k, evaluated at x.

    Central difference (H_{k+1} - H_{k-1})/2 in the interior, one-sided
    first-order difference at boundary rungs.  Components touching an
    infinite energy come out non-finite; such models must run with a
    fixed density override.
    """
    lower, upper = _neighbor_pairs(family)
    lo, up = int(lower[k]), int(upper[k])
    x = np.asarray(x, dtype=float)
    if lo >= 0 and up >= 0:
        return (family.energy(up, x) - family.energy(lo, x)) / 2.0
    if up >= 0:
        return family.energy(up, x) - family.energy(k, x)
    return family.energy(k, x) - family.energy(lo, x)


def gradient_observables(family: ModelFamily, layout: WindowLayout):
    """Observable evaluator for the Fisher metric: psi = (grad, grad^2).

    Returns ``psi(x, j) -> (..., K_j, 2)`` computing, for every rung of
    window j, the finite-difference gradient and its square at the state
    points ``x``.
    """
    lower, upper = _neighbor_pairs(family)

    def psi(x, j):
        members = layout.members[j]
        x = np.asarray(x, dtype=float)
        grads = np.empty(x.shape + (members.size,))
        for idx, k in enumerate(members):
            grads[..., idx] = grad_lambda(family, int(k), x)
        return np.stack([grads, grads * grads], axis=-1)

    return psi


def metric_from_psi(psi: np.ndarray) -> np.ndarray:
    """sqrt(det G) per rung from averaged (grad, grad^2) observables.

    ``psi[..., 0]`` is E[dH/dlambda], ``psi[..., 1]`` is E[(dH/dlambda)^2].
    Transient negative variance estimates are clamped to zero before the
    square root.  NaN averages (no data) give weight 0.
    """
    var = psi[..., 1] - psi[..., 0] ** 2
    var = np.where(np.isfinite(var), np.maximum(var, 0.0), 0.0)
    return np.sqrt(var)


def gamma_regularized(det_sqrt: list, layout: WindowLayout, volume: np.ndarray, eps_gamma: float) -> list:
    """Per-window regularized densities from per-window sqrt-determinants.

    gamma_{j;k} is proportional to [(1 - eps)*d_{j;k} + eps*B] * vol(k)
    inside each window, with B the global maximum of d over windows and
    rungs, then normalized per window.  If every determinant vanishes the
    density falls back to the volume elements (raises DegenerateDensity
    when eps_gamma is 0).
    """
    eps = float(eps_gamma)
    big = np.maximum.reduce([np.max(d, axis=-1) for d in det_sqrt])  # per batch element
    if eps <= 0.0 and np.any(big <= 0.0):
        raise DegenerateDensity("all metric weights are zero and eps_gamma is 0")
    out = []
    for j in range(layout.count):
        vol = volume[layout.members[j]]
        w = ((1.0 - eps) * det_sqrt[j] + eps * big[..., None]) * vol
        fallback = np.broadcast_to(vol / vol.sum(), w.shape)
        degenerate = (big <= 0.0)[..., None]
        w = np.where(degenerate, fallback, w)
        out.append(w / w.sum(axis=-1, keepdims=True))
    return out


def conditional_density(global_gamma: np.ndarray, layout: WindowLayout) -> list:
    """Restrict a global density to each window and renormalize."""
    out = []
    for members in layout.members:
        g = global_gamma[members]
        out.append((g / g.sum())[None, :])
    return out


def fixed_global_density(kind, count: int) -> np.ndarray:
    """Built-in fixed densities: a flat one, or flat with halved endpoints."""
    if isinstance(kind, (list, tuple, np.ndarray)):
        g = np.asarray(kind, dtype=float)
        if g.shape != (count,) or not np.all(g > 0):
            raise ValueError("fixed density must be a positive length-K vector")
        return g / g.sum()
    if kind == "flat":
        return np.full(count, 1.0 / count)
    if kind == "flat_halved_ends":
        g = np.ones(count)
        g[0] = g[-1] = 0.5
        return g / g.sum()
    raise ValueError(f"unknown fixed density {kind!r}")


class GammaSpec:
    """Resolved density mode: either a fixed global vector or the Fisher metric."""

    def __init__(self, mode: str, fixed: np.ndarray = None):
        self.mode = mode
        self.fixed = fixed

    @property
    def is_fixed(self) -> bool:
        return self.mode == "fixed"


def resolve_gamma(config_gamma, family: ModelFamily) -> GammaSpec:
    """Choose the density source for a run.

    ``auto`` uses the model's fixed override when present (hard-wall models
    have no Fisher metric), otherwise the on-the-fly Fisher estimate.
    """
    count = family.count
    if isinstance(config_gamma, (list, tuple, np.ndarray)):
        return GammaSpec("fixed", fixed_global_density(config_gamma, count))
    if config_gamma in (None, "auto"):
        if family.gamma_override is not None:
            return GammaSpec("fixed", family.gamma_override)
        return GammaSpec("fisher")
    if config_gamma == "fisher":
        if family.gamma_override is not None:
            raise ValueError(
                f"model {family.name!r} fixes its rung density; the Fisher metric is undefined for it"
            )
        return GammaSpec("fisher")
    if config_gamma in ("flat", "flat_halved_ends"):
        return GammaSpec("fixed", fixed_global_density(config_gamma, count))
    raise ValueError(f"unknown gamma mode {config_gamma!r}")
