"""Built-in analytic model families: rung grids, Hamiltonians, exact samplers.

Energies are dimensionless and may be ``+inf`` (hard walls); every consumer
must map ``exp(-inf)`` to exactly 0.  Reference free energies are oracle
values for tests only and are deliberately kept off the estimator API.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "RungGrid",
    "ModelFamily",
    "make_uniform_pair",
    "make_gaussian_ladder",
    "make_identical_pair",
]


def _check_connected(count: int, edges) -> bool:
    adjacency = {k: set() for k in range(count)}
    for a, b in edges:
        adjacency[a].add(b)
        adjacency[b].add(a)
    seen = {0}
    stack = [0]
    while stack:
        for nbr in adjacency[stack.pop()]:
            if nbr not in seen:
                seen.add(nbr)
                stack.append(nbr)
    return len(seen) == count


@dataclass(frozen=True)
class RungGrid:
    """Discretized parameter grid.

    Parameters
    ----------
    lambdas : (K, d) array
        Parameter point for each rung.
    volume : (K,) array
        Positive volume element per rung.
    edges : sequence of (int, int)
        Adjacency of the underlying parameter graph; used for finite
        differences and diffusive-move diagnostics, never for windows.
    """

    lambdas: np.ndarray
    volume: np.ndarray
    edges: tuple

    def __post_init__(self):
        lambdas = np.asarray(self.lambdas, dtype=float)
        if lambdas.ndim == 1:
            lambdas = lambdas[:, None]
        volume = np.asarray(self.volume, dtype=float)
        edges = tuple((int(a), int(b)) for a, b in self.edges)
        object.__setattr__(self, "lambdas", lambdas)
        object.__setattr__(self, "volume", volume)
        object.__setattr__(self, "edges", edges)
        k = lambdas.shape[0]
        if k < 2:
            raise ValueError("a rung grid needs at least two rungs")
        if volume.shape != (k,):
            raise ValueError("volume must have one entry per rung")
        if not np.all(volume > 0):
            raise ValueError("volume elements must be strictly positive")
        for a, b in edges:
            if not (0 <= a < k and 0 <= b < k):
                raise ValueError(f"edge ({a}, {b}) references an unknown rung")
        if not _check_connected(k, edges):
            raise ValueError("the rung adjacency graph must be connected")

    @property
    def count(self) -> int:
        return self.lambdas.shape[0]

    def neighbors(self, k: int) -> tuple:
        out = set()
        for a, b in self.edges:
            if a == k:
                out.add(b)
            elif b == k:
                out.add(a)
        return tuple(sorted(out))


@dataclass(frozen=True)
class ModelFamily:
    """A parameterized family of distributions over a 1-d state space.

    ``energy_fn(rungs, x)`` evaluates the Hamiltonians of the requested
    rungs at the state points ``x`` and returns an array of shape
    ``x.shape + (len(rungs),)``.  ``exact_transform`` maps rung indices and
    standard draws (uniform or normal, per ``draw_kind``) to exact samples
    from the corresponding rung distribution; ``kernel`` is a generic
    single-step MCMC plug-in (ergodic for each rung distribution).  At
    least one of the two must be present.

    The family is immutable after construction and safe to share across
    concurrently executing replicas; randomness sources are caller-owned.
    """

    name: str
    grid: RungGrid
    energy_fn: Callable
    draw_kind: Optional[str] = None
    exact_transform: Optional[Callable] = None
    kernel: Optional[Callable] = None
    gamma_override: Optional[np.ndarray] = None
    reference_f: Optional[np.ndarray] = field(default=None, repr=False)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.exact_transform is None and self.kernel is None:
            raise ValueError("a model family needs an exact sampler or a kernel")
        if self.exact_transform is not None and self.draw_kind not in ("uniform", "normal"):
            raise ValueError("draw_kind must be 'uniform' or 'normal' for exact samplers")
        if self.gamma_override is not None:
            override = np.asarray(self.gamma_override, dtype=float)
            if override.shape != (self.grid.count,) or not np.all(override > 0):
                raise ValueError("gamma_override must be a positive length-K vector")
            object.__setattr__(self, "gamma_override", override / override.sum())

    @property
    def count(self) -> int:
        return self.grid.count

    @property
    def has_exact_sampler(self) -> bool:
        return self.exact_transform is not None

    def energies(self, x: np.ndarray, rungs: np.ndarray) -> np.ndarray:
        """Hamiltonians of ``rungs`` at ``x``; shape ``x.shape + (len(rungs),)``."""
        return self.energy_fn(np.asarray(rungs), np.asarray(x, dtype=float))

    def energy(self, k: int, x) -> np.ndarray:
        """Hamiltonian of a single rung; shape of ``x``."""
        return self.energies(x, np.asarray([k]))[..., 0]

    def exact_draw(self, k: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Map standard draws ``z`` (see ``draw_kind``) to exact samples at rungs ``k``."""
        if self.exact_transform is None:
            raise ValueError(f"model {self.name!r} has no exact sampler")
        return self.exact_transform(np.asarray(k), np.asarray(z, dtype=float))

    def sample_exact(self, k, rng: np.random.Generator, size=None) -> np.ndarray:
        """Draw exact samples at rung(s) ``k`` using a caller-owned generator."""
        k = np.asarray(k)
        shape = k.shape if size is None else np.broadcast_shapes(k.shape, tuple(np.atleast_1d(size)))
        z = rng.random(shape) if self.draw_kind == "uniform" else rng.standard_normal(shape)
        return self.exact_draw(np.broadcast_to(k, shape), z)

    def reference_free_energies(self) -> np.ndarray:
        """Exact per-rung free energies.  Test/oracle use only."""
        if self.reference_f is None:
            raise ValueError(f"model {self.name!r} has no reference free energies")
        return self.reference_f.copy()


def _chain_edges(count: int) -> tuple:
    return tuple((k, k + 1) for k in range(count - 1))


def make_uniform_pair(delta: float) -> ModelFamily:
    """Two width-1 uniform distributions overlapping on a region of width 2*delta.

    Rung 0 is supported on ``[-1+delta, delta]``, rung 1 on ``[-delta, 1-delta]``;
    both have zero free energy.  The Fisher rung density is undefined for these
    hard walls, so the family carries the fixed density (1/2, 1/2).
    """
    delta = float(delta)
    if not 0.0 < delta < 0.5:
        raise ValueError(f"delta must lie in (0, 1/2), got {delta}")
    lo = np.array([-1.0 + delta, -delta])
    hi = np.array([delta, 1.0 - delta])

    def energy_fn(rungs, x):
        x = x[..., None]
        inside = (x >= lo[rungs]) & (x <= hi[rungs])
        return np.where(inside, 0.0, np.inf)

    def exact_transform(k, z):
        return lo[k] + z  # both supports have width exactly 1

    return ModelFamily(
        name="uniform_pair",
        grid=RungGrid(np.array([[0.0], [1.0]]), np.ones(2), _chain_edges(2)),
        energy_fn=energy_fn,
        draw_kind="uniform",
        exact_transform=exact_transform,
        gamma_override=np.array([0.5, 0.5]),
        reference_f=np.zeros(2),
        params={"delta": delta},
    )


def make_gaussian_ladder(L: int) -> ModelFamily:
    """Unit-variance Gaussians centered at 0, 1, ..., L (K = L + 1 rungs).

    All rungs share the free energy ``-log(sqrt(2*pi))``, so every exact
    difference is zero.
    """
    L = int(L)
    if L < 1:
        raise ValueError(f"L must be a positive integer, got {L}")
    centers = np.arange(L + 1, dtype=float)

    def energy_fn(rungs, x):
        return 0.5 * (x[..., None] - centers[rungs]) ** 2

    def exact_transform(k, z):
        return centers[k] + z

    return ModelFamily(
        name="gaussian_ladder",
        grid=RungGrid(centers[:, None], np.ones(L + 1), _chain_edges(L + 1)),
        energy_fn=energy_fn,
        draw_kind="normal",
        exact_transform=exact_transform,
        reference_f=np.full(L + 1, -0.5 * np.log(2.0 * np.pi)),
        params={"L": L},
    )


def make_identical_pair() -> ModelFamily:
    """Two identical uniform distributions on [0, 1] (flat Hamiltonians)."""

    def energy_fn(rungs, x):
        x = x[..., None]
        inside = (x >= 0.0) & (x <= 1.0)
        return np.where(inside, 0.0, np.inf) + 0.0 * rungs

    def exact_transform(k, z):
        return z + 0.0 * k

    return ModelFamily(
        name="identical_pair",
        grid=RungGrid(np.array([[0.0], [1.0]]), np.ones(2), _chain_edges(2)),
        energy_fn=energy_fn,
        draw_kind="uniform",
        exact_transform=exact_transform,
        gamma_override=np.array([0.5, 0.5]),
        reference_f=np.zeros(2),
    )


_BUILTIN_MODELS = {
    "uniform_pair": make_uniform_pair,
    "gaussian_ladder": make_gaussian_ladder,
    "identical_pair": make_identical_pair,
}


def make_model(name: str, **params) -> ModelFamily:
    """Construct a built-in model by name (used by the experiment config)."""
    try:
        factory = _BUILTIN_MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choices: {sorted(_BUILTIN_MODELS)}") from None
    return factory(**params)
