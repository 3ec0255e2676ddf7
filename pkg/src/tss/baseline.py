"""Comparison estimators and analytic oracles.

Contains the offline maximum-likelihood estimator (MBAR) with its
asymptotic covariance, the mixture overlap matrix (quadrature or Monte
Carlo), closed-form asymptotic variances for the two-rung uniform model,
the mean-field drift of the visit-controlled pair, the relative-entropy
decay rate used by the Lyapunov monotonicity check, and small exact
chains (the three-state overlap chain, the two-rung counting estimator)
used to validate the variance formulas by simulation.
"""

from __future__ import annotations

import numpy as np
from scipy import integrate
from .numerics import logsumexp

from .models import ModelFamily

__all__ = [
    "DisconnectedOverlap",
    "NonConvergence",
    "mbar_solve",
    "overlap_matrix",
    "var_mbar",
    "diff_variance",
    "var_tss_uniform",
    "pair_drift",
    "pair_pi_steady",
    "pair_drift_closed_form",
    "lyapunov_rate",
    "meanfield_ode",
    "three_state_chain",
    "three_state_integrated_cov",
    "counting_pair_run",
    "sams_mode",
]


class DisconnectedOverlap(RuntimeError):
    """The samples do not connect all rungs through finite-energy overlap."""


class NonConvergence(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


# ---------------------------------------------------------------------------
# MBAR


def _sample_connectivity(u: np.ndarray) -> bool:
    finite = np.isfinite(u)
    count = u.shape[1]
    adjacency = np.zeros((count, count), dtype=bool)
    for i in range(count):
        for j in range(i + 1, count):
            adjacency[i, j] = adjacency[j, i] = bool(np.any(finite[:, i] & finite[:, j]))
    seen = {0}
    stack = [0]
    while stack:
        for j in np.nonzero(adjacency[stack.pop()])[0]:
            if j not in seen:
                seen.add(int(j))
                stack.append(int(j))
    return len(seen) == count


def mbar_solve(energy_samples: dict, counts: dict = None, tol: float = 1e-12, max_iter: int = 10000) -> np.ndarray:
    """Self-consistent maximum-likelihood free energies, gauge F[0] = 0.

    Parameters
    ----------
    energy_samples : dict
        Maps each rung to an (n_k, K) array whose rows are the energy
        vectors (H_1(x), ..., H_K(x)) of samples drawn from that rung.
    counts : dict, optional
        Sample counts per rung; defaults to the row counts.

    Raises ``DisconnectedOverlap`` when the samples cannot resolve all
    differences and ``NonConvergence`` past ``max_iter`` sweeps.
    """
    rungs = sorted(energy_samples)
    count = np.asarray(energy_samples[rungs[0]]).shape[1]
    if rungs != list(range(count)):
        raise ValueError("energy_samples must cover every rung 0..K-1")
    u = np.vstack([np.asarray(energy_samples[k], dtype=float) for k in rungs])
    n_k = np.array([counts[k] if counts else len(energy_samples[k]) for k in rungs], dtype=float)
    if np.any(n_k <= 0):
        raise ValueError("every rung needs a positive sample count")
    if not _sample_connectivity(u):
        raise DisconnectedOverlap("sample overlap graph is disconnected")

    n = n_k.sum()
    log_w = np.log(n_k / n)
    f = np.zeros(count)
    for _ in range(int(max_iter)):
        # log denominator per sample: logsumexp_l [log(n_l/n) + f_l - H_l(x)]
        log_den = logsumexp(log_w + f - u, axis=1)
        new_f = -(logsumexp(-u - log_den[:, None], axis=0) - np.log(n))
        new_f -= new_f[0]
        change = np.max(np.abs(new_f - f))
        f = new_f
        if change < tol:
            return f
    raise NonConvergence(f"MBAR did not converge in {max_iter} sweeps", residual=float(change))


def overlap_matrix(family: ModelFamily, pi, method: str = "quadrature", n: int = 100000, rng=None,
                   free_energies=None, support=None) -> np.ndarray:
    """Mixture overlap matrix O of the family under weights pi.

    O[i, j] is the mixture expectation of rho_i * rho_j / (sum_k pi_k rho_k)^2,
    evaluated by adaptive quadrature over the family's support (analytic
    models) or by Monte Carlo over the mixture (``method="monte_carlo"``).
    Uses the family's reference free energies unless estimates are given
    (oracle-grade operation).
    """
    pi = np.asarray(pi, dtype=float)
    count = family.count
    f = np.asarray(free_energies if free_energies is not None else family.reference_free_energies())

    def densities(x):
        h = family.energies(np.asarray(x, dtype=float), np.arange(count))
        return np.exp(f - h)  # (..., K) normalized densities

    if method == "quadrature":
        if support is None:
            support = _default_support(family)
        breaks = [b for b in _default_breakpoints(family) if support[0] < b < support[1]] or None
        out = np.zeros((count, count))
        for i in range(count):
            for j in range(i, count):
                def integrand(x):
                    rho = densities(np.array([x]))[0]
                    mix = float(pi @ rho)
                    return rho[i] * rho[j] / mix if mix > 0 else 0.0
                val, _ = integrate.quad(integrand, support[0], support[1], limit=400, points=breaks)
                out[i, j] = out[j, i] = val
        return out
    if method == "monte_carlo":
        rng = rng or np.random.default_rng(0)
        ks = rng.choice(count, size=n, p=pi / pi.sum())
        xs = family.sample_exact(ks, rng)
        rho = densities(xs)  # (n, K)
        mix = rho @ pi
        w = rho / mix[:, None]
        return (w[:, :, None] * w[:, None, :]).mean(axis=0)
    raise ValueError(f"unknown overlap method {method!r}")


def _default_support(family: ModelFamily):
    lam = family.grid.lambdas[:, 0]
    if family.name == "uniform_pair":
        d = family.params["delta"]
        return (-1.0 + d, 1.0 - d)
    if family.name == "identical_pair":
        return (0.0, 1.0)
    return (float(lam.min()) - 12.0, float(lam.max()) + 12.0)


def _default_breakpoints(family: ModelFamily):
    if family.name == "uniform_pair":
        d = family.params["delta"]
        return [-d, d]
    return []


def var_mbar(O: np.ndarray, pi) -> np.ndarray:
    """Asymptotic covariance of the maximum-likelihood free energies.

    (Pi - Pi O Pi)^+ - Pi^{-1}, with the pseudoinverse taken by symmetric
    eigendecomposition and eigenvalues below 1e-12 of the largest treated
    as the (exactly one-dimensional) kernel.
    """
    pi = np.asarray(pi, dtype=float)
    P = np.diag(pi)
    A = P - P @ O @ P
    vals, vecs = np.linalg.eigh(A)
    cut = 1e-12 * np.max(np.abs(vals))
    inv = np.where(np.abs(vals) > cut, 1.0 / np.where(np.abs(vals) > cut, vals, 1.0), 0.0)
    return (vecs * inv) @ vecs.T - np.diag(1.0 / pi)


def diff_variance(cov: np.ndarray, i: int, j: int) -> float:
    """Variance of the difference F_j - F_i under a covariance matrix."""
    e = np.zeros(cov.shape[0])
    e[j] += 1.0
    e[i] -= 1.0
    return float(e @ cov @ e)


def var_tss_uniform(delta: float, nu: int) -> float:
    """Closed-form asymptotic variance of the adaptive pair estimator.

    4*p + 8*p^(nu+1) / (1 - p^nu) with p = 1 - 2*delta, for nu tempering
    sweeps per estimator update on the two-rung uniform model.
    """
    if not 0.0 < delta < 0.5:
        raise ValueError(f"delta must lie in (0, 1/2), got {delta}")
    if nu < 1:
        raise ValueError(f"nu must be a positive integer, got {nu}")
    p = 1.0 - 2.0 * delta
    return 4.0 * p + 8.0 * p ** (nu + 1) / (1.0 - p**nu)


# ---------------------------------------------------------------------------
# Mean-field drift and Lyapunov decay


def pair_pi_steady(delta_f: np.ndarray, eta: float) -> np.ndarray:
    """Rung weights at steady-state tilts for the symmetric pair; (..., 2).

    With the tilt recursion at its fixed point, the weights collapse to a
    logistic in beta * delta_f with beta = eta / (eta + 1).
    """
    beta = eta / (eta + 1.0)
    d = np.asarray(delta_f, dtype=float)
    first = 1.0 / (1.0 + np.exp(-beta * d))
    return np.stack([first, 1.0 - first], axis=-1)


def pair_drift(delta_f: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """Mean-field time derivative of the pair difference under weights pi."""
    d = np.asarray(delta_f, dtype=float)
    return (1.0 - np.exp(d)) / (pi[..., 0] + pi[..., 1] * np.exp(d))


def pair_drift_closed_form(delta_f: np.ndarray, eta: float) -> np.ndarray:
    """-2 sinh(d/2) cosh(beta d/2) / cosh((1 - beta) d/2), beta = eta/(eta+1)."""
    beta = eta / (eta + 1.0)
    d = np.asarray(delta_f, dtype=float)
    return -2.0 * np.sinh(d / 2.0) * np.cosh(beta * d / 2.0) / np.cosh((1.0 - beta) * d / 2.0)


def lyapunov_rate(x: np.ndarray, gamma: np.ndarray, eta: float) -> float:
    """dV/dt of the relative entropy V_gamma at partition-function ratios x.

    ``x`` holds Z*_k / Z_k.  The rate is nonpositive and decreases (grows
    more negative) monotonically with eta away from equilibrium.
    """
    x = np.asarray(x, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    a = eta / (eta + 1.0)
    s1 = np.sum(gamma * x**(-a))
    s2 = np.sum(gamma * x ** (1.0 / (eta + 1.0)))
    mean = np.sum(gamma * x)
    return -float(np.sum(gamma * (x / mean - 1.0) * (x * s1 / s2 - 1.0)))


def meanfield_ode(z0: np.ndarray, z_star: np.ndarray, gamma: np.ndarray, eta: float,
                  t_end: float = 20.0, dt: float = 1e-3, sample_every: int = 200):
    """Integrate the steady-state-tilt mean-field flow of Z with classic RK4.

    Returns (times, trajectory) with trajectory rows Z(t) on the sample grid.
    """
    z_star = np.asarray(z_star, dtype=float)
    gamma = np.asarray(gamma, dtype=float)

    def rhs(z):
        x = z_star / z
        s1 = np.sum(gamma * x ** (-eta / (eta + 1.0)))
        s2 = np.sum(gamma * x ** (1.0 / (eta + 1.0)))
        return z_star * s1 / s2 - z

    z = np.asarray(z0, dtype=float).copy()
    steps = int(round(t_end / dt))
    times, path = [0.0], [z.copy()]
    for step in range(1, steps + 1):
        k1 = rhs(z)
        k2 = rhs(z + 0.5 * dt * k1)
        k3 = rhs(z + 0.5 * dt * k2)
        k4 = rhs(z + dt * k3)
        z = z + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if step % sample_every == 0:
            times.append(step * dt)
            path.append(z.copy())
    return np.array(times), np.array(path)


# ---------------------------------------------------------------------------
# Exact small chains


def three_state_chain(delta: float, nu: int, steps: int, seed: int = 0) -> np.ndarray:
    """Simulate the stationary pair observable read every nu-th sweep.

    The observable of the symmetric two-rung uniform model takes values
    {-2, 0, +2} depending on which region the state point occupies, and is
    itself a three-state Markov chain.  Returns the subsampled trajectory.
    """
    p = 1.0 - 2.0 * delta
    # rows: from-state in (left-only, overlap, right-only)
    transition = np.array([
        [p, 2.0 * delta, 0.0],
        [p / 2.0, 2.0 * delta, p / 2.0],
        [0.0, 2.0 * delta, p],
    ])
    cdf = np.cumsum(transition, axis=1)
    stationary = np.array([p / 2.0, 2.0 * delta, p / 2.0])
    rng = np.random.default_rng(seed)
    state = int(rng.choice(3, p=stationary))
    total = steps * nu
    draws = rng.random(total)
    values = np.array([2.0, 0.0, -2.0])
    out = np.empty(steps)
    for i in range(total):
        state = int(np.searchsorted(cdf[state], draws[i]))
        if (i + 1) % nu == 0:
            out[(i + 1) // nu - 1] = values[state]
    return out


def three_state_integrated_cov(delta: float, nu: int) -> float:
    """Closed-form one-sided integrated covariance of the subsampled observable."""
    p = 1.0 - 2.0 * delta
    return 4.0 * p * p**nu / (1.0 - p**nu)


def sams_linear_ladder(L: int, t_steps: int, seeds, gamma=None) -> np.ndarray:
    """Additive-update self-adjusted tempering on the Gaussian ladder.

    This is the plain stochastic-approximation baseline: one tempering sweep
    per estimator update, F incremented by gain/(t+1) times the centered
    importance ratio.  Unlike the ratio-accumulating estimator (whose first
    update jumps straight to one-sample reweighting values and keeps every
    rung reachable), the additive form moves at most O(1/t) per step and
    exhibits the ladder's exponential transient for large L.  Vectorized
    over seeds; returns the final F rows, gauge F[0] = 0.
    """
    K = L + 1
    if gamma is None:
        gamma = np.ones(K)
        gamma[0] = gamma[-1] = 0.5
    gamma = np.asarray(gamma, dtype=float)
    gamma = gamma / gamma.sum()
    log_gamma = np.log(gamma)
    seeds = np.atleast_1d(seeds)
    B = len(seeds)
    gens = [np.random.default_rng(int(s)) for s in seeds]
    centers = np.arange(K, dtype=float)
    F = np.zeros((B, K))
    k = np.zeros(B, dtype=int)
    x = np.array([g.normal(0.0, 1.0) for g in gens])
    rows = np.arange(B)
    for t in range(t_steps):
        # rung Gibbs move at the current state point, then a fresh draw there
        H = 0.5 * (x[:, None] - centers) ** 2
        logits = log_gamma + F - H
        shift = logits.max(axis=1, keepdims=True)
        w = np.exp(logits - shift)
        w /= w.sum(axis=1, keepdims=True)
        u = np.array([g.random() for g in gens])
        k = (w.cumsum(axis=1) < u[:, None]).sum(axis=1)
        z = np.array([g.normal(0.0, 1.0) for g in gens])
        x = centers[k] + z
        H = 0.5 * (x[:, None] - centers) ** 2
        num = F - H
        shift = num.max(axis=1, keepdims=True)
        den = np.log(np.sum(gamma * np.exp(num - shift), axis=1, keepdims=True)) + shift
        ratio = np.exp(num - den)
        F = F + (1.0 - ratio) / (t + 1.0)
        F = F - F[:, :1]
    return F


def counting_pair_run(t_steps: int, seeds, delta_f0: float = 0.0) -> np.ndarray:
    """Self-adjusted counting estimator on the identical pair; final differences.

    Runs the two-rung occupancy-counting recursion with the rung kernel
    P(rung 2) = 1 / (1 + exp(-delta)) per step, vectorized over seeds.
    """
    seeds = np.atleast_1d(seeds)
    gens = [np.random.default_rng(int(s)) for s in seeds]
    delta = np.full(len(seeds), float(delta_f0))
    chunk = 4096
    done = 0
    while done < t_steps:
        m = min(chunk, t_steps - done)
        u = np.stack([g.random(m) for g in gens])
        for i in range(m):
            t = done + i
            pick_two = u[:, i] < 1.0 / (1.0 + np.exp(-delta))
            delta = delta + (2.0 / (t + 1.0)) * np.where(pick_two, -1.0, 1.0)
        done += m
    return delta


def sams_mode(config: dict) -> dict:
    """Rewrite a run config into the plain self-adjusted baseline.

    Turns off visit control (eta = 0) and history forgetting (alpha = 0),
    uses the coincident full-range window pair, and one rung move per
    estimator update (nu = 1).  Idempotent.
    """
    out = dict(config)
    out["eta"] = 0.0
    out["alpha"] = 0.0
    out["nu"] = 1
    out["windows"] = {"mode": "full_double"}
    return out
