"""Global estimates stitched from per-window ledgers each cycle.

Two parallel reconciliations share the same machinery:

- the *visit-control* path uses live tilts: window marginals from a
  stochastic eigenvector problem, a convex fixed point for the window
  offsets, per-rung visit-control free energies, and the regularized
  sampling density;
- the *reported* path sets all tilts to one and solves a linear system
  for the offsets, producing the low-noise free energies emitted to the
  user.

All exponentials are evaluated in the log domain.  Unvisited windows are
excluded from every solve (their offsets are zero and their marginal mass
folds into the diagonal of the stochastic matrix); rungs whose estimate
is still missing in some visited window are excluded transiently, with
the remaining in-window density renormalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from .numerics import logsumexp

from .windows import WindowLayout

__all__ = [
    "NoVisitedWindows",
    "NonConvergence",
    "SingularSystem",
    "window_marginal_matrix",
    "window_marginals",
    "rung_marginal",
    "solve_offsets",
    "offset_objective",
    "visit_control_fes",
    "pi_tss",
    "reported_fes",
    "ReportedEstimates",
]


class NoVisitedWindows(RuntimeError):
    """The global solve was asked to run before any window had been visited."""


class NonConvergence(RuntimeError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class SingularSystem(RuntimeError):
    """The restricted offset system plus gauge constraint is rank-deficient."""


def _dense(values: list, layout: WindowLayout, batch: int, fill: float) -> np.ndarray:
    """Stack ragged per-window vectors into a dense (B, J, K) array."""
    out = np.full((batch, layout.count, layout.rung_count), fill)
    for j, members in enumerate(layout.members):
        out[:, j, members] = values[j]
    return out


def _mask_groups(visited: np.ndarray):
    """Batch indices grouped by identical visited-window masks."""
    groups = {}
    for b, row in enumerate(visited):
        groups.setdefault(row.tobytes(), (row, []))[1].append(b)
    return [(mask, np.asarray(idx)) for mask, idx in groups.values()]


def _min_norm_stationary(Q: np.ndarray) -> np.ndarray:
    """Stochastic invariant vector of minimum L2 norm for stacked left-stochastic Q."""
    m = Q.shape[-1]
    A = Q - np.eye(m)
    U, S, Vh = np.linalg.svd(A)
    cutoff = S[..., :1] * m * np.finfo(float).eps * 1e4
    null = S <= np.maximum(cutoff, 1e-12)
    null[..., -1] = True  # a stochastic matrix always has a unit eigenvalue
    basis = np.where(null[..., None], Vh, 0.0)  # (n, m, m) rows spanning the null space
    a = basis.sum(axis=-1)  # (n, m) inner products with the ones vector
    denom = np.sum(a * a, axis=-1, keepdims=True)
    if np.any(denom <= 0):
        raise SingularSystem("no stochastic invariant vector found")
    p = np.einsum("ng,ngm->nm", a / denom, basis)
    p = np.where(p < 0, 0.0, p)  # clip numerical dust
    return p / p.sum(axis=-1, keepdims=True)


def window_marginal_matrix(gamma: list, tilts: list, layout: WindowLayout, visited: np.ndarray) -> np.ndarray:
    """Left-stochastic matrix over windows, Q[i, j] = overlap mass of W_i in window j.

    Column j carries half of window j's (gamma * tilt) mass split across the
    windows overlapping W_j; the diagonal always holds the other half.  Mass
    that would flow into unvisited windows is folded into the diagonal.
    Entries for unvisited columns are zeroed (those windows leave the solve).
    """
    B = visited.shape[0]
    J = layout.count
    Q = np.zeros((B, J, J))
    for j, members in enumerate(layout.members):
        w = np.broadcast_to(gamma[j] * tilts[j], (B, members.size)).copy()
        total = w.sum(axis=-1)
        ok = visited[:, j] & (total > 0)
        safe_total = np.where(ok, total, 1.0)
        folded = np.zeros(B)
        for i in range(J):
            if not layout.overlap_graph[i, j]:
                continue
            shared = layout.overlap_members(i, j)
            if i == j:
                continue
            frac = 0.5 * w[:, layout.position[j][shared]].sum(axis=-1) / safe_total
            into_i = np.where(visited[:, i], frac, 0.0)
            folded += np.where(visited[:, i], 0.0, frac)
            Q[:, i, j] = np.where(ok, into_i, 0.0)
        Q[:, j, j] = np.where(ok, 0.5 + folded, 0.0)
    return Q


def window_marginals(gamma: list, tilts: list, layout: WindowLayout, visited: np.ndarray) -> np.ndarray:
    """Stationary window marginals p (B, J); p = 0 for unvisited windows."""
    if not np.any(visited):
        raise NoVisitedWindows("no window has been visited yet")
    Q = window_marginal_matrix(gamma, tilts, layout, visited)
    B, J = visited.shape
    p = np.zeros((B, J))
    for mask, idx in _mask_groups(visited):
        cols = np.nonzero(mask)[0]
        if cols.size == 0:
            continue
        sub = Q[np.ix_(idx, cols, cols)]
        p[np.ix_(idx, cols)] = _min_norm_stationary(sub)
    return p


def rung_marginal(p: np.ndarray, gamma: list, tilts: list, layout: WindowLayout) -> np.ndarray:
    """Probability of occupying each rung irrespective of the window; (B, K)."""
    B = p.shape[0]
    q = np.zeros((B, layout.rung_count))
    for j, members in enumerate(layout.members):
        w = np.broadcast_to(gamma[j] * tilts[j], (B, members.size))
        total = w.sum(axis=-1, keepdims=True)
        active = p[:, j : j + 1] > 0
        contrib = np.where(active, p[:, j : j + 1] * w / np.where(total > 0, total, 1.0), 0.0)
        q[:, members] += contrib
    return q


def _log_terms(F_dense, gamma_dense, layout, visited):
    """log gamma_{j;k} with unusable entries at -inf, and the rung eligibility mask.

    A rung is eligible when it belongs to at least one visited window and
    every visited window containing it has a finite estimate for it.
    """
    with np.errstate(divide="ignore"):
        log_gamma = np.log(gamma_dense)
    usable = np.isfinite(F_dense) & (gamma_dense > 0) & visited[:, :, None]
    member = gamma_dense > 0
    blocked = member & visited[:, :, None] & ~np.isfinite(F_dense)
    eligible = usable.any(axis=1) & ~blocked.any(axis=1)
    return np.where(usable, log_gamma, -np.inf), eligible


def solve_offsets(
    F: list,
    gamma: list,
    p: np.ndarray,
    q: np.ndarray,
    eta: float,
    layout: WindowLayout,
    tol: float = 1e-10,
    max_iter: int = 500,
    warm: np.ndarray = None,
) -> np.ndarray:
    """Window free-energy offsets, gauge-fixed to sum_j p_j f_j = 0; (B, J).

    The offsets are the minimizer of the convex objective whose stationarity
    conditions are the fixed point f_j = (eta+1) * log g_j(f).  Convergence
    is declared when one fixed-point sweep moves f by less than ``tol`` in
    max norm.  Plain (damped) sweeps stall during transients -- the
    contraction ratio approaches one whenever the per-window estimates still
    disagree strongly -- so each iteration takes a ridge-regularized Newton
    step of the objective with Armijo backtracking, which handles those
    nearly flat valleys.  Raises ``NonConvergence`` (with the last residual)
    after ``max_iter`` iterations; offsets of unvisited windows are 0.
    """
    B = p.shape[0]
    J = layout.count
    beta = 1.0 / (eta + 1.0)
    visited = p > 0
    F_dense = _dense(F, layout, B, np.inf)
    gamma_dense = _dense(gamma, layout, B, 0.0)
    log_gamma, eligible = _log_terms(F_dense, gamma_dense, layout, visited)
    with np.errstate(divide="ignore"):
        log_p = np.where(visited, np.log(np.maximum(p, 1e-300)), -np.inf)
        log_q = np.where(eligible & (q > 0), np.log(np.maximum(q, 1e-300)), -np.inf)
    qk = np.exp(log_q)  # zeroed where ineligible
    base = log_gamma + beta * np.where(np.isfinite(F_dense), F_dense, 0.0)  # (B, J, K)

    def gauge(fv):
        return np.where(visited, fv - np.sum(p * fv, axis=1, keepdims=True), 0.0)

    def log_inner(fv):
        return logsumexp(base + log_p[:, :, None] - beta * fv[:, :, None], axis=1)  # (B, K)

    def sweep(fv):
        inner = log_inner(fv)
        with np.errstate(invalid="ignore"):
            diff = np.where(np.isfinite(log_q), log_q - inner, -np.inf)
            g = logsumexp(base + diff[:, None, :], axis=2)  # (B, J)
        return gauge(np.where(visited & np.isfinite(g), g / beta, 0.0))

    def objective(fv):
        inner = log_inner(fv)
        return beta * np.sum(p * fv, axis=1) + np.sum(qk * np.where(qk > 0, inner, 0.0), axis=1)

    f = gauge(np.zeros((B, J)) if warm is None else warm.copy())
    phi = objective(f)
    residual = np.full(B, np.inf)
    for _ in range(int(max_iter)):
        residual = np.max(np.abs(sweep(f) - f), axis=1)
        if np.all(residual < tol):
            return f
        # share of window j in rung k's mixture: w[b, j, k], summing to 1 over j
        inner = log_inner(f)
        with np.errstate(invalid="ignore"):
            log_w = base + log_p[:, :, None] - beta * f[:, :, None] - inner[:, None, :]
        w = np.where(np.isfinite(log_w), np.exp(log_w), 0.0)
        grad = beta * (p - np.einsum("bk,bjk->bj", qk, w))
        grad = np.where(visited, grad, 0.0)
        qw = qk[:, None, :] * w
        H = beta * beta * (
            np.eye(J)[None] * qw.sum(axis=2)[:, :, None] - np.einsum("bik,bjk->bij", qw, w)
        )
        diag = np.einsum("bjj->bj", H)
        ridge = 1e-12 * np.maximum(diag.max(axis=1), 1e-30)
        H = H + ridge[:, None, None] * np.eye(J)[None]
        # freeze unvisited windows at zero
        mask = (~visited)[:, :, None] | (~visited)[:, None, :]
        H = np.where(mask, np.eye(J)[None], H)
        try:
            step = -np.linalg.solve(H, grad[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = sweep(f) - f
        step = gauge(np.where(visited, step, 0.0))
        slope = np.sum(grad * step, axis=1)
        bad = slope > 0
        if np.any(bad):  # not a descent direction (should not happen; fall back)
            fallback = sweep(f) - f
            step = np.where(bad[:, None], fallback, step)
            slope = np.where(bad, np.sum(grad * fallback, axis=1), slope)
        lam = np.ones(B)
        noise = 1e-14 * (np.abs(phi) + 1.0)  # objective changes below float resolution
        for _ in range(40):
            cand = gauge(f + lam[:, None] * step)
            cand_phi = objective(cand)
            ok = cand_phi <= phi + 1e-4 * lam * slope + noise
            if np.all(ok):
                break
            lam = np.where(ok, lam, 0.5 * lam)
        f = gauge(f + lam[:, None] * step)
        phi = objective(f)
    raise NonConvergence(
        f"offset solve did not converge in {max_iter} iterations "
        f"(max residual {float(np.max(residual)):.3e})",
        residual=float(np.max(residual)),
        iterations=int(max_iter),
    )


def offset_objective(F, gamma, p, q, eta, layout, f) -> np.ndarray:
    """Convex objective whose minimizer (under sum p_j f_j = 0) is the offset vector."""
    B = p.shape[0]
    beta = 1.0 / (eta + 1.0)
    visited = p > 0
    F_dense = _dense(F, layout, B, np.inf)
    gamma_dense = _dense(gamma, layout, B, 0.0)
    log_gamma, eligible = _log_terms(F_dense, gamma_dense, layout, visited)
    with np.errstate(divide="ignore"):
        log_p = np.where(visited, np.log(np.maximum(p, 1e-300)), -np.inf)
    base = log_gamma + beta * np.where(np.isfinite(F_dense), F_dense, 0.0)
    inner = logsumexp(base + log_p[:, :, None] - beta * f[:, :, None], axis=1)  # (B, K)
    qk = np.where(eligible, q, 0.0)
    return beta * np.sum(p * f, axis=1) + np.sum(qk * np.where(eligible, inner, 0.0), axis=1)


def visit_control_fes(F, gamma, p, q, f, eta, layout) -> np.ndarray:
    """Per-rung visit-control free energies (B, K); NaN where q vanishes."""
    B = p.shape[0]
    beta = 1.0 / (eta + 1.0)
    visited = p > 0
    F_dense = _dense(F, layout, B, np.inf)
    gamma_dense = _dense(gamma, layout, B, 0.0)
    log_gamma, eligible = _log_terms(F_dense, gamma_dense, layout, visited)
    with np.errstate(divide="ignore"):
        log_p = np.where(visited, np.log(np.maximum(p, 1e-300)), -np.inf)
    base = log_gamma + beta * np.where(np.isfinite(F_dense), F_dense, 0.0)
    inner = logsumexp(base + log_p[:, :, None] - beta * f[:, :, None], axis=1)
    ok = eligible & (q > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (inner - np.log(q)) / beta
    return np.where(ok, out, np.nan)


def pi_tss(F, F_circ, gamma, eta, eps_pi, layout, visited) -> list:
    """Regularized visit-control sampling density, as per-window log weights.

    pi is proportional (per window) to gamma * exp(eta/(eta+1) * (Fo - F)),
    then floored as (1 - eps_pi) * pi + eps_pi * gamma.  Rungs without a
    usable visit-control value keep only the floor; windows with no usable
    rung at all fall back to gamma.  Entries for unvisited windows are None.
    """
    B = visited.shape[0]
    strength = eta / (eta + 1.0)
    out = []
    for j, members in enumerate(layout.members):
        if not np.any(visited[:, j]):
            out.append(None)
            continue
        g = np.broadcast_to(gamma[j], (B, members.size))
        with np.errstate(divide="ignore"):
            log_g = np.log(g)
        fo = F_circ[:, members]
        fj = np.broadcast_to(F[j], (B, members.size))
        usable = np.isfinite(fo) & np.isfinite(fj)
        with np.errstate(invalid="ignore"):
            logits = np.where(usable, log_g + strength * (fo - fj), -np.inf)
        any_usable = usable.any(axis=1, keepdims=True)
        with np.errstate(invalid="ignore"):
            log_unreg = logits - logsumexp(logits, axis=1, keepdims=True)
        log_unreg = np.where(any_usable, log_unreg, log_g)
        if eps_pi >= 1.0:
            log_pi = log_g
        elif eps_pi <= 0.0:
            log_pi = log_unreg
        else:
            log_pi = np.logaddexp(np.log1p(-eps_pi) + log_unreg, np.log(eps_pi) + log_g)
        out.append(np.where(visited[:, j : j + 1], log_pi, np.nan))
    return out


@dataclass
class ReportedEstimates:
    """Reported (tilts-set-to-one) global quantities: the user-facing outputs."""

    p: np.ndarray       # (B, J) window marginals of the reported system
    gamma: np.ndarray   # (B, K) reported rung density, NaN where undefined
    f: np.ndarray       # (B, J) window offsets
    F: np.ndarray       # (B, K) reported free energies, NaN where undefined


def reported_fes(F: list, gamma: list, layout: WindowLayout, visited: np.ndarray) -> ReportedEstimates:
    """Reported free energies via the tilts-to-one linear reconciliation.

    Solves the (I - T) offset system restricted to visited windows and
    rungs with complete estimates, with one equation replaced by the gauge
    sum_j p_j f_j = 0, then averages the offset-corrected per-window
    estimates with weights p_j gamma_{j;k}.
    """
    B = visited.shape[0]
    J = layout.count
    K = layout.rung_count
    ones = [np.ones((1, m.size)) for m in layout.members]
    p = window_marginals(gamma, ones, layout, visited)

    F_dense = _dense(F, layout, B, np.inf)
    gamma_dense = _dense(gamma, layout, B, 0.0)
    _, eligible = _log_terms(F_dense, gamma_dense, layout, visited)

    # Per-window density renormalized over eligible rungs.
    g_use = np.where(eligible[:, None, :] & visited[:, :, None], gamma_dense, 0.0)
    g_tot = g_use.sum(axis=2, keepdims=True)
    g_norm = np.where(g_tot > 0, g_use / np.where(g_tot > 0, g_tot, 1.0), 0.0)

    gamma_rep = np.einsum("bj,bjk->bk", p, g_use)  # un-renormalized reported weights
    weight = p[:, :, None] * g_use
    denom = weight.sum(axis=1)
    safe_denom = np.where(denom > 0, denom, 1.0)
    share = weight / safe_denom[:, None, :]  # p_j gamma_{j;k} / gamma_rep_k

    F_fin = np.where(np.isfinite(F_dense), F_dense, 0.0)
    blend = np.einsum("bjk,bjk->bk", share, F_fin)  # consensus F per rung
    T = np.einsum("bik,bjk->bij", g_norm, share)
    b_vec = np.einsum("bjk,bjk->bj", g_norm, F_fin - blend[:, None, :])

    f = np.zeros((B, J))
    for mask, idx in _mask_groups(visited):
        cols = np.nonzero(mask)[0]
        if cols.size == 0:
            continue
        m = cols.size
        A = np.eye(m)[None] - T[np.ix_(idx, cols, cols)]
        rhs = b_vec[np.ix_(idx, cols)].copy()
        psub = p[np.ix_(idx, cols)]
        drop = np.argmax(psub, axis=1)
        rows = np.arange(idx.size)
        A[rows, drop, :] = psub
        rhs[rows, drop] = 0.0
        try:
            sol = np.linalg.solve(A, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError as err:
            raise SingularSystem(f"reported offset system is singular: {err}") from err
        if not np.all(np.isfinite(sol)):
            raise SingularSystem("reported offset system produced non-finite offsets")
        f[np.ix_(idx, cols)] = sol

    F_tss = np.einsum("bjk,bjk->bk", share, F_fin - f[:, :, None])
    defined = (denom > 0) & eligible
    F_tss = np.where(defined, F_tss, np.nan)
    gamma_rep = np.where(defined, gamma_rep, np.nan)
    return ReportedEstimates(p=p, gamma=gamma_rep, f=f, F=F_tss)
