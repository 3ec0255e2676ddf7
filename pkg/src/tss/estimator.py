"""Epoch-based per-window estimates with history forgetting.

The ledger keeps, per window and live epoch, the visit counters N, the
free-energy accumulations, the observable accumulations, and the tilt
accumulations.  All exp(-F)-like quantities are carried as running
log-sums combined with log-sum-exp; algebraically this is identical to
the per-cycle multiplicative recursions but immune to cancellation, with
the "F = 0 when N = 0" convention applied only at read time.

Epoch l covers cycles (tau_{l-1}, tau_l].  Only the newest live epoch is
written each cycle; the oldest live epochs are dropped whole as the
forgotten fraction alpha advances.
"""

from __future__ import annotations

import math
from bisect import bisect_left
from dataclasses import dataclass
from typing import Optional

import numpy as np
from .numerics import logsumexp

from .sampler import CycleRecord, SamplingWeights
from .windows import WindowLayout

__all__ = [
    "EpochSchedule",
    "EpochLedger",
    "WindowEstimates",
    "epoch_index",
    "importance_ratios",
]


class EpochSchedule:
    """Geometric epoch boundaries tau_0 = 0, tau_1 = 1, tau_{l+1} = ceil(phi*tau_l)."""

    def __init__(self, phi: float, alpha: float):
        if not phi > 1.0:
            raise ValueError(f"phi must exceed 1, got {phi}")
        if not 0.0 <= alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
        self.phi = float(phi)
        self.alpha = float(alpha)
        self._tau = [0, 1]

    def tau(self, l: int) -> int:
        while len(self._tau) <= l:
            self._tau.append(math.ceil(self.phi * self._tau[-1]))
        return self._tau[l]

    def index(self, s: float) -> int:
        """n(s): the smallest l >= 1 with s <= tau_l."""
        if s < 0:
            raise ValueError("epoch index of a negative time")
        while self._tau[-1] < s:
            self.tau(len(self._tau))
        return max(bisect_left(self._tau, s), 1)

    def live_range(self, t: int) -> tuple:
        """Inclusive live epoch range [n(alpha*t), n(t)]."""
        return self.index(self.alpha * t), self.index(t)

    def epoch_length_weights(self, t: int) -> np.ndarray:
        """Live-epoch length fractions a_l (clipped at t); they sum to 1."""
        lo, hi = self.live_range(t)
        total = t - self.tau(lo - 1)
        return np.array(
            [(min(self.tau(l), t) - self.tau(l - 1)) / total for l in range(lo, hi + 1)]
        )


def epoch_index(schedule: EpochSchedule, s: float) -> int:
    """n(s) for a nonnegative real s; n(0) = 1."""
    return schedule.index(s)


@dataclass
class WindowEstimates:
    """All-epoch per-window estimates read from the ledger.

    ``N`` has shape (B, J); ``F[j]``, ``tilt[j]`` have shape (B, K_j) and
    ``psi[j]`` (B, K_j, M).  Windows with N = 0 are undefined: their F is
    NaN-free but flagged through ``visited``.  Rungs with no accumulated
    importance mass carry F = +inf.
    """

    N: np.ndarray
    F: list
    psi: list
    tilt: list

    @property
    def visited(self) -> np.ndarray:
        return self.N > 0


def importance_ratios(record: CycleRecord, weights: SamplingWeights, layout: WindowLayout) -> dict:
    """Log importance ratios per present window, shape (B, R, K_j).

    ratio = exp(-H_k(x)) / sum_l pi_{j;l} exp(F_{j;l} - H_l(x)) for the
    window the replica reported; -inf where the replica reported elsewhere.
    The denominator is 1 for windows (per batch element) with no estimates
    in the live history, and sums only over rungs with finite F.
    """
    out = {}
    for j in record.present_windows():
        energies = record.energies[j]
        infinite = np.isposinf(energies)
        with np.errstate(invalid="ignore"):
            logits = weights.window_logits(j)
            if logits is None:
                log_d = np.zeros(energies.shape[:2])
            else:
                while logits.ndim < energies.ndim:
                    logits = logits[:, None]
                terms = np.where(infinite, -np.inf, logits - energies)
                log_d = logsumexp(terms, axis=-1)
                defined = weights.defined[:, j]
                # the bootstrap convention (denominator 1) also applies pointwise when
                # no estimated rung of the window has mass at this state point
                log_d = np.where(defined[:, None] & np.isfinite(log_d), log_d, 0.0)
            log_r = np.where(infinite, -np.inf, -energies - log_d[..., None])
        log_r = np.where((record.window == j)[..., None], log_r, -np.inf)
        out[j] = log_r
    return out


class EpochLedger:
    """Per-window, per-live-epoch accumulations (single writer, once per cycle)."""

    def __init__(
        self,
        layout: WindowLayout,
        schedule: EpochSchedule,
        batch: int,
        psi_dim: int = 0,
        track_tilts: bool = True,
    ):
        self.layout = layout
        self.schedule = schedule
        self.B = int(batch)
        self.M = int(psi_dim)
        self.track_tilts = bool(track_tilts)
        self.live: list = []
        self._N = {}  # epoch -> list over windows of (B,)
        self._S = {}  # epoch -> list over windows of (B, K_j) log sums of ratios
        self._T = {}  # epoch -> list over windows of (B, K_j, M)
        self._U = {}  # epoch -> list over windows of (B, K_j)
        self._prefix = None
        self.t = 0

    # -- storage management -------------------------------------------------

    def _zero_blocks(self):
        sizes = [m.size for m in self.layout.members]
        return (
            [np.zeros(self.B) for _ in sizes],
            [np.full((self.B, size), -np.inf) for size in sizes],
            [np.zeros((self.B, size, self.M)) for size in sizes],
            [np.zeros((self.B, size)) for size in sizes],
        )

    def _rebuild_prefix(self):
        """Aggregates over all live epochs except the newest."""
        older = self.live[:-1]
        sizes = [m.size for m in self.layout.members]
        n = [np.zeros(self.B) for _ in sizes]
        s = [np.full((self.B, size), -np.inf) for size in sizes]
        tt = [np.zeros((self.B, size, self.M)) for size in sizes]
        u = [np.zeros((self.B, size)) for size in sizes]
        for l in older:
            for j in range(len(sizes)):
                n[j] += self._N[l][j]
                s[j] = np.logaddexp(s[j], self._S[l][j])
                tt[j] += self._T[l][j]
                u[j] += self._U[l][j]
        self._prefix = (n, s, tt, u)

    def roll_epochs(self, t: int):
        """Open epoch n(t) when t starts it; drop epochs older than n(alpha*t)."""
        self.t = int(t)
        sched = self.schedule
        current = sched.index(t)
        changed = False
        if t == sched.tau(current - 1) + 1:
            n, s, tt, u = self._zero_blocks()
            self._N[current], self._S[current] = n, s
            self._T[current], self._U[current] = tt, u
            self.live.append(current)
            changed = True
        if sched.alpha * (t - 1) > 0 and sched.index(sched.alpha * t) > sched.index(sched.alpha * (t - 1)):
            cutoff = sched.index(sched.alpha * t)
            while self.live and self.live[0] < cutoff:
                dead = self.live.pop(0)
                for store in (self._N, self._S, self._T, self._U):
                    del store[dead]
                changed = True
        if changed or self._prefix is None:
            self._rebuild_prefix()

    # -- per-cycle updates ----------------------------------------------------

    def increment_counters(self, record: CycleRecord, t: int):
        """Visit counters for epoch n(t); one count per replica record."""
        l = self.live[-1]
        for j in record.present_windows():
            self._N[l][j] += np.sum(record.window == j, axis=1)

    def update_epoch_fe(self, log_ratios: dict, t: int):
        """Fold this cycle's ratios into the newest epoch's free energies."""
        l = self.live[-1]
        for j, log_r in log_ratios.items():
            with np.errstate(invalid="ignore"):
                cycle_sum = logsumexp(log_r, axis=1)  # over replicas, fixed order
            self._S[l][j] = np.logaddexp(self._S[l][j], cycle_sum)

    def update_epoch_psi(self, log_ratios: dict, psi_tables: dict, t: int):
        """Fold ratio-weighted observables into the newest epoch."""
        l = self.live[-1]
        for j, log_r in log_ratios.items():
            weights = np.exp(log_r)  # (B, R, K_j); exp(-inf) = 0 for absent replicas
            self._T[l][j] += np.einsum("brk,brkm->bkm", weights, psi_tables[j])

    def update_epoch_tilts(self, record: CycleRecord, gamma: list, t: int):
        """Fold occupancy counts scaled by 1/gamma into the newest epoch.

        ``gamma`` holds the per-window rung densities available at the start
        of the cycle (the ones the cycle sampled under).
        """
        l = self.live[-1]
        for j in record.present_windows():
            members = self.layout.members[j]
            pos = self.layout.position[j][record.k]  # (B, R)
            hit = (record.window == j) & (pos >= 0)
            onehot = hit[..., None] & (np.where(pos < 0, members.size, pos)[..., None] == np.arange(members.size))
            counts = onehot.sum(axis=1)  # (B, K_j)
            self._U[l][j] += counts / gamma[j]

    # -- reads ----------------------------------------------------------------

    def _totals(self, skip: Optional[int] = None):
        J = self.layout.count
        if skip is None and self._prefix is not None and self.live:
            n0, s0, t0, u0 = self._prefix
            last = self.live[-1]
            n = [n0[j] + self._N[last][j] for j in range(J)]
            s = [np.logaddexp(s0[j], self._S[last][j]) for j in range(J)]
            tt = [t0[j] + self._T[last][j] for j in range(J)]
            u = [u0[j] + self._U[last][j] for j in range(J)]
            return n, s, tt, u
        n, s, tt, u = self._zero_blocks()
        for l in self.live:
            if l == skip:
                continue
            for j in range(J):
                n[j] += self._N[l][j]
                s[j] = np.logaddexp(s[j], self._S[l][j])
                tt[j] += self._T[l][j]
                u[j] += self._U[l][j]
        return n, s, tt, u

    def combine_epochs(self, skip: Optional[int] = None, need_psi: bool = True,
                       need_tilt: bool = True) -> WindowEstimates:
        """All-epoch window estimates; ``skip`` deletes one epoch (jackknife).

        ``need_psi`` / ``need_tilt`` elide the observable and tilt combines
        (per-cycle weight refreshes only consume F and the visit counts).
        """
        n, s, tt, u = self._totals(skip)
        J = self.layout.count
        N = np.stack(n, axis=1)  # (B, J)
        F, psi, tilt = [], [], []
        for j in range(J):
            visited = n[j] > 0
            safe_n = np.where(visited, n[j], 1.0)
            f = np.log(safe_n)[:, None] - s[j]  # +inf where no mass accumulated
            f = np.where(visited[:, None], f, 0.0)
            F.append(f)
            if self.M and need_psi:
                mass = np.exp(s[j])  # sum of ratios over the live history
                has_mass = np.isfinite(s[j])
                with np.errstate(invalid="ignore", divide="ignore"):
                    p = tt[j] / np.where(has_mass, mass, 1.0)[..., None]
                psi.append(np.where(has_mass[..., None], p, np.nan))
            else:
                psi.append(None)
            if need_tilt:
                tilt.append(u[j] / safe_n[:, None])
            else:
                tilt.append(None)
        return WindowEstimates(N=N, F=F, psi=psi, tilt=tilt)

    # -- serialization ----------------------------------------------------------

    def to_table(self) -> list:
        """Rows (batch, window, epoch, rung, N, logS, U, T...) for checkpointing."""
        rows = []
        for l in self.live:
            for j, members in enumerate(self.layout.members):
                for b in range(self.B):
                    for idx, k in enumerate(members):
                        rows.append(
                            [b, j, l, int(k), float(self._N[l][j][b]), float(self._S[l][j][b, idx]),
                             float(self._U[l][j][b, idx])]
                            + [float(v) for v in self._T[l][j][b, idx]]
                        )
        return rows

    def from_table(self, rows):
        """Restore accumulations dumped by ``to_table`` (same layout and shape)."""
        epochs = sorted({int(r[2]) for r in rows})
        self.live = []
        self._N.clear(), self._S.clear(), self._T.clear(), self._U.clear()
        for l in epochs:
            n, s, tt, u = self._zero_blocks()
            self._N[l], self._S[l], self._T[l], self._U[l] = n, s, tt, u
            self.live.append(l)
        for row in rows:
            b, j, l, k = int(row[0]), int(row[1]), int(row[2]), int(row[3])
            idx = self.layout.position[j][k]
            self._N[l][j][b] = row[4]
            self._S[l][j][b, idx] = row[5]
            self._U[l][j][b, idx] = row[6]
            for m in range(self.M):
                self._T[l][j][b, idx, m] = row[7 + m]
        self._rebuild_prefix()
