"""Windowed simulated-tempering kernels and the per-cycle orchestration.

All state carries a leading batch axis: ``x``, ``k``, ``j`` have shape
``(B, R)`` for B independent runs of R replicas each.  Replicas within a
run share only the immutable (weights, layout, family); the per-cycle
reduction over replicas happens in fixed order, so trajectories are
bit-reproducible for a given seed set and configuration.

A cycle is: one window swap, then nu repetitions of (state move, rung
move), all rung moves using the same frozen weights, then one energy
evaluation over the final active window per replica.  If the destination
window of the swap has no sampling estimates yet, the replica holds: the
rung stays put, rung moves are skipped for the whole cycle, state moves
still run, and the cycle's energy record targets the attempted destination
window so that its estimates become defined on the following cycle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .models import ModelFamily
from .rngstream import ReplicaStreams
from .windows import WindowLayout

__all__ = [
    "DegenerateDistribution",
    "ReplicaState",
    "SamplingWeights",
    "CycleRecord",
    "window_swap",
    "rung_move",
    "state_move",
    "run_cycle",
    "rung_log_probs",
]


class DegenerateDistribution(RuntimeError):
    """Every rung of the active window has zero sampling weight at the current state."""


@dataclass
class ReplicaState:
    """Replica triples (state point, rung, active window), batched (B, R)."""

    x: np.ndarray
    k: np.ndarray
    j: np.ndarray

    def copy(self) -> "ReplicaState":
        return ReplicaState(self.x.copy(), self.k.copy(), self.j.copy())


@dataclass
class SamplingWeights:
    """Frozen per-window sampling parameters consumed by one cycle.

    ``log_pi[j]`` and ``F[j]`` have shape (B, K_j) (broadcastable on the
    batch axis).  ``defined[b, j]`` marks windows whose estimates exist;
    swaps into undefined windows hold.  Within a defined window, rungs
    with non-finite F (no accumulated importance mass yet, possible with
    hard-wall models) are excluded from rung proposals and from the
    mixture denominator until they acquire mass.
    """

    log_pi: list
    F: list
    defined: np.ndarray
    _logits: dict = field(default_factory=dict, repr=False)

    @classmethod
    def undefined(cls, layout: WindowLayout, batch: int) -> "SamplingWeights":
        J = layout.count
        return cls(
            log_pi=[None] * J,
            F=[None] * J,
            defined=np.zeros((batch, J), dtype=bool),
        )

    def window_logits(self, j: int) -> Optional[np.ndarray]:
        """log(pi) + F over window j's rungs with excluded rungs at -inf (memoized)."""
        if j in self._logits:
            return self._logits[j]
        if self.log_pi[j] is None:
            out = None
        else:
            logits = self.log_pi[j] + self.F[j]
            out = np.where(np.isfinite(self.F[j]), logits, -np.inf)
        self._logits[j] = out
        return out


@dataclass
class CycleRecord:
    """Per-cycle energy records: one window and energy vector per replica.

    ``window[b, r]`` is the window whose Hamiltonians were evaluated at the
    replica's final state point (the active window, or the attempted
    destination while holding).  ``energies[j]`` has shape (B, R, K_j) and
    is populated for windows present in ``window``.
    """

    window: np.ndarray
    k: np.ndarray
    x: np.ndarray
    held: np.ndarray
    energies: dict = field(default_factory=dict)
    _present: list = None

    def present_windows(self):
        if self._present is None:
            self._present = sorted(set(self.window.ravel().tolist()))
        return self._present


def window_swap(state: ReplicaState, layout: WindowLayout, weights: SamplingWeights):
    """Deterministic swap to the other window of win(k), with Hold.

    Returns ``(new_j, held, destination)``: replicas whose destination
    window has undefined estimates keep their current window and are
    flagged held; the energy record targets the destination either way.
    """
    pair = layout.win[state.k]  # (B, R, 2)
    dest = pair[..., 0] + pair[..., 1] - state.j
    batch_idx = np.arange(state.j.shape[0])[:, None]
    held = ~weights.defined[batch_idx, dest]
    new_j = np.where(held, state.j, dest)
    return new_j, held, dest


def rung_log_probs(weights: SamplingWeights, j: int, energies: np.ndarray) -> np.ndarray:
    """Log-probabilities of the in-window rung Gibbs move, log-domain.

    ``energies`` holds H_k(x) for k in W_j (last axis).  Infinite energies
    and excluded rungs get probability exactly 0.
    """
    logits = weights.window_logits(j)
    while logits.ndim < energies.ndim:
        logits = logits[:, None]
    logits = logits - energies
    logits = np.where(np.isposinf(energies), -np.inf, logits)
    with np.errstate(invalid="ignore"):
        shift = np.max(logits, axis=-1, keepdims=True)
        norm = shift + np.log(np.sum(np.exp(logits - shift), axis=-1, keepdims=True))
    return logits - norm


def rung_move(
    state: ReplicaState,
    weights: SamplingWeights,
    family: ModelFamily,
    layout: WindowLayout,
    gumbels: np.ndarray,
    active: Optional[np.ndarray] = None,
    logit_cache: Optional[dict] = None,
) -> np.ndarray:
    """One in-window rung Gibbs move; returns the new rung array (B, R).

    Samples k' with probability proportional to pi_{j;k} exp(F_{j;k} - H_k(x))
    over the active window, via Gumbel-argmax on the log weights.  Replicas
    outside ``active`` keep their rung.  ``logit_cache`` shares the per-window
    log(pi) + F rows across the repeated moves of one cycle (the weights are
    frozen within a cycle).
    """
    if active is None:
        active = np.ones_like(state.k, dtype=bool)
    present = sorted(set(state.j[active].ravel().tolist()))
    new_k = None
    for j in present:
        members = layout.members[j]
        if logit_cache is not None and j in logit_cache:
            base = logit_cache[j]
        else:
            base = np.broadcast_to(weights.window_logits(j), (state.j.shape[0], members.size))
            if logit_cache is not None:
                logit_cache[j] = base
        whole = len(present) == 1 and bool(active.all())
        if whole:
            x, rows, noise = state.x, base[:, None, :], gumbels[..., : members.size]
        else:
            sel = active & (state.j == j)
            x = state.x[sel]
            rows = base[np.nonzero(sel)[0]]
            noise = gumbels[sel][:, : members.size]
        energies = family.energies(x, members)
        logits = np.where(np.isposinf(energies), -np.inf, rows - energies)
        stuck = np.all(np.isneginf(logits), axis=-1)
        choice = np.argmax(logits + noise, axis=-1)
        if np.any(stuck):
            if np.any(stuck & np.all(np.isposinf(energies), axis=-1)):
                raise DegenerateDistribution(
                    f"window {j}: every rung has infinite energy at the current state point"
                )
            # only unestimated rungs are admissible here (hard-wall bootstrap): hold the rung
        if whole:
            new_k = np.where(stuck, state.k, members[choice])
        else:
            if new_k is None:
                new_k = state.k.copy()
            new_k[sel] = np.where(stuck, state.k[sel], members[choice])
    return state.k.copy() if new_k is None else new_k


def state_move(
    state: ReplicaState,
    family: ModelFamily,
    n_steps: int,
    streams: ReplicaStreams,
) -> np.ndarray:
    """Advance the state points at fixed rungs; returns new x (B, R).

    With an exact sampler, one conditionally independent draw supersedes
    the kernel.  Otherwise applies ``n_steps`` kernel steps per replica.
    """
    if family.has_exact_sampler:
        kind = family.draw_kind
        z = streams.uniform(1)[..., 0] if kind == "uniform" else streams.normal(1)[..., 0]
        return family.exact_draw(state.k, z)
    x = state.x.copy()
    for b in range(x.shape[0]):
        for r in range(x.shape[1]):
            gen = streams.kernel_generator(b, r)
            xi = x[b, r]
            for _ in range(int(n_steps)):
                xi = family.kernel(int(state.k[b, r]), xi, gen)
            x[b, r] = xi
    return x


def run_cycle(
    state: ReplicaState,
    weights: SamplingWeights,
    layout: WindowLayout,
    family: ModelFamily,
    nu: int,
    n_md: int,
    streams: ReplicaStreams,
) -> tuple:
    """One full cycle for every replica; returns (new state, CycleRecord)."""
    if not family.has_exact_sampler:
        if nu and n_md % nu:
            raise ValueError(f"nu={nu} must divide n_md={n_md} for kernel-based families")
        steps = n_md // nu if nu else 0
    else:
        steps = 0

    new_j, held, dest = window_swap(state, layout, weights)
    state = ReplicaState(state.x, state.k, new_j)
    moving = ~held
    anyone_moving = bool(np.any(moving))
    gumbels = streams.gumbel(int(nu) * layout.max_size)
    logit_cache = {}
    for i in range(int(nu)):
        x = state_move(state, family, steps, streams)
        state = ReplicaState(x, state.k, state.j)
        if anyone_moving:
            noise = gumbels[..., i * layout.max_size : (i + 1) * layout.max_size]
            k = rung_move(state, weights, family, layout, noise,
                          active=moving, logit_cache=logit_cache)
            state = ReplicaState(state.x, k, state.j)

    record = CycleRecord(window=dest, k=state.k.copy(), x=state.x.copy(), held=held)
    for j in record.present_windows():
        record.energies[j] = family.energies(state.x, layout.members[j])
    return state, record
