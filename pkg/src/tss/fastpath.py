"""Compiled cycle loop for two-rung exact-sampler pairs.

Million-cycle, many-seed runs of the uniform/identical pair (coincident
full-range windows, no visit control, full history) are dominated by
per-call overhead in the generic vectorized loop.  This module replays the
exact same cycle semantics -- swap with hold bootstrap, nu interleaved
(exact draw, rung move) pairs under frozen weights, one energy record per
cycle, log-domain ledger accumulation, weight refresh -- in a numba kernel
that consumes the identical randomness stream, and is cross-checked
against the generic path by an equivalence test.  The generic path is used
automatically whenever numba is unavailable or the run does not fit.
"""

from __future__ import annotations

import numpy as np

from .config import ExperimentConfig
from .models import ModelFamily
from .rngstream import ReplicaStreams

try:  # pragma: no cover - exercised implicitly
    from numba import njit

    HAVE_NUMBA = True
except Exception:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap

__all__ = ["HAVE_NUMBA", "eligible", "run_pair_fast"]

_LOG_HALF = float(np.log(0.5))
_INF = np.inf


def eligible(config: ExperimentConfig, family: ModelFamily, layout, fisher: bool) -> bool:
    """True when the compiled pair loop reproduces the configured run."""
    return (
        HAVE_NUMBA
        and family.name in ("uniform_pair", "identical_pair")
        and family.count == 2
        and config.replicas == 1
        and config.eta == 0.0
        and config.alpha == 0.0
        and not fisher
        and layout.count == 2
        and all(m.size == 2 for m in layout.members)
    )


@njit(cache=True)
def _pair_chunk(
    t0, cycles, nu,
    uniforms,            # (B, cycles * (1 + 2*nu))
    lo, hi,              # (2,) support bounds per rung
    x, k, j,             # (B,) state
    defined,             # (B, 2) uint8
    logS, N, Fw,         # (B,2,2), (B,2), (B,2,2) ledger and weights
    probe_start, probe_width,
    probe_anchor_t, probe_anchor, probe_running,  # (B,) probe state (anchor_t scalar array)
    probe_out,           # (B, max_emits)
    probe_count,         # (1,) number of emitted windows
    max_abs_delta,       # (B,)
    deltas_out,          # (B, cycles) per-cycle differences (written when wanted)
    want_deltas,
):
    B = x.shape[0]
    per_cycle = 3 * nu  # 2*nu gumbel uniforms then nu state draws
    for c in range(cycles):
        t = t0 + c
        probing = probe_width > 0 and t >= probe_start
        p_init = probing and probe_anchor_t[0] < 0
        p_boundary = probing and (not p_init) and t == probe_anchor_t[0] + probe_width
        for b in range(B):
            # the generic loop draws the cycle's gumbel block first, then one
            # state draw per repetition; consume in the same order
            gumbel_base = c * per_cycle
            state_base = gumbel_base + 2 * nu
            dest = 1 - j[b]
            held = defined[b, dest] == 0
            if not held:
                j[b] = dest
            jj = j[b]
            for i in range(nu):
                z = uniforms[b, state_base + i]
                x[b] = lo[k[b]] + z
                u0 = uniforms[b, gumbel_base + 2 * i]
                u1 = uniforms[b, gumbel_base + 2 * i + 1]
                if held:
                    continue
                g0 = -np.log(-np.log(u0))
                g1 = -np.log(-np.log(u1))
                xi = x[b]
                s0 = -_INF
                s1 = -_INF
                if lo[0] <= xi <= hi[0] and np.isfinite(Fw[b, jj, 0]):
                    s0 = _LOG_HALF + Fw[b, jj, 0] + g0
                if lo[1] <= xi <= hi[1] and np.isfinite(Fw[b, jj, 1]):
                    s1 = _LOG_HALF + Fw[b, jj, 1] + g1
                if s0 == -_INF and s1 == -_INF:
                    pass  # only unestimated rungs admissible: hold the rung
                elif s1 > s0:
                    k[b] = 1
                else:
                    k[b] = 0
            # energy record for the destination window at the final state point
            xi = x[b]
            in0 = lo[0] <= xi <= hi[0]
            in1 = lo[1] <= xi <= hi[1]
            N[b, dest] += 1.0
            log_d = 0.0
            if defined[b, dest]:
                acc = -_INF
                if in0 and np.isfinite(Fw[b, dest, 0]):
                    acc = _LOG_HALF + Fw[b, dest, 0]
                if in1 and np.isfinite(Fw[b, dest, 1]):
                    acc = np.logaddexp(acc, _LOG_HALF + Fw[b, dest, 1])
                if acc > -_INF:
                    log_d = acc
            if in0:
                logS[b, dest, 0] = np.logaddexp(logS[b, dest, 0], -log_d)
            if in1:
                logS[b, dest, 1] = np.logaddexp(logS[b, dest, 1], -log_d)
            defined[b, dest] = 1
            # weight refresh: F = log(N) - logS per visited window
            for w in range(2):
                if N[b, w] > 0:
                    log_n = np.log(N[b, w])
                    Fw[b, w, 0] = log_n - logS[b, w, 0]
                    Fw[b, w, 1] = log_n - logS[b, w, 1]
            # tracked pair difference: mean over visited windows of finite diffs
            total = 0.0
            good = 0
            for w in range(2):
                if N[b, w] > 0:
                    d = Fw[b, w, 1] - Fw[b, w, 0]
                    if np.isfinite(d):
                        total += d
                        good += 1
            delta = total / good if good > 0 else np.nan
            if want_deltas:
                deltas_out[b, c] = delta
            if np.isfinite(delta) and abs(delta) > max_abs_delta[b]:
                max_abs_delta[b] = abs(delta)
            if probing:
                if p_init:
                    probe_anchor[b] = delta
                    probe_running[b] = delta
                elif p_boundary:
                    m = t * delta - probe_anchor_t[0] * probe_anchor[b] - probe_running[b]
                    probe_out[b, probe_count[0]] = m
                    probe_anchor[b] = delta
                    probe_running[b] = delta
                else:
                    probe_running[b] += delta
        if p_init:
            probe_anchor_t[0] = t
        elif p_boundary:
            probe_anchor_t[0] = t
            probe_count[0] += 1
    return t0 + cycles


class FastPairResult:
    def __init__(self, N, logS, Fw, x, k, j, probe_sums, max_abs_delta, deltas):
        self.N = N
        self.logS = logS
        self.Fw = Fw
        self.x = x
        self.k = k
        self.j = j
        self.probe_sums = probe_sums
        self.max_abs_delta = max_abs_delta
        self.deltas = deltas


def run_pair_fast(
    config: ExperimentConfig,
    family: ModelFamily,
    seeds,
    probe_start: int = 0,
    probe_width: int = 0,
    want_deltas: bool = False,
    chunk: int = 4096,
) -> FastPairResult:
    """Run the compiled pair loop; mirrors run_experiment's hot configuration."""
    if family.name == "uniform_pair":
        d = family.params["delta"]
        lo = np.array([-1.0 + d, -d])
        hi = np.array([d, 1.0 - d])
    else:
        lo = np.array([0.0, 0.0])
        hi = np.array([1.0, 1.0])

    B = len(seeds)
    nu = int(config.nu)
    T = int(config.cycles)
    streams = ReplicaStreams(seeds, 1)

    k = np.full(B, int(config.initial_rung), dtype=np.int64)
    j = np.zeros(B, dtype=np.int64)  # replica 0 starts in the first window of win(k)
    z = streams.uniform(1)[:, 0, 0]
    x = lo[k] + z

    defined = np.zeros((B, 2), dtype=np.uint8)
    logS = np.full((B, 2, 2), -np.inf)
    N = np.zeros((B, 2))
    Fw = np.full((B, 2, 2), np.inf)

    max_emits = (T // probe_width + 2) if probe_width else 1
    probe_out = np.zeros((B, max_emits))
    probe_count = np.zeros(1, dtype=np.int64)
    probe_anchor_t = np.full(1, -1, dtype=np.int64)
    probe_anchor = np.zeros(B)
    probe_running = np.zeros(B)
    max_abs_delta = np.zeros(B)
    deltas = np.zeros((B, T if want_deltas else 1))

    per_cycle = 3 * nu
    t = 1
    done = 0
    while done < T:
        n = min(chunk, T - done)
        u = streams.uniform(n * per_cycle)[:, 0, :]
        delt = deltas[:, done : done + n] if want_deltas else np.zeros((B, 1))
        t = _pair_chunk(
            t, n, nu, u, lo, hi, x, k, j, defined, logS, N, Fw,
            probe_start, probe_width,
            probe_anchor_t, probe_anchor, probe_running,
            probe_out, probe_count, max_abs_delta,
            delt, want_deltas,
        )
        done += n
    sums = [probe_out[:, i].copy() for i in range(int(probe_count[0]))]
    return FastPairResult(N, logS, Fw, x, k, j, sums, max_abs_delta, deltas if want_deltas else None)
