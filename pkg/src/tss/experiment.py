"""Config-driven experiment loop.

Runs T cycles of: sample (window swap, interleaved state/rung moves),
roll epochs, fold the cycle's records into the ledger, refresh the
sampling weights from the all-epoch estimates, and periodically emit
reported free energies and jackknife error bars.  Weights consumed by
cycle t are always the ones produced from data through cycle t - 1.

Several independent runs (seeds) execute in one vectorized batch through
the identical code path; the CLI uses a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import fastpath
from . import global_estimates as ge
from .config import ExperimentConfig
from .errors import InsufficientCoverage, jackknife_replicates
from .errors import mse as jackknife_mse
from .estimator import EpochLedger, EpochSchedule, WindowEstimates, importance_ratios
from .rngstream import ReplicaStreams
from .rung_density import conditional_density, gamma_regularized, gradient_observables, metric_from_psi, resolve_gamma
from .sampler import ReplicaState, SamplingWeights, run_cycle
from .windows import WindowLayout

__all__ = ["RunResult", "run_experiment"]


@dataclass
class TraceCycle:
    """One cycle's inputs and records, stored for recomputation oracles."""

    t: int
    epoch: int
    window: np.ndarray
    k: np.ndarray
    x: np.ndarray
    held: np.ndarray
    log_pi: list
    F: list
    defined: np.ndarray
    gamma: list


@dataclass
class RunResult:
    config: ExperimentConfig
    seeds: list
    estimates: Optional[WindowEstimates] = None
    reported: Optional[ge.ReportedEstimates] = None
    mse_final: dict = field(default_factory=dict)
    series_cycles: list = field(default_factory=list)
    series_reported: list = field(default_factory=list)
    series_mse: list = field(default_factory=list)
    pair_cycles: list = field(default_factory=list)
    pair_deltas: list = field(default_factory=list)
    pair_max_abs: Optional[np.ndarray] = None
    probe_sums: list = field(default_factory=list)
    probe_width: int = 0
    state: Optional[ReplicaState] = None
    trace: list = field(default_factory=list)
    used_fastpath: bool = False

    def reported_diff(self, k0: int, k1: int) -> np.ndarray:
        return self.reported.F[:, k1] - self.reported.F[:, k0]


def _initial_state(config, family, layout, streams) -> ReplicaState:
    B, R = streams.B, streams.R
    k = np.full((B, R), int(config.initial_rung), dtype=int)
    pair = layout.win[config.initial_rung]
    j = np.tile(pair[np.arange(R) % 2], (B, 1))
    if family.has_exact_sampler:
        kind = family.draw_kind
        z = streams.uniform(1)[..., 0] if kind == "uniform" else streams.normal(1)[..., 0]
        x = family.exact_draw(k, z)
    else:
        x = np.zeros((B, R))
    return ReplicaState(x=x, k=k, j=j)


def _pair_delta(est: WindowEstimates, layout: WindowLayout, k0: int, k1: int) -> np.ndarray:
    """Mean over visited windows of the in-window difference F(k1) - F(k0).

    Exact for coincident full-range layouts (the reported offsets cancel in
    the difference and the reported weights are equal), and defined for any
    layout whose windows all contain both rungs.
    """
    total = np.zeros(est.N.shape[0])
    count = np.zeros(est.N.shape[0])
    for j in range(layout.count):
        p0 = layout.position[j][k0]
        p1 = layout.position[j][k1]
        if p0 < 0 or p1 < 0:
            raise ValueError("tracked pair must belong to every window")
        diff = est.F[j][:, p1] - est.F[j][:, p0]
        good = est.visited[:, j] & np.isfinite(diff)
        total += np.where(good, diff, 0.0)
        count += good
    return np.where(count > 0, total / np.maximum(count, 1), np.nan)


class _BatchMeansProbe:
    """Accumulates non-overlapping window sums of gain-scaled increments.

    For the estimator difference D_s with updates D_{s+1} = D_s + g_s/(s+1),
    the window sum of g over (a, b] equals b*D_b - a*D_a - sum_{s in (a, b]} D_s
    shifted by one index; batch means of these sums estimate the integrated
    autocovariance, which is the t*Var limit of the difference estimator.
    """

    def __init__(self, start: int, width: int, batch: int):
        self.start = int(start)
        self.width = int(width)
        self._anchor_t = None
        self._anchor_delta = None
        self._running = np.zeros(batch)
        self.sums = []

    def observe(self, t: int, delta: np.ndarray):
        if t < self.start:
            return
        if self._anchor_t is None:
            self._anchor_t = t
            self._anchor_delta = delta.copy()
            self._running = delta.copy()
            return
        if t == self._anchor_t + self.width:
            m = t * delta - self._anchor_t * self._anchor_delta - self._running
            self.sums.append(m)
            self._anchor_t = t
            self._anchor_delta = delta.copy()
            self._running = delta.copy()
        else:
            self._running += delta


def _run_pair_fastpath(config, family, layout, seeds, *, track_pair, probe_start,
                       probe_width, collect_series) -> RunResult:
    """Adapt the compiled pair loop's output to the standard result shape."""
    want_deltas = bool(collect_series and track_pair is not None and config.cycles <= 200000)
    fast = fastpath.run_pair_fast(
        config, family, seeds,
        probe_start=probe_start or config.cycles // 2,
        probe_width=probe_width or 0,
        want_deltas=want_deltas,
    )
    result = RunResult(config=config, seeds=list(seeds), probe_width=probe_width or 0,
                       used_fastpath=True)
    visited = fast.N > 0
    F = []
    for w in range(2):
        log_n = np.where(visited[:, w], np.log(np.maximum(fast.N[:, w], 1.0)), 0.0)
        f = log_n[:, None] - fast.logS[:, w, :]
        F.append(np.where(visited[:, w : w + 1], f, 0.0))
    est = WindowEstimates(N=fast.N, F=F, psi=[None, None], tilt=[None, None])
    result.estimates = est
    gamma_fixed = conditional_density(resolve_gamma(config.gamma, family).fixed, layout)
    if np.any(visited):
        result.reported = ge.reported_fes(est.F, gamma_fixed, layout, visited)
    result.state = ReplicaState(fast.x[:, None], fast.k[:, None], fast.j[:, None])
    result.probe_sums = fast.probe_sums
    result.pair_max_abs = fast.max_abs_delta
    if want_deltas and fast.deltas is not None:
        step = config.report_every
        idx = list(range(step - 1, config.cycles, step))
        if config.cycles - 1 not in idx and config.cycles:
            idx.append(config.cycles - 1)
        result.pair_cycles = [i + 1 for i in idx]
        result.pair_deltas = [fast.deltas[:, i] for i in idx]
    return result


def run_experiment(
    config: ExperimentConfig,
    seeds=None,
    *,
    frozen_weights: Optional[SamplingWeights] = None,
    track_pair=None,
    probe_start: Optional[int] = None,
    probe_width: int = 0,
    record_trace: bool = False,
    track_tilts: Optional[bool] = None,
    collect_series: bool = True,
    writer=None,
    use_fastpath: str = "auto",
) -> RunResult:
    """Execute a configured run; ``seeds`` broadcasts it over a batch.

    ``frozen_weights`` disables adaptation (the sampler keeps the given
    weights for the whole run; the ledger still accumulates).  ``track_pair``
    records the estimator difference of two rungs every cycle from
    ``probe_start`` on, and ``probe_width`` > 0 additionally accumulates
    batch-means window sums for asymptotic-variance estimation.
    ``writer`` (CSV emission) is supplied by the CLI for single runs.
    ``use_fastpath`` selects the compiled two-rung loop ("auto", "never",
    "always"); it only ever replaces runs it reproduces exactly.
    """
    family = config.build_model()
    layout = config.build_layout(family)
    schedule = EpochSchedule(config.phi, config.alpha)
    gamma_spec = resolve_gamma(config.gamma, family)
    fisher = not gamma_spec.is_fixed
    if track_tilts is None:
        track_tilts = config.eta > 0
    track_tilts = track_tilts or record_trace

    seeds = [config.seed] if seeds is None else list(seeds)

    wants_fast = use_fastpath in ("auto", "always") and (
        frozen_weights is None and not record_trace and not track_tilts and writer is None
        and (track_pair is None or track_pair == (0, 1))
    )
    if wants_fast and fastpath.eligible(config, family, layout, fisher):
        return _run_pair_fastpath(
            config, family, layout, seeds,
            track_pair=track_pair, probe_start=probe_start, probe_width=probe_width,
            collect_series=collect_series,
        )
    if use_fastpath == "always":
        raise ValueError("this configuration is not supported by the compiled pair loop")

    B, R = len(seeds), config.replicas
    streams = ReplicaStreams(seeds, R)
    state = _initial_state(config, family, layout, streams)

    ledger = EpochLedger(layout, schedule, B, psi_dim=2 if fisher else 0,
                         track_tilts=track_tilts)
    psi_fn = gradient_observables(family, layout) if fisher else None
    volume = family.grid.volume

    if gamma_spec.is_fixed:
        gamma_fixed = conditional_density(gamma_spec.fixed, layout)
        gamma_current = gamma_fixed
    else:
        gamma_current = gamma_regularized(
            [np.zeros((B, m.size)) for m in layout.members], layout, volume, config.eps_gamma
        )

    weights = frozen_weights if frozen_weights is not None else SamplingWeights.undefined(layout, B)
    result = RunResult(config=config, seeds=seeds, probe_width=probe_width)
    probe = None
    if track_pair is not None and probe_width:
        probe = _BatchMeansProbe(probe_start or config.cycles // 2, probe_width, B)

    anchor = config.anchor_rung
    f_warm = None
    F_circ = None
    log_pi_cache = None
    pi_visited = np.zeros((B, layout.count), dtype=bool)
    prev_visited = pi_visited.copy()
    latest_mse = {}

    def gamma_for(est: WindowEstimates):
        if gamma_spec.is_fixed:
            return gamma_fixed
        dets = [metric_from_psi(est.psi[j]) for j in range(layout.count)]
        return gamma_regularized(dets, layout, volume, config.eps_gamma)

    def reported_solve(est: WindowEstimates):
        return ge.reported_fes(est.F, gamma_for(est), layout, est.visited)

    def compute_mse(est: WindowEstimates, reported, t):
        if len(ledger.live) < 2:
            return {}
        try:
            reps = jackknife_replicates(ledger, layout, reported_solve)
        except InsufficientCoverage:
            return {}
        a = schedule.epoch_length_weights(t)
        if len(a) != len(reps):
            return {}
        pairs = [(anchor, k) for k in range(layout.rung_count)]
        return jackknife_mse(reps, reported.F, a, pairs)

    est = ledger.combine_epochs()
    reported = None
    for t in range(1, config.cycles + 1):
        state, record = run_cycle(state, weights, layout, family, config.nu, config.n_md, streams)
        ledger.roll_epochs(t)
        ledger.increment_counters(record, t)
        log_r = importance_ratios(record, weights, layout)
        ledger.update_epoch_fe(log_r, t)
        if psi_fn is not None:
            psi_tables = {j: psi_fn(record.x, j) for j in record.present_windows()}
            ledger.update_epoch_psi(log_r, psi_tables, t)
        if track_tilts:
            ledger.update_epoch_tilts(record, gamma_current, t)
        est = ledger.combine_epochs(need_psi=fisher, need_tilt=track_tilts)
        gamma_new = gamma_for(est)
        visited = est.visited
        newly_visited = bool(np.any(visited & ~prev_visited))
        prev_visited = visited

        if record_trace:
            result.trace.append(TraceCycle(
                t=t, epoch=ledger.live[-1],
                window=record.window.copy(), k=record.k.copy(), x=record.x.copy(),
                held=record.held.copy(),
                log_pi=[None if lp is None else np.array(lp, copy=True) for lp in weights.log_pi],
                F=[None if fv is None else np.array(fv, copy=True) for fv in weights.F],
                defined=weights.defined.copy(),
                gamma=[np.array(g, copy=True) for g in gamma_current],
            ))

        if frozen_weights is None:
            if config.eta == 0:
                if log_pi_cache is None or not gamma_spec.is_fixed or newly_visited:
                    with np.errstate(divide="ignore"):
                        log_pi_cache = [np.log(g) for g in gamma_new]
                defined = visited.copy()
            else:
                if F_circ is None or t % config.global_every == 0:
                    try:
                        p = ge.window_marginals(gamma_new, est.tilt, layout, visited)
                        q = ge.rung_marginal(p, gamma_new, est.tilt, layout)
                        f_warm = ge.solve_offsets(
                            est.F, gamma_new, p, q, config.eta, layout, warm=f_warm
                        )
                    except ge.NonConvergence:
                        if writer is not None:
                            writer.checkpoint(ledger, t)
                        raise
                    F_circ = ge.visit_control_fes(est.F, gamma_new, p, q, f_warm, config.eta, layout)
                    log_pi_cache = ge.pi_tss(
                        est.F, F_circ, gamma_new, config.eta, config.eps_pi, layout, visited
                    )
                    pi_visited = visited.copy()
                # windows visited since the last solve have no weights yet; they hold
                defined = visited & pi_visited
            weights = SamplingWeights(log_pi=log_pi_cache, F=est.F, defined=defined)
        gamma_current = gamma_new

        if track_pair is not None:
            at_report = t % config.report_every == 0 or t == config.cycles
            in_probe = probe is not None and t >= probe.start
            if in_probe or (collect_series and at_report):
                delta = _pair_delta(est, layout, *track_pair)
                if in_probe:
                    probe.observe(t, delta)
                if collect_series and at_report:
                    result.pair_cycles.append(t)
                    result.pair_deltas.append(delta)

        need_report = t % config.report_every == 0 or t == config.cycles
        need_error = t % config.error_every == 0 or t == config.cycles
        if need_report or need_error:
            reported = reported_solve(est)
            if need_error:
                latest_mse = compute_mse(est, reported, t)
            if collect_series:
                result.series_cycles.append(t)
                result.series_reported.append(reported.F.copy())
                result.series_mse.append(dict(latest_mse))
            if writer is not None:
                writer.emit(t, state, reported, latest_mse)

    result.estimates = est
    result.reported = reported if reported is not None else (
        reported_solve(est) if np.any(est.visited) else None
    )
    result.mse_final = latest_mse
    result.state = state
    if probe is not None:
        result.probe_sums = probe.sums
    return result
