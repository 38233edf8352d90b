"""Telegraph state paths and their rendering into noisy homodyne traces.

The hidden qubit state is a two-level continuous-time Markov process
with piecewise-constant rates set by the pulse sequence (herald drive
on, idle, main readout on).  Rendering maps the hidden path to a
band-limited voltage record: the instantaneous pointer level passes
through a single-pole filter that restarts from zero at every drive
turn-on, and stationary Gaussian noise with the same single-pole
autocorrelation is added on the digitizer grid.

Ensemble generation is deterministic: records are produced in
fixed-size chunks, each chunk drawing from a stream seeded by
(master_seed, prepared_label, chunk_index), so reruns are bit-identical
for any worker count.  ``run_sequence`` with the stream returned by
``ensemble_stream(master_seed, label, 0)`` reproduces record 0 of the
corresponding single-record ensemble exactly.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional, Sequence

import numpy as np
from scipy.signal import lfilter

from .model import (
    QubitParams,
    RatePair,
    ReadoutParams,
    effective_rates,
    pointer_snr,
    thermal_population,
)

__all__ = [
    "QubitState",
    "StatePath",
    "PulseSequence",
    "HomodyneTrace",
    "ExperimentRecord",
    "SimParams",
    "default_sequence",
    "heralded_sequence",
    "sample_initial_state",
    "simulate_state_path",
    "apply_pi_pulse",
    "render_homodyne",
    "run_sequence",
    "simulate_ensemble",
    "simulate_reset_shots",
    "ensemble_stream",
    "derive_seed",
]

_GRID_TOL = 1e-6  # ns; tolerance for "on the sample grid" checks


class QubitState(IntEnum):
    GROUND = 0
    EXCITED = 1

    def flipped(self) -> "QubitState":
        return QubitState(1 - self.value)


@dataclass(frozen=True)
class StatePath:
    """Hidden telegraph trajectory: initial state plus jump times.

    Transition times are strictly increasing within [0, duration) and
    consecutive transitions alternate state.
    """

    initial: QubitState
    transitions: tuple[tuple[float, QubitState], ...]
    duration_ns: float

    def __post_init__(self) -> None:
        prev_t = -math.inf
        prev_s = self.initial
        for t, s in self.transitions:
            if not 0.0 <= t <= self.duration_ns:
                raise ValueError(f"transition at {t} ns outside [0, {self.duration_ns}]")
            if t <= prev_t:
                raise ValueError("transition times must be strictly increasing")
            if s == prev_s:
                raise ValueError("consecutive transitions must alternate state")
            prev_t, prev_s = t, s

    def state_at(self, t_ns: float) -> QubitState:
        """State just after time t_ns."""
        state = self.initial
        for tt, ss in self.transitions:
            if tt > t_ns:
                break
            state = ss
        return state


@dataclass(frozen=True)
class PulseSequence:
    """Timing of one shot: optional herald, preparation pulse, readout.

    All markers lie on the digitizer grid.  The preparation pulse, when
    enabled, fires at the main readout turn-on.  t_a and t_b are the
    two-point correlation markers (t_b - t_a defaults to 160 ns) and
    t_d is the discrimination point.
    """

    readout_window: tuple[float, float]
    t_a: float
    t_b: float
    t_d: float
    herald_window: Optional[tuple[float, float]] = None
    t_s: Optional[float] = None
    prep_pi_pulse: bool = True

    @property
    def duration_ns(self) -> float:
        return self.readout_window[1]

    def validate(self, sample_dt_ns: float) -> None:
        r0, r1 = self.readout_window
        if not r0 < r1:
            raise ValueError(f"readout window {self.readout_window} is not ordered")
        if not (r0 <= self.t_a < self.t_b < r1):
            raise ValueError(
                f"markers t_a={self.t_a}, t_b={self.t_b} must be ordered inside "
                f"the readout window {self.readout_window}"
            )
        if not r0 <= self.t_d < r1:
            raise ValueError(f"t_d={self.t_d} outside readout window")
        if (self.herald_window is None) != (self.t_s is None):
            raise ValueError("herald_window and t_s must be given together")
        if self.herald_window is not None:
            h0, h1 = self.herald_window
            if not 0.0 <= h0 < h1 <= r0:
                raise ValueError(
                    f"herald window {self.herald_window} must precede readout"
                )
            if not h0 <= self.t_s < h1:
                raise ValueError(f"t_s={self.t_s} outside herald window")
        on_grid = [r0, r1, self.t_a, self.t_b, self.t_d]
        if self.herald_window is not None:
            on_grid += [*self.herald_window, self.t_s]
        for t in on_grid:
            if abs(t / sample_dt_ns - round(t / sample_dt_ns)) > _GRID_TOL:
                raise ValueError(f"time {t} ns is not on the {sample_dt_ns}-ns grid")


@dataclass(frozen=True, eq=False)
class HomodyneTrace:
    """Digitized voltage record; sample i is the value at time i*dt."""

    sample_dt_ns: float
    samples: np.ndarray
    readout_window: tuple[float, float]

    def index_of(self, t_ns: float) -> int:
        """Grid index of a marker time; rejects off-grid times."""
        idx = t_ns / self.sample_dt_ns
        if abs(idx - round(idx)) > _GRID_TOL:
            raise ValueError(f"time {t_ns} ns is not on the {self.sample_dt_ns}-ns grid")
        i = int(round(idx))
        if not 0 <= i < len(self.samples):
            raise ValueError(f"time {t_ns} ns outside the trace")
        return i


@dataclass(frozen=True, eq=False)
class ExperimentRecord:
    """One shot: sequence, rendered trace, hidden truth and intended label."""

    sequence: PulseSequence
    trace: HomodyneTrace
    truth: Optional[StatePath]
    prepared_label: QubitState


@dataclass(frozen=True)
class SimParams:
    """Everything needed to reproduce an ensemble."""

    qubit: QubitParams = QubitParams()
    readout: ReadoutParams = ReadoutParams()
    sequence: Optional[PulseSequence] = None
    n_traces: int = 100_000
    master_seed: int = 1234
    options: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.n_traces < 1:
            raise ValueError(f"n_traces must be >= 1, got {self.n_traces}")
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        if self.sequence is not None:
            self.sequence.validate(self.readout.sample_dt_ns)

    def resolved_sequence(self) -> PulseSequence:
        return self.sequence if self.sequence is not None else default_sequence(self.readout)


def default_sequence(
    readout: ReadoutParams,
    *,
    duration_ns: float = 600.0,
    ab_spacing_ns: float = 160.0,
    t_d_offset_ns: float = 0.0,
    include_pi: bool = True,
) -> PulseSequence:
    """Plain readout: turn-on at ringup_start, markers after equilibration."""
    r0 = readout.ringup_start_ns
    t_a = r0 + readout.equilibration_ns
    seq = PulseSequence(
        readout_window=(r0, r0 + duration_ns),
        t_a=t_a,
        t_b=t_a + ab_spacing_ns,
        t_d=t_a + t_d_offset_ns,
        prep_pi_pulse=include_pi,
    )
    seq.validate(readout.sample_dt_ns)
    return seq


def heralded_sequence(
    readout: ReadoutParams,
    *,
    herald_ns: float = 200.0,
    gap_ns: float = 70.0,
    duration_ns: float = 600.0,
    ab_spacing_ns: float = 160.0,
    t_d_offset_ns: float = 0.0,
) -> PulseSequence:
    """Herald pulse, idle gap, then preparation pulse and main readout.

    The herald is read one bin before its window closes; the gap leaves
    roughly three filter time constants between herald turn-off and the
    preparation pulse.
    """
    h1 = herald_ns
    r0 = h1 + gap_ns
    t_a = r0 + readout.equilibration_ns
    seq = PulseSequence(
        readout_window=(r0, r0 + duration_ns),
        t_a=t_a,
        t_b=t_a + ab_spacing_ns,
        t_d=t_a + t_d_offset_ns,
        herald_window=(0.0, h1),
        t_s=h1 - readout.sample_dt_ns,
        prep_pi_pulse=True,
    )
    seq.validate(readout.sample_dt_ns)
    return seq


# ---------------------------------------------------------------------------
# scalar operations


def sample_initial_state(p_exc: float, rng: np.random.Generator, size=None):
    """Draw the pre-sequence state from the thermal mixture.

    With ``size=None`` returns a single QubitState; otherwise a boolean
    array (True = excited) of the requested shape.
    """
    if not 0.0 <= p_exc <= 1.0:
        raise ValueError(f"p_exc must be in [0, 1], got {p_exc}")
    if size is None:
        return QubitState.EXCITED if rng.random() < p_exc else QubitState.GROUND
    return rng.random(size) < p_exc


def _evolve_scalar(excited, t0, t1, rates, rng, events):
    """Advance one lane through [t0, t1) under constant rates.

    Draws one uniform per attempted jump, mirroring the batched kernel
    draw-for-draw so that single records and lane 0 of a batch agree
    bit for bit.
    """
    gu = rates.gamma_up * 1e-3
    gd = rates.gamma_down * 1e-3
    t = t0
    while True:
        u = rng.random()
        rate = gd if excited else gu
        if rate <= 0.0:
            return excited
        t = t - math.log1p(-u) / rate
        if t >= t1:
            return excited
        excited = not excited
        events.append((t, QubitState.EXCITED if excited else QubitState.GROUND))


def simulate_state_path(
    initial: QubitState,
    rates_schedule: Sequence[tuple[float, float, RatePair]],
    duration_ns: float,
    rng: np.random.Generator,
) -> StatePath:
    """Exact continuous-time Markov sampling over piecewise-constant rates.

    ``rates_schedule`` is a list of (start_ns, end_ns, RatePair) segments
    that must tile [0, duration_ns] in order.  Waiting times are
    exponential within each segment and redrawn at segment boundaries,
    which is exact for a memoryless process.
    """
    if duration_ns <= 0:
        raise ValueError(f"duration must be positive, got {duration_ns}")
    cursor = 0.0
    for t0, t1, _ in rates_schedule:
        if abs(t0 - cursor) > _GRID_TOL or t1 <= t0:
            raise ValueError("rate schedule must tile [0, duration] in order")
        cursor = t1
    if abs(cursor - duration_ns) > _GRID_TOL:
        raise ValueError("rate schedule must cover the full duration")
    events: list[tuple[float, QubitState]] = []
    excited = initial == QubitState.EXCITED
    for t0, t1, rates in rates_schedule:
        excited = _evolve_scalar(excited, t0, t1, rates, rng, events)
    return StatePath(initial=initial, transitions=tuple(events), duration_ns=duration_ns)


def apply_pi_pulse(
    state: QubitState, error_prob: float, rng: np.random.Generator
) -> QubitState:
    """Instantaneous inversion pulse; fails (no flip) with error_prob."""
    if not 0.0 <= error_prob < 1.0:
        raise ValueError(f"error_prob must be in [0, 1), got {error_prob}")
    if rng.random() >= error_prob:
        return state.flipped()
    return state


# ---------------------------------------------------------------------------
# rendering


def _drive_mask_and_starts(sequence: PulseSequence, dt: float, n_grid: int):
    """Per-bin drive on/off mask and the turn-on bins of each drive window."""
    mask = np.zeros(n_grid, dtype=bool)
    starts = []
    windows = []
    if sequence.herald_window is not None:
        windows.append(sequence.herald_window)
    windows.append(sequence.readout_window)
    for w0, w1 in windows:
        b0 = int(round(w0 / dt))
        b1 = min(int(round(w1 / dt)), n_grid)
        mask[b0:b1] = True
        starts.append(b0)
    return mask, starts


def _occupancy(n_records, n_grid, dt, initial_excited, ev_idx, ev_time, ev_to_excited):
    """Excited-state fraction of each digitizer bin, exact in jump times.

    Built from the integral of the telegraph indicator: each jump adds a
    partial contribution to the bin it lands in and a full-bin step to
    every later bin.
    """
    occ = np.where(initial_excited[:, None], dt, 0.0) * np.ones((1, n_grid))
    if len(ev_time):
        sign = np.where(ev_to_excited, 1.0, -1.0)
        b = np.minimum((ev_time / dt).astype(np.int64), n_grid - 1)
        np.add.at(occ, (ev_idx, b), sign * ((b + 1) * dt - ev_time))
        inside = b + 1 < n_grid
        if inside.any():
            step = np.zeros((n_records, n_grid))
            np.add.at(step, (ev_idx[inside], b[inside] + 1), sign[inside])
            occ += np.cumsum(step, axis=1) * dt
    return np.clip(occ / dt, 0.0, 1.0)


def _render_batch(levels, start_bins, alpha, sigma, rng):
    """Single-pole filter per drive window plus AR(1) noise of unit pole."""
    n, n_grid = levels.shape
    sig = np.zeros_like(levels)
    bounds = sorted(start_bins) + [n_grid]
    for b0, b1 in zip(bounds[:-1], bounds[1:]):
        if b1 - b0 >= 2:
            sig[:, b0 + 1 : b1] = lfilter(
                [1.0 - alpha], [1.0, -alpha], levels[:, b0 : b1 - 1], axis=1
            )
    z = rng.standard_normal((n, n_grid))
    noise = np.empty_like(z)
    noise[:, 0] = z[:, 0]
    if n_grid > 1:
        scale = math.sqrt(1.0 - alpha * alpha)
        rest, _ = lfilter(
            [scale], [1.0, -alpha], z[:, 1:], axis=1, zi=(alpha * z[:, 0])[:, None]
        )
        noise[:, 1:] = rest
    return (sig + sigma * noise).astype(np.float32)


def render_homodyne(
    truth: StatePath,
    readout: ReadoutParams,
    sequence: PulseSequence,
    rng: np.random.Generator,
) -> HomodyneTrace:
    """Render one hidden path into a noisy, band-limited trace.

    The pointer level is +/- pointer_separation/2 while a drive window
    is on and zero otherwise; it passes through the single-pole system
    response, restarted from zero at each turn-on.  Noise is stationary
    Gaussian with standard deviation sigma_bin per sample and
    autocorrelation exp(-lag/tau_sys).
    """
    dt = readout.sample_dt_ns
    if truth.duration_ns + _GRID_TOL < sequence.duration_ns:
        raise ValueError("state path does not cover the pulse sequence")
    if pointer_snr(readout) <= 0:
        raise ValueError("per-bin SNR must be positive to render a readout window")
    n_grid = int(round(sequence.duration_ns / dt))
    ev_time = np.array([t for t, _ in truth.transitions])
    ev_to_exc = np.array([s == QubitState.EXCITED for _, s in truth.transitions], dtype=bool)
    ev_idx = np.zeros(len(ev_time), dtype=np.int64)
    keep = ev_time < n_grid * dt
    occ = _occupancy(
        1, n_grid, dt,
        np.array([truth.initial == QubitState.EXCITED]),
        ev_idx[keep], ev_time[keep], ev_to_exc[keep],
    )
    mask, starts = _drive_mask_and_starts(sequence, dt, n_grid)
    levels = readout.pointer_separation * (occ - 0.5) * mask[None, :]
    alpha = math.exp(-dt / readout.tau_sys_ns)
    traces = _render_batch(levels, starts, alpha, readout.sigma_bin, rng)
    return HomodyneTrace(
        sample_dt_ns=dt, samples=traces[0], readout_window=sequence.readout_window
    )


# ---------------------------------------------------------------------------
# composed sequences and ensembles


def _rate_segments(qubit, readout, sequence):
    """Piecewise-constant rate schedule implied by the pulse sequence."""
    on = effective_rates(qubit, readout, readout_on=True)
    idle = effective_rates(qubit, readout, readout_on=False)
    r0, r1 = sequence.readout_window
    pre = []
    if sequence.herald_window is not None:
        h0, h1 = sequence.herald_window
        if h0 > 0:
            pre.append((0.0, h0, idle))
        pre.append((h0, h1, on))
        if r0 > h1:
            pre.append((h1, r0, idle))
    elif r0 > 0:
        pre.append((0.0, r0, idle))
    return pre, (r0, r1, on)


def run_sequence(
    params: SimParams,
    sequence: PulseSequence,
    prepared_label: QubitState,
    rng: np.random.Generator,
) -> ExperimentRecord:
    """Simulate one shot: thermal start, herald segment, preparation, readout.

    Bit-identical to record 0 of a one-record ensemble generated with
    the same stream (see ``ensemble_stream``).
    """
    sequence.validate(params.readout.sample_dt_ns)
    p_th = thermal_population(params.qubit)
    state = sample_initial_state(p_th, rng)
    initial = state
    pre, (r0, r1, on) = _rate_segments(params.qubit, params.readout, sequence)
    events: list[tuple[float, QubitState]] = []
    excited = state == QubitState.EXCITED
    for t0, t1, rates in pre:
        excited = _evolve_scalar(excited, t0, t1, rates, rng, events)
    if prepared_label == QubitState.EXCITED and sequence.prep_pi_pulse:
        before = QubitState.EXCITED if excited else QubitState.GROUND
        after = apply_pi_pulse(before, params.qubit.pi_pulse_error, rng)
        if after != before:
            excited = after == QubitState.EXCITED
            events.append((r0, after))
    excited = _evolve_scalar(excited, r0, r1, on, rng, events)
    truth = StatePath(initial=initial, transitions=tuple(events), duration_ns=r1)
    trace = render_homodyne(truth, params.readout, sequence, rng)
    return ExperimentRecord(
        sequence=sequence, trace=trace, truth=truth, prepared_label=prepared_label
    )


def _evolve_batch(excited, t0, t1, rates, rng, ev_idx, ev_time, ev_to_exc):
    """Advance all lanes through [t0, t1); one uniform per lane per round."""
    n = excited.shape[0]
    gu = rates.gamma_up * 1e-3
    gd = rates.gamma_down * 1e-3
    t_cur = np.full(n, float(t0))
    active = np.ones(n, dtype=bool)
    while True:
        u = rng.random(n)
        rate = np.where(excited, gd, gu)
        with np.errstate(divide="ignore", invalid="ignore"):
            dwell = -np.log1p(-u) / rate
        t_next = t_cur + dwell
        jumped = active & (t_next < t1)
        if not jumped.any():
            return excited
        excited[jumped] = ~excited[jumped]
        idx = np.flatnonzero(jumped)
        ev_idx.append(idx)
        ev_time.append(t_next[jumped])
        ev_to_exc.append(excited[jumped])
        t_cur = t_next
        active = jumped


def _chunk_size(n_grid: int) -> int:
    return max(1, min(8192, 2_000_000 // max(1, n_grid)))


def derive_seed(master_seed: int, salt: int) -> int:
    """Deterministic 64-bit child seed for an independent stream family."""
    ss = np.random.SeedSequence([int(master_seed), int(salt)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def ensemble_stream(
    master_seed: int, label: QubitState, chunk_index: int = 0
) -> np.random.Generator:
    """Random stream feeding one chunk of an ensemble."""
    return np.random.default_rng(
        np.random.SeedSequence([int(master_seed), int(label), int(chunk_index)])
    )


def _simulate_chunk(qubit, readout, sequence, label, n, rng, keep_truth):
    """Vectorized kernel for one chunk of records.

    Draw order: initial-state uniforms, pre-readout jump rounds,
    preparation-pulse uniforms (excited label only), readout jump
    rounds, then the noise block.  Lane i consumes element i of every
    array draw, which makes each record a pure function of the stream
    and its lane.
    """
    dt = readout.sample_dt_ns
    if pointer_snr(readout) <= 0:
        raise ValueError("per-bin SNR must be positive to render a readout window")
    n_grid = int(round(sequence.duration_ns / dt))
    p_th = thermal_population(qubit)
    excited = rng.random(n) < p_th
    initial = excited.copy()
    pre, (r0, r1, on) = _rate_segments(qubit, readout, sequence)
    ev_idx: list[np.ndarray] = []
    ev_time: list[np.ndarray] = []
    ev_to_exc: list[np.ndarray] = []
    for t0, t1, rates in pre:
        excited = _evolve_batch(excited, t0, t1, rates, rng, ev_idx, ev_time, ev_to_exc)
    if label == QubitState.EXCITED and sequence.prep_pi_pulse:
        flip = rng.random(n) >= qubit.pi_pulse_error
        if flip.any():
            excited[flip] = ~excited[flip]
            ev_idx.append(np.flatnonzero(flip))
            ev_time.append(np.full(int(flip.sum()), float(r0)))
            ev_to_exc.append(excited[flip])
    excited = _evolve_batch(excited, r0, r1, on, rng, ev_idx, ev_time, ev_to_exc)
    flat_idx = np.concatenate(ev_idx) if ev_idx else np.empty(0, dtype=np.int64)
    flat_time = np.concatenate(ev_time) if ev_time else np.empty(0)
    flat_to_exc = np.concatenate(ev_to_exc) if ev_to_exc else np.empty(0, dtype=bool)
    occ = _occupancy(n, n_grid, dt, initial, flat_idx, flat_time, flat_to_exc)
    mask, starts = _drive_mask_and_starts(sequence, dt, n_grid)
    levels = readout.pointer_separation * (occ - 0.5) * mask[None, :]
    alpha = math.exp(-dt / readout.tau_sys_ns)
    traces = _render_batch(levels, starts, alpha, readout.sigma_bin, rng)
    truths = None
    if keep_truth:
        truths = _assemble_paths(n, initial, flat_idx, flat_time, flat_to_exc, r1)
    return traces, truths


def _assemble_paths(n, initial_excited, ev_idx, ev_time, ev_to_exc, duration):
    """Group flat, per-round event arrays into per-record StatePaths."""
    per_record: list[list[tuple[float, QubitState]]] = [[] for _ in range(n)]
    order = np.argsort(ev_time, kind="stable") if len(ev_time) else []
    for k in order:
        i = int(ev_idx[k])
        per_record[i].append(
            (float(ev_time[k]), QubitState.EXCITED if ev_to_exc[k] else QubitState.GROUND)
        )
    return [
        StatePath(
            initial=QubitState.EXCITED if initial_excited[i] else QubitState.GROUND,
            transitions=tuple(per_record[i]),
            duration_ns=duration,
        )
        for i in range(n)
    ]


def _chunk_task(args):
    qubit, readout, sequence, label, n, master_seed, chunk_index, keep_truth = args
    rng = ensemble_stream(master_seed, label, chunk_index)
    return _simulate_chunk(qubit, readout, sequence, label, n, rng, keep_truth)


_RESET_STREAM = 2  # stream tag distinct from the two prepared labels


def _reset_chunk(qubit, readout, sequence, threshold, excited_above, n, rng):
    """Conditional-reset kernel for one chunk of shots.

    Draw order: initial-state uniforms, the full noise block, herald-era
    jump rounds, inversion-pulse uniforms (applied only where the herald
    read excited), then readout-era jump rounds.  The noise is drawn up
    front because the herald decision needs the noise sample at t_s
    before the post-pulse truth exists.
    """
    dt = readout.sample_dt_ns
    if pointer_snr(readout) <= 0:
        raise ValueError("per-bin SNR must be positive to render a readout window")
    n_grid = int(round(sequence.duration_ns / dt))
    sigma = readout.sigma_bin
    alpha = math.exp(-dt / readout.tau_sys_ns)
    p_th = thermal_population(qubit)
    excited = rng.random(n) < p_th
    initial = excited.copy()
    z = rng.standard_normal((n, n_grid))
    noise = np.empty_like(z)
    noise[:, 0] = z[:, 0]
    if n_grid > 1:
        scale = math.sqrt(1.0 - alpha * alpha)
        rest, _ = lfilter(
            [scale], [1.0, -alpha], z[:, 1:], axis=1, zi=(alpha * z[:, 0])[:, None]
        )
        noise[:, 1:] = rest
    pre, (r0, r1, on) = _rate_segments(qubit, readout, sequence)
    ev_idx: list[np.ndarray] = []
    ev_time: list[np.ndarray] = []
    ev_to_exc: list[np.ndarray] = []
    for t0, t1, rates in pre:
        excited = _evolve_batch(excited, t0, t1, rates, rng, ev_idx, ev_time, ev_to_exc)
    # herald decision from the partially rendered trace at t_s
    mask, starts = _drive_mask_and_starts(sequence, dt, n_grid)
    pre_bins = int(round(r0 / dt))
    flat_idx = np.concatenate(ev_idx) if ev_idx else np.empty(0, dtype=np.int64)
    flat_time = np.concatenate(ev_time) if ev_time else np.empty(0)
    flat_to_exc = np.concatenate(ev_to_exc) if ev_to_exc else np.empty(0, dtype=bool)
    occ_pre = _occupancy(n, pre_bins, dt, initial, flat_idx, flat_time, flat_to_exc)
    levels_pre = readout.pointer_separation * (occ_pre - 0.5) * mask[None, :pre_bins]
    pre_starts = [b for b in starts if b < pre_bins]
    sig_pre = np.zeros_like(levels_pre)
    bounds = sorted(pre_starts) + [pre_bins]
    for b0, b1 in zip(bounds[:-1], bounds[1:]):
        if b1 - b0 >= 2:
            sig_pre[:, b0 + 1 : b1] = lfilter(
                [1.0 - alpha], [1.0, -alpha], levels_pre[:, b0 : b1 - 1], axis=1
            )
    ts_idx = int(round(sequence.t_s / dt))
    herald_value = sig_pre[:, ts_idx] + sigma * noise[:, ts_idx]
    read_excited = herald_value >= threshold if excited_above else herald_value < threshold
    u_pi = rng.random(n)
    flip = read_excited & (u_pi >= qubit.pi_pulse_error)
    if flip.any():
        excited[flip] = ~excited[flip]
        ev_idx.append(np.flatnonzero(flip))
        ev_time.append(np.full(int(flip.sum()), float(r0)))
        ev_to_exc.append(excited[flip])
    excited = _evolve_batch(excited, r0, r1, on, rng, ev_idx, ev_time, ev_to_exc)
    flat_idx = np.concatenate(ev_idx) if ev_idx else np.empty(0, dtype=np.int64)
    flat_time = np.concatenate(ev_time) if ev_time else np.empty(0)
    flat_to_exc = np.concatenate(ev_to_exc) if ev_to_exc else np.empty(0, dtype=bool)
    occ = _occupancy(n, n_grid, dt, initial, flat_idx, flat_time, flat_to_exc)
    levels = readout.pointer_separation * (occ - 0.5) * mask[None, :]
    sig = np.zeros_like(levels)
    bounds = sorted(starts) + [n_grid]
    for b0, b1 in zip(bounds[:-1], bounds[1:]):
        if b1 - b0 >= 2:
            sig[:, b0 + 1 : b1] = lfilter(
                [1.0 - alpha], [1.0, -alpha], levels[:, b0 : b1 - 1], axis=1
            )
    td_idx = int(round(sequence.t_d / dt))
    verify_value = sig[:, td_idx] + sigma * noise[:, td_idx]
    return verify_value, read_excited


def _reset_task(args):
    qubit, readout, sequence, threshold, excited_above, n, master_seed, ci = args
    rng = ensemble_stream(master_seed, _RESET_STREAM, ci)
    return _reset_chunk(qubit, readout, sequence, threshold, excited_above, n, rng)


def simulate_reset_shots(
    params: SimParams,
    sequence: PulseSequence,
    disc,
    n_shots: int,
    master_seed: int,
    *,
    n_workers: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Herald at t_s, invert on an excited reading, verify at t_d.

    Returns the verification voltages and the per-shot flag telling
    whether the conditional pulse fired.
    """
    if sequence.herald_window is None:
        raise ValueError("reset evaluation needs a sequence with a herald window")
    sequence.validate(params.readout.sample_dt_ns)
    n_grid = int(round(sequence.duration_ns / params.readout.sample_dt_ns))
    chunk = _chunk_size(n_grid)
    tasks = [
        (
            params.qubit,
            params.readout,
            sequence,
            float(disc.threshold),
            bool(disc.excited_above),
            min(chunk, n_shots - start),
            master_seed,
            ci,
        )
        for ci, start in enumerate(range(0, n_shots, chunk))
    ]
    if n_workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_reset_task, tasks))
    else:
        results = [_reset_task(t) for t in tasks]
    verify = np.concatenate([r[0] for r in results])
    pulsed = np.concatenate([r[1] for r in results])
    return verify, pulsed


def simulate_ensemble(
    params: SimParams,
    sequence: PulseSequence,
    label: QubitState,
    n_traces: int,
    master_seed: int,
    *,
    n_workers: int = 1,
    keep_truth: bool = True,
) -> list[ExperimentRecord]:
    """Generate independent records; deterministic for any worker count."""
    if n_traces < 1:
        raise ValueError(f"n_traces must be >= 1, got {n_traces}")
    sequence.validate(params.readout.sample_dt_ns)
    n_grid = int(round(sequence.duration_ns / params.readout.sample_dt_ns))
    chunk = _chunk_size(n_grid)
    tasks = [
        (
            params.qubit,
            params.readout,
            sequence,
            label,
            min(chunk, n_traces - start),
            master_seed,
            ci,
            keep_truth,
        )
        for ci, start in enumerate(range(0, n_traces, chunk))
    ]
    if n_workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_chunk_task, tasks))
    else:
        results = [_chunk_task(t) for t in tasks]
    records: list[ExperimentRecord] = []
    for (traces, truths) in results:
        for i in range(traces.shape[0]):
            records.append(
                ExperimentRecord(
                    sequence=sequence,
                    trace=HomodyneTrace(
                        sample_dt_ns=params.readout.sample_dt_ns,
                        samples=traces[i],
                        readout_window=sequence.readout_window,
                    ),
                    truth=truths[i] if truths is not None else None,
                    prepared_label=label,
                )
            )
    return records
