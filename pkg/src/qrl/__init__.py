"""Desk-scale Monte Carlo toolkit for single-shot dispersive qubit readout.

Simulates telegraph quantum-jump trajectories, renders them into noisy
band-limited homodyne traces, and implements the full discrimination
and post-selection analysis chain: threshold and exponential-filter
fidelity, two-point purification, heralded state preparation, jump-rate
extraction, the fidelity loss budget and conditional-reset evaluation.
"""

from .model import (
    QubitParams,
    RatePair,
    ReadoutParams,
    effective_rates,
    pointer_snr,
    thermal_population,
)
from .trajectory import (
    ExperimentRecord,
    HomodyneTrace,
    PulseSequence,
    QubitState,
    SimParams,
    StatePath,
    apply_pi_pulse,
    default_sequence,
    derive_seed,
    ensemble_stream,
    heralded_sequence,
    render_homodyne,
    run_sequence,
    sample_initial_state,
    simulate_ensemble,
    simulate_state_path,
)
from .analysis import (
    BudgetEntry,
    Discriminator,
    FidelityBudget,
    FidelityResult,
    Histogram,
    JumpDirection,
    JumpEvent,
    RateExtraction,
    ResetResult,
    build_histogram,
    detect_jumps,
    evaluate_reset,
    exp_filter_integrate,
    extract_rates,
    extract_value,
    fidelity,
    fidelity_budget,
    herald_select,
    optimal_threshold,
    optimize_filter_constant,
    two_point_purify,
    values_at_time,
)
from .config import ConfigError, parse_config, serialize_config
from .experiments import EXPERIMENTS, ExperimentReport, run_experiment
from .traceio import TraceFormatError, export_traces, import_traces

__version__ = "0.1.0"
