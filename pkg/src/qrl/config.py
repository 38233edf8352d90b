"""Plain-text key=value configuration with dotted sections.

Every key is optional and documented with its default; unknown keys are
rejected with the offending line number (fail-closed), as are malformed
values and inconsistent windows.  ``serialize_config`` writes the full
resolved parameter set in a canonical order so that
``parse_config(serialize_config(p))`` reproduces ``p`` exactly.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Callable, Optional

from .model import QubitParams, ReadoutParams
from .trajectory import SimParams, default_sequence, heralded_sequence

__all__ = ["ConfigError", "parse_config", "serialize_config", "KEY_DOCS"]


class ConfigError(ValueError):
    """Configuration problem, carrying the line number when known."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


def _float(text: str) -> float:
    return float(text)


def _int(text: str) -> int:
    value = int(text, 0)
    return value


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("on", "true", "yes", "1"):
        return True
    if lowered in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def _float_list(text: str) -> tuple[float, ...]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated list of numbers")
    return tuple(float(p) for p in parts)


# key -> (caster, default, documentation)
KEY_DOCS: dict[str, tuple[Callable, object, str]] = {
    "qubit.t1_us": (_float, QubitParams.t1_us, "intrinsic relaxation time (us)"),
    "qubit.f01_ghz": (_float, QubitParams.f01_ghz, "qubit transition frequency (GHz)"),
    "qubit.t_eff_mk": (_float, QubitParams.t_eff_mk, "effective bath temperature (mK)"),
    "qubit.gamma_up_readout_per_us": (
        _float,
        QubitParams.gamma_up_readout_per_us,
        "measurement-induced upward rate while the drive is on (1/us)",
    ),
    "qubit.pi_pulse_error": (_float, QubitParams.pi_pulse_error, "inversion-pulse failure probability"),
    "readout.nbar": (_float, ReadoutParams.nbar, "mean cavity photon number"),
    "readout.sample_dt_ns": (_float, ReadoutParams.sample_dt_ns, "digitizer bin (ns)"),
    "readout.bandwidth_mhz": (_float, ReadoutParams.bandwidth_mhz, "single-pole system bandwidth (MHz)"),
    "readout.pointer_separation": (
        _float,
        ReadoutParams.pointer_separation,
        "distance between pointer-state means (normalized volts)",
    ),
    "readout.snr_calibration": (
        _float,
        ReadoutParams.snr_calibration,
        "constant a in SNR = a*sqrt(nbar)",
    ),
    "readout.ringup_start_ns": (_float, ReadoutParams.ringup_start_ns, "default readout turn-on (ns)"),
    "readout.equilibration_ns": (
        _float,
        ReadoutParams.equilibration_ns,
        "settling time after turn-on; first marker offset (ns)",
    ),
    "readout.backaction_knee": (
        _float,
        ReadoutParams.backaction_knee,
        "photon number above which the lifetime degrades",
    ),
    "readout.backaction_exponent": (
        _float,
        ReadoutParams.backaction_exponent,
        "exponent of the excess-decay law above the knee",
    ),
    "sequence.herald": (_bool, False, "insert a herald pulse before preparation (on/off)"),
    "sequence.herald_len_ns": (_float, 200.0, "herald pulse length (ns)"),
    "sequence.gap_ns": (_float, 70.0, "idle gap between herald and preparation (ns)"),
    "sequence.duration_ns": (_float, 600.0, "main readout window length (ns)"),
    "sequence.ab_spacing_ns": (_float, 160.0, "two-point marker spacing t_b - t_a (ns)"),
    "sequence.t_d_offset_ns": (_float, 0.0, "discrimination point offset from t_a (ns)"),
    "sequence.pi_pulse": (_bool, True, "apply the preparation pulse for excited-state shots"),
    "run.n_traces": (_int, 100_000, "records per ensemble"),
    "run.master_seed": (_int, 1234, "64-bit master seed"),
    "sweep.nbar_grid": (
        _float_list,
        (1.0, 3.7, 10.0, 14.6, 37.8, 100.0, 400.0),
        "photon numbers for the power sweep",
    ),
    "sweep.duration_ns": (_float, 1200.0, "readout window length for the power sweep (ns)"),
    "jumps.n_traces": (_int, 120, "long traces for jump statistics"),
    "jumps.duration_us": (_float, 700.0, "length of each long trace (us)"),
    "jumps.hysteresis_sigmas": (_float, 6.0, "detector hysteresis band, full width in sigma_bin"),
    "purify.eval_offset_ns": (
        _float,
        80.0,
        "offset from t_a of the decorrelated evaluation bin for purified overlap",
    ),
    "reset.n_shots": (_int, 0, "shots for the reset experiment (0: use run.n_traces)"),
}

_SEQUENCE_KEYS = (
    "sequence.herald",
    "sequence.herald_len_ns",
    "sequence.gap_ns",
    "sequence.duration_ns",
    "sequence.ab_spacing_ns",
    "sequence.t_d_offset_ns",
    "sequence.pi_pulse",
)

_OPTION_KEYS = (
    "sweep.nbar_grid",
    "sweep.duration_ns",
    "jumps.n_traces",
    "jumps.duration_us",
    "jumps.hysteresis_sigmas",
    "purify.eval_offset_ns",
    "reset.n_shots",
)


def parse_config(text: str) -> SimParams:
    """Parse the documented key=value format into simulation parameters."""
    raw: dict[str, object] = {}
    seen_lines: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", lineno)
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in KEY_DOCS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in seen_lines:
            raise ConfigError(
                f"duplicate key {key!r} (first set on line {seen_lines[key]})", lineno
            )
        seen_lines[key] = lineno
        caster = KEY_DOCS[key][0]
        try:
            raw[key] = caster(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", lineno) from None

    def get(key: str):
        return raw.get(key, KEY_DOCS[key][1])

    def build(section: str, cls):
        kwargs = {
            key.split(".", 1)[1]: get(key)
            for key in KEY_DOCS
            if key.startswith(section + ".")
        }
        try:
            return cls(**kwargs)
        except ValueError as exc:
            offender = next(
                (k for k in seen_lines if k.startswith(section + ".")), None
            )
            raise ConfigError(str(exc), seen_lines.get(offender)) from None

    qubit = build("qubit", QubitParams)
    readout = build("readout", ReadoutParams)
    try:
        if get("sequence.herald"):
            sequence = heralded_sequence(
                readout,
                herald_ns=get("sequence.herald_len_ns"),
                gap_ns=get("sequence.gap_ns"),
                duration_ns=get("sequence.duration_ns"),
                ab_spacing_ns=get("sequence.ab_spacing_ns"),
                t_d_offset_ns=get("sequence.t_d_offset_ns"),
            )
        else:
            sequence = default_sequence(
                readout,
                duration_ns=get("sequence.duration_ns"),
                ab_spacing_ns=get("sequence.ab_spacing_ns"),
                t_d_offset_ns=get("sequence.t_d_offset_ns"),
                include_pi=get("sequence.pi_pulse"),
            )
    except ValueError as exc:
        offender = next((k for k in seen_lines if k.startswith("sequence.")), None)
        raise ConfigError(str(exc), seen_lines.get(offender)) from None
    n_traces = get("run.n_traces")
    master_seed = get("run.master_seed")
    if n_traces < 1:
        raise ConfigError("run.n_traces must be >= 1", seen_lines.get("run.n_traces"))
    if not 0 <= master_seed < 2**64:
        raise ConfigError(
            "run.master_seed must be a 64-bit unsigned integer",
            seen_lines.get("run.master_seed"),
        )
    options = {key: get(key) for key in _OPTION_KEYS}
    options.update({key: get(key) for key in _SEQUENCE_KEYS})
    return SimParams(
        qubit=qubit,
        readout=readout,
        sequence=sequence,
        n_traces=n_traces,
        master_seed=master_seed,
        options=options,
    )


def serialize_config(params: SimParams) -> str:
    """Canonical text form of the resolved parameters."""
    values = {
        "qubit.t1_us": params.qubit.t1_us,
        "qubit.f01_ghz": params.qubit.f01_ghz,
        "qubit.t_eff_mk": params.qubit.t_eff_mk,
        "qubit.gamma_up_readout_per_us": params.qubit.gamma_up_readout_per_us,
        "qubit.pi_pulse_error": params.qubit.pi_pulse_error,
        "readout.nbar": params.readout.nbar,
        "readout.sample_dt_ns": params.readout.sample_dt_ns,
        "readout.bandwidth_mhz": params.readout.bandwidth_mhz,
        "readout.pointer_separation": params.readout.pointer_separation,
        "readout.snr_calibration": params.readout.snr_calibration,
        "readout.ringup_start_ns": params.readout.ringup_start_ns,
        "readout.equilibration_ns": params.readout.equilibration_ns,
        "readout.backaction_knee": params.readout.backaction_knee,
        "readout.backaction_exponent": params.readout.backaction_exponent,
        "run.n_traces": params.n_traces,
        "run.master_seed": params.master_seed,
    }
    options = dict(params.options)
    for key in _SEQUENCE_KEYS + _OPTION_KEYS:
        value = options.get(key, KEY_DOCS[key][1])
        values[key] = value
    lines = []
    for key in KEY_DOCS:
        value = values[key]
        if isinstance(value, bool):
            text = "on" if value else "off"
        elif isinstance(value, tuple):
            text = ", ".join(repr(x) for x in value)
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
