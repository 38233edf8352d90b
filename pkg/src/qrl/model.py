"""Physical model of the qubit and its dispersive readout chain.

Only the closed-form pieces live here: thermal equilibrium occupation of
a two-level system, the telegraph transition rates with and without the
measurement drive, and the calibration that maps mean cavity photon
number to per-bin signal-to-noise ratio.  Everything is a pure function
of its arguments, so the module is safe to use from any number of
workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from scipy import constants, special

__all__ = [
    "QubitParams",
    "ReadoutParams",
    "RatePair",
    "thermal_population",
    "effective_rates",
    "pointer_snr",
]

# h/k_B expressed in kelvin per gigahertz: converts a transition
# frequency into the temperature scale of its energy splitting.
K_PER_GHZ = constants.h / constants.k * 1e9

# Per-bin SNR of 6.5 at nbar = 14.6, the operating point at which the
# two pointer distributions overlap at roughly the 5e-4 level.
DEFAULT_SNR_CALIBRATION = 6.5 / math.sqrt(14.6)


@dataclass(frozen=True)
class QubitParams:
    """Relaxation, transition frequency, environment and control errors.

    Attributes:
        t1_us: intrinsic energy-relaxation time (microseconds).
        f01_ghz: qubit transition frequency (gigahertz).
        t_eff_mk: effective bath temperature (millikelvin).
        gamma_up_readout_per_us: measurement-induced upward transition
            rate while the readout drive is on (1/us).  The default
            corresponds to a ~0.2% excitation probability over the 90-ns
            equilibration window on top of the thermal upward rate.
        pi_pulse_error: probability that an inversion pulse leaves the
            state unchanged.
    """

    t1_us: float = 1.8
    f01_ghz: float = 7.80
    t_eff_mk: float = 88.0
    gamma_up_readout_per_us: float = 0.0143
    pi_pulse_error: float = 0.015

    def __post_init__(self) -> None:
        if not self.t1_us > 0:
            raise ValueError(f"t1_us must be positive, got {self.t1_us}")
        if not self.f01_ghz > 0:
            raise ValueError(f"f01_ghz must be positive, got {self.f01_ghz}")
        if self.t_eff_mk < 0:
            raise ValueError(f"t_eff_mk must be >= 0, got {self.t_eff_mk}")
        if not 0.0 <= self.pi_pulse_error < 1.0:
            raise ValueError(
                f"pi_pulse_error must be in [0, 1), got {self.pi_pulse_error}"
            )
        if self.gamma_up_readout_per_us < 0:
            raise ValueError(
                "gamma_up_readout_per_us must be >= 0, "
                f"got {self.gamma_up_readout_per_us}"
            )


@dataclass(frozen=True)
class ReadoutParams:
    """Measurement drive, digitizer and noise-model parameters.

    Attributes:
        nbar: mean cavity photon number while the drive is on.
        sample_dt_ns: digitization bin (nanoseconds).
        bandwidth_mhz: single-pole bandwidth of the cavity-plus-amplifier
            chain (megahertz).
        pointer_separation: distance between the two pointer-state means
            in normalized voltage units.
        snr_calibration: constant a in SNR(nbar) = a * sqrt(nbar).
        ringup_start_ns: default readout turn-on time used when building
            pulse sequences.
        equilibration_ns: time after turn-on at which the chain is
            considered settled; default placement of the first marker.
        backaction_knee: photon number above which the measurement
            degrades the relaxation time.
        backaction_exponent: exponent of the excess-decay power law
            above the knee.
    """

    nbar: float = 14.6
    sample_dt_ns: float = 10.0
    bandwidth_mhz: float = 7.0
    pointer_separation: float = 1.0
    snr_calibration: float = DEFAULT_SNR_CALIBRATION
    ringup_start_ns: float = 0.0
    equilibration_ns: float = 90.0
    backaction_knee: float = 100.0
    backaction_exponent: float = 1.0

    def __post_init__(self) -> None:
        if self.nbar < 0:
            raise ValueError(f"nbar must be >= 0, got {self.nbar}")
        if not self.sample_dt_ns > 0:
            raise ValueError(f"sample_dt_ns must be positive, got {self.sample_dt_ns}")
        if not self.bandwidth_mhz > 0:
            raise ValueError(
                f"bandwidth_mhz must be positive, got {self.bandwidth_mhz}"
            )
        if not self.pointer_separation > 0:
            raise ValueError(
                f"pointer_separation must be positive, got {self.pointer_separation}"
            )
        if not self.snr_calibration > 0:
            raise ValueError(
                f"snr_calibration must be positive, got {self.snr_calibration}"
            )
        if not self.backaction_knee > 0:
            raise ValueError(
                f"backaction_knee must be positive, got {self.backaction_knee}"
            )

    @property
    def tau_sys_ns(self) -> float:
        """Time constant of the single-pole chain response, 1/(2*pi*BW)."""
        return 1e3 / (2.0 * math.pi * self.bandwidth_mhz)

    @property
    def sigma_bin(self) -> float:
        """Per-bin noise standard deviation implied by the SNR calibration."""
        snr = pointer_snr(self)
        if snr <= 0:
            raise ValueError("per-bin SNR is zero; noise level is undefined")
        return self.pointer_separation / snr


@dataclass(frozen=True)
class RatePair:
    """Upward (excitation) and downward (decay) telegraph rates, 1/us."""

    gamma_up: float
    gamma_down: float

    def __post_init__(self) -> None:
        if self.gamma_up < 0 or self.gamma_down < 0:
            raise ValueError(
                f"rates must be >= 0, got ({self.gamma_up}, {self.gamma_down})"
            )


def thermal_population(qubit: QubitParams) -> float:
    """Equilibrium excited-state occupation of the two-level system.

    Returns exp(-hf/kT) / (1 + exp(-hf/kT)); exactly 0 at zero
    temperature and approaching 1/2 in the high-temperature limit.
    """
    if qubit.t_eff_mk == 0:
        return 0.0
    x = K_PER_GHZ * qubit.f01_ghz / (qubit.t_eff_mk * 1e-3)
    return float(special.expit(-x))


def effective_rates(
    qubit: QubitParams, readout: ReadoutParams, readout_on: bool
) -> RatePair:
    """Telegraph transition rates for one segment of a pulse sequence.

    With the drive off the pair obeys detailed balance against the
    thermal occupation: gamma_down = 1/T1 and
    gamma_up = gamma_down * p/(1-p).  With the drive on, the upward rate
    gains the measurement-induced term and the downward rate gains an
    excess (1/T1) * (nbar/n_knee - 1)^p that switches on above the knee,
    so the effective lifetime only degrades at high photon number.
    """
    p = thermal_population(qubit)
    gamma_down = 1.0 / qubit.t1_us
    gamma_up = gamma_down * p / (1.0 - p)
    if not readout_on:
        return RatePair(gamma_up=gamma_up, gamma_down=gamma_down)
    if readout.nbar < 0:
        raise ValueError(f"nbar must be >= 0, got {readout.nbar}")
    excess = max(0.0, readout.nbar / readout.backaction_knee - 1.0)
    gamma_down = gamma_down * (1.0 + excess**readout.backaction_exponent)
    gamma_up = gamma_up + qubit.gamma_up_readout_per_us
    return RatePair(gamma_up=gamma_up, gamma_down=gamma_down)


def pointer_snr(readout: ReadoutParams) -> float:
    """Per-bin signal-to-noise ratio, a * sqrt(nbar).

    The SNR is the pointer separation divided by the per-bin noise
    standard deviation; it vanishes at zero photon number and scales
    with the square root of the drive strength.
    """
    return readout.snr_calibration * math.sqrt(readout.nbar)
