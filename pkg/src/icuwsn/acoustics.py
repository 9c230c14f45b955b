"""Underwater acoustic propagation: absorption, attenuation, noise, SINR, rate.

Distances are in meters; the Thorp absorption is per kilometer with the
carrier frequency in kHz. Powers are in watts, and noise is expressed on the
same "watts at 1 m" scale that ``attenuation`` is referenced to.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np
from scipy import integrate

# Source level of a 1 W omnidirectional projector, dB re 1 uPa @ 1 m.
# Converts noise in uPa^2 onto the watts-at-1-m scale used for signals.
SOURCE_LEVEL_1W_DB = 170.8

# Thorp's fit is not meaningful below a few hundred Hz.
THORP_MIN_KHZ = 0.4


@dataclass(frozen=True)
class ConstantNoise:
    """Ambient noise fixed at ``power_w`` (watts-equivalent)."""

    power_w: float = 0.0

    def __post_init__(self):
        if not self.power_w >= 0:
            raise ValueError(f"noise power must be >= 0, got {self.power_w}")


@dataclass(frozen=True)
class SpectralNoise:
    """Four-source empirical noise spectrum (turbulence, shipping, wind, thermal).

    ``shipping`` is the shipping activity factor in [0, 1] and ``wind_mps`` the
    surface wind speed.
    """

    shipping: float = 0.5
    wind_mps: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.shipping <= 1.0:
            raise ValueError(f"shipping factor must be in [0, 1], got {self.shipping}")
        if not self.wind_mps >= 0:
            raise ValueError(f"wind speed must be >= 0, got {self.wind_mps}")


NoiseConfig = Union[ConstantNoise, SpectralNoise]


@dataclass(frozen=True)
class ChannelParams:
    carrier_freq_khz: float = 8.0
    bandwidth_hz: float = 3000.0
    spreading_factor_k: float = 1.5
    norm_const_a0: float = 1.0
    sound_speed_mps: float = 1500.0
    ambient_noise: NoiseConfig = field(default_factory=SpectralNoise)
    transducer_eff: float = 1.0

    def __post_init__(self):
        if not self.carrier_freq_khz > THORP_MIN_KHZ:
            raise ValueError(
                f"carrier_freq_khz must exceed {THORP_MIN_KHZ} kHz, got {self.carrier_freq_khz}"
            )
        if not self.bandwidth_hz > 0:
            raise ValueError(f"bandwidth_hz must be > 0, got {self.bandwidth_hz}")
        if self.bandwidth_hz / 2000.0 >= self.carrier_freq_khz:
            raise ValueError("band [f - B/2, f + B/2] must stay above 0 Hz")
        if not self.spreading_factor_k >= 1:
            raise ValueError(f"spreading_factor_k must be >= 1, got {self.spreading_factor_k}")
        if not self.norm_const_a0 > 0:
            raise ValueError(f"norm_const_a0 must be > 0, got {self.norm_const_a0}")
        if not self.sound_speed_mps > 0:
            raise ValueError(f"sound_speed_mps must be > 0, got {self.sound_speed_mps}")
        if not 0 < self.transducer_eff <= 1:
            raise ValueError(f"transducer_eff must be in (0, 1], got {self.transducer_eff}")


@dataclass(frozen=True)
class LinkGeometry:
    distance_m: float

    def __post_init__(self):
        if not (math.isfinite(self.distance_m) and self.distance_m > 0):
            raise ValueError(f"distance must be finite and > 0, got {self.distance_m}")


def _distance(geom):
    if isinstance(geom, LinkGeometry):
        return geom.distance_m
    return geom


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def linear_to_db(x):
    return 10.0 * np.log10(x)


def thorp_absorption_db_per_km(f_khz):
    """Thorp absorption coefficient in dB/km for a frequency in kHz."""
    f = np.asarray(f_khz, dtype=float)
    if np.any(f <= 0):
        raise ValueError("frequency must be > 0 kHz")
    f2 = f * f
    out = 0.11 * f2 / (1 + f2) + 44 * f2 / (4100 + f2) + 2.75e-4 * f2 + 0.003
    return float(out) if out.ndim == 0 else out


def attenuation(geom, ch: ChannelParams):
    """Linear path attenuation ``A0 * d^k * a(f)^(d/1000)``.

    ``geom`` may be a ``LinkGeometry``, a distance in meters, or an array of
    distances.
    """
    d = np.asarray(_distance(geom), dtype=float)
    alpha = thorp_absorption_db_per_km(ch.carrier_freq_khz)
    out = ch.norm_const_a0 * d ** ch.spreading_factor_k * 10.0 ** (alpha * d / 1000.0 / 10.0)
    return float(out) if out.ndim == 0 else out


def noise_psd_db(f_khz, shipping=0.5, wind_mps=0.0):
    """Total ambient noise psd in dB re 1 uPa^2/Hz (components summed in linear power)."""
    f = np.asarray(f_khz, dtype=float)
    lf = np.log10(f)
    turbulence = 17.0 - 30.0 * lf
    ships = 40.0 + 20.0 * (shipping - 0.5) + 26.0 * lf - 60.0 * np.log10(f + 0.03)
    waves = 50.0 + 7.5 * math.sqrt(wind_mps) + 20.0 * lf - 40.0 * np.log10(f + 0.4)
    thermal = -15.0 + 20.0 * lf
    total = sum(10.0 ** (c / 10.0) for c in (turbulence, ships, waves, thermal))
    return 10.0 * np.log10(total)


def ambient_noise_power(ch: ChannelParams) -> float:
    """Ambient noise power I_a over the signal band, in watts-equivalent."""
    noise = ch.ambient_noise
    if isinstance(noise, ConstantNoise):
        return float(noise.power_w)
    lo = ch.carrier_freq_khz - ch.bandwidth_hz / 2000.0
    hi = ch.carrier_freq_khz + ch.bandwidth_hz / 2000.0
    # psd is per Hz, integration variable in kHz
    band_upa2, _ = integrate.quad(
        lambda f: 10.0 ** (noise_psd_db(f, noise.shipping, noise.wind_mps) / 10.0), lo, hi
    )
    return band_upa2 * 1000.0 / 10.0 ** (SOURCE_LEVEL_1W_DB / 10.0)


def sinr(
    tx_power_w: float,
    link,
    interferers: Iterable[tuple[float, object]],
    ch: ChannelParams,
    external_noise_w: float = 0.0,
    ambient_w: float | None = None,
) -> float:
    """Received SINR (linear) of one link.

    ``interferers`` holds ``(power_w, geometry)`` for every other concurrent
    sender; ``external_noise_w`` is the already-attenuated interference I_s
    from foreign acoustic entities. ``ambient_w`` overrides I_a (computed from
    ``ch`` when omitted).
    """
    if tx_power_w < 0:
        raise ValueError("transmit power must be >= 0")
    eta = ch.transducer_eff
    signal = eta * tx_power_w / attenuation(link, ch)
    interference = 0.0
    for p, geom in interferers:
        if p < 0:
            raise ValueError("interferer power must be >= 0")
        if p > 0:
            interference += p / attenuation(geom, ch)
    ia = ambient_noise_power(ch) if ambient_w is None else ambient_w
    denom = eta * interference + external_noise_w + ia
    if tx_power_w == 0:
        return 0.0
    if denom == 0:
        raise ZeroDivisionError("SINR undefined: no noise or interference")
    return signal / denom


def achievable_rate(gamma, ch: ChannelParams, gamma_th: float):
    """Shannon rate in bps when ``gamma >= gamma_th``, else 0 (both linear)."""
    g = np.asarray(gamma, dtype=float)
    out = np.where(g >= gamma_th, ch.bandwidth_hz * np.log2(1.0 + np.maximum(g, 0.0)), 0.0)
    return float(out) if out.ndim == 0 else out


def slot_duration(t_tran_s: float, max_pair_distance_m: float, t_guard_s: float,
                  ch: ChannelParams) -> float:
    if min(t_tran_s, max_pair_distance_m, t_guard_s) < 0:
        raise ValueError("slot timing inputs must be >= 0")
    return t_tran_s + max_pair_distance_m / ch.sound_speed_mps + t_guard_s


def max_pair_distance(tx_positions: Sequence, rx_positions: Sequence) -> float:
    """Largest Euclidean distance over paired (tx, rx) positions."""
    tx = np.asarray(tx_positions, dtype=float).reshape(-1, 3)
    rx = np.asarray(rx_positions, dtype=float).reshape(-1, 3)
    if tx.size == 0:
        return 0.0
    return float(np.max(np.linalg.norm(tx - rx, axis=1)))
