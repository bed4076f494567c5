"""Link-level rate models and path loss shared by the simulator and the reducer."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.stats import norm

SPEED_OF_LIGHT = 299_792_458.0
LN2 = float(np.log(2.0))


def dbm_to_watt(x_dbm: float) -> float:
    return 10.0 ** (x_dbm / 10.0) / 1000.0


@dataclass(frozen=True)
class RateModel:
    """Per-RB achievable rate model.

    ``shannon`` is the plain capacity formula.  ``finite_blocklength`` uses the
    normal approximation with channel dispersion ``V(s) = 1 - (1 + s)^-2`` and
    requires both ``blocklength`` and ``decode_error``.
    """

    kind: str = "shannon"
    blocklength: int | None = None
    decode_error: float | None = None

    def __post_init__(self):
        if self.kind == "shannon":
            if self.blocklength is not None or self.decode_error is not None:
                raise ValueError("shannon model takes no blocklength parameters")
        elif self.kind == "finite_blocklength":
            if self.blocklength is None or self.decode_error is None:
                raise ValueError("finite_blocklength needs blocklength and decode_error")
            if self.blocklength < 1:
                raise ValueError("blocklength must be >= 1")
            if not 0.0 < self.decode_error < 1.0:
                raise ValueError("decode_error must lie in (0, 1)")
        else:
            raise ValueError(f"unknown rate model {self.kind!r}")

    @property
    def is_shannon(self) -> bool:
        return self.kind == "shannon"

    @cached_property
    def backoff(self) -> float:
        """Q^-1(eps) / sqrt(n): the dispersion penalty scale (0 for Shannon)."""
        if self.is_shannon:
            return 0.0
        return float(norm.isf(self.decode_error)) / np.sqrt(self.blocklength)

    def spectral_efficiency(self, snr):
        """Bits/s/Hz at linear SNR ``snr`` (array-friendly, clamped at 0)."""
        snr = np.asarray(snr, dtype=float)
        cap = np.log2(1.0 + snr)
        if self.is_shannon:
            return cap
        disp = 1.0 - (1.0 + snr) ** -2
        return np.maximum(cap - np.sqrt(disp) * self.backoff / LN2, 0.0)


SHANNON = RateModel()


def rate_of(p, h, bandwidth: float, noise_power: float, model: RateModel = SHANNON):
    """Rate in bit/s of RB(s) with power ``p`` (W) and gain ``h``."""
    p = np.asarray(p, dtype=float)
    h = np.asarray(h, dtype=float)
    if np.any(p < 0) or np.any(h < 0):
        raise ValueError("power and gain must be nonnegative")
    return bandwidth * model.spectral_efficiency(p * h / noise_power)


def path_gain(distance_m, carrier_hz: float, exponent: float, d_ref: float = 1.0):
    """Mean power gain: free-space at ``d_ref`` then ``(d_ref/d)^exponent``.

    Distances below ``d_ref`` are clamped to ``d_ref``.
    """
    d = np.maximum(np.asarray(distance_m, dtype=float), d_ref)
    anchor = (SPEED_OF_LIGHT / (4.0 * np.pi * carrier_hz * d_ref)) ** 2
    return anchor * (d_ref / d) ** exponent
