"""Link budget: path loss, LoS-probability baseline, Shannon rate.

Channel gain is a negative dB quantity; received power (dBm) is transmit
power (dBm) plus gain (dB). SNR is formed in linear units after converting
from dBm. Rate uses the base-2 Shannon form so bits/s composes directly with
payloads in bits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import World, segment_blocked

SPEED_OF_LIGHT = 299792458.0

# Transmit power of 0 mW, as dBm.
POWER_OFF_DBM = float("-inf")

# Dense-urban sigmoid constants for the LoS-probability baseline.
DEFAULT_LOS_A = 9.61
DEFAULT_LOS_B = 0.16

MIN_LINK_DISTANCE = 1.0


@dataclass(frozen=True)
class LinkBudgetParams:
    f_c_hz: float = 2e9
    eps_los_db: float = 1.0
    eps_nlos_db: float = 20.0
    sigma2_dbm: float = -104.0
    p_max_dbm: float = 26.0
    p_min_dbm: float = -70.0
    bandwidth_hz: float = 1e6

    def __post_init__(self):
        if not self.eps_nlos_db > self.eps_los_db >= 0:
            raise ValueError("need eps_nlos > eps_los >= 0")

    @property
    def p_max_mw(self) -> float:
        return dbm_to_mw(self.p_max_dbm)


def dbm_to_mw(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0)


def mw_to_dbm(mw) -> float:
    if np.isscalar(mw) and mw == 0.0:
        return POWER_OFF_DBM
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(mw)


def free_space_loss_db(d_m, f_c_hz: float) -> float:
    """20*log10(4*pi*f*d/c); positive dB loss."""
    return 20.0 * np.log10(4.0 * math.pi * f_c_hz * np.asarray(d_m, dtype=float) / SPEED_OF_LIGHT)


def _distance(uav, gu) -> float:
    return float(np.linalg.norm(np.asarray(uav, dtype=float) - np.asarray(gu, dtype=float)))


def true_gain(uav: Sequence[float], gu: Sequence[float], world: World,
              params: LinkBudgetParams) -> float:
    """Ground-truth channel gain in dB at the given geometry.

    Free-space loss plus an excess term chosen by exact building occlusion.
    """
    d = _distance(uav, gu)
    if d < MIN_LINK_DISTANCE:
        raise ValueError(f"link distance {d:.3f} m below {MIN_LINK_DISTANCE} m guard")
    eps = params.eps_nlos_db if segment_blocked(uav, gu, world) else params.eps_los_db
    return -(float(free_space_loss_db(d, params.f_c_hz)) + eps)


def los_probability(uav: Sequence[float], gu: Sequence[float],
                    a: float = DEFAULT_LOS_A, b: float = DEFAULT_LOS_B) -> float:
    """Sigmoid LoS probability in the elevation angle (radians).

    The offset inside the exponent is the same constant ``a`` that scales the
    sigmoid; kept as-is deliberately, configurable via (a, b).
    """
    uav = np.asarray(uav, dtype=float)
    gu = np.asarray(gu, dtype=float)
    r = math.hypot(uav[0] - gu[0], uav[1] - gu[1])
    h = uav[2] - gu[2]
    elevation = math.atan2(h, r)  # r == 0 gives +-pi/2
    return 1.0 / (1.0 + a * math.exp(-b * (elevation - a)))


def expected_gain_los_model(uav: Sequence[float], gu: Sequence[float],
                            params: LinkBudgetParams,
                            a: float = DEFAULT_LOS_A, b: float = DEFAULT_LOS_B) -> float:
    """Probability-weighted mixture of the LoS and NLoS analytic path losses."""
    d = _distance(uav, gu)
    if d < MIN_LINK_DISTANCE:
        raise ValueError(f"link distance {d:.3f} m below {MIN_LINK_DISTANCE} m guard")
    fsl = float(free_space_loss_db(d, params.f_c_hz))
    p = los_probability(uav, gu, a, b)
    loss = p * (fsl + params.eps_los_db) + (1.0 - p) * (fsl + params.eps_nlos_db)
    return -loss


def rate_bps(gain_db: float, p_t_dbm: float, params: LinkBudgetParams) -> float:
    """Shannon rate in bits/s; transmit power 0 mW (-inf dBm) gives 0."""
    received_dbm = p_t_dbm + gain_db
    snr = 10.0 ** ((received_dbm - params.sigma2_dbm) / 10.0)
    return params.bandwidth_hz * math.log2(1.0 + snr)
