"""Bang-bang transmit power selection from prediction intervals.

Transmit at max power only when the predicted link both clears the receive
threshold (sufficient) and the ensemble members agree tightly enough to be
trusted (credible); otherwise stay silent and save the energy.
"""

from __future__ import annotations

from dataclasses import dataclass

from .channel import POWER_OFF_DBM, LinkBudgetParams


@dataclass(frozen=True)
class SchedulerConfig:
    width_threshold_db: float = 6.0
    enabled: bool = True
    # Compare the median gain against (p_max - p_min) directly instead of the
    # link-budget form. With negative gains this branch never transmits; kept
    # selectable for comparison runs.
    literal_threshold: bool = False

    def __post_init__(self):
        if self.width_threshold_db <= 0:
            raise ValueError("width_threshold_db must be > 0")


def schedule_power(interval: dict, config: SchedulerConfig,
                   params: LinkBudgetParams) -> float:
    """Return p_max_dbm or POWER_OFF_DBM for one prediction interval."""
    width = interval["hi"] - interval["lo"]
    if config.literal_threshold:
        sufficient = interval["median"] >= params.p_max_dbm - params.p_min_dbm
    else:
        sufficient = params.p_max_dbm + interval["median"] >= params.p_min_dbm
    credible = width <= config.width_threshold_db
    return params.p_max_dbm if (sufficient and credible) else POWER_OFF_DBM
