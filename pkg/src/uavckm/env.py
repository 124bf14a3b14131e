"""Mission environment: UAV kinematics, association, payload accounting.

One episode: the UAV starts at the fixed origin point, must push every
ground user's payload to zero and return to the start within the step
budget. Channel gain used for user selection comes from a pluggable
predictor (exact oracle, channel map with or without the noise flag, or the
analytic LoS-probability model) queried at CEP-perturbed user positions;
delivered bits are always computed from the true positions through the
physical channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import ckm as ckm_mod
from .channel import (MIN_LINK_DISTANCE, POWER_OFF_DBM, LinkBudgetParams,
                      dbm_to_mw, free_space_loss_db, los_probability, mw_to_dbm,
                      rate_bps)
from .geometry import World, sample_user_position, segment_blocked
from .noise import CepModel, perturb
from .scheduler import SchedulerConfig, schedule_power

ACTION_DIM = 4
ACTION_LOW = np.array([-1.0, 0.0, -1.0, 0.0])
ACTION_HIGH = np.array([1.0, 1.0, 1.0, 1.0])


class PredictorMode(str, Enum):
    TRUE_ORACLE = "TRUE_ORACLE"
    CKM = "CKM"
    CKM_PEC = "CKM_PEC"
    LOS_MODEL = "LOS_MODEL"


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 1.0
    t_max_steps: int = 160
    v_max: float = 50.0
    a_max: float = 20.0
    payload_bits: float = 26e6
    cep_m: float = 0.0
    predictor_mode: PredictorMode = PredictorMode.TRUE_ORACLE
    scheduler_on: bool = False
    r1: float = 1e-6
    r2: float = 0.0012
    r3: float = 0.005
    arrival_radius_m: float = 30.0
    gu_max_z: float = 250.0
    link: LinkBudgetParams = field(default_factory=LinkBudgetParams)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    los_a: float = 9.61
    los_b: float = 0.16


@dataclass
class EnvState:
    """Structured view of the internal state (the policy sees the flat
    normalized observation vector instead)."""

    uav_pos: np.ndarray
    v: float
    theta: float
    phi: float
    alpha: np.ndarray
    eta: np.ndarray
    distances: np.ndarray
    t: int
    punishment_count: int


@dataclass
class StepLog:
    t: int
    pos: np.ndarray
    v: float
    theta: float
    phi: float
    p_dbm: float
    alpha: np.ndarray
    eta: np.ndarray
    rates: np.ndarray
    r1: float
    r2: float
    r3: float
    reward: float
    clipped: bool
    punishment_count: int
    n_new: int


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    terminated: bool
    info: StepLog


def occlusion_gain(uav, gu, world: World, params: LinkBudgetParams) -> float:
    """Exact-geometry gain with the sub-1m singularity clamped away."""
    d = max(float(np.linalg.norm(np.asarray(uav) - np.asarray(gu))), MIN_LINK_DISTANCE)
    eps = params.eps_nlos_db if segment_blocked(uav, gu, world) else params.eps_los_db
    return -(float(free_space_loss_db(d, params.f_c_hz)) + eps)


class TrueOraclePredictor:
    """Selection-phase gain straight from the exact geometry."""

    def __init__(self, world: World, params: LinkBudgetParams):
        self.world = world
        self.params = params

    def member_gains(self, uav, gu_positions) -> np.ndarray:
        gu = np.atleast_2d(gu_positions)
        return np.array([[occlusion_gain(uav, g, self.world, self.params) for g in gu]])


class LosModelPredictor:
    """Probability-weighted analytic path loss; no geometry queries."""

    def __init__(self, params: LinkBudgetParams, a: float, b: float):
        self.params = params
        self.a = a
        self.b = b

    def member_gains(self, uav, gu_positions) -> np.ndarray:
        uav = np.asarray(uav, dtype=float)
        gu = np.atleast_2d(gu_positions)
        d = np.maximum(np.linalg.norm(gu - uav, axis=1), MIN_LINK_DISTANCE)
        fsl = free_space_loss_db(d, self.params.f_c_hz)
        p = np.array([los_probability(uav, g, self.a, self.b) for g in gu])
        loss = p * (fsl + self.params.eps_los_db) + (1 - p) * (fsl + self.params.eps_nlos_db)
        return -loss[None, :]


class CkmPredictor:
    """Channel-map ensemble queried with a fixed noise flag."""

    def __init__(self, model: ckm_mod.CkmModel, world: World, flag: int):
        self.model = model
        self.flag = flag
        self.env_features = ckm_mod.env_feature_vector(
            world, model.hyper.env_feature_buildings)

    def member_gains(self, uav, gu_positions) -> np.ndarray:
        x = ckm_mod.query_features(uav, gu_positions, self.flag, self.env_features,
                                   self.model.hyper.include_env_features)
        return self.model.member_predictions(x)


def build_predictor(mode: PredictorMode, world: World, config: EnvConfig,
                    ckm_model: ckm_mod.CkmModel | None = None):
    if mode == PredictorMode.TRUE_ORACLE:
        return TrueOraclePredictor(world, config.link)
    if mode == PredictorMode.LOS_MODEL:
        return LosModelPredictor(config.link, config.los_a, config.los_b)
    if ckm_model is None:
        raise ValueError(f"predictor mode {mode} needs a trained channel map")
    return CkmPredictor(ckm_model, world, flag=1 if mode == PredictorMode.CKM_PEC else 0)


class CommEnv:
    """Gym-style environment; instances share only immutable inputs."""

    def __init__(self, world: World, config: EnvConfig = EnvConfig(),
                 ckm_model: ckm_mod.CkmModel | None = None, predictor=None):
        self.world = world
        self.cfg = config
        self.n_users = len(world.users)
        self.obs_dim = 6 + 6 * self.n_users
        self.predictor = predictor if predictor is not None else \
            build_predictor(config.predictor_mode, world, config, ckm_model)
        self.cep = CepModel(config.cep_m)
        self._bounds = world.bounds.to_array()
        self._pos_lo = np.array([0.0, 0.0, world.uav_min_height])
        self._start = world.uav_start.to_array()
        self._diag = world.diagonal
        self._rng = np.random.default_rng()
        self._ready = False

    # -- episode control ---------------------------------------------------

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.gu_pos = np.array([
            sample_user_position(self.world, self.cfg.gu_max_z, self._rng)
            for _ in range(self.n_users)
        ])
        self.uav = self._start.copy()
        self.v = 0.0
        self.theta = 0.0
        self.phi = 0.0
        self.alpha = np.zeros(self.n_users)
        self.eta = np.ones(self.n_users)
        self.t = 0
        self.punishment_count = 0
        self.terminated = False
        self._ready = True
        return self.observation()

    def step(self, action) -> StepResult:
        if not self._ready:
            raise RuntimeError("call reset() before step()")
        if self.terminated:
            raise RuntimeError("step() called on a terminated episode")
        cfg = self.cfg
        action = np.asarray(action, dtype=float)
        clipped = bool(np.any(action < ACTION_LOW) or np.any(action > ACTION_HIGH))
        a = np.clip(action, ACTION_LOW, ACTION_HIGH)

        # Kinematics: velocity first, then displacement, then box clipping.
        accel = a[0] * cfg.a_max
        self.theta = a[1] * 2.0 * math.pi
        self.phi = a[2] * math.pi / 2.0
        v_raw = self.v + accel * cfg.dt
        self.v = float(np.clip(v_raw, 0.0, cfg.v_max))
        clipped |= self.v != v_raw
        heading = np.array([
            math.cos(self.theta) * math.cos(self.phi),
            math.sin(self.theta) * math.cos(self.phi),
            math.sin(self.phi),
        ])
        pos_raw = self.uav + heading * self.v * cfg.dt
        self.uav = np.clip(pos_raw, self._pos_lo, self._bounds)
        clipped |= bool(np.any(self.uav != pos_raw))

        p_dbm, mean_gain, active_idx = self._select_power(a[3])

        # Selection at the applied power, rates through the physical channel.
        eta_before = self.eta.copy()
        self.alpha = np.zeros(self.n_users)
        rates = np.zeros(self.n_users)
        if active_idx.size:
            selected = active_idx[p_dbm + mean_gain >= cfg.link.p_min_dbm]
            for i in selected:
                self.alpha[i] = 1.0
                g_true = occlusion_gain(self.uav, self.gu_pos[i], self.world, cfg.link)
                rates[i] = rate_bps(g_true, p_dbm, cfg.link)
                self.eta[i] = max(0.0, self.eta[i] - rates[i] * cfg.dt / cfg.payload_bits)

        self.t += 1
        n_new = int(np.sum((eta_before > 0) & (self.eta == 0)))
        r1 = 0.0
        if clipped:
            self.punishment_count += 1
            r1 = -cfg.r1 * self.punishment_count
        r2 = cfg.r2 * n_new * (cfg.t_max_steps - self.t)
        completed = bool(np.all(self.eta == 0)
                         and np.linalg.norm(self.uav - self._start) <= cfg.arrival_radius_m)
        r3 = cfg.r3 * (cfg.t_max_steps - self.t) if completed else 0.0
        reward = r1 + r2 + r3
        self.terminated = completed or self.t >= cfg.t_max_steps

        info = StepLog(
            t=self.t, pos=self.uav.copy(), v=self.v, theta=self.theta, phi=self.phi,
            p_dbm=p_dbm, alpha=self.alpha.copy(), eta=self.eta.copy(), rates=rates,
            r1=r1, r2=r2, r3=r3, reward=reward, clipped=clipped,
            punishment_count=self.punishment_count, n_new=n_new,
        )
        return StepResult(self.observation(), reward, self.terminated, info)

    # -- internals ----------------------------------------------------------

    def _select_power(self, p_action: float) -> tuple[float, np.ndarray, np.ndarray]:
        """Applied transmit power plus per-active-GU predicted gains."""
        cfg = self.cfg
        active_idx = np.flatnonzero(self.eta > 0)
        mean_gain = np.zeros(0)
        member = None
        if active_idx.size:
            reported = np.array([
                np.clip(perturb(self.gu_pos[i], self.cep, self._rng), 0.0, self._bounds)
                for i in active_idx
            ])
            member = self.predictor.member_gains(self.uav, reported)
            mean_gain = member.mean(axis=0)

        if not cfg.scheduler_on:
            p_mw = p_action * cfg.link.p_max_mw
            return mw_to_dbm(p_mw), mean_gain, active_idx

        if member is None or member.size == 0:
            return POWER_OFF_DBM, mean_gain, active_idx
        lo, med, hi = np.percentile(member, [5.0, 50.0, 95.0], axis=0)
        for j in range(active_idx.size):
            p = schedule_power({"lo": lo[j], "median": med[j], "hi": hi[j]},
                               cfg.scheduler, cfg.link)
            if p != POWER_OFF_DBM:
                return p, mean_gain, active_idx
        return POWER_OFF_DBM, mean_gain, active_idx

    def observation(self) -> np.ndarray:
        cfg = self.cfg
        b = self._bounds
        obs = np.empty(self.obs_dim)
        obs[0:3] = self.uav / b
        obs[3] = self.v / cfg.v_max
        obs[4] = self.theta / (2.0 * math.pi)
        obs[5] = self.phi / (math.pi / 2.0)
        d = np.linalg.norm(self.gu_pos - self.uav, axis=1) / self._diag
        per = obs[6:].reshape(self.n_users, 6)
        per[:, 0:3] = self.gu_pos / b
        per[:, 3] = self.alpha
        per[:, 4] = self.eta
        per[:, 5] = d
        return obs

    def state(self) -> EnvState:
        return EnvState(
            uav_pos=self.uav.copy(), v=self.v, theta=self.theta, phi=self.phi,
            alpha=self.alpha.copy(), eta=self.eta.copy(),
            distances=np.linalg.norm(self.gu_pos - self.uav, axis=1),
            t=self.t, punishment_count=self.punishment_count,
        )

    @property
    def success(self) -> bool:
        """All payloads delivered and the UAV back at the start point."""
        return bool(self.terminated and np.all(self.eta == 0)
                    and np.linalg.norm(self.uav - self._start) <= self.cfg.arrival_radius_m)


def kinematics_step(pos, v, action, config: EnvConfig,
                    uav_min_height: float, bounds) -> tuple[np.ndarray, float, bool]:
    """Standalone one-step motion update (same math as CommEnv.step)."""
    a = np.clip(np.asarray(action, dtype=float), ACTION_LOW, ACTION_HIGH)
    clipped = bool(np.any(np.asarray(action, dtype=float) != a))
    accel = a[0] * config.a_max
    theta = a[1] * 2.0 * math.pi
    phi = a[2] * math.pi / 2.0
    v_raw = v + accel * config.dt
    v_new = float(np.clip(v_raw, 0.0, config.v_max))
    clipped |= v_new != v_raw
    heading = np.array([math.cos(theta) * math.cos(phi),
                        math.sin(theta) * math.cos(phi),
                        math.sin(phi)])
    pos_raw = np.asarray(pos, dtype=float) + heading * v_new * config.dt
    lo = np.array([0.0, 0.0, uav_min_height])
    pos_new = np.clip(pos_raw, lo, np.asarray(bounds, dtype=float))
    clipped |= bool(np.any(pos_new != pos_raw))
    return pos_new, v_new, clipped


def episode_energy_mws(p_dbm_series, dt: float) -> float:
    """Total radiated energy in mW*s from a per-step dBm series."""
    p = np.asarray(p_dbm_series, dtype=float)
    return float(np.sum(np.where(np.isneginf(p), 0.0, dbm_to_mw(p))) * dt)
