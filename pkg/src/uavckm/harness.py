"""Experiment orchestration: map pipeline, scheme training, evaluation sweeps.

Two profiles are built in. The desk profile (default) is a shrunk scene that
keeps every effect measurable in minutes on one core; the paper-scale profile
restores the full 1000 m scene, 15 users, 26 Mb payloads and 40000-episode
training budgets. Scheme wiring is fixed here and nowhere else:

    PEC_PPO  map queried with noise flag, scheduler on, map updated online
    CKM_PPO  map queried without the noise flag, scheduler off
    LOS_PPO  analytic LoS-probability model, no map at all
    OS_PPO   noise-flagged map used offline: scheduler off, never updated
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import sys
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import __version__
from .channel import LinkBudgetParams
from .ckm import (ChannelDataset, CkmHyper, CkmModel, collect_dataset,
                  copy_model, env_feature_vector, load_model, query_features,
                  save_model, train, update_incremental)
from .env import (CkmPredictor, CommEnv, EnvConfig, PredictorMode, StepLog,
                  episode_energy_mws)
from .geometry import Building, World, WorldConfig, generate_world
from .noise import CepModel
from .ppo import (GaussianPolicy, PpoConfig, TrainResult, load_checkpoint,
                  save_checkpoint, train_loop)
from .scheduler import SchedulerConfig


class Scheme(str, Enum):
    PEC_PPO = "PEC_PPO"
    CKM_PPO = "CKM_PPO"
    LOS_PPO = "LOS_PPO"
    OS_PPO = "OS_PPO"


SCHEME_PREDICTOR = {
    Scheme.PEC_PPO: PredictorMode.CKM_PEC,
    Scheme.CKM_PPO: PredictorMode.CKM,
    Scheme.LOS_PPO: PredictorMode.LOS_MODEL,
    Scheme.OS_PPO: PredictorMode.CKM_PEC,
}
SCHEME_SCHEDULER = {
    Scheme.PEC_PPO: True,
    Scheme.CKM_PPO: False,
    Scheme.LOS_PPO: False,
    Scheme.OS_PPO: False,
}


def scheme_uses_ckm(scheme: Scheme) -> bool:
    return scheme is not Scheme.LOS_PPO


def scheme_updates_ckm(scheme: Scheme) -> bool:
    return scheme is Scheme.PEC_PPO


@dataclass(frozen=True)
class ExperimentConfig:
    profile: str = "desk"
    scheme: Scheme = Scheme.PEC_PPO
    seed: int = 0
    cep_m: float = 5.0
    train_cep_m: float = 5.0
    ckm_samples: int = 8000
    update_samples: int = 4000
    eval_episodes: int = 500
    eval_seed: int = 900_000
    eval_cep_list: tuple[float, ...] = (0.0, 5.0, 10.0)
    transfer_cep_list: tuple[float, ...] = (10.0, 25.0)
    world: WorldConfig = field(default_factory=WorldConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    ckm: CkmHyper = field(default_factory=CkmHyper)
    ppo: PpoConfig = field(default_factory=PpoConfig)


def desk_profile(**overrides) -> ExperimentConfig:
    """Shrunk scene for fast runs: 3 users, 5 Mb payloads, 80-step episodes.

    The link budget is tightened (receive threshold -60 dBm, noise floor
    -75 dBm) so that association genuinely depends on range and occlusion at
    300 m scale.
    """
    link = LinkBudgetParams(p_min_dbm=-60.0, sigma2_dbm=-75.0)
    cfg = ExperimentConfig(
        profile="desk",
        world=WorldConfig(
            x_size=300.0, y_size=300.0, z_size=200.0, uav_min_height=80.0,
            n_users=3, n_buildings=6, user_max_z=60.0, payload_bits=5e6,
            building_footprint=(30.0, 80.0), building_height=(60.0, 160.0),
        ),
        env=EnvConfig(
            t_max_steps=80, payload_bits=5e6, gu_max_z=60.0, link=link,
        ),
        ckm=CkmHyper(epochs=60, width=64, blocks=2, members=5,
                     env_feature_buildings=6),
        ppo=PpoConfig(lr=3e-4, max_episodes=2000),
        ckm_samples=8000,
        update_samples=4000,
        eval_episodes=200,
    )
    return replace(cfg, **overrides) if overrides else cfg


def paper_profile(**overrides) -> ExperimentConfig:
    cfg = ExperimentConfig(
        profile="paper",
        world=WorldConfig(),
        env=EnvConfig(),
        ckm=CkmHyper(),
        ppo=PpoConfig(),
        ckm_samples=20000,
        update_samples=8000,
        eval_episodes=500,
    )
    return replace(cfg, **overrides) if overrides else cfg


PROFILES = {"desk": desk_profile, "paper": paper_profile}


def scheme_env_config(config: ExperimentConfig, scheme: Scheme,
                      cep_m: float | None = None,
                      scheduler_on: bool | None = None) -> EnvConfig:
    """Environment wiring for one scheme at one runtime noise level."""
    return replace(
        config.env,
        predictor_mode=SCHEME_PREDICTOR[scheme],
        scheduler_on=SCHEME_SCHEDULER[scheme] if scheduler_on is None else scheduler_on,
        cep_m=config.cep_m if cep_m is None else cep_m,
    )


# -- channel map pipeline ----------------------------------------------------


def sample_eval_errors(model: CkmModel, world: World, link: LinkBudgetParams,
                       cep_m: float, flag: int, n: int, rng: np.random.Generator,
                       gu_max_z: float, env_buildings: int) -> np.ndarray:
    """|prediction - true gain| on fresh query points with the given noise."""
    ds = collect_dataset(world, link, CepModel(cep_m), n, rng,
                         gu_sampling="uniform", gu_max_z=gu_max_z,
                         env_buildings=env_buildings)
    # collect_dataset corrupts half the rows; rebuild queries so every row
    # carries the requested flag and noise treatment.
    reported = ds.gu_reported if cep_m > 0 else ds.gu_true
    keep = ds.flag == 1 if cep_m > 0 else np.ones(len(ds), dtype=bool)
    env_vec = env_feature_vector(world, env_buildings)
    x = np.concatenate([
        ds.uav[keep], reported[keep], np.full((int(keep.sum()), 1), float(flag)),
        np.tile(env_vec, (int(keep.sum()), 1)),
    ], axis=1)
    if not model.hyper.include_env_features:
        x = x[:, :7]
    preds = model.predict_batch(x)
    return np.abs(preds - ds.gain_db[keep])


@dataclass
class CkmPipelineResult:
    world: World
    dataset: ChannelDataset
    model: CkmModel
    report: dict


def run_ckm_pipeline(config: ExperimentConfig, out_dir: Path | None = None,
                     world: World | None = None, eval_n: int = 2000) -> CkmPipelineResult:
    """Collect corrupted data, train the map, report clean/noisy/transfer RMSE."""
    if world is None:
        world = generate_world(config.seed, config.world)
    rng = np.random.default_rng(config.seed + 11)
    dataset = collect_dataset(
        world, config.env.link, CepModel(config.train_cep_m), config.ckm_samples,
        rng, gu_sampling="uniform", gu_max_z=config.env.gu_max_z,
        env_buildings=config.ckm.env_feature_buildings)
    model = train(dataset, replace(config.ckm, seed=config.seed))

    eval_rng = np.random.default_rng(config.seed + 12)
    clean_err = sample_eval_errors(model, world, config.env.link, 0.0, 0, eval_n,
                                   eval_rng, config.env.gu_max_z,
                                   config.ckm.env_feature_buildings)
    noisy_err = sample_eval_errors(model, world, config.env.link,
                                   config.train_cep_m, 1, eval_n, eval_rng,
                                   config.env.gu_max_z,
                                   config.ckm.env_feature_buildings)
    clean_rmse = float(np.sqrt(np.mean(clean_err ** 2)))
    report = {
        "train_cep_m": config.train_cep_m,
        "n_samples": len(dataset),
        "held_out": model.training_meta,
        "clean_rmse_db": clean_rmse,
        "noisy_rmse_db": float(np.sqrt(np.mean(noisy_err ** 2))),
        "transfer": {},
    }
    for cep in config.transfer_cep_list:
        err = sample_eval_errors(model, world, config.env.link, cep, 1, eval_n,
                                 eval_rng, config.env.gu_max_z,
                                 config.ckm.env_feature_buildings)
        report["transfer"][str(cep)] = {
            "rmse_db": float(np.sqrt(np.mean(err ** 2))),
            "frac_within_2x_clean": float(np.mean(err <= 2.0 * clean_rmse)),
        }

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        world.save(out_dir / "world.json")
        dataset.to_csv(out_dir / "dataset.csv")
        save_model(model, out_dir / "model.npz")
        (out_dir / "report.json").write_text(json.dumps(report, indent=2))
    return CkmPipelineResult(world, dataset, model, report)


# -- training ----------------------------------------------------------------


def run_training(config: ExperimentConfig, world: World | None = None,
                 ckm_model: CkmModel | None = None, out_dir: Path | None = None,
                 progress_every: int = 0) -> TrainResult:
    """Train the configured scheme's policy on its wired environment."""
    if world is None:
        world = generate_world(config.seed, config.world)
    if scheme_uses_ckm(config.scheme) and ckm_model is None:
        raise ValueError(f"scheme {config.scheme.value} needs a trained channel map")
    env_cfg = scheme_env_config(config, config.scheme)
    model = ckm_model if scheme_uses_ckm(config.scheme) else None

    def factory() -> CommEnv:
        return CommEnv(world, env_cfg, ckm_model=model)

    result = train_loop(factory, replace(config.ppo, seed=config.seed),
                        progress_every=progress_every)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(result.policy, result.value_net, result.config,
                        out_dir / "checkpoint.npz")
        write_learning_curve(result, out_dir / "curve.csv")
    return result


def write_learning_curve(result: TrainResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "return", "completion_time_s", "success",
                    "punishment_count", "steps"])
        for e in result.episodes:
            w.writerow([e.episode, e.ret, e.completion_time_s, int(e.success),
                        e.punishment_count, e.steps])


# -- evaluation ----------------------------------------------------------------


@dataclass
class EvalRow:
    episode: int
    seed: int
    completion_time_s: float
    success: bool
    ret: float
    energy_mws: float
    steps: int


@dataclass
class EvalReport:
    episodes: int
    mean_completion_time_s: float
    success_rate: float
    mean_return: float
    mean_energy_mws: float
    rows: list[EvalRow]
    best_trajectory: list[StepLog]

    def summary(self) -> dict:
        return {
            "episodes": self.episodes,
            "mean_completion_time_s": self.mean_completion_time_s,
            "success_rate": self.success_rate,
            "mean_return": self.mean_return,
            "mean_energy_mws": self.mean_energy_mws,
        }


def run_eval(policy: GaussianPolicy, world: World, env_cfg: EnvConfig,
             episodes: int, seed0: int, ckm_model: CkmModel | None = None,
             predictor=None, out_dir: Path | None = None) -> EvalReport:
    """Deterministic-action evaluation over consecutive seeds.

    Also retains the shortest successful episode's full trajectory (or the
    shortest overall when nothing succeeds).
    """
    env = CommEnv(world, env_cfg, ckm_model=ckm_model, predictor=predictor)
    rows: list[EvalRow] = []
    best_logs: list[StepLog] = []
    best_key: tuple = ()
    for i in range(episodes):
        seed = seed0 + i
        obs = env.reset(seed=seed)
        logs: list[StepLog] = []
        ep_ret = 0.0
        while True:
            res = env.step(policy.mean_action(obs))
            logs.append(res.info)
            ep_ret += res.reward
            obs = res.obs
            if res.terminated:
                break
        energy = episode_energy_mws([lg.p_dbm for lg in logs], env_cfg.dt)
        row = EvalRow(episode=i, seed=seed, completion_time_s=env.t * env_cfg.dt,
                      success=env.success, ret=ep_ret, energy_mws=energy,
                      steps=env.t)
        rows.append(row)
        key = (0 if row.success else 1, row.completion_time_s)
        if not best_key or key < best_key:
            best_key = key
            best_logs = logs

    report = EvalReport(
        episodes=len(rows),
        mean_completion_time_s=float(np.mean([r.completion_time_s for r in rows])),
        success_rate=float(np.mean([r.success for r in rows])),
        mean_return=float(np.mean([r.ret for r in rows])),
        mean_energy_mws=float(np.mean([r.energy_mws for r in rows])),
        rows=rows,
        best_trajectory=best_logs,
    )
    if out_dir is not None:
        emit_eval_outputs(report, Path(out_dir))
    return report


def emit_eval_outputs(report: EvalReport, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report.summary(), indent=2))
    with open(out_dir / "episodes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "seed", "completion_time_s", "success", "return",
                    "energy_mws", "steps"])
        for r in report.rows:
            w.writerow([r.episode, r.seed, r.completion_time_s, int(r.success),
                        r.ret, r.energy_mws, r.steps])
    write_trajectory(report.best_trajectory, out_dir / "best_trajectory.csv")
    write_power_payload(report.best_trajectory, out_dir / "power_payload.csv")


def write_trajectory(logs: list[StepLog], path) -> None:
    if not logs:
        Path(path).write_text("")
        return
    n = logs[0].alpha.shape[0]
    header = (["t", "x", "y", "z", "v", "theta", "phi", "p_dbm",
               "r1", "r2", "r3", "reward", "clipped", "punishment_count", "n_new"]
              + [f"alpha_{i}" for i in range(n)]
              + [f"eta_{i}" for i in range(n)]
              + [f"rate_{i}" for i in range(n)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for lg in logs:
            w.writerow([lg.t, *lg.pos, lg.v, lg.theta, lg.phi, lg.p_dbm,
                        lg.r1, lg.r2, lg.r3, lg.reward, int(lg.clipped),
                        lg.punishment_count, lg.n_new,
                        *lg.alpha.astype(int), *lg.eta, *lg.rates])


def write_power_payload(logs: list[StepLog], path) -> None:
    """Per-step transmit power and payload fractions, for plotting."""
    if not logs:
        Path(path).write_text("")
        return
    n = logs[0].eta.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "p_dbm", "p_mw"] + [f"eta_{i}" for i in range(n)])
        for lg in logs:
            p_mw = 0.0 if math.isinf(lg.p_dbm) else 10.0 ** (lg.p_dbm / 10.0)
            w.writerow([lg.t, lg.p_dbm, p_mw, *lg.eta])


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [dict(row) for row in csv.DictReader(fh)]


# -- composite experiments -----------------------------------------------------


def run_cep_sweep(policy: GaussianPolicy, world: World, config: ExperimentConfig,
                  scheme: Scheme, ckm_model: CkmModel | None,
                  out_dir: Path | None = None) -> dict:
    """Evaluate one fixed policy across runtime positioning-noise levels."""
    sweep = {}
    for cep in config.eval_cep_list:
        env_cfg = scheme_env_config(config, scheme, cep_m=cep)
        report = run_eval(policy, world, env_cfg, config.eval_episodes,
                          config.eval_seed, ckm_model=ckm_model)
        sweep[str(cep)] = report.summary()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "sweep.json").write_text(json.dumps(sweep, indent=2))
        with open(out_dir / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cep_m", "success_rate", "mean_completion_time_s",
                        "mean_return", "mean_energy_mws"])
            for cep in config.eval_cep_list:
                s = sweep[str(cep)]
                w.writerow([cep, s["success_rate"], s["mean_completion_time_s"],
                            s["mean_return"], s["mean_energy_mws"]])
    return sweep


def remove_tallest_buildings(world: World, fraction: float = 0.25) -> World:
    """New world with the ceil(fraction * n) tallest buildings removed."""
    if not world.buildings:
        return world
    n_remove = math.ceil(fraction * len(world.buildings))
    ranked = sorted(world.buildings, key=lambda b: b.max_corner.z, reverse=True)
    removed = set(id(b) for b in ranked[:n_remove])
    kept = [b for b in world.buildings if id(b) not in removed]
    return World(bounds=world.bounds, uav_min_height=world.uav_min_height,
                 buildings=kept, users=world.users, uav_start=world.uav_start)


def map_rmse_on_world(model: CkmModel, world: World, feature_world: World,
                      config: ExperimentConfig, n: int, seed: int) -> float:
    """Clean-query RMSE of a map against a world's true gains.

    feature_world supplies the environment features the deployed map believes
    in; for a stale map that is the pre-change world.
    """
    rng = np.random.default_rng(seed)
    ds = collect_dataset(world, config.env.link, CepModel(0.0), n, rng,
                         gu_sampling="uniform", gu_max_z=config.env.gu_max_z,
                         env_buildings=config.ckm.env_feature_buildings)
    env_vec = env_feature_vector(feature_world, config.ckm.env_feature_buildings)
    preds = np.array([
        model.predict_batch(query_features(ds.uav[i], ds.gu_true[i], 0, env_vec,
                                           model.hyper.include_env_features))[0]
        for i in range(len(ds))
    ])
    return float(np.sqrt(np.mean((preds - ds.gain_db) ** 2)))


def run_dynamic_update(config: ExperimentConfig, world: World, model: CkmModel,
                       pec_policy: GaussianPolicy, os_policy: GaussianPolicy,
                       out_dir: Path | None = None, rmse_probe_n: int = 1500) -> dict:
    """Damage the scene, refresh the map incrementally, compare schemes.

    The tallest quarter of the buildings is removed; measurement data is
    re-collected in the changed world and folded into a copy of the map. The
    scheme that updates (PEC) is evaluated with the refreshed map, the
    offline scheme (OS) with the stale one still carrying pre-change
    environment features.
    """
    world_after = remove_tallest_buildings(world)
    stale = model
    updated = copy_model(model)
    rng = np.random.default_rng(config.seed + 21)
    new_data = collect_dataset(
        world_after, config.env.link, CepModel(config.train_cep_m),
        config.update_samples, rng, gu_sampling="uniform",
        gu_max_z=config.env.gu_max_z,
        env_buildings=config.ckm.env_feature_buildings)
    updated = update_incremental(updated, new_data)

    rmse_stale = map_rmse_on_world(stale, world_after, world, config,
                                   rmse_probe_n, config.seed + 22)
    rmse_updated = map_rmse_on_world(updated, world_after, world_after, config,
                                     rmse_probe_n, config.seed + 22)

    pec_cfg = scheme_env_config(config, Scheme.PEC_PPO)
    pec_report = run_eval(pec_policy, world_after, pec_cfg, config.eval_episodes,
                          config.eval_seed, ckm_model=updated)
    os_cfg = scheme_env_config(config, Scheme.OS_PPO)
    stale_predictor = CkmPredictor(stale, world, flag=1)
    os_report = run_eval(os_policy, world_after, os_cfg, config.eval_episodes,
                         config.eval_seed, predictor=stale_predictor)

    result = {
        "buildings_before": len(world.buildings),
        "buildings_after": len(world_after.buildings),
        "rmse_stale_db": rmse_stale,
        "rmse_updated_db": rmse_updated,
        "pec_after": pec_report.summary(),
        "os_after": os_report.summary(),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        world_after.save(out_dir / "world_after.json")
        save_model(updated, out_dir / "model_updated.npz")
        (out_dir / "report.json").write_text(json.dumps(result, indent=2))
        emit_eval_outputs(pec_report, out_dir / "pec_after")
        emit_eval_outputs(os_report, out_dir / "os_after")
    return result


# -- manifests -----------------------------------------------------------------


def _jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def write_manifest(out_dir: Path, config: ExperimentConfig, command: str,
                   extra: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "config": _jsonable(config),
        "package_version": __version__,
        "numpy_version": np.__version__,
        "python_version": sys.version.split()[0],
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        doc.update(_jsonable(extra))
    (out_dir / "manifest.json").write_text(json.dumps(doc, indent=2))
