"""Command-line entry points.

    uavckm ckm collect|train|eval|update ...
    uavckm rl train|eval ...
    uavckm exp dynamic|cep-sweep ...

Every run reads one TOML or JSON config (plus flag overrides) and writes a
manifest into its output directory. Exit codes: 0 ok, 2 configuration
problem, 3 missing input file, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .ckm import collect_dataset, load_model, save_model, update_incremental
from .env import PredictorMode
from .geometry import World, generate_world
from .harness import (PROFILES, ExperimentConfig, Scheme, run_ckm_pipeline,
                      run_cep_sweep, run_dynamic_update, run_eval,
                      run_training, sample_eval_errors, scheme_env_config,
                      scheme_uses_ckm, write_manifest)
from .nets import TrainingDiverged
from .noise import CepModel
from .ppo import load_checkpoint


class ConfigError(ValueError):
    pass


_TUPLE_FIELDS = {"building_footprint", "building_height", "hidden",
                 "eval_cep_list", "transfer_cep_list"}
_ENUM_FIELDS = {"scheme": Scheme, "predictor_mode": PredictorMode}


def _apply_section(obj, section: dict, name: str):
    known = {f.name for f in dataclasses.fields(obj)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    coerced = {}
    for k, v in section.items():
        if k in _TUPLE_FIELDS and isinstance(v, (list, tuple)):
            v = tuple(v)
        if k in _ENUM_FIELDS and isinstance(v, str):
            v = _ENUM_FIELDS[k](v)
        coerced[k] = v
    try:
        return replace(obj, **coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{name}] config: {exc}") from exc


def config_from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc)
    profile = doc.pop("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = PROFILES[profile]()
    world = _apply_section(cfg.world, doc.pop("world", {}), "world")
    env_section = doc.pop("env", {})
    link = _apply_section(cfg.env.link, doc.pop("link", {}), "link")
    sched = _apply_section(cfg.env.scheduler, doc.pop("scheduler", {}), "scheduler")
    env = _apply_section(cfg.env, env_section, "env")
    env = replace(env, link=link, scheduler=sched)
    ckm_h = _apply_section(cfg.ckm, doc.pop("ckm", {}), "ckm")
    ppo_cfg = _apply_section(cfg.ppo, doc.pop("ppo", {}), "ppo")

    cfg = replace(cfg, world=world, env=env, ckm=ckm_h, ppo=ppo_cfg)
    cfg = _apply_section(cfg, doc, "top level")
    return replace(cfg, profile=profile)


def load_config_file(path: str) -> dict:
    p = Path(path)
    text = p.read_bytes()
    if p.suffix == ".json":
        return json.loads(text)
    if p.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.loads(text.decode())
    raise ConfigError(f"config file must be .json or .toml, got {p.suffix!r}")


def build_config(args) -> ExperimentConfig:
    doc = load_config_file(args.config) if args.config else {}
    if args.profile:
        doc["profile"] = args.profile
    if getattr(args, "scheme", None):
        doc["scheme"] = args.scheme
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    if getattr(args, "cep", None) is not None:
        doc["cep_m"] = args.cep
    if getattr(args, "eval_episodes", None) is not None:
        doc["eval_episodes"] = args.eval_episodes
    cfg = config_from_dict(doc)
    if getattr(args, "episodes", None) is not None:
        cfg = replace(cfg, ppo=replace(cfg.ppo, max_episodes=args.episodes))
    return cfg


def _load_world(args, cfg: ExperimentConfig) -> World:
    if getattr(args, "world", None):
        return World.load(args.world)
    return generate_world(cfg.seed, cfg.world)


def _out_dir(args, default: str) -> Path:
    out = Path(args.out if args.out else default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- command implementations ---------------------------------------------------


def cmd_ckm_collect(args) -> int:
    cfg = build_config(args)
    out = _out_dir(args, "runs/ckm-collect")
    world = _load_world(args, cfg)
    rng = np.random.default_rng(cfg.seed + 11)
    ds = collect_dataset(world, cfg.env.link, CepModel(cfg.train_cep_m),
                         cfg.ckm_samples, rng, gu_sampling="uniform",
                         gu_max_z=cfg.env.gu_max_z,
                         env_buildings=cfg.ckm.env_feature_buildings)
    world.save(out / "world.json")
    ds.to_csv(out / "dataset.csv")
    write_manifest(out, cfg, "ckm collect", {"n_samples": len(ds)})
    print(f"collected {len(ds)} samples into {out}")
    return 0


def cmd_ckm_train(args) -> int:
    cfg = build_config(args)
    out = _out_dir(args, "runs/ckm-train")
    world = _load_world(args, cfg)
    result = run_ckm_pipeline(cfg, out_dir=out, world=world)
    write_manifest(out, cfg, "ckm train", {"report": result.report})
    print(json.dumps(result.report, indent=2))
    return 0


def cmd_ckm_eval(args) -> int:
    cfg = build_config(args)
    out = _out_dir(args, "runs/ckm-eval")
    world = _load_world(args, cfg)
    model = load_model(args.model)
    rng = np.random.default_rng(cfg.seed + 12)
    report = {}
    clean = sample_eval_errors(model, world, cfg.env.link, 0.0, 0, 2000, rng,
                               cfg.env.gu_max_z, cfg.ckm.env_feature_buildings)
    report["clean_rmse_db"] = float(np.sqrt(np.mean(clean ** 2)))
    for cep in (cfg.train_cep_m, *cfg.transfer_cep_list):
        err = sample_eval_errors(model, world, cfg.env.link, cep, 1, 2000, rng,
                                 cfg.env.gu_max_z, cfg.ckm.env_feature_buildings)
        report[f"noisy_rmse_db_cep{cep:g}"] = float(np.sqrt(np.mean(err ** 2)))
    (out / "report.json").write_text(json.dumps(report, indent=2))
    write_manifest(out, cfg, "ckm eval", {"report": report})
    print(json.dumps(report, indent=2))
    return 0


def cmd_ckm_update(args) -> int:
    cfg = build_config(args)
    out = _out_dir(args, "runs/ckm-update")
    world = _load_world(args, cfg)
    model = load_model(args.model)
    rng = np.random.default_rng(cfg.seed + 21)
    new_data = collect_dataset(world, cfg.env.link, CepModel(cfg.train_cep_m),
                               cfg.update_samples, rng, gu_sampling="uniform",
                               gu_max_z=cfg.env.gu_max_z,
                               env_buildings=cfg.ckm.env_feature_buildings)
    model = update_incremental(model, new_data)
    save_model(model, out / "model_updated.npz")
    write_manifest(out, cfg, "ckm update", {"n_new_samples": len(new_data)})
    print(f"updated model written to {out / 'model_updated.npz'}")
    return 0


def cmd_rl_train(args) -> int:
    cfg = build_config(args)
    out = _out_dir(args, f"runs/rl-train-{cfg.scheme.value.lower()}")
    world = _load_world(args, cfg)
    if scheme_uses_ckm(cfg.scheme) and args.model is None:
        raise ConfigError(f"scheme {cfg.scheme.value} requires --model")
    model = load_model(args.model) if scheme_uses_ckm(cfg.scheme) else None
    world.save(out / "world.json")
    result = run_training(cfg, world=world, ckm_model=model, out_dir=out,
                          progress_every=args.progress_every)
    last = result.episodes[-min(100, len(result.episodes)):]
    summary = {
        "episodes": len(result.episodes),
        "recent_mean_return": float(np.mean([e.ret for e in last])),
        "recent_mean_completion_s": float(np.mean([e.completion_time_s for e in last])),
        "recent_success_rate": float(np.mean([e.success for e in last])),
    }
    write_manifest(out, cfg, "rl train", {"summary": summary})
    print(json.dumps(summary, indent=2))
    return 0


def cmd_rl_eval(args) -> int:
    cfg = build_config(args)
    out = _out_dir(args, f"runs/rl-eval-{cfg.scheme.value.lower()}")
    world = _load_world(args, cfg)
    policy, _value, _pcfg = load_checkpoint(args.checkpoint)
    model = load_model(args.model) if args.model else None
    if scheme_uses_ckm(cfg.scheme) and model is None:
        raise ConfigError(f"scheme {cfg.scheme.value} requires --model")
    env_cfg = scheme_env_config(cfg, cfg.scheme)
    report = run_eval(policy, world, env_cfg, cfg.eval_episodes, cfg.eval_seed,
                      ckm_model=model, out_dir=out)
    write_manifest(out, cfg, "rl eval", {"report": report.summary()})
    print(json.dumps(report.summary(), indent=2))
    return 0


def cmd_exp_dynamic(args) -> int:
    cfg = build_config(args)
    out = _out_dir(args, "runs/exp-dynamic")
    world = _load_world(args, cfg)
    model = load_model(args.model)
    pec_policy, _v, _c = load_checkpoint(args.checkpoint)
    if args.os_checkpoint:
        os_policy, _v2, _c2 = load_checkpoint(args.os_checkpoint)
    else:
        os_policy = pec_policy
    report = run_dynamic_update(cfg, world, model, pec_policy, os_policy,
                                out_dir=out)
    write_manifest(out, cfg, "exp dynamic", {"report": report})
    print(json.dumps(report, indent=2))
    return 0


def cmd_exp_cep_sweep(args) -> int:
    cfg = build_config(args)
    out = _out_dir(args, "runs/exp-cep-sweep")
    world = _load_world(args, cfg)
    policy, _value, _pcfg = load_checkpoint(args.checkpoint)
    model = load_model(args.model) if args.model else None
    if scheme_uses_ckm(cfg.scheme) and model is None:
        raise ConfigError(f"scheme {cfg.scheme.value} requires --model")
    sweep = run_cep_sweep(policy, world, cfg, cfg.scheme, model, out_dir=out)
    write_manifest(out, cfg, "exp cep-sweep", {"sweep": sweep})
    print(json.dumps(sweep, indent=2))
    return 0


# -- argument parsing ------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, checkpoint=False, model=False):
    p.add_argument("--config", help="TOML or JSON experiment config")
    p.add_argument("--profile", choices=sorted(PROFILES),
                   help="base profile (desk or paper)")
    p.add_argument("--scheme", choices=[s.value for s in Scheme])
    p.add_argument("--seed", type=int)
    p.add_argument("--cep", type=float, help="runtime positioning CEP in meters")
    p.add_argument("--episodes", type=int, help="training episode budget")
    p.add_argument("--eval-episodes", type=int)
    p.add_argument("--world", help="world JSON (generated from config when absent)")
    p.add_argument("--out", help="output directory")
    if model:
        p.add_argument("--model", help="channel map model .npz")
    if checkpoint:
        p.add_argument("--checkpoint", required=True, help="policy checkpoint .npz")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uavckm", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    groups = parser.add_subparsers(dest="group", required=True)

    ckm_p = groups.add_parser("ckm", help="channel map pipeline")
    ckm_verbs = ckm_p.add_subparsers(dest="verb", required=True)
    p = ckm_verbs.add_parser("collect", help="collect a measurement dataset")
    _add_common(p)
    p.set_defaults(fn=cmd_ckm_collect)
    p = ckm_verbs.add_parser("train", help="collect, train and report RMSE")
    _add_common(p)
    p.set_defaults(fn=cmd_ckm_train)
    p = ckm_verbs.add_parser("eval", help="evaluate a trained map")
    _add_common(p, model=True)
    p.set_defaults(fn=cmd_ckm_eval)
    p = ckm_verbs.add_parser("update", help="incremental update from a changed world")
    _add_common(p, model=True)
    p.set_defaults(fn=cmd_ckm_update)

    rl_p = groups.add_parser("rl", help="policy training and evaluation")
    rl_verbs = rl_p.add_subparsers(dest="verb", required=True)
    p = rl_verbs.add_parser("train", help="train the configured scheme")
    _add_common(p, model=True)
    p.add_argument("--progress-every", type=int, default=100)
    p.set_defaults(fn=cmd_rl_train)
    p = rl_verbs.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p, checkpoint=True, model=True)
    p.set_defaults(fn=cmd_rl_eval)

    exp_p = groups.add_parser("exp", help="composite experiments")
    exp_verbs = exp_p.add_subparsers(dest="verb", required=True)
    p = exp_verbs.add_parser("dynamic", help="environment-change update experiment")
    _add_common(p, checkpoint=True, model=True)
    p.add_argument("--os-checkpoint", help="offline-scheme checkpoint "
                                           "(defaults to --checkpoint)")
    p.set_defaults(fn=cmd_exp_dynamic)
    p = exp_verbs.add_parser("cep-sweep", help="evaluate across noise levels")
    _add_common(p, checkpoint=True, model=True)
    p.set_defaults(fn=cmd_exp_cep_sweep)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 3
    except (TrainingDiverged, RuntimeError, ValueError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
