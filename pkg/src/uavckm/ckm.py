"""Channel knowledge map: residual-MLP regression of channel gain.

Maps (UAV position, reported GU position, noise flag, environment features)
to channel gain in dB. Training data is half-corrupted by the positioning
error model, with labels always computed at the true GU position, so the
noise flag lets one network serve both clean and error-laden queries. A
bootstrap ensemble provides prediction intervals; a capped replay buffer
rides along with the model so incremental updates can mix old and new data.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .channel import LinkBudgetParams, true_gain
from .geometry import World, sample_user_position
from .nets import Adam, Sequential, TrainingDiverged, mse_loss, residual_regressor
from .noise import CepModel, perturb

MODEL_FORMAT_VERSION = 1
DATASET_CSV_FIELDS = [
    "uav_x", "uav_y", "uav_z",
    "gu_x", "gu_y", "gu_z",
    "gu_true_x", "gu_true_y", "gu_true_z",
    "flag", "env_hash", "gain_db",
]


class ModelIOError(RuntimeError):
    pass


@dataclass(frozen=True)
class CkmHyper:
    epochs: int = 200
    batch: int = 256
    lr: float = 1e-3
    members: int = 5
    blocks: int = 3
    width: int = 128
    seed: int = 0
    val_fraction: float = 0.1
    include_env_features: bool = True
    env_feature_buildings: int = 10
    replay_cap: int = 5000
    update_epochs: int = 40
    replay_ratio: float = 0.3


def env_feature_vector(world: World, n_buildings: int) -> np.ndarray:
    """Corner coordinates of the n largest buildings (by volume).

    Each building contributes its 8 box vertices normalized by the world
    bounds; slots beyond the available building count are zero-padded, giving
    a fixed-length encoding of 24 * n_buildings.
    """
    ranked = sorted(world.buildings, key=lambda b: b.volume(), reverse=True)
    bounds = world.bounds.to_array()
    out = np.zeros(24 * n_buildings)
    for i, b in enumerate(ranked[:n_buildings]):
        out[24 * i: 24 * (i + 1)] = (b.corners / bounds).ravel()
    return out


def env_feature_hash(env: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(env, dtype=float).tobytes()).hexdigest()[:16]


@dataclass(frozen=True)
class ChannelSample:
    uav_pos: np.ndarray
    gu_pos_reported: np.ndarray
    gu_pos_true: np.ndarray
    noise_flag: int
    env_features: np.ndarray
    label_gain: float


class ChannelDataset:
    """Column-oriented sample store; one row per measurement."""

    def __init__(self, uav: np.ndarray, gu_reported: np.ndarray, gu_true: np.ndarray,
                 flag: np.ndarray, env: np.ndarray, gain_db: np.ndarray):
        self.uav = np.asarray(uav, dtype=float)
        self.gu_reported = np.asarray(gu_reported, dtype=float)
        self.gu_true = np.asarray(gu_true, dtype=float)
        self.flag = np.asarray(flag, dtype=float)
        self.env = np.asarray(env, dtype=float)
        self.gain_db = np.asarray(gain_db, dtype=float)

    def __len__(self) -> int:
        return self.uav.shape[0]

    def __getitem__(self, i: int) -> ChannelSample:
        return ChannelSample(self.uav[i], self.gu_reported[i], self.gu_true[i],
                             int(self.flag[i]), self.env[i], float(self.gain_db[i]))

    def __iter__(self) -> Iterator[ChannelSample]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "ChannelDataset":
        return ChannelDataset(self.uav[idx], self.gu_reported[idx], self.gu_true[idx],
                              self.flag[idx], self.env[idx], self.gain_db[idx])

    @staticmethod
    def concat(parts: Sequence["ChannelDataset"]) -> "ChannelDataset":
        return ChannelDataset(*(np.concatenate([getattr(p, f) for p in parts])
                                for f in ("uav", "gu_reported", "gu_true",
                                          "flag", "env", "gain_db")))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(DATASET_CSV_FIELDS)
            for i in range(len(self)):
                w.writerow([*self.uav[i], *self.gu_reported[i], *self.gu_true[i],
                            int(self.flag[i]), env_feature_hash(self.env[i]),
                            self.gain_db[i]])

    @staticmethod
    def from_csv(path, env_features: np.ndarray) -> "ChannelDataset":
        """Rebuild a dataset from CSV plus the env feature vector it was
        collected under (the CSV stores only a hash of it)."""
        rows = []
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            if header != DATASET_CSV_FIELDS:
                raise ValueError(f"unexpected dataset header: {header}")
            expected = env_feature_hash(env_features)
            for row in r:
                if row[10] != expected:
                    raise ValueError("dataset env hash does not match provided env features")
                rows.append([float(v) for v in row[:9]] + [float(row[9]), float(row[11])])
        arr = np.array(rows)
        n = arr.shape[0]
        return ChannelDataset(arr[:, 0:3], arr[:, 3:6], arr[:, 6:9], arr[:, 9],
                              np.tile(env_features, (n, 1)), arr[:, 10])


def collect_dataset(world: World, params: LinkBudgetParams, cep: CepModel, n: int,
                    rng: np.random.Generator, gu_sampling: str = "users",
                    gu_max_z: float = 250.0, env_buildings: int = 10) -> ChannelDataset:
    """Draw n (UAV, GU) measurement pairs and label them with the true gain.

    UAV positions are uniform over the flight box; GU positions come either
    from the world's user list or (gu_sampling="uniform") uniformly from the
    sub-250m layer, for pretraining a map that must cover arbitrary users.
    Exactly ceil(n/2) rows get noise_flag=1 with a CEP-perturbed reported
    position; labels always use the true position.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    if gu_sampling not in ("users", "uniform"):
        raise ValueError(f"unknown gu_sampling mode: {gu_sampling}")
    bounds = world.bounds.to_array()
    env = env_feature_vector(world, env_buildings)

    uav = np.empty((n, 3))
    gu_true = np.empty((n, 3))
    gain = np.empty(n)
    for i in range(n):
        while True:
            u = np.array([rng.uniform(0, bounds[0]), rng.uniform(0, bounds[1]),
                          rng.uniform(world.uav_min_height, bounds[2])])
            if gu_sampling == "users":
                g = world.users[int(rng.integers(len(world.users)))].position.to_array()
            else:
                g = sample_user_position(world, gu_max_z, rng).to_array()
            if np.linalg.norm(u - g) >= 1.0:
                break
        uav[i] = u
        gu_true[i] = g
        gain[i] = true_gain(u, g, world, params)

    flag = np.zeros(n)
    noisy_idx = rng.permutation(n)[: int(np.ceil(n / 2))]
    flag[noisy_idx] = 1.0
    gu_reported = gu_true.copy()
    for i in noisy_idx:
        gu_reported[i] = np.clip(perturb(gu_true[i], cep, rng), 0.0, bounds)

    return ChannelDataset(uav, gu_reported, gu_true, flag,
                          np.tile(env, (n, 1)), gain)


@dataclass
class NormStats:
    """Per-feature affine normalization; constant features get unit scale so
    they pass through centered (and become live if they later vary)."""

    feature_mean: np.ndarray
    feature_std: np.ndarray
    label_mean: float
    label_std: float

    @staticmethod
    def fit(x: np.ndarray, y: np.ndarray) -> "NormStats":
        std = x.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)
        y_std = float(y.std())
        return NormStats(x.mean(axis=0), std, float(y.mean()),
                         y_std if y_std >= 1e-12 else 1.0)

    def norm_features(self, x: np.ndarray) -> np.ndarray:
        return (x - self.feature_mean) / self.feature_std

    def denorm_features(self, xn: np.ndarray) -> np.ndarray:
        return xn * self.feature_std + self.feature_mean

    def norm_label(self, y):
        return (y - self.label_mean) / self.label_std

    def denorm_label(self, yn):
        return yn * self.label_std + self.label_mean


def build_features(ds: ChannelDataset, include_env: bool) -> np.ndarray:
    cols = [ds.uav, ds.gu_reported, ds.flag[:, None]]
    if include_env:
        cols.append(ds.env)
    return np.concatenate(cols, axis=1)


def query_features(uav, gu_reported, flag, env_features, include_env: bool) -> np.ndarray:
    """Feature rows for a batch of GU positions against one UAV position."""
    gu = np.atleast_2d(np.asarray(gu_reported, dtype=float))
    n = gu.shape[0]
    u = np.tile(np.asarray(uav, dtype=float), (n, 1))
    f = np.full((n, 1), float(flag))
    cols = [u, gu, f]
    if include_env:
        cols.append(np.tile(np.asarray(env_features, dtype=float), (n, 1)))
    return np.concatenate(cols, axis=1)


@dataclass
class CkmModel:
    members: list[Sequential]
    norm: NormStats
    hyper: CkmHyper
    input_dim: int
    training_meta: dict = field(default_factory=dict)
    replay: ChannelDataset | None = None

    def member_predictions(self, x_raw: np.ndarray) -> np.ndarray:
        """(members, n) gain predictions in dB for raw feature rows."""
        xn = self.norm.norm_features(np.atleast_2d(x_raw))
        out = np.stack([m.forward(xn, train=False)[:, 0] for m in self.members])
        return self.norm.denorm_label(out)

    def predict_batch(self, x_raw: np.ndarray) -> np.ndarray:
        return self.member_predictions(x_raw).mean(axis=0)


def predict(model: CkmModel, uav, gu_reported, flag: int, env_features) -> float:
    """Ensemble-mean gain (dB) for one query."""
    x = query_features(uav, gu_reported, flag, env_features,
                       model.hyper.include_env_features)
    return float(model.predict_batch(x)[0])


def predict_interval(model: CkmModel, uav, gu_reported, flag: int, env_features) -> dict:
    """5th/50th/95th percentile of the ensemble member predictions."""
    if len(model.members) < 3:
        raise ValueError("prediction intervals need >= 3 ensemble members")
    x = query_features(uav, gu_reported, flag, env_features,
                       model.hyper.include_env_features)
    preds = model.member_predictions(x)[:, 0]
    lo, med, hi = np.percentile(preds, [5.0, 50.0, 95.0])
    return {"lo": float(lo), "median": float(med), "hi": float(hi)}


def _train_member(net: Sequential, x: np.ndarray, y: np.ndarray, epochs: int,
                  batch: int, lr: float, rng: np.random.Generator) -> None:
    opt = Adam([p for _n, p, _g in net.trainables()], lr=lr)
    n = x.shape[0]
    for epoch in range(epochs):
        # step decay sharpens the late fit around occlusion boundaries
        frac = epoch / max(epochs, 1)
        opt.lr = lr * (1.0 if frac < 0.6 else 0.3 if frac < 0.85 else 0.1)
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            if idx.size < 2:
                continue
            net.zero_grads()
            pred = net.forward(x[idx], train=True)
            loss, gpred = mse_loss(pred[:, 0], y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch offset {start}")
            net.backward(gpred[:, None])
            opt.step([g for _n, _p, g in net.trainables()])


def _rmse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((a - b) ** 2))) if a.size else float("nan")


def train(dataset: ChannelDataset, hyper: CkmHyper = CkmHyper()) -> CkmModel:
    """Fit the ensemble on a measurement dataset.

    Each member trains from its own seed on a bootstrap resample of the
    training split; the model records held-out RMSE overall and separately
    for clean (flag=0) and noisy (flag=1) rows.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(hyper.seed)
    x_all = build_features(dataset, hyper.include_env_features)
    y_all = dataset.gain_db

    perm = rng.permutation(len(dataset))
    n_val = int(round(hyper.val_fraction * len(dataset)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if train_idx.size == 0:
        train_idx = perm
    norm = NormStats.fit(x_all[train_idx], y_all[train_idx])
    xn = norm.norm_features(x_all)
    yn = norm.norm_label(y_all)

    members = []
    for k in range(hyper.members):
        member_rng = np.random.default_rng(hyper.seed + 7919 * (k + 1))
        boot = train_idx[member_rng.integers(0, train_idx.size, train_idx.size)]
        net = residual_regressor(x_all.shape[1], hyper.width, hyper.blocks, member_rng)
        _train_member(net, xn[boot], yn[boot], hyper.epochs, hyper.batch,
                      hyper.lr, member_rng)
        members.append(net)

    model = CkmModel(members=members, norm=norm, hyper=hyper, input_dim=x_all.shape[1])
    if val_idx.size:
        val_pred = model.predict_batch(x_all[val_idx])
        val_true = y_all[val_idx]
        val_flag = dataset.flag[val_idx]
        model.training_meta = {
            "n_train": int(train_idx.size),
            "n_val": int(val_idx.size),
            "rmse_val": _rmse(val_pred, val_true),
            "rmse_val_clean": _rmse(val_pred[val_flag == 0], val_true[val_flag == 0]),
            "rmse_val_noisy": _rmse(val_pred[val_flag == 1], val_true[val_flag == 1]),
        }
    cap = min(hyper.replay_cap, len(dataset))
    model.replay = dataset.subset(rng.permutation(len(dataset))[:cap])
    return model


def update_incremental(model: CkmModel, new_dataset: ChannelDataset,
                       hyper: CkmHyper | None = None) -> CkmModel:
    """Continue training on a mixture of replay and new-environment data.

    Normalization statistics stay frozen so old and new data share one input
    scale. The model is updated in place and returned; an empty new dataset
    is a no-op.
    """
    if len(new_dataset) == 0:
        return model
    hp = hyper if hyper is not None else model.hyper
    rng = np.random.default_rng(hp.seed + 104729)

    parts = [new_dataset]
    if model.replay is not None and len(model.replay) > 0 and hp.replay_ratio > 0:
        n_old = int(round(hp.replay_ratio / (1.0 - hp.replay_ratio) * len(new_dataset)))
        n_old = min(n_old, len(model.replay))
        if n_old > 0:
            parts.append(model.replay.subset(rng.permutation(len(model.replay))[:n_old]))
    mix = ChannelDataset.concat(parts)

    x = model.norm.norm_features(build_features(mix, hp.include_env_features))
    y = model.norm.norm_label(mix.gain_db)
    for k, net in enumerate(model.members):
        member_rng = np.random.default_rng(hp.seed + 15485863 + 7919 * (k + 1))
        _train_member(net, x, y, hp.update_epochs, hp.batch, hp.lr, member_rng)

    merged = ChannelDataset.concat([model.replay, new_dataset]) \
        if model.replay is not None else new_dataset
    cap = min(hp.replay_cap, len(merged))
    model.replay = merged.subset(rng.permutation(len(merged))[:cap])
    return model


def copy_model(model: CkmModel) -> CkmModel:
    """Deep copy via an in-memory serialization round trip."""
    buf = io.BytesIO()
    save_model(model, buf)
    buf.seek(0)
    return load_model(buf)


def save_model(model: CkmModel, path) -> None:
    arrays: dict[str, np.ndarray] = {}
    for k, net in enumerate(model.members):
        for name, arr in net.state_dict().items():
            arrays[f"member{k}/{name}"] = arr
    arrays["norm/feature_mean"] = model.norm.feature_mean
    arrays["norm/feature_std"] = model.norm.feature_std
    if model.replay is not None:
        for f in ("uav", "gu_reported", "gu_true", "flag", "env", "gain_db"):
            arrays[f"replay/{f}"] = getattr(model.replay, f)
    meta = {
        "format_version": MODEL_FORMAT_VERSION,
        "hyper": asdict(model.hyper),
        "input_dim": model.input_dim,
        "label_mean": model.norm.label_mean,
        "label_std": model.norm.label_std,
        "training_meta": model.training_meta,
    }
    arrays["meta_json"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_model(path) -> CkmModel:
    try:
        with np.load(path) as data:
            arrays = {k: data[k] for k in data.files}
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, ValueError, OSError, io.UnsupportedOperation) as exc:
        raise ModelIOError(f"cannot read model file {path}: {exc}") from exc
    if "meta_json" not in arrays:
        raise ModelIOError(f"not a channel map model file: {path}")
    meta = json.loads(bytes(arrays["meta_json"]).decode())
    if meta.get("format_version") != MODEL_FORMAT_VERSION:
        raise ModelIOError(f"unsupported model format version: {meta.get('format_version')}")
    hyper = CkmHyper(**meta["hyper"])
    norm = NormStats(arrays["norm/feature_mean"], arrays["norm/feature_std"],
                     meta["label_mean"], meta["label_std"])
    rng = np.random.default_rng(0)
    members = []
    for k in range(hyper.members):
        net = residual_regressor(meta["input_dim"], hyper.width, hyper.blocks, rng)
        try:
            net.load_state_dict({name.split("/", 1)[1]: arr for name, arr in arrays.items()
                                 if name.startswith(f"member{k}/")})
        except ValueError as exc:
            raise ModelIOError(f"corrupt model file {path}: {exc}") from exc
        members.append(net)
    replay = None
    if "replay/uav" in arrays:
        replay = ChannelDataset(*(arrays[f"replay/{f}"] for f in
                                  ("uav", "gu_reported", "gu_true", "flag", "env", "gain_db")))
    return CkmModel(members=members, norm=norm, hyper=hyper,
                    input_dim=int(meta["input_dim"]),
                    training_meta=meta.get("training_meta", {}), replay=replay)
