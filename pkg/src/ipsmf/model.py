"""Rating predictors: factorized model with offsets and the per-item-average baseline."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import RatingDataset

# Parameter group names, used for masked optimizer updates and checkpoints.
PARAM_GROUPS = ("user_emb", "item_emb", "user_off", "item_off", "global_off")


@dataclass
class MFParameters:
    """Factorization parameters: embeddings plus user/item/global offsets.

    The prediction for (u, i) is ``user_emb[u] . item_emb[i] + user_off[u]
    + item_off[i] + global_off``. ``global_off`` is a 0-d array so that all
    groups share the optimizer code path.
    """

    user_emb: np.ndarray
    item_emb: np.ndarray
    user_off: np.ndarray
    item_off: np.ndarray
    global_off: np.ndarray

    def __post_init__(self):
        self.global_off = np.asarray(self.global_off, dtype=np.float64)
        if self.user_emb.shape[1] != self.item_emb.shape[1]:
            raise ValueError("user and item embedding dimensions differ")
        if self.user_emb.shape[0] != self.user_off.shape[0]:
            raise ValueError("user_off length does not match user_emb")
        if self.item_emb.shape[0] != self.item_off.shape[0]:
            raise ValueError("item_off length does not match item_emb")

    @property
    def num_users(self) -> int:
        return self.user_emb.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_emb.shape[0]

    @property
    def dim(self) -> int:
        return self.user_emb.shape[1]

    def group(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def copy(self) -> "MFParameters":
        return MFParameters(*(self.group(g).copy() for g in PARAM_GROUPS))

    def squared_norm(self) -> float:
        return float(sum(np.sum(self.group(g) ** 2) for g in PARAM_GROUPS))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(self.group(g))) for g in PARAM_GROUPS)


def init_params(
    num_users: int,
    num_items: int,
    dim: int,
    seed: int,
    scale: float = 0.1,
    global_offset: float = 0.0,
) -> MFParameters:
    """Gaussian embeddings with the given scale, zero offsets, fixed global offset.

    Training harnesses pass the mean train rating as ``global_offset`` so the
    model starts centered. Deterministic per seed.
    """
    if dim <= 0:
        raise ValueError("embedding dimension must be positive")
    rng = np.random.default_rng(seed)
    return MFParameters(
        user_emb=rng.normal(0.0, 1.0, size=(num_users, dim)) * scale,
        item_emb=rng.normal(0.0, 1.0, size=(num_items, dim)) * scale,
        user_off=np.zeros(num_users),
        item_off=np.zeros(num_items),
        global_off=np.array(float(global_offset)),
    )


def _check_index(value: int, bound: int, what: str) -> None:
    if not 0 <= value < bound:
        raise IndexError(f"{what} index {value} out of range [0, {bound})")


def predict(params: MFParameters, user: int, item: int) -> float:
    """Dot product of the two embeddings plus the three offsets; unclamped."""
    _check_index(user, params.num_users, "user")
    _check_index(item, params.num_items, "item")
    return float(
        params.user_emb[user] @ params.item_emb[item]
        + params.user_off[user]
        + params.item_off[item]
        + params.global_off
    )


def predict_many(params: MFParameters, users: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Vectorized predictions for parallel index arrays."""
    users = np.asarray(users)
    items = np.asarray(items)
    if len(users) and (users.min() < 0 or users.max() >= params.num_users):
        raise IndexError("user index out of range")
    if len(items) and (items.min() < 0 or items.max() >= params.num_items):
        raise IndexError("item index out of range")
    return (
        np.einsum("nd,nd->n", params.user_emb[users], params.item_emb[items])
        + params.user_off[users]
        + params.item_off[items]
        + params.global_off
    )


@dataclass
class AvgModel:
    """Non-personalized baseline: mean observed rating per item, global fallback."""

    per_item_mean: np.ndarray
    item_counts: np.ndarray
    global_mean: float


def fit_avg(train: RatingDataset) -> AvgModel:
    if len(train) == 0:
        raise ValueError("cannot fit the average baseline on an empty dataset")
    counts = np.bincount(train.items, minlength=train.num_items)
    sums = np.bincount(train.items, weights=train.ratings.astype(float), minlength=train.num_items)
    global_mean = float(train.ratings.mean())
    means = np.full(train.num_items, global_mean)
    observed = counts > 0
    means[observed] = sums[observed] / counts[observed]
    return AvgModel(per_item_mean=means, item_counts=counts, global_mean=global_mean)


def predict_avg(model: AvgModel, user: int, item: int) -> float:
    """Item mean when the item was observed in training, else the global mean."""
    if 0 <= item < len(model.per_item_mean) and model.item_counts[item] > 0:
        return float(model.per_item_mean[item])
    return model.global_mean


def predict_avg_many(model: AvgModel, users: np.ndarray, items: np.ndarray) -> np.ndarray:
    items = np.asarray(items)
    preds = np.full(len(items), model.global_mean)
    valid = (items >= 0) & (items < len(model.per_item_mean))
    observed = valid & (model.item_counts[np.where(valid, items, 0)] > 0)
    preds[observed] = model.per_item_mean[items[observed]]
    return preds


# Checkpoint layout (documented in README): one ASCII header line
#   "ipsmf-checkpoint v1 num_users=U num_items=I dim=D seed=S\n"
# followed by row-major little-endian float64 blocks in PARAM_GROUPS order.

_CHECKPOINT_MAGIC = "ipsmf-checkpoint v1"


def save_checkpoint(params: MFParameters, path: str | Path, seed: int = 0) -> None:
    header = (
        f"{_CHECKPOINT_MAGIC} num_users={params.num_users} "
        f"num_items={params.num_items} dim={params.dim} seed={seed}\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for name in PARAM_GROUPS:
            fh.write(np.ascontiguousarray(params.group(name), dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[MFParameters, dict[str, int]]:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").strip()
        if not header.startswith(_CHECKPOINT_MAGIC):
            raise ValueError(f"{path}: not an ipsmf checkpoint")
        meta = dict(
            kv.split("=") for kv in header[len(_CHECKPOINT_MAGIC):].split()
        )
        meta = {k: int(v) for k, v in meta.items()}
        n_u, n_i, dim = meta["num_users"], meta["num_items"], meta["dim"]
        shapes = {
            "user_emb": (n_u, dim),
            "item_emb": (n_i, dim),
            "user_off": (n_u,),
            "item_off": (n_i,),
            "global_off": (),
        }
        arrays = {}
        for name in PARAM_GROUPS:
            count = int(np.prod(shapes[name], dtype=np.int64)) if shapes[name] else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path}: truncated checkpoint block {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f8").copy().reshape(shapes[name])
    return MFParameters(**arrays), meta
