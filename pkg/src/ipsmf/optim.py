"""Inverse-propensity-weighted loss, Adam stepping, and the two training schedules.

The concurrent schedule updates every parameter group on each mini-batch. The
alternating schedule runs one full epoch updating only the user-side groups
(user embeddings, user offsets, global offset), then one full epoch updating
only the item-side groups (item embeddings, item offsets), which damps the
update noise caused by widely varying inverse-propensity weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import RatingDataset, SplitBundle
from .model import MFParameters, PARAM_GROUPS, init_params, predict_many
from .propensity import PropensityModel, score_dataset

logger = logging.getLogger(__name__)

USER_PHASE_GROUPS = ("user_emb", "user_off", "global_off")
ITEM_PHASE_GROUPS = ("item_emb", "item_off")


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer hyperparameters and schedule for fitting the rating model."""

    learning_rate: float = 1e-3
    l2_weight: float = 1e-5
    batch_size: int = 1024
    max_epochs: int = 500
    patience: int = 10
    schedule: str = "concurrent"
    seed: int = 0
    embedding_dim: int = 16
    init_scale: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.l2_weight < 0:
            raise ValueError("l2_weight must be nonnegative")
        if self.batch_size <= 0 or self.max_epochs <= 0 or self.patience <= 0:
            raise ValueError("batch_size, max_epochs, and patience must be positive")
        if self.embedding_dim <= 0:
            raise ValueError("embedding_dim must be positive")
        if self.init_scale < 0:
            raise ValueError("init_scale must be nonnegative")
        if self.schedule not in ("concurrent", "alternating"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class AdamState:
    """First/second moment accumulators shaped like the parameters, with one
    update counter per parameter group (groups frozen in a phase do not age)."""

    m: MFParameters
    v: MFParameters
    steps: dict[str, int]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam_state(params: MFParameters) -> AdamState:
    zeros = lambda: MFParameters(
        *(np.zeros_like(params.group(g)) for g in PARAM_GROUPS)
    )
    return AdamState(m=zeros(), v=zeros(), steps={g: 0 for g in PARAM_GROUPS})


def adam_step(
    params: MFParameters,
    grads: MFParameters,
    state: AdamState,
    mask: Sequence[str],
    lr: float,
) -> tuple[MFParameters, AdamState]:
    """Bias-corrected adaptive-moment update applied in place to the groups in
    `mask`; all other groups (and their moments) stay bit-identical."""
    for name in mask:
        state.steps[name] += 1
        t = state.steps[name]
        g = grads.group(name)
        m = state.m.group(name)
        v = state.v.group(name)
        m[...] = state.beta1 * m + (1.0 - state.beta1) * g
        v[...] = state.beta2 * v + (1.0 - state.beta2) * g**2
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        params.group(name)[...] -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def _check_propensities(propensities: np.ndarray, n: int) -> np.ndarray:
    propensities = np.asarray(propensities, dtype=float)
    if propensities.shape != (n,):
        raise ValueError("propensities must align with the batch triples")
    if np.any(propensities <= 0) or np.any(propensities > 1):
        raise ValueError("propensities must lie in (0, 1]")
    return propensities


def ips_loss(
    params: MFParameters,
    batch: RatingDataset,
    propensities: np.ndarray,
    l2_weight: float,
    num_users: int,
    num_items: int,
    normalization: str = "observed",
) -> float:
    """Inverse-propensity-weighted squared error plus L2 penalty.

    With ``normalization="observed"`` the weighted sum is divided by the number
    of triples in `batch` (the training objective). With ``"population"`` it is
    divided by ``num_users * num_items``, which makes the statistic an unbiased
    estimate of the full-matrix mean squared error under the true propensities.
    """
    propensities = _check_propensities(propensities, len(batch))
    preds = predict_many(params, batch.users, batch.items)
    weighted = np.sum((preds - batch.ratings) ** 2 / propensities)
    if normalization == "observed":
        denom = len(batch)
    elif normalization == "population":
        denom = num_users * num_items
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    return float(weighted / denom + l2_weight * params.squared_norm())


def ips_gradient(
    params: MFParameters,
    batch: RatingDataset,
    propensities: np.ndarray,
    l2_weight: float,
) -> MFParameters:
    """Analytic gradient of :func:`ips_loss` (observed normalization).

    The data term only touches rows indexed by the batch; the L2 term
    contributes ``2 * l2_weight * theta`` to every parameter.
    """
    propensities = _check_propensities(propensities, len(batch))
    grads = MFParameters(
        *(2.0 * l2_weight * params.group(g) for g in PARAM_GROUPS)
    )
    _add_data_gradient(
        grads, params, batch.users, batch.items, batch.ratings, propensities,
        PARAM_GROUPS,
    )
    return grads


def _add_data_gradient(grads, params, users, items, ratings, propensities, mask):
    n = len(users)
    preds = (
        np.einsum("nd,nd->n", params.user_emb[users], params.item_emb[items])
        + params.user_off[users]
        + params.item_off[items]
        + params.global_off
    )
    coef = 2.0 * (preds - ratings) / (propensities * n)
    if "user_emb" in mask:
        np.add.at(grads.user_emb, users, coef[:, None] * params.item_emb[items])
    if "item_emb" in mask:
        np.add.at(grads.item_emb, items, coef[:, None] * params.user_emb[users])
    if "user_off" in mask:
        grads.user_off += np.bincount(users, weights=coef, minlength=len(grads.user_off))
    if "item_off" in mask:
        grads.item_off += np.bincount(items, weights=coef, minlength=len(grads.item_off))
    if "global_off" in mask:
        grads.global_off += coef.sum()


def _masked_gradient(params, users, items, ratings, propensities, l2_weight, mask):
    grads = MFParameters(
        *(
            2.0 * l2_weight * params.group(g) if g in mask
            else np.zeros_like(params.group(g))
            for g in PARAM_GROUPS
        )
    )
    _add_data_gradient(grads, params, users, items, ratings, propensities, mask)
    return grads


def evaluate_validation(
    params: MFParameters,
    validation: RatingDataset,
    propensity_model: PropensityModel,
) -> float:
    """Self-normalized inverse-propensity-weighted MSE over the validation set."""
    if len(validation) == 0:
        raise ValueError("validation set is empty")
    p = score_dataset(propensity_model, validation)
    return _snips(params, validation, p)


def _snips(params, data, propensities) -> float:
    preds = predict_many(params, data.users, data.items)
    w = 1.0 / propensities
    return float(np.sum(w * (preds - data.ratings) ** 2) / np.sum(w))


@dataclass
class HistoryRow:
    epoch: int
    train_ips_loss: float
    validation_snips_mse: float
    test_mse: float | None = None


@dataclass
class TrainResult:
    params: MFParameters
    history: list[HistoryRow]
    best_epoch: int
    best_validation: float


def save_history(rows: list[HistoryRow], path: str | Path, delimiter: str = ",") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(delimiter.join(
            ("epoch", "train_ips_loss", "validation_snips_mse", "test_mse")) + "\n")
        for row in rows:
            test = "" if row.test_mse is None else repr(float(row.test_mse))
            fh.write(
                f"{row.epoch}{delimiter}{float(row.train_ips_loss)!r}{delimiter}"
                f"{float(row.validation_snips_mse)!r}{delimiter}{test}\n"
            )


def _fit(
    data: SplitBundle,
    propensity_model: PropensityModel,
    config: TrainConfig,
    schedule: str,
    epoch_callback: Callable[[str, int, MFParameters], None] | None = None,
) -> TrainResult:
    train, validation = data.train, data.validation
    if len(train) == 0:
        raise ValueError("train set is empty")
    if len(validation) == 0:
        raise ValueError("validation set is empty (needed for early stopping)")
    users, items = train.users, train.items
    ratings = train.ratings.astype(float)
    p_train = _check_propensities(score_dataset(propensity_model, train), len(train))
    p_val = _check_propensities(
        score_dataset(propensity_model, validation), len(validation)
    )
    track_test = len(data.test) > 0

    params = init_params(
        train.num_users,
        train.num_items,
        config.embedding_dim,
        seed=config.seed,
        scale=config.init_scale,
        global_offset=float(train.ratings.mean()),
    )
    state = init_adam_state(params)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    phases = (
        [("all", PARAM_GROUPS)]
        if schedule == "concurrent"
        else [("user", USER_PHASE_GROUPS), ("item", ITEM_PHASE_GROUPS)]
    )

    n = len(train)
    history: list[HistoryRow] = []
    best_val, best_params, best_epoch, bad_evals = np.inf, params.copy(), 0, 0

    for epoch in range(1, config.max_epochs + 1):
        for phase_name, mask in phases:
            perm = shuffle_rng.permutation(n)
            for start in range(0, n, config.batch_size):
                idx = perm[start:start + config.batch_size]
                grads = _masked_gradient(
                    params, users[idx], items[idx], ratings[idx], p_train[idx],
                    config.l2_weight, mask,
                )
                adam_step(params, grads, state, mask, config.learning_rate)
            if epoch_callback is not None:
                epoch_callback(phase_name, epoch, params)

        train_loss = ips_loss(
            params, train, p_train, config.l2_weight,
            train.num_users, train.num_items,
        )
        val_score = _snips(params, validation, p_val)
        if not np.isfinite(train_loss) or not np.isfinite(val_score):
            raise TrainingDivergedError(
                f"non-finite loss at epoch {epoch} "
                f"(train {train_loss}, validation {val_score})"
            )
        test_mse = None
        if track_test:
            preds = predict_many(params, data.test.users, data.test.items)
            test_mse = float(np.mean((preds - data.test.ratings) ** 2))
        history.append(HistoryRow(epoch, train_loss, val_score, test_mse))

        if val_score < best_val:
            best_val, best_params, best_epoch, bad_evals = (
                val_score, params.copy(), epoch, 0,
            )
        else:
            bad_evals += 1
            if bad_evals >= config.patience:
                break

    return TrainResult(
        params=best_params,
        history=history,
        best_epoch=best_epoch,
        best_validation=float(best_val),
    )


def train_concurrent(
    data: SplitBundle,
    propensity_model: PropensityModel,
    config: TrainConfig,
    epoch_callback: Callable[[str, int, MFParameters], None] | None = None,
) -> TrainResult:
    """Mini-batch training updating all parameter groups each batch.

    Batches are reshuffled every epoch; validation is scored once per epoch and
    the parameters from the best validation epoch are returned.
    """
    return _fit(data, propensity_model, config, "concurrent", epoch_callback)


def train_alternating(
    data: SplitBundle,
    propensity_model: PropensityModel,
    config: TrainConfig,
    epoch_callback: Callable[[str, int, MFParameters], None] | None = None,
) -> TrainResult:
    """Phase-alternating training: per outer epoch, one full pass updating only
    {user_emb, user_off, global_off}, then one full pass updating only
    {item_emb, item_off}. Validation is scored once per phase pair."""
    return _fit(data, propensity_model, config, "alternating", epoch_callback)
