"""Evaluation metrics on the unbiased test set."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import RatingDataset
from .model import AvgModel, MFParameters, predict_avg_many, predict_many


@dataclass(frozen=True)
class MetricReport:
    """Pointwise errors plus per-entity RMSE averages.

    mse/mae/rmse are over all test triples; rmse_per_user (rmse_per_item) is
    the mean over users (items) with at least one test triple of their
    individual RMSE.
    """

    mse: float
    mae: float
    rmse: float
    rmse_per_user: float
    rmse_per_item: float
    num_triples: int
    num_users: int
    num_items: int


def _predictions(model, test: RatingDataset) -> np.ndarray:
    if isinstance(model, MFParameters):
        return predict_many(model, test.users, test.items)
    if isinstance(model, AvgModel):
        return predict_avg_many(model, test.users, test.items)
    if callable(model):
        return np.asarray(model(test.users, test.items), dtype=float)
    raise TypeError(f"cannot predict with {type(model).__name__}")


def _per_entity_rmse(indices: np.ndarray, sq_err: np.ndarray, minlength: int) -> tuple[float, int]:
    counts = np.bincount(indices, minlength=minlength)
    sums = np.bincount(indices, weights=sq_err, minlength=minlength)
    observed = counts > 0
    per_entity = np.sqrt(sums[observed] / counts[observed])
    return float(per_entity.mean()), int(observed.sum())


def evaluate(
    model,
    test: RatingDataset,
    clamp: bool = False,
) -> MetricReport:
    """Score a predictor on held-out triples.

    `model` may be MFParameters, an AvgModel, or a callable
    ``(users, items) -> predictions``. With ``clamp=True`` predictions are
    clipped to the dataset's rating scale before scoring; the default reports
    raw errors.
    """
    if len(test) == 0:
        raise ValueError("test set is empty")
    preds = _predictions(model, test)
    if clamp:
        lo, hi = test.rating_scale
        preds = np.clip(preds, lo, hi)
    err = preds - test.ratings
    sq = err**2
    mse = float(sq.mean())
    rmse_u, n_users = _per_entity_rmse(test.users, sq, test.num_users)
    rmse_i, n_items = _per_entity_rmse(test.items, sq, test.num_items)
    return MetricReport(
        mse=mse,
        mae=float(np.abs(err).mean()),
        rmse=float(np.sqrt(mse)),
        rmse_per_user=rmse_u,
        rmse_per_item=rmse_i,
        num_triples=len(test),
        num_users=n_users,
        num_items=n_items,
    )


METRIC_FIELDS = ("mse", "mae", "rmse", "rmse_per_user", "rmse_per_item")


def summarize_runs(reports: list[MetricReport]) -> dict[str, float]:
    """Mean and standard deviation of each metric over independent runs."""
    out: dict[str, float] = {"n_runs": len(reports)}
    for name in METRIC_FIELDS:
        values = np.array([getattr(r, name) for r in reports])
        out[f"{name}_mean"] = float(values.mean())
        out[f"{name}_std"] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return out


def bootstrap_interval(
    values: np.ndarray,
    num_resamples: int = 1000,
    confidence: float = 0.95,
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile bootstrap confidence interval for the mean of `values`."""
    values = np.asarray(values, dtype=float)
    if len(values) == 0:
        raise ValueError("cannot bootstrap an empty sample")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(values), size=(num_resamples, len(values)))
    means = values[idx].mean(axis=1)
    alpha = (1.0 - confidence) / 2.0
    return (
        float(np.quantile(means, alpha)),
        float(np.quantile(means, 1.0 - alpha)),
    )
