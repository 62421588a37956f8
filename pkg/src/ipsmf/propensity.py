"""Observation-propensity estimation, clipping, normalization, and scoring.

Five estimator families are supported. Popularity scores depend only on the
item, positivity scores only on the rating value, and the joint (multifactorial)
family on the (item, rating) combination. The mf_learned family fits a
factorized logistic model of the observation matrix, and ground_truth wraps an
exact per-(item, rating) table from a simulator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import RatingDataset

logger = logging.getLogger(__name__)

FAMILIES = (
    "uniform",
    "popularity",
    "positivity",
    "multifactorial",
    "mf_learned",
    "ground_truth",
)


class PropensityError(ValueError):
    """An estimator cannot produce valid propensities from the given data."""


@dataclass(frozen=True)
class SmoothingConfig:
    """Additive-count smoothing strengths for the joint estimator.

    alpha1 smooths the observed (item, rating) frequency table; alpha2 smooths
    the item-given-rating distribution estimated from the unbiased sample.
    """

    alpha1: float = 1.0
    alpha2: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "alpha1", float(self.alpha1))
        object.__setattr__(self, "alpha2", float(self.alpha2))
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("smoothing strengths must be nonnegative")


@dataclass(frozen=True)
class PropensityModel:
    """A scoring object mapping (user, item, rating) to an observation probability.

    Exactly one of the table fields is set, according to `family`. Scores are
    computed as ``min(raw * scale, 1)`` floored at `clip_floor`; `scale` is
    adjusted by :func:`normalize` and `clip_floor` by :func:`clip`.
    """

    family: str
    rating_scale: tuple[int, int] = (1, 5)
    uniform_value: float | None = None
    per_rating: np.ndarray | None = None        # (R,)
    per_item: np.ndarray | None = None          # (I,)
    per_item_rating: np.ndarray | None = None   # (I, R)
    per_user_item: np.ndarray | None = None     # (U, I), mf_learned only
    mf_factors: tuple[np.ndarray, ...] | None = None  # (P, Q, a, b, c) logits
    scale: float = 1.0
    clip_floor: float = 0.0
    normalization: str = "none"
    alpha1: float | None = None
    alpha2: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown propensity family {self.family!r}")

    @property
    def num_rating_values(self) -> int:
        lo, hi = self.rating_scale
        return hi - lo + 1

    def _raw(self, users: np.ndarray, items: np.ndarray, ratings: np.ndarray) -> np.ndarray:
        lo, hi = self.rating_scale
        if np.any(ratings < lo) or np.any(ratings > hi):
            raise IndexError("rating outside the model's rating scale")
        r_idx = ratings - lo
        if self.family == "uniform":
            return np.full(len(users), self.uniform_value, dtype=float)
        if self.family == "popularity":
            self._check_range(items, len(self.per_item), "item")
            return self.per_item[items]
        if self.family == "positivity":
            return self.per_rating[r_idx]
        if self.family in ("multifactorial", "ground_truth"):
            self._check_range(items, self.per_item_rating.shape[0], "item")
            return self.per_item_rating[items, r_idx]
        if self.family == "mf_learned":
            if self.per_user_item is not None:
                self._check_range(users, self.per_user_item.shape[0], "user")
                self._check_range(items, self.per_user_item.shape[1], "item")
                return self.per_user_item[users, items]
            P, Q, a, b, c = self.mf_factors
            self._check_range(users, P.shape[0], "user")
            self._check_range(items, Q.shape[0], "item")
            logits = (
                np.einsum("nd,nd->n", P[users], Q[items]) + a[users] + b[items] + c
            )
            return 1.0 / (1.0 + np.exp(-logits))
        raise AssertionError(self.family)

    @staticmethod
    def _check_range(idx: np.ndarray, bound: int, what: str) -> None:
        if len(idx) and (idx.min() < 0 or idx.max() >= bound):
            raise IndexError(f"{what} index out of range [0, {bound})")


def score_many(
    model: PropensityModel,
    users: np.ndarray,
    items: np.ndarray,
    ratings: np.ndarray,
) -> np.ndarray:
    """Vectorized propensity scores for parallel (user, item, rating) arrays."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    ratings = np.asarray(ratings, dtype=np.int64)
    raw = model._raw(users, items, ratings) * model.scale
    return np.maximum(np.minimum(raw, 1.0), model.clip_floor)


def score(model: PropensityModel, user: int, item: int, rating: int) -> float:
    """Propensity of observing the given rating for one (user, item) pair."""
    return float(
        score_many(model, np.array([user]), np.array([item]), np.array([rating]))[0]
    )


def score_dataset(model: PropensityModel, data: RatingDataset) -> np.ndarray:
    return score_many(model, data.users, data.items, data.ratings)


def _counts_by_rating(data: RatingDataset) -> np.ndarray:
    lo, _ = data.rating_scale
    return np.bincount(data.ratings - lo, minlength=data.num_rating_values).astype(float)


def _counts_by_item_rating(data: RatingDataset, num_items: int) -> np.ndarray:
    lo, _ = data.rating_scale
    flat = data.items * data.num_rating_values + (data.ratings - lo)
    counts = np.bincount(flat, minlength=num_items * data.num_rating_values)
    return counts.reshape(num_items, data.num_rating_values).astype(float)


def _fallback_prior(prior: np.ndarray, what: str) -> np.ndarray:
    """Replace zero entries of a prior vector by its smallest positive entry."""
    zero = prior <= 0
    if not np.any(zero):
        return prior
    positive = prior[~zero]
    if len(positive) == 0:
        raise PropensityError(f"all {what} prior mass is zero; cannot estimate")
    fallback = positive.min()
    logger.warning(
        "%d %s value(s) unseen in the unbiased sample; falling back to the "
        "minimum nonzero prior %.6g", int(zero.sum()), what, fallback,
    )
    out = prior.copy()
    out[zero] = fallback
    return out


def _cap_at_one(table: np.ndarray, family: str) -> np.ndarray:
    over = table > 1.0
    if np.any(over):
        logger.debug("%s estimator: capped %d propensities at 1", family, int(over.sum()))
    return np.minimum(table, 1.0)


def uniform_propensities(
    train: RatingDataset, num_users: int, num_items: int
) -> PropensityModel:
    """Constant propensity equal to the overall observation frequency."""
    value = len(train) / (num_users * num_items)
    return PropensityModel(
        family="uniform", rating_scale=train.rating_scale, uniform_value=value
    )


def estimate_positivity(
    train: RatingDataset,
    mcar: RatingDataset,
    num_users: int,
    num_items: int,
) -> PropensityModel:
    """Rating-value propensities via Bayes' rule on observed vs. unbiased frequencies.

    For rating value r, the estimate is
    ``P(o=1 | y=r) = P(y=r | o=1) P(o=1) / P(y=r)`` with the conditional taken
    from the biased log, the observation prior from the log density, and the
    rating prior from the small unbiased (mcar) sample. Rating values missing
    from the mcar sample fall back to the smallest nonzero prior, with a warning.
    """
    if len(mcar) == 0:
        raise PropensityError("positivity estimation requires a nonempty mcar sample")
    count_d = _counts_by_rating(train)
    count_m = _counts_by_rating(mcar)
    prior = _fallback_prior(count_m / len(mcar), "rating")
    p_obs = len(train) / (num_users * num_items)
    conditional = count_d / len(train)
    per_rating = _cap_at_one(conditional * p_obs / prior, "positivity")
    return PropensityModel(
        family="positivity", rating_scale=train.rating_scale, per_rating=per_rating
    )


def estimate_popularity(
    train: RatingDataset, num_users: int, num_items: int
) -> PropensityModel:
    """Per-item propensities from observation counts.

    The raw item frequency ``count_i / |D|`` is a distribution over items; it is
    rescaled by ``|D| / num_users`` (giving the fraction of users that rated the
    item) so the values are usable as per-pair observation probabilities. Items
    never observed keep propensity zero and rely on the clip floor.
    """
    if len(train) == 0:
        raise PropensityError("popularity estimation requires a nonempty train set")
    counts = np.bincount(train.items, minlength=num_items).astype(float)
    per_item = counts / num_users
    return PropensityModel(
        family="popularity", rating_scale=train.rating_scale, per_item=per_item
    )


def estimate_multifactorial(
    train: RatingDataset,
    mcar: RatingDataset,
    num_users: int,
    num_items: int,
    smoothing: SmoothingConfig = SmoothingConfig(),
) -> PropensityModel:
    """Joint (item, rating) propensities via Bayes' rule with additive smoothing.

    The estimate decomposes as
    ``P(o=1 | y=r, i) = P(y=r, i | o=1) P(o=1) / P(y=r, i)`` where:

    - the conditional joint frequency from the biased log is smoothed by alpha1:
      ``(count_D(i, r) + a1) / (|D| + a1 * I * R)``, which sums to 1 over all
      (item, rating) cells;
    - the joint prior is factored as ``P(y=r) * P(i | y=r)`` over the unbiased
      sample, smoothing only the item-given-rating part by alpha2:
      ``(count_M(i, r) + a2) / (count_M(r) + a2 * I)``; item sparsity is much
      more severe than rating-value sparsity, so the rating prior is left raw
      (with the same zero-count fallback as the positivity estimator);
    - ``P(o=1) = |D| / (num_users * num_items)``.
    """
    if len(mcar) == 0:
        raise PropensityError("joint estimation requires a nonempty mcar sample")
    a1, a2 = smoothing.alpha1, smoothing.alpha2
    n_r = train.num_rating_values
    count_d_ir = _counts_by_item_rating(train, num_items)
    count_m_r = _counts_by_rating(mcar)
    count_m_ir = _counts_by_item_rating(mcar, num_items)

    if a1 == 0.0 and np.any(count_d_ir == 0):
        logger.warning(
            "alpha1=0 with unobserved (item, rating) cells yields zero propensities; "
            "they will rely on the clip floor"
        )
    if a2 == 0.0 and np.any(count_m_ir == 0):
        raise PropensityError(
            "alpha2=0 with (item, rating) cells unseen in the mcar sample gives a "
            "zero-denominator prior; use alpha2 > 0"
        )

    joint_conditional = (count_d_ir + a1) / (len(train) + a1 * num_items * n_r)
    rating_prior = _fallback_prior(count_m_r / len(mcar), "rating")
    item_given_rating = (count_m_ir + a2) / (count_m_r + a2 * num_items)
    prior = rating_prior[None, :] * item_given_rating
    p_obs = len(train) / (num_users * num_items)
    table = _cap_at_one(joint_conditional * p_obs / prior, "multifactorial")
    return PropensityModel(
        family="multifactorial",
        rating_scale=train.rating_scale,
        per_item_rating=table,
        alpha1=a1,
        alpha2=a2,
    )


def smoothed_joint_conditional(
    train: RatingDataset, num_items: int, alpha1: float
) -> np.ndarray:
    """The alpha1-smoothed (item, rating) frequency table; sums to 1 over cells."""
    count = _counts_by_item_rating(train, num_items)
    return (count + alpha1) / (len(train) + alpha1 * num_items * train.num_rating_values)


def smoothed_item_given_rating(
    mcar: RatingDataset, num_items: int, alpha2: float
) -> np.ndarray:
    """The alpha2-smoothed item distribution per rating; each column sums to 1."""
    count_r = _counts_by_rating(mcar)
    count_ir = _counts_by_item_rating(mcar, num_items)
    return (count_ir + alpha2) / (count_r + alpha2 * num_items)


def estimate_mf_propensity(
    train: RatingDataset,
    num_users: int,
    num_items: int,
    config=None,
    *,
    dim: int | None = None,
    learning_rate: float = 0.05,
    l2_weight: float = 5e-4,
    max_steps: int | None = None,
    tol: float = 1e-8,
    seed: int | None = None,
) -> PropensityModel:
    """Fit a factorized logistic model of the binary observation matrix.

    Minimizes the full-matrix binary cross-entropy of
    ``sigmoid(P_u . Q_i + a_u + b_i + c)`` against the observation indicator
    with full-batch adaptive-moment updates; every (user, item) cell
    contributes, so no negative sampling is involved. The default L2 weight is
    deliberately firm: it shrinks sparsely observed entities toward the global
    rate instead of letting a single binary matrix be memorized. On
    non-convergence the best parameters seen are returned with a warning.

    A rating-model TrainConfig may be passed as `config` to reuse its
    embedding_dim, max_epochs, and seed; its learning rate is not reused since
    full-batch logistic fitting needs far larger steps than mini-batch rating
    training.
    """
    dim = dim if dim is not None else (config.embedding_dim if config else 8)
    max_steps = max_steps if max_steps is not None else (
        config.max_epochs if config else 500
    )
    seed = seed if seed is not None else (config.seed if config else 0)
    obs = np.zeros((num_users, num_items))
    obs[train.users, train.items] = 1.0
    rng = np.random.default_rng(seed)
    P = rng.normal(0.0, 0.1, size=(num_users, dim))
    Q = rng.normal(0.0, 0.1, size=(num_items, dim))
    a = np.zeros(num_users)
    b = np.zeros(num_items)
    base_rate = np.clip(obs.mean(), 1e-6, 1.0 - 1e-6)
    c = float(np.log(base_rate / (1.0 - base_rate)))

    params = [P, Q, a, b, np.array(c)]
    moments = [(np.zeros_like(p), np.zeros_like(p)) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    n_cells = num_users * num_items
    best_loss, best_params, prev_loss, converged = np.inf, None, np.inf, False

    for step in range(1, max_steps + 1):
        logits = params[0] @ params[1].T + params[2][:, None] + params[3][None, :] + params[4]
        s = 1.0 / (1.0 + np.exp(-logits))
        s = np.clip(s, 1e-12, 1.0 - 1e-12)
        loss = float(
            -np.mean(obs * np.log(s) + (1.0 - obs) * np.log(1.0 - s))
            + l2_weight * sum(np.sum(p**2) for p in params)
        )
        if loss < best_loss:
            best_loss = loss
            best_params = [p.copy() for p in params]
        if np.isfinite(prev_loss) and abs(prev_loss - loss) <= tol * max(abs(prev_loss), 1.0):
            converged = True
            break
        prev_loss = loss

        g = (s - obs) / n_cells
        grads = [
            g @ params[1] + 2 * l2_weight * params[0],
            g.T @ params[0] + 2 * l2_weight * params[1],
            g.sum(axis=1) + 2 * l2_weight * params[2],
            g.sum(axis=0) + 2 * l2_weight * params[3],
            np.array(g.sum()) + 2 * l2_weight * params[4],
        ]
        for k, (grad, (m, v)) in enumerate(zip(grads, moments)):
            m[...] = beta1 * m + (1.0 - beta1) * grad
            v[...] = beta2 * v + (1.0 - beta2) * grad**2
            m_hat = m / (1.0 - beta1**step)
            v_hat = v / (1.0 - beta2**step)
            params[k] -= learning_rate * m_hat / (np.sqrt(v_hat) + eps)

    if not converged:
        logger.warning(
            "observation-model fit did not converge in %d steps; returning the "
            "best parameters seen (loss %.6g)", max_steps, best_loss,
        )
    P, Q, a, b, c = best_params
    return PropensityModel(
        family="mf_learned",
        rating_scale=train.rating_scale,
        mf_factors=(P, Q, a, b, float(c)),
    )


def clip(model: PropensityModel, tau: float) -> PropensityModel:
    """Floor every score at tau; tau=1 makes every propensity 1."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"clip floor must be in (0, 1], got {tau}")
    return replace(model, clip_floor=tau)


def normalize(model: PropensityModel, train: RatingDataset) -> PropensityModel:
    """Rescale scores by one constant so the mean inverse propensity over the
    train triples equals ``num_users * num_items / |D|``; scores stay capped at 1.

    The constant is computed on the training split only.
    """
    scores = score_dataset(model, train)
    if np.any(scores <= 0):
        raise PropensityError("cannot normalize a model with zero scores on train")
    target = train.num_users * train.num_items / len(train)
    k = float(np.mean(1.0 / scores)) / target
    return replace(model, scale=model.scale * k, normalization="mean-inverse")


def default_clip_floor(model: PropensityModel, train: RatingDataset) -> float:
    """Heuristic floor: 5% of the mean propensity over the train triples."""
    return 0.05 * float(score_dataset(model, train).mean())


def prepare(
    model: PropensityModel,
    train: RatingDataset,
    do_normalize: bool = True,
    clip_floor: float | None = None,
) -> PropensityModel:
    """Standard variance-control pipeline: normalize, then clip.

    With ``clip_floor=None`` the default heuristic floor is used. Zero raw
    scores (for example items never observed) make normalization impossible,
    so such models are clipped at the floor first, then normalized.
    """
    if do_normalize:
        if np.any(score_dataset(model, train) <= 0):
            model = clip(model, clip_floor or default_clip_floor(model, train))
        model = normalize(model, train)
    tau = clip_floor if clip_floor is not None else default_clip_floor(model, train)
    return clip(model, tau)


# Table files: one "# key=value ..." header line, a column-name line, then rows.
# Layouts by family: (item_index, rating, propensity) for per-(item, rating)
# tables, (item_index, propensity) for popularity, (rating, propensity) for
# positivity, a single (propensity) row for uniform, and
# (user_index, item_index, propensity) for mf_learned scores.


def save_propensity(model: PropensityModel, path: str | Path, delimiter: str = ",") -> None:
    lo, hi = model.rating_scale
    meta = {
        "family": model.family,
        "tau": repr(model.clip_floor),
        "alpha1": "" if model.alpha1 is None else repr(model.alpha1),
        "alpha2": "" if model.alpha2 is None else repr(model.alpha2),
        "scale": repr(model.scale),
        "normalization": model.normalization,
        "rating_min": lo,
        "rating_max": hi,
    }
    header = "# " + " ".join(f"{k}={v}" for k, v in meta.items())
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        if model.family == "uniform":
            fh.write("propensity\n")
            fh.write(f"{float(model.uniform_value)!r}\n")
        elif model.family == "popularity":
            fh.write(delimiter.join(("item_index", "propensity")) + "\n")
            for i, p in enumerate(model.per_item):
                fh.write(f"{i}{delimiter}{float(p)!r}\n")
        elif model.family == "positivity":
            fh.write(delimiter.join(("rating", "propensity")) + "\n")
            for r, p in zip(range(lo, hi + 1), model.per_rating):
                fh.write(f"{r}{delimiter}{float(p)!r}\n")
        elif model.family in ("multifactorial", "ground_truth"):
            fh.write(delimiter.join(("item_index", "rating", "propensity")) + "\n")
            for i in range(model.per_item_rating.shape[0]):
                for k, r in enumerate(range(lo, hi + 1)):
                    fh.write(f"{i}{delimiter}{r}{delimiter}{float(model.per_item_rating[i, k])!r}\n")
        elif model.family == "mf_learned":
            table = model.per_user_item
            if table is None:
                P, Q, a, b, c = model.mf_factors
                table = 1.0 / (1.0 + np.exp(-(P @ Q.T + a[:, None] + b[None, :] + c)))
            fh.write(delimiter.join(("user_index", "item_index", "propensity")) + "\n")
            for u in range(table.shape[0]):
                for i in range(table.shape[1]):
                    fh.write(f"{u}{delimiter}{i}{delimiter}{float(table[u, i])!r}\n")
        else:
            raise AssertionError(model.family)


def load_propensity(path: str | Path, delimiter: str = ",") -> PropensityModel:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("# "):
            raise ValueError(f"{path}: missing propensity table header")
        meta = dict(kv.split("=", 1) for kv in header[2:].split())
        columns = fh.readline().strip().split(delimiter)
        rows = [line.strip().split(delimiter) for line in fh if line.strip()]

    family = meta["family"]
    scale_range = (int(meta["rating_min"]), int(meta["rating_max"]))
    n_r = scale_range[1] - scale_range[0] + 1
    kwargs = dict(
        family=family,
        rating_scale=scale_range,
        scale=float(meta["scale"]),
        clip_floor=float(meta["tau"]),
        normalization=meta["normalization"],
        alpha1=float(meta["alpha1"]) if meta["alpha1"] else None,
        alpha2=float(meta["alpha2"]) if meta["alpha2"] else None,
    )
    if family == "uniform":
        kwargs["uniform_value"] = float(rows[0][0])
    elif family == "popularity":
        per_item = np.zeros(1 + max(int(r[0]) for r in rows))
        for r in rows:
            per_item[int(r[0])] = float(r[1])
        kwargs["per_item"] = per_item
    elif family == "positivity":
        per_rating = np.zeros(n_r)
        for r in rows:
            per_rating[int(r[0]) - scale_range[0]] = float(r[1])
        kwargs["per_rating"] = per_rating
    elif family in ("multifactorial", "ground_truth"):
        n_items = 1 + max(int(r[0]) for r in rows)
        table = np.zeros((n_items, n_r))
        for r in rows:
            table[int(r[0]), int(r[1]) - scale_range[0]] = float(r[2])
        kwargs["per_item_rating"] = table
    elif family == "mf_learned":
        n_u = 1 + max(int(r[0]) for r in rows)
        n_i = 1 + max(int(r[1]) for r in rows)
        table = np.zeros((n_u, n_i))
        for r in rows:
            table[int(r[0]), int(r[1])] = float(r[2])
        kwargs["per_user_item"] = table
    else:
        raise ValueError(f"{path}: unknown family {family!r} (columns {columns})")
    return PropensityModel(**kwargs)
