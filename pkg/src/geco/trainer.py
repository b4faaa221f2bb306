"""Gradient descent on a linear feature adapter with the OT soft-assignment loss."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureMap, GecoError, keypoint_to_patch, patch_center_px
from .loss import LossWeights, build_correspondence_sets, loss_and_gradient
from .marginals import marginals_for_pair
from .match_eval import SPLIT_11, match_pair, summarize
from .ot import UNBALANCED, SolverConfig


class TrainingError(GecoError):
    pass


@dataclass(frozen=True, eq=False)
class LinearAdapter:
    """``y = W x`` applied to every patch feature before cosine normalization."""

    weight: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or not np.all(np.isfinite(w)):
            raise TrainingError("adapter weight must be a finite square matrix")
        object.__setattr__(self, "weight", w)

    @classmethod
    def init(cls, dim: int, sigma_init: float = 0.01, seed: int = 0) -> "LinearAdapter":
        rng = np.random.default_rng([seed, 31337])
        return cls(np.eye(dim) + sigma_init * rng.normal(size=(dim, dim)))

    @classmethod
    def identity(cls, dim: int) -> "LinearAdapter":
        return cls(np.eye(dim))

    def apply_values(self, values) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) @ self.weight.T

    def apply(self, f: FeatureMap) -> FeatureMap:
        return f.with_values(self.apply_values(f.values))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    learning_rate: float = 0.05
    batch_pairs: int = 4
    sigma_init: float = 0.01
    seed: int = 0
    neg_fg_bg_samples: int = 8
    mode: str = UNBALANCED
    s: float = 0.9
    solver: SolverConfig = field(default_factory=SolverConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.steps < 0:
            raise TrainingError("steps must be nonnegative")
        if not self.learning_rate > 0:
            raise TrainingError("learning rate must be positive")
        if self.batch_pairs < 1:
            raise TrainingError("batch needs at least one pair")


@dataclass
class PreparedPair:
    src: np.ndarray
    tgt: np.ndarray
    marginals: object
    sets: object


def prepare(dataset, cfg: TrainConfig) -> list[PreparedPair]:
    out = []
    for k, (xs, xt, ann) in enumerate(dataset):
        ann.check_geometry(xs, xt)
        out.append(
            PreparedPair(
                np.asarray(xs.values, dtype=np.float64),
                np.asarray(xt.values, dtype=np.float64),
                marginals_for_pair(ann, cfg.s),
                build_correspondence_sets(ann, xs.grid, xt.grid, cfg.neg_fg_bg_samples, seed=cfg.seed * 1_000_003 + k),
            )
        )
    return out


def pair_gradient(adapter: LinearAdapter, pair: PreparedPair, cfg: TrainConfig):
    """Loss of one pair and its gradient with respect to the adapter weight."""
    res = loss_and_gradient(
        adapter.apply_values(pair.src),
        adapter.apply_values(pair.tgt),
        pair.marginals,
        pair.sets,
        cfg.solver,
        cfg.weights,
        cfg.mode,
    )
    return res.loss, res.grad_src.T @ pair.src + res.grad_tgt.T @ pair.tgt


def _batch_order(n_pairs: int, cfg: TrainConfig):
    rng = np.random.default_rng([cfg.seed, 2718])
    order = []
    while True:
        if not order:
            order = list(rng.permutation(n_pairs))
        yield order.pop()


def train(dataset, cfg: TrainConfig, threads: int = 1, adapter: LinearAdapter = None):
    """Returns ``(adapter, per-step mean batch loss)``.

    Per-pair gradients of a batch may be computed on ``threads`` workers; they
    are summed in batch order so the result is independent of the thread count.
    """
    pairs = prepare(dataset, cfg)
    if not pairs:
        raise TrainingError("empty training set")
    dim = pairs[0].src.shape[1]
    if adapter is None:
        adapter = LinearAdapter.init(dim, cfg.sigma_init, cfg.seed)
    weight = adapter.weight.copy()
    trace = []
    order = _batch_order(len(pairs), cfg)
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for step in range(cfg.steps):
            batch = [pairs[next(order)] for _ in range(cfg.batch_pairs)]
            current = LinearAdapter(weight)
            try:
                if pool is None:
                    results = [pair_gradient(current, p, cfg) for p in batch]
                else:
                    results = list(pool.map(lambda p: pair_gradient(current, p, cfg), batch))
            except GecoError as exc:
                raise TrainingError(f"training diverged at step {step}: {exc}") from exc
            grad = np.zeros_like(weight)
            total = 0.0
            for loss, g in results:
                total += loss
                grad += g
            mean_loss = total / len(batch)
            if not np.isfinite(mean_loss) or not np.all(np.isfinite(grad)):
                raise TrainingError(f"training diverged at step {step}")
            trace.append(mean_loss)
            with np.errstate(over="ignore", invalid="ignore"):
                weight = weight - cfg.learning_rate * grad / len(batch)
            if not np.all(np.isfinite(weight)):
                raise TrainingError(f"training diverged at step {step}: adapter weights overflowed")
    finally:
        if pool is not None:
            pool.shutdown()
    return LinearAdapter(weight), trace


def evaluate_adapter(adapter: LinearAdapter, dataset, cfg: TrainConfig = TrainConfig(), alpha: float = 0.1,
                     norm: str = "image", threads: int = 1) -> dict:
    """PCK/PGCK metrics plus the mean bin mass of occluded source keypoints."""

    def one(item):
        xs, xt, ann = item
        ys, yt = adapter.apply(xs), adapter.apply(xt)
        results = match_pair(ys, yt, ann)
        hits = [
            r.pred == patch_center_px(keypoint_to_patch(ann.keypoint_tgt(r.query_id), xt.grid), xt.grid)
            for r in results
            if r.split == SPLIT_11
        ]
        sets = build_correspondence_sets(ann, xs.grid, xt.grid)
        res = loss_and_gradient(ys.values, yt.values, marginals_for_pair(ann, cfg.s), sets,
                                cfg.solver, cfg.weights, cfg.mode, need_grad=False)
        # occluded source queries: their mass on the target-side bin column
        masses = [float(res.plan[i, j]) for i, j in sets.bins if j == sets.m]
        return results, masses, hits

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_pair = list(pool.map(one, dataset))
    else:
        per_pair = [one(item) for item in dataset]
    results = [r for rs, _, _ in per_pair for r in rs]
    masses = [m for _, ms, _ in per_pair for m in ms]
    hits = [h for _, _, hs in per_pair for h in hs]
    report = summarize(results, alpha, norm)
    # exact-patch argmax accuracy, independent of the PCK radius
    report["split11_accuracy"] = sum(hits) / len(hits) if hits else None
    report["mean_bin_mass"] = float(np.mean(masses)) if masses else None
    report["n_bin_pairs"] = len(masses)
    return report
