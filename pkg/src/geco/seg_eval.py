"""Part segmentation by nearest median centroid, and its metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import FeatureMap, GecoError

UNLABELED = -1


class SegError(GecoError):
    pass


@dataclass(frozen=True, eq=False)
class PartCentroids:
    part_ids: tuple
    centroids: np.ndarray

    def __post_init__(self):
        ids = tuple(int(p) for p in self.part_ids)
        if list(ids) != sorted(set(ids)):
            raise SegError("part ids must be unique and ascending")
        cents = np.asarray(self.centroids, dtype=np.float64)
        if cents.shape[0] != len(ids) or not np.all(np.isfinite(cents)):
            raise SegError("need one finite centroid per part")
        object.__setattr__(self, "part_ids", ids)
        object.__setattr__(self, "centroids", cents)


def centroid_fit(vectors, labels, part_ids=None) -> PartCentroids:
    """Coordinate-wise median of the vectors of each part.

    Even sample counts give the midpoint of the two central values. When
    ``part_ids`` is given every listed part must have at least one sample.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    keep = labels != UNLABELED
    vectors, labels = vectors[keep], labels[keep]
    if part_ids is None:
        part_ids = sorted(set(int(v) for v in labels))
    part_ids = sorted(int(p) for p in part_ids)
    cents = []
    for part in part_ids:
        members = vectors[labels == part]
        if members.shape[0] == 0:
            raise SegError(f"part {part} has no samples")
        cents.append(np.median(members, axis=0))
    return PartCentroids(tuple(part_ids), np.array(cents))


def centroid_assign(f, c: PartCentroids) -> np.ndarray:
    """Nearest-centroid part id per patch; equidistant ties go to the lowest id."""
    values = np.asarray(f.values if isinstance(f, FeatureMap) else f, dtype=np.float64)
    if values.shape[1] != c.centroids.shape[1]:
        raise SegError("feature and centroid dimensions differ")
    diff = values[:, None, :] - c.centroids[None, :, :]
    dist = np.einsum("nkd,nkd->nk", diff, diff)
    return np.asarray(c.part_ids)[np.argmin(dist, axis=1)]


def confusion_matrix(gt, pred, part_ids) -> np.ndarray:
    """``s[i, j]`` = patches of ground-truth part i predicted as part j."""
    part_ids = list(part_ids)
    index = {p: k for k, p in enumerate(part_ids)}
    gt = np.asarray(gt).reshape(-1)
    pred = np.asarray(pred).reshape(-1)
    conf = np.zeros((len(part_ids), len(part_ids)), dtype=np.int64)
    for g, p in zip(gt, pred):
        if g == UNLABELED or g not in index:
            continue
        conf[index[int(g)], index[int(p)]] += 1
    return conf


def seg_metrics(conf) -> dict:
    conf = np.asarray(conf, dtype=np.float64)
    total = conf.sum()
    if conf.size == 0 or total <= 0:
        raise SegError("empty confusion matrix")
    diag = np.diag(conf)
    union = conf.sum(axis=1) + conf.sum(axis=0) - diag
    present = (conf.sum(axis=1) + conf.sum(axis=0)) > 0
    iou = np.full(conf.shape[0], np.nan)
    iou[present] = diag[present] / union[present]
    return {
        "miou": float(np.mean(iou[present])),
        "acc": float(diag.sum() / total),
        "iou": [None if np.isnan(v) else float(v) for v in iou],
    }


def confusion_normalize(conf, n_parts=None):
    """Figure-orientation matrix: rows are predicted parts, columns ground truth.

    Each ground-truth part's counts are divided by its patch total and by
    ``n_parts`` so every column sums to ``1/n_parts``. Ground-truth parts with
    no patches yield a zero column and are listed in the returned flags.
    """
    conf = np.asarray(conf, dtype=np.float64)
    n = conf.shape[0] if n_parts is None else int(n_parts)
    display = conf.T.copy()
    sums = display.sum(axis=0)
    zero = [int(k) for k in np.flatnonzero(sums == 0)]
    out = np.zeros_like(display)
    nz = sums > 0
    out[:, nz] = display[:, nz] / sums[nz] / n
    return out, zero


def geometric_parts(part_ids, symmetric) -> list:
    """Parts that have a symmetric counterpart, in ``part_ids`` order."""
    return [p for p in part_ids if symmetric.get(p) is not None]


def geometric_subset_metrics(conf, part_ids, symmetric) -> dict:
    part_ids = list(part_ids)
    geo = geometric_parts(part_ids, symmetric)
    if not geo:
        raise SegError("no parts with a symmetric counterpart")
    idx = [part_ids.index(p) for p in geo]
    sub = np.asarray(conf)[np.ix_(idx, idx)]
    if np.asarray(sub).sum() == 0:
        raise SegError("geometric parts have no patches")
    out = seg_metrics(sub)
    out["parts"] = geo
    return out
