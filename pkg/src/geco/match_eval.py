"""Argmax matching, PCK and its geometry-aware decomposition."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .features import FeatureMap, GecoError, PairAnnotation, keypoint_to_patch, normalize_rows, patch_center_px

SPLIT_10, SPLIT_11, SPLIT_1X = "10", "11", "1x"
SPLITS = (SPLIT_10, SPLIT_11, SPLIT_1X)
UNDERLINE, TILDE, OVERLINE, MISS, NOT_APPLICABLE = "underline", "tilde", "overline", "miss", "not_applicable"
AMBIGUITY_CLASSES = (UNDERLINE, TILDE, OVERLINE, MISS)


class EvalError(GecoError):
    pass


@dataclass(frozen=True)
class MatchResult:
    query_id: int
    pred: tuple[float, float]
    similarity: float
    gt: Optional[tuple[float, float]]
    sym: Optional[tuple[float, float]]
    split: str
    image_size: tuple[int, int]
    bbox: Optional[tuple[float, float, float, float]] = None

    def radius(self, alpha: float, norm: str = "image") -> float:
        if norm == "image":
            return alpha * max(self.image_size)
        if norm == "bbox":
            if self.bbox is None:
                raise EvalError("bbox normalization requested but the annotation has no target bbox")
            x0, y0, x1, y1 = self.bbox
            return alpha * max(x1 - x0, y1 - y0)
        raise EvalError(f"unknown normalization {norm!r}")


@dataclass(frozen=True)
class PgckRecord:
    split: str
    correct: bool
    ambiguity_class: str

    def __post_init__(self):
        if (self.ambiguity_class != NOT_APPLICABLE) != (self.split == SPLIT_11):
            raise EvalError("ambiguity class applies exactly to split-11 records")
        if self.split == SPLIT_11 and self.correct != (self.ambiguity_class in (UNDERLINE, TILDE)):
            raise EvalError("split-11 correctness must agree with the ambiguity class")


def argmax_match(xs, xt, query: int) -> tuple[int, float]:
    """Best target patch for source patch ``query``; ties go to the lowest index.

    ``xs`` and ``xt`` may be FeatureMaps or (n, d) arrays; they are unit
    normalized here so the score is cosine similarity.
    """
    src = normalize_rows(xs.values if isinstance(xs, FeatureMap) else xs)
    tgt = normalize_rows(xt.values if isinstance(xt, FeatureMap) else xt)
    sims = tgt @ src[query]
    j = int(np.argmax(sims))
    return j, float(sims[j])


def classify_pair(query, ann: PairAnnotation) -> Optional[str]:
    """Split of a visible source keypoint, or ``None`` when PCK skips it."""
    if not ann.keypoint_tgt(query.id).visible:
        return None
    if query.symmetric_id is None:
        return SPLIT_1X
    return SPLIT_11 if ann.keypoint_tgt(query.symmetric_id).visible else SPLIT_10


def match_pair(xs: FeatureMap, xt: FeatureMap, ann: PairAnnotation) -> list[MatchResult]:
    """Argmax-match every evaluable source keypoint of one pair."""
    src = normalize_rows(xs.values)
    tgt = normalize_rows(xt.values)
    sims = src @ tgt.T
    results = []
    for kp in ann.keypoints_src:
        if not kp.visible:
            continue
        split = classify_pair(kp, ann)
        if split is None:
            continue
        i = keypoint_to_patch(kp, xs.grid)
        j = int(np.argmax(sims[i]))
        sym = ann.keypoint_tgt(kp.symmetric_id).location if split == SPLIT_11 else None
        results.append(
            MatchResult(
                query_id=kp.id,
                pred=patch_center_px(j, xt.grid),
                similarity=float(sims[i, j]),
                gt=ann.keypoint_tgt(kp.id).location,
                sym=sym,
                split=split,
                image_size=ann.image_size_tgt,
                bbox=ann.bbox_tgt,
            )
        )
    return results


def _dist(p, q) -> float:
    return math.hypot(p[0] - q[0], p[1] - q[1])


def ambiguity_class(result: MatchResult, alpha: float, norm: str = "image") -> str:
    if result.sym is None:
        raise EvalError(f"split-11 query {result.query_id} has no symmetric location")
    r = result.radius(alpha, norm)
    near_gt = _dist(result.pred, result.gt) < r
    near_sym = _dist(result.pred, result.sym) < r
    if near_gt:
        return TILDE if near_sym else UNDERLINE
    return OVERLINE if near_sym else MISS


def make_record(result: MatchResult, alpha: float, norm: str = "image") -> PgckRecord:
    correct = _dist(result.pred, result.gt) < result.radius(alpha, norm)
    cls = ambiguity_class(result, alpha, norm) if result.split == SPLIT_11 else NOT_APPLICABLE
    return PgckRecord(result.split, correct, cls)


def pck_point(results, alpha: float = 0.1, norm: str = "image") -> float:
    results = list(results)
    if not results:
        raise EvalError("no evaluable pairs")
    hits = sum(1 for r in results if _dist(r.pred, r.gt) < r.radius(alpha, norm))
    return hits / len(results)


def pgck_decompose(records) -> dict:
    """Per-split counts, the PCK decomposition and PGCK.

    Ratios are exact ``Fraction`` values; splits without records report
    ``None`` instead of 0/0. ``identity_holds`` confirms that the weighted
    split ratios add back up to PCK.
    """
    records = list(records)
    counts = {s: 0 for s in SPLITS}
    hits = {s: 0 for s in SPLITS}
    for rec in records:
        counts[rec.split] += 1
        hits[rec.split] += bool(rec.correct)
    n = sum(counts.values())
    n_hat = sum(hits.values())
    out = {"n": n, "n_hat": n_hat}
    for s in SPLITS:
        out[f"n{s}"] = counts[s]
        out[f"n_hat{s}"] = hits[s]
        out[f"ratio{s}"] = Fraction(hits[s], counts[s]) if counts[s] else None
        out[f"weight{s}"] = Fraction(counts[s], n) if n else None
    out["pck"] = Fraction(n_hat, n) if n else None
    out["pgck"] = out["ratio11"]
    if n:
        total = sum(
            (out[f"ratio{s}"] * out[f"weight{s}"] for s in SPLITS if counts[s]),
            Fraction(0),
        )
        out["identity_holds"] = total == out["pck"]
    else:
        out["identity_holds"] = True
    return out


def ambiguity_split(results, alpha: float = 0.1, norm: str = "image") -> dict:
    counts = {c: 0 for c in AMBIGUITY_CLASSES}
    n11 = 0
    for r in results:
        if r.split != SPLIT_11:
            continue
        n11 += 1
        counts[ambiguity_class(r, alpha, norm)] += 1
    out = {"n11": n11}
    out.update({f"n_{c}": counts[c] for c in AMBIGUITY_CLASSES})
    out["n_hat11"] = counts[UNDERLINE] + counts[TILDE]
    return out


def parse_sweep(text: str) -> list[float]:
    """``"start:stop:step"`` with an inclusive stop, or a comma-separated list."""
    if ":" in text:
        start, stop, step = (float(v) for v in text.split(":"))
        if step <= 0 or stop < start:
            raise EvalError(f"bad sweep {text!r}")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + k * step, 12) for k in range(n)]
    return [float(v) for v in text.split(",") if v]


def _as_float(v):
    return None if v is None else float(v)


def summarize(results, alpha: float, norm: str = "image") -> dict:
    """Plain-float metric summary at one radius (for reports)."""
    results = list(results)
    dec = pgck_decompose(make_record(r, alpha, norm) for r in results)
    amb = ambiguity_split(results, alpha, norm)
    n11 = amb["n11"]
    row = {
        "alpha": alpha,
        "n": dec["n"],
        "n_hat": dec["n_hat"],
        "pck": _as_float(dec["pck"]),
        "pgck": _as_float(dec["pgck"]),
        "splits": {
            s: {"n": dec[f"n{s}"], "n_hat": dec[f"n_hat{s}"], "ratio": _as_float(dec[f"ratio{s}"])}
            for s in SPLITS
        },
        "ambiguity": {c: amb[f"n_{c}"] for c in AMBIGUITY_CLASSES},
        "ambiguity_ratio": {c: (amb[f"n_{c}"] / n11 if n11 else None) for c in AMBIGUITY_CLASSES},
        "identity_holds": dec["identity_holds"],
    }
    return row


def radius_sweep(results, alphas, norm: str = "image") -> list[dict]:
    alphas = list(alphas)
    if not alphas or any(a <= 0 for a in alphas):
        raise EvalError("sweep needs positive radii")
    results = list(results)
    return [summarize(results, a, norm) for a in alphas]
