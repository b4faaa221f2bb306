"""OT marginals from foreground masks and keypoint visibility."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import GecoError, PairAnnotation
from .ot import Marginals


class MarginalError(GecoError):
    pass


@dataclass(frozen=True)
class MarginalSpec:
    x_src: float
    x_tgt: float
    s: float = 0.9

    def __post_init__(self):
        if not 0 < self.s < 1:
            raise MarginalError("shape mass s must lie in (0, 1)")
        for x in (self.x_src, self.x_tgt):
            if not 0 <= x <= 1:
                raise MarginalError("visibility ratio must lie in [0, 1]")


def visibility_ratio(kps) -> float:
    kps = list(kps)
    if not kps:
        raise MarginalError("empty keypoint schema")
    return sum(1 for kp in kps if kp.visible) / len(kps)


def side_marginal(mask, x: float, s: float = 0.9) -> tuple[np.ndarray, list[str]]:
    """Marginal over the patches of one image followed by its bin entry.

    Foreground patches share ``x*s``, background patches share ``1-s`` and the
    bin takes ``(1-x)*s``. Returns the vector and any warning flags raised by
    degenerate masks.
    """
    fg = np.asarray(mask, dtype=bool).reshape(-1)
    n_fg = int(fg.sum())
    n_bg = fg.size - n_fg
    warnings = []
    out = np.zeros(fg.size + 1)
    fg_mass, bg_mass, bin_mass = x * s, 1.0 - s, s - x * s
    if n_fg == 0:
        warnings.append("empty_foreground")
        bin_mass += fg_mass
        fg_mass = 0.0
    if n_bg == 0:
        warnings.append("empty_background")
        if n_fg:
            fg_mass += bg_mass
        else:
            bin_mass += bg_mass
        bg_mass = 0.0
    if n_fg:
        out[:-1][fg] = fg_mass / n_fg
    if n_bg:
        out[:-1][~fg] = bg_mass / n_bg
    out[-1] = bin_mass
    return out, warnings


def estimate_marginals(mask_src, mask_tgt, spec: MarginalSpec) -> tuple[Marginals, list[str]]:
    a, warn_a = side_marginal(mask_src, spec.x_src, spec.s)
    b, warn_b = side_marginal(mask_tgt, spec.x_tgt, spec.s)
    flags = [f"src:{w}" for w in warn_a] + [f"tgt:{w}" for w in warn_b]
    return Marginals(a, b), flags


def marginals_for_pair(ann: PairAnnotation, s: float = 0.9) -> Marginals:
    spec = MarginalSpec(visibility_ratio(ann.keypoints_src), visibility_ratio(ann.keypoints_tgt), s)
    marg, _ = estimate_marginals(ann.mask_src, ann.mask_tgt, spec)
    return marg
