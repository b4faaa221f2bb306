"""Synthetic image pairs with left/right-ambiguous keypoints.

Each keypoint has a prototype feature. Symmetric counterparts share their
semantic component and differ only by a small geometric component of
opposite sign, so semantic similarity alone cannot tell them apart. The
semantic components live in the leading ``dim - geo_dims`` channels and the
geometric ones in the trailing ``geo_dims`` channels. Gaussian noise of scale
``noise_sigma`` perturbs the semantic channels and ``geo_noise_sigma`` the
geometric ones, so raw cosine similarity is dominated by semantic nuisance
while a reweighting of the channels can expose the geometric cue.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .features import (
    FeatureMap,
    GecoError,
    GridGeometry,
    Keypoint,
    PairAnnotation,
    keypoint_to_patch,
    patch_center_px,
)


class SynthError(GecoError):
    pass


@dataclass(frozen=True)
class SyntheticPairSpec:
    n_keypoints: int = 8
    symmetry_pairs: tuple = ((0, 1), (2, 3), (4, 5))
    occlusion_rate: float = 0.2
    noise_sigma: float = 0.25
    dim: int = 16
    seed: int = 0
    rows: int = 8
    cols: int = 8
    patch_size: int = 14
    geo_dims: int = 4
    geo_scale: float = 0.15
    geo_noise_sigma: float = 0.01
    semantic_scale: float = 1.0
    category_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "symmetry_pairs", tuple(tuple(int(v) for v in p) for p in self.symmetry_pairs))
        if not 0 <= self.occlusion_rate <= 1:
            raise SynthError("occlusion_rate must lie in [0, 1]")
        used = [k for pair in self.symmetry_pairs for k in pair]
        if len(used) != len(set(used)):
            raise SynthError("symmetry pairs must be disjoint")
        if any(len(p) != 2 or p[0] == p[1] for p in self.symmetry_pairs):
            raise SynthError("a symmetry pair links two distinct keypoints")
        if any(not 0 <= k < self.n_keypoints for k in used):
            raise SynthError("symmetry pair refers to an unknown keypoint")
        if not 0 <= self.geo_dims < self.dim:
            raise SynthError("geo_dims must leave at least one semantic channel")
        if self.n_keypoints > self.rows * self.cols // 2:
            raise SynthError("grid too small for the keypoint count")

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticPairSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise SynthError(f"unknown spec fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["symmetry_pairs"] = [list(p) for p in self.symmetry_pairs]
        return d

    def with_seed(self, seed: int) -> "SyntheticPairSpec":
        return SyntheticPairSpec(**{**asdict(self), "seed": int(seed)})


@dataclass(frozen=True, eq=False)
class Prototypes:
    keypoints: np.ndarray
    body: np.ndarray
    background: np.ndarray


def _unit(rng, dim, n_channels, offset=0):
    v = np.zeros(dim)
    g = rng.normal(size=n_channels)
    v[offset:offset + n_channels] = g / np.linalg.norm(g)
    return v


def category_prototypes(spec: SyntheticPairSpec) -> Prototypes:
    rng = np.random.default_rng([spec.category_seed, 7919])
    sem_dims = spec.dim - spec.geo_dims
    protos = np.zeros((spec.n_keypoints, spec.dim))
    partner = {}
    for p, q in spec.symmetry_pairs:
        partner[p], partner[q] = q, p
    done = set()
    for k in range(spec.n_keypoints):
        if k in done:
            continue
        sem = spec.semantic_scale * _unit(rng, spec.dim, sem_dims)
        if k in partner and spec.geo_dims:
            geo = spec.geo_scale * _unit(rng, spec.dim, spec.geo_dims, sem_dims)
        else:
            geo = np.zeros(spec.dim)
        protos[k] = sem + geo
        if k in partner:
            protos[partner[k]] = sem - geo
            done.add(partner[k])
        done.add(k)
    body = spec.semantic_scale * _unit(rng, spec.dim, sem_dims)
    background = spec.semantic_scale * _unit(rng, spec.dim, sem_dims)
    return Prototypes(protos, body, background)


def _foreground_box(rng, rows, cols, n_needed):
    while True:
        h = int(rng.integers(max(2, rows // 2), rows))
        w = int(rng.integers(max(2, cols // 2), cols))
        if h * w >= n_needed and h * w < rows * cols:
            break
    r0 = int(rng.integers(0, rows - h + 1))
    c0 = int(rng.integers(0, cols - w + 1))
    mask = np.zeros((rows, cols), dtype=bool)
    mask[r0:r0 + h, c0:c0 + w] = True
    return mask


def _render_image(spec, protos, rng, symmetric):
    rows, cols = spec.rows, spec.cols
    mask = _foreground_box(rng, rows, cols, spec.n_keypoints)
    visible = rng.random(spec.n_keypoints) >= spec.occlusion_rate
    fg_patches = np.flatnonzero(mask.reshape(-1))
    spots = rng.permutation(fg_patches)[: spec.n_keypoints]
    values = np.where(mask.reshape(-1, 1), protos.body[None, :], protos.background[None, :])
    keypoints = []
    grid = GridGeometry(rows, cols, spec.patch_size)
    for k in range(spec.n_keypoints):
        if visible[k]:
            patch = int(spots[k])
            values[patch] = protos.keypoints[k]
            x, y = patch_center_px(patch, grid)
            keypoints.append(Keypoint(k, x, y, True, symmetric.get(k)))
        else:
            keypoints.append(Keypoint(k, None, None, False, symmetric.get(k)))
    noise = rng.normal(size=values.shape)
    sem_dims = spec.dim - spec.geo_dims
    noise[:, :sem_dims] *= spec.noise_sigma
    noise[:, sem_dims:] *= spec.geo_noise_sigma
    values = values + noise
    fmap = FeatureMap(rows, cols, spec.dim, values, spec.patch_size)
    return fmap, keypoints, mask


def gen_synthetic_pair(spec: SyntheticPairSpec):
    """Returns ``(source FeatureMap, target FeatureMap, PairAnnotation)``."""
    protos = category_prototypes(spec)
    symmetric = {}
    for p, q in spec.symmetry_pairs:
        symmetric[p], symmetric[q] = q, p
    rng = np.random.default_rng([spec.seed, 104729])
    xs, kps_s, mask_s = _render_image(spec, protos, rng, symmetric)
    xt, kps_t, mask_t = _render_image(spec, protos, rng, symmetric)
    size = (spec.cols * spec.patch_size, spec.rows * spec.patch_size)
    ann = PairAnnotation(
        source_id=f"synth{spec.seed:06d}_src",
        target_id=f"synth{spec.seed:06d}_tgt",
        image_size_src=size,
        image_size_tgt=size,
        keypoints_src=kps_s,
        keypoints_tgt=kps_t,
        mask_src=mask_s,
        mask_tgt=mask_t,
    )
    return xs, xt, ann


def gen_dataset(spec: SyntheticPairSpec, seeds):
    return [gen_synthetic_pair(spec.with_seed(s)) for s in seeds]


def part_labels(fmap: FeatureMap, keypoints, mask) -> np.ndarray:
    """Per-patch part labels: 0 background, 1 body, 2 + k for keypoint k."""
    grid = fmap.grid
    labels = np.where(np.asarray(mask, dtype=bool).reshape(-1), 1, 0)
    for kp in keypoints:
        if kp.visible:
            labels[keypoint_to_patch(kp, grid)] = 2 + kp.id
    return labels.reshape(fmap.rows, fmap.cols)


def _seed_range(obj, name) -> tuple:
    if isinstance(obj, dict):
        if set(obj) != {"start", "count"}:
            raise SynthError(f"{name} needs exactly 'start' and 'count'")
        start, count = int(obj["start"]), int(obj["count"])
        if count < 0:
            raise SynthError(f"{name} count must be nonnegative")
        return tuple(range(start, start + count))
    if isinstance(obj, list):
        return tuple(int(v) for v in obj)
    raise SynthError(f"{name} must be a seed list or a start/count range")


@dataclass(frozen=True)
class DatasetSpec:
    """A generator configuration plus disjoint training and held-out seeds."""

    generator: SyntheticPairSpec
    train_seeds: tuple
    heldout_seeds: tuple

    def __post_init__(self):
        for name in ("train_seeds", "heldout_seeds"):
            seeds = getattr(self, name)
            if len(set(seeds)) != len(seeds):
                raise SynthError(f"{name} has repeated seeds")
        overlap = set(self.train_seeds) & set(self.heldout_seeds)
        if overlap:
            raise SynthError(f"training and held-out seeds overlap: {sorted(overlap)[:5]}")

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetSpec":
        unknown = set(data) - {"generator", "train_seeds", "heldout_seeds"}
        if unknown:
            raise SynthError(f"unknown dataset fields: {sorted(unknown)}")
        return cls(
            SyntheticPairSpec.from_dict(dict(data.get("generator", {}))),
            _seed_range(data.get("train_seeds", []), "train_seeds"),
            _seed_range(data.get("heldout_seeds", []), "heldout_seeds"),
        )

    def to_dict(self) -> dict:
        return {
            "generator": self.generator.to_dict(),
            "train_seeds": list(self.train_seeds),
            "heldout_seeds": list(self.heldout_seeds),
        }

    def train_set(self):
        return gen_dataset(self.generator, self.train_seeds)

    def heldout_set(self):
        return gen_dataset(self.generator, self.heldout_seeds)


def pair_id(ann: PairAnnotation) -> str:
    return ann.source_id[:-4] if ann.source_id.endswith("_src") else f"{ann.source_id}__{ann.target_id}"
