"""Binary and JSON file formats.

Feature file (little-endian)::

    b"GECF" | u32 version=1 | u32 rows | u32 cols | u32 dim | u32 patch_size_px
    | rows*cols*dim f32 values, row-major by patch then channel

Plan file::

    b"GECP" | u32 version=1 | u32 l+1 | u32 m+1 | f32 values row-major
    | f32 lam | f32 alpha | f32 beta | u32 iterations

Adapter file::

    b"GECW" | u32 d | d*d f32 weights row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .features import FeatureError, FeatureMap, GecoError, Keypoint, PairAnnotation
from .ot import Marginals, SolverConfig, TransportPlan

FEATURE_MAGIC = b"GECF"
PLAN_MAGIC = b"GECP"
ADAPTER_MAGIC = b"GECW"
VERSION = 1
MAX_ELEMENTS = 1 << 30


class FormatError(GecoError):
    """File-format violation; ``code`` is one of the short codes below."""

    BAD_MAGIC = "bad magic"
    VERSION = "version mismatch"
    TRUNCATED = "truncated payload"
    OVERFLOW = "dimension overflow"
    TRAILING = "trailing bytes"
    SCHEMA = "invalid document"

    def __init__(self, code: str, detail: str = ""):
        self.code = code
        super().__init__(f"{code}: {detail}" if detail else code)


def _header(data: bytes, magic: bytes, n_fields: int):
    if data[:4] != magic:
        raise FormatError(FormatError.BAD_MAGIC, f"expected {magic!r}, found {data[:4]!r}")
    end = 4 + 4 * n_fields
    if len(data) < end:
        raise FormatError(FormatError.TRUNCATED, "header shorter than expected")
    return struct.unpack(f"<{n_fields}I", data[4:end]), end


def _f32_block(data: bytes, offset: int, count: int) -> np.ndarray:
    end = offset + 4 * count
    if len(data) < end:
        raise FormatError(FormatError.TRUNCATED, f"need {end} bytes, have {len(data)}")
    return np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(np.float32)


def _element_count(*dims) -> int:
    if any(d == 0 for d in dims):
        raise FormatError(FormatError.OVERFLOW, f"zero dimension in {dims}")
    count = 1
    for d in dims:
        count *= d
    if count > MAX_ELEMENTS:
        raise FormatError(FormatError.OVERFLOW, f"{count} elements exceed the limit")
    return count


def features_to_bytes(f: FeatureMap) -> bytes:
    header = FEATURE_MAGIC + struct.pack("<5I", VERSION, f.rows, f.cols, f.dim, f.patch_size_px)
    return header + np.ascontiguousarray(f.values, dtype="<f4").tobytes()


def features_from_bytes(data: bytes) -> FeatureMap:
    (version, rows, cols, dim, patch), offset = _header(data, FEATURE_MAGIC, 5)
    if version != VERSION:
        raise FormatError(FormatError.VERSION, f"file version {version}, supported {VERSION}")
    count = _element_count(rows, cols, dim)
    values = _f32_block(data, offset, count)
    if len(data) != offset + 4 * count:
        raise FormatError(FormatError.TRAILING, f"{len(data) - offset - 4 * count} extra bytes")
    try:
        return FeatureMap(rows, cols, dim, values, patch)
    except FeatureError as exc:
        raise FormatError(FormatError.SCHEMA, str(exc)) from exc


def write_features(path, f: FeatureMap) -> None:
    Path(path).write_bytes(features_to_bytes(f))


def read_features(path) -> FeatureMap:
    return features_from_bytes(Path(path).read_bytes())


def plan_to_bytes(p: TransportPlan) -> bytes:
    rows, cols = p.values.shape
    cfg = p.config
    return (
        PLAN_MAGIC
        + struct.pack("<3I", VERSION, rows, cols)
        + np.ascontiguousarray(p.values, dtype="<f4").tobytes()
        + struct.pack("<3fI", cfg.lam, cfg.alpha, cfg.beta, cfg.iterations)
    )


def plan_from_bytes(data: bytes):
    """Returns ``(values as float32 array, (lam, alpha, beta, iterations))``."""
    (version, rows, cols), offset = _header(data, PLAN_MAGIC, 3)
    if version != VERSION:
        raise FormatError(FormatError.VERSION, f"file version {version}, supported {VERSION}")
    count = _element_count(rows, cols)
    values = _f32_block(data, offset, count).reshape(rows, cols)
    offset += 4 * count
    if len(data) < offset + 16:
        raise FormatError(FormatError.TRUNCATED, "missing solver parameters")
    if len(data) > offset + 16:
        raise FormatError(FormatError.TRAILING, f"{len(data) - offset - 16} extra bytes")
    lam, alpha, beta, iters = struct.unpack("<3fI", data[offset:offset + 16])
    return values, (lam, alpha, beta, iters)


def write_plan(path, p: TransportPlan) -> None:
    Path(path).write_bytes(plan_to_bytes(p))


def read_plan(path):
    return plan_from_bytes(Path(path).read_bytes())


def adapter_to_bytes(weight: np.ndarray) -> bytes:
    weight = np.asarray(weight)
    d = weight.shape[0]
    if weight.shape != (d, d):
        raise FormatError(FormatError.SCHEMA, "adapter weight must be square")
    return ADAPTER_MAGIC + struct.pack("<I", d) + np.ascontiguousarray(weight, dtype="<f4").tobytes()


def adapter_from_bytes(data: bytes) -> np.ndarray:
    (d,), offset = _header(data, ADAPTER_MAGIC, 1)
    count = _element_count(d, d)
    values = _f32_block(data, offset, count)
    if len(data) != offset + 4 * count:
        raise FormatError(FormatError.TRAILING, f"{len(data) - offset - 4 * count} extra bytes")
    return values.reshape(d, d)


def write_adapter(path, weight) -> None:
    Path(path).write_bytes(adapter_to_bytes(weight))


def read_adapter(path) -> np.ndarray:
    return adapter_from_bytes(Path(path).read_bytes())


# JSON documents ----------------------------------------------------------


def _kp_to_obj(kp: Keypoint) -> dict:
    return {
        "id": kp.id,
        "x": kp.x_px,
        "y": kp.y_px,
        "visible": kp.visible,
        "symmetric_id": kp.symmetric_id,
    }


def _kp_from_obj(obj) -> Keypoint:
    try:
        x, y = obj["x"], obj["y"]
        return Keypoint(
            id=int(obj["id"]),
            x_px=None if x is None else float(x),
            y_px=None if y is None else float(y),
            visible=bool(obj["visible"]),
            symmetric_id=None if obj["symmetric_id"] is None else int(obj["symmetric_id"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(FormatError.SCHEMA, f"bad keypoint entry {obj!r}") from exc


def _mask_to_rows(mask) -> list:
    return ["".join("1" if v else "0" for v in row) for row in np.asarray(mask, dtype=bool)]


def _mask_from_rows(rows) -> np.ndarray:
    if not isinstance(rows, list) or not rows:
        raise FormatError(FormatError.SCHEMA, "mask must be a nonempty list of row strings")
    width = len(rows[0])
    out = []
    for row in rows:
        if not isinstance(row, str) or len(row) != width or set(row) - {"0", "1"}:
            raise FormatError(FormatError.SCHEMA, "mask rows must be equal-length strings of 0/1")
        out.append([c == "1" for c in row])
    return np.array(out, dtype=bool)


def annotation_to_obj(ann: PairAnnotation) -> dict:
    obj = {
        "source_id": ann.source_id,
        "target_id": ann.target_id,
        "image_size_src": list(ann.image_size_src),
        "image_size_tgt": list(ann.image_size_tgt),
        "keypoints_src": [_kp_to_obj(k) for k in ann.keypoints_src],
        "keypoints_tgt": [_kp_to_obj(k) for k in ann.keypoints_tgt],
        "mask_src": _mask_to_rows(ann.mask_src),
        "mask_tgt": _mask_to_rows(ann.mask_tgt),
    }
    if ann.bbox_src is not None:
        obj["bbox_src"] = list(ann.bbox_src)
    if ann.bbox_tgt is not None:
        obj["bbox_tgt"] = list(ann.bbox_tgt)
    return obj


def annotation_from_obj(obj: dict) -> PairAnnotation:
    required = {
        "source_id", "target_id", "image_size_src", "image_size_tgt",
        "keypoints_src", "keypoints_tgt", "mask_src", "mask_tgt",
    }
    missing = required - set(obj)
    extra = set(obj) - required - {"bbox_src", "bbox_tgt"}
    if missing or extra:
        raise FormatError(FormatError.SCHEMA, f"missing {sorted(missing)}, unexpected {sorted(extra)}")
    try:
        return PairAnnotation(
            source_id=str(obj["source_id"]),
            target_id=str(obj["target_id"]),
            image_size_src=tuple(obj["image_size_src"]),
            image_size_tgt=tuple(obj["image_size_tgt"]),
            keypoints_src=[_kp_from_obj(k) for k in obj["keypoints_src"]],
            keypoints_tgt=[_kp_from_obj(k) for k in obj["keypoints_tgt"]],
            mask_src=_mask_from_rows(obj["mask_src"]),
            mask_tgt=_mask_from_rows(obj["mask_tgt"]),
            bbox_src=None if obj.get("bbox_src") is None else tuple(float(v) for v in obj["bbox_src"]),
            bbox_tgt=None if obj.get("bbox_tgt") is None else tuple(float(v) for v in obj["bbox_tgt"]),
        )
    except FeatureError as exc:
        raise FormatError(FormatError.SCHEMA, str(exc)) from exc


def dumps(obj) -> str:
    """Canonical JSON text used for every document this package writes."""
    return json.dumps(obj, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def _load_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(FormatError.SCHEMA, f"{path}: {exc}") from exc


def write_annotation(path, ann: PairAnnotation) -> None:
    Path(path).write_text(dumps(annotation_to_obj(ann)), encoding="utf-8")


def read_annotation(path) -> PairAnnotation:
    return annotation_from_obj(_load_json(path))


def write_marginals(path, marg: Marginals) -> None:
    Path(path).write_text(dumps({"a": [float(v) for v in marg.a], "b": [float(v) for v in marg.b]}), encoding="utf-8")


def read_marginals(path) -> Marginals:
    obj = _load_json(path)
    try:
        return Marginals(np.array(obj["a"], dtype=np.float64), np.array(obj["b"], dtype=np.float64))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(FormatError.SCHEMA, "marginal file needs numeric arrays 'a' and 'b'") from exc


def write_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=int)
    Path(path).write_text(
        dumps({"rows": int(labels.shape[0]), "cols": int(labels.shape[1]), "labels": labels.tolist()}),
        encoding="utf-8",
    )


def read_labels(path) -> np.ndarray:
    """Per-patch part labels; -1 marks unlabeled patches."""
    obj = _load_json(path)
    try:
        labels = np.array(obj["labels"], dtype=int)
        shape = (int(obj["rows"]), int(obj["cols"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(FormatError.SCHEMA, "label file needs rows, cols and labels") from exc
    if labels.shape != shape:
        raise FormatError(FormatError.SCHEMA, f"labels shaped {labels.shape}, header says {shape}")
    return labels


def solver_config_from_plan_params(params) -> SolverConfig:
    lam, alpha, beta, iters = params
    return SolverConfig(lam=lam, alpha=alpha, beta=beta, iterations=iters)
