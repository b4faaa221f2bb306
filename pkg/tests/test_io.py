import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from geco import io
from geco.features import FeatureMap
from geco.ot import Marginals, SolverConfig, TransportPlan
from geco.synth import SyntheticPairSpec, gen_synthetic_pair

from conftest import make_pair

finite32 = st.floats(allow_nan=False, allow_infinity=False, width=32)


def test_round_trip_2x2x3_identical_bytes(rng):
    f = FeatureMap(2, 2, 3, rng.normal(size=(4, 3)).astype(np.float32))
    data = io.features_to_bytes(f)
    assert len(data) == 4 + 20 + 48
    back = io.features_from_bytes(data)
    assert back == f and io.features_to_bytes(back) == data


def test_header_layout():
    data = io.features_to_bytes(FeatureMap(1, 2, 1, np.array([[1.0], [2.0]], dtype=np.float32), 8))
    assert data[:4] == b"GECF"
    assert struct.unpack("<5I", data[4:24]) == (1, 1, 2, 1, 8)
    assert np.frombuffer(data[24:], "<f4").tolist() == [1.0, 2.0]


@settings(max_examples=50)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.integers(1, 30), st.data())
def test_feature_round_trip_property(rows, cols, dim, patch, data):
    values = data.draw(hnp.arrays(np.float32, (rows * cols, dim), elements=finite32))
    f = FeatureMap(rows, cols, dim, values, patch)
    back = io.features_from_bytes(io.features_to_bytes(f))
    assert back == f
    assert back.values.tobytes() == f.values.tobytes()


def test_feature_format_errors():
    good = io.features_to_bytes(FeatureMap(2, 2, 3, np.ones((4, 3), dtype=np.float32)))
    cases = {
        "bad magic": b"XXXX" + good[4:],
        "version mismatch": good[:4] + struct.pack("<I", 2) + good[8:],
        "truncated payload": good[:-1],
        "dimension overflow": good[:4] + struct.pack("<5I", 1, 1 << 16, 1 << 16, 1 << 16, 14) + good[24:],
        "trailing bytes": good + b"\0",
    }
    codes = set()
    for code, data in cases.items():
        with pytest.raises(io.FormatError) as exc:
            io.features_from_bytes(data)
        assert exc.value.code == code
        codes.add(exc.value.code)
    assert len(codes) == len(cases)
    with pytest.raises(io.FormatError) as exc:
        io.features_from_bytes(good[:10])
    assert exc.value.code == "truncated payload"
    with pytest.raises(io.FormatError) as exc:
        io.features_from_bytes(good[:4] + struct.pack("<5I", 1, 0, 2, 3, 14))
    assert exc.value.code == "dimension overflow"


def test_nan_payload_rejected():
    data = io.features_to_bytes(FeatureMap(1, 1, 1, np.ones((1, 1), dtype=np.float32)))
    data = data[:-4] + struct.pack("<f", float("nan"))
    with pytest.raises(io.FormatError, match="finite"):
        io.features_from_bytes(data)


def test_plan_round_trip(rng):
    values = rng.random((3, 4))
    plan = TransportPlan(values, "unbalanced", SolverConfig(lam=0.1, alpha=10, beta=10, iterations=10))
    data = io.plan_to_bytes(plan)
    assert data[:4] == b"GECP" and len(data) == 16 + 48 + 16
    back, params = io.plan_from_bytes(data)
    np.testing.assert_array_equal(back, values.astype(np.float32))
    assert params[3] == 10 and params[0] == np.float32(0.1)
    assert io.solver_config_from_plan_params(params).iterations == 10
    with pytest.raises(io.FormatError) as exc:
        io.plan_from_bytes(data[:-2])
    assert exc.value.code == "truncated payload"


def test_adapter_round_trip(rng):
    w = rng.normal(size=(5, 5)).astype(np.float32)
    data = io.adapter_to_bytes(w)
    assert data[:4] == b"GECW" and struct.unpack("<I", data[4:8]) == (5,)
    np.testing.assert_array_equal(io.adapter_from_bytes(data), w)
    with pytest.raises(io.FormatError):
        io.adapter_from_bytes(data + b"1234")


def test_annotation_round_trip(tmp_path):
    ann = make_pair()
    path = tmp_path / "a.json"
    io.write_annotation(path, ann)
    assert io.read_annotation(path) == ann
    text = path.read_text()
    obj = io.annotation_to_obj(ann)
    assert list(obj) == ["source_id", "target_id", "image_size_src", "image_size_tgt",
                         "keypoints_src", "keypoints_tgt", "mask_src", "mask_tgt"]
    assert obj["keypoints_tgt"][1] == {"id": 1, "x": None, "y": None, "visible": False, "symmetric_id": 0}
    assert obj["mask_src"] == ["111", "111", "111"]
    assert text.endswith("\n")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_synthetic_annotation_round_trip(seed):
    xs, _, ann = gen_synthetic_pair(SyntheticPairSpec(seed=seed))
    assert io.annotation_from_obj(io.annotation_to_obj(ann)) == ann
    assert io.features_from_bytes(io.features_to_bytes(xs)).values.tobytes() == xs.values.astype(np.float32).tobytes()


def test_annotation_with_bbox(tmp_path):
    ann = make_pair()
    obj = io.annotation_to_obj(ann)
    obj["bbox_tgt"] = [0, 0, 20, 30]
    back = io.annotation_from_obj(obj)
    assert back.bbox_tgt == (0.0, 0.0, 20.0, 30.0)
    assert io.annotation_to_obj(back)["bbox_tgt"] == [0.0, 0.0, 20.0, 30.0]


def test_annotation_errors():
    obj = io.annotation_to_obj(make_pair())
    with pytest.raises(io.FormatError, match="missing"):
        io.annotation_from_obj({k: v for k, v in obj.items() if k != "mask_src"})
    with pytest.raises(io.FormatError, match="unexpected"):
        io.annotation_from_obj({**obj, "extra": 1})
    bad = dict(obj)
    bad["keypoints_src"] = [dict(k) for k in obj["keypoints_src"]]
    bad["keypoints_src"][0]["symmetric_id"] = 0
    with pytest.raises(io.FormatError, match="own symmetric"):
        io.annotation_from_obj(bad)
    with pytest.raises(io.FormatError):
        io.annotation_from_obj({**obj, "mask_src": ["10", "1"]})


def test_marginals_and_labels(tmp_path):
    marg = Marginals(np.array([0.1, 0.2, 0.7]), np.array([0.5, 0.5]))
    io.write_marginals(tmp_path / "m.json", marg)
    back = io.read_marginals(tmp_path / "m.json")
    assert back.a.tolist() == marg.a.tolist() and back.b.tolist() == marg.b.tolist()
    labels = np.array([[0, 1], [-1, 3]])
    io.write_labels(tmp_path / "l.json", labels)
    np.testing.assert_array_equal(io.read_labels(tmp_path / "l.json"), labels)
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(io.FormatError):
        io.read_marginals(tmp_path / "bad.json")
