import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geco.features import FeatureMap
from geco.match_eval import (
    MISS,
    NOT_APPLICABLE,
    OVERLINE,
    SPLIT_10,
    SPLIT_11,
    SPLIT_1X,
    SPLITS,
    TILDE,
    UNDERLINE,
    EvalError,
    MatchResult,
    PgckRecord,
    ambiguity_class,
    ambiguity_split,
    argmax_match,
    classify_pair,
    match_pair,
    parse_sweep,
    pck_point,
    pgck_decompose,
    radius_sweep,
)
from geco.synth import SyntheticPairSpec, gen_dataset

from conftest import make_pair

SIZE = (100, 50)  # radius at alpha=0.1 is 10 px


def result(pred, gt, sym=None, split=SPLIT_1X, size=SIZE, bbox=None):
    return MatchResult(0, pred, 1.0, gt, sym, split, size, bbox)


def test_argmax_examples(rng):
    values = rng.normal(size=(6, 4))
    f = FeatureMap(2, 3, 4, values)
    for i in range(6):
        j, sim = argmax_match(f, f, i)
        assert j == i and sim == pytest.approx(1.0)
    tgt = np.zeros((9, 2))
    tgt[:, 1] = 1.0
    tgt[3] = tgt[7] = [1.0, 0.0]
    assert argmax_match(np.array([[1.0, 0.0]]), tgt, 0)[0] == 3
    tgt2 = np.array([[0.2, np.sqrt(1 - 0.04)], [0.9, np.sqrt(1 - 0.81)]])
    j, sim = argmax_match(np.array([[1.0, 0.0]]), tgt2, 0)
    assert j == 1 and sim == pytest.approx(0.9)


def test_argmax_scale_invariant_and_permutation_consistent(rng):
    xs = rng.normal(size=(5, 3))
    xt = rng.normal(size=(7, 3))
    perm = rng.permutation(7)
    for i in range(5):
        j, _ = argmax_match(xs, xt, i)
        assert argmax_match(3.7 * xs, 0.2 * xt, i)[0] == j
        assert perm[argmax_match(xs, xt[perm], i)[0]] == j


def test_classify_pair():
    ann = make_pair(src={0: (7.0, 7.0), 1: (35.0, 7.0), 2: (21.0, 21.0)},
                    tgt={0: (7.0, 35.0), 1: None, 2: (35.0, 35.0)})
    assert classify_pair(ann.keypoint_src(2), ann) == SPLIT_1X
    assert classify_pair(ann.keypoint_src(0), ann) == SPLIT_10
    assert classify_pair(ann.keypoint_src(1), ann) is None
    ann = make_pair(tgt={0: (7.0, 35.0), 1: (21.0, 35.0), 2: None})
    assert classify_pair(ann.keypoint_src(0), ann) == SPLIT_11
    assert classify_pair(ann.keypoint_src(2), ann) is None


def test_match_pair_predictions_are_patch_centers(rng):
    ann = make_pair(tgt={0: (7.0, 35.0), 1: (21.0, 35.0), 2: (35.0, 35.0)})
    xs = FeatureMap(3, 3, 4, rng.normal(size=(9, 4)))
    xt = FeatureMap(3, 3, 4, rng.normal(size=(9, 4)))
    results = match_pair(xs, xt, ann)
    assert [r.split for r in results] == [SPLIT_11, SPLIT_11, SPLIT_1X]
    centers = {((c + 0.5) * 14, (r + 0.5) * 14) for r in range(3) for c in range(3)}
    assert all(r.pred in centers for r in results)
    assert results[0].sym == (21.0, 35.0)


def test_pck_examples():
    assert pck_point([result((5.0, 5.0), (5.0, 5.0))] * 3) == 1.0
    pairs = [result((0.0, 0.0), (5.0, 0.0)), result((0.0, 0.0), (15.0, 0.0))]
    assert pck_point(pairs, 0.1) == 0.5
    with pytest.raises(EvalError, match="no evaluable pairs"):
        pck_point([])
    # strict inequality at the radius
    assert pck_point([result((0.0, 0.0), (10.0, 0.0))], 0.1) == 0.0


def test_bbox_normalization():
    r = result((0.0, 0.0), (15.0, 0.0), bbox=(0.0, 0.0, 200.0, 20.0))
    assert pck_point([r], 0.1, "bbox") == 1.0
    with pytest.raises(EvalError, match="bbox"):
        pck_point([result((0.0, 0.0), (1.0, 0.0))], 0.1, "bbox")


def test_record_invariants():
    with pytest.raises(EvalError):
        PgckRecord(SPLIT_1X, True, UNDERLINE)
    with pytest.raises(EvalError):
        PgckRecord(SPLIT_11, True, NOT_APPLICABLE)
    with pytest.raises(EvalError):
        PgckRecord(SPLIT_11, False, TILDE)


def test_decompose_examples():
    recs = [PgckRecord(SPLIT_11, True, UNDERLINE)] * 4
    out = pgck_decompose(recs)
    assert out["pck"] == out["pgck"] == 1
    recs = (
        [PgckRecord(SPLIT_10, c, NOT_APPLICABLE) for c in (True, False)]
        + [PgckRecord(SPLIT_11, c, UNDERLINE if c else MISS) for c in (True, True, False)]
        + [PgckRecord(SPLIT_1X, c, NOT_APPLICABLE) for c in (True, True, True, True, False)]
    )
    out = pgck_decompose(recs)
    assert out["pck"] == Fraction(7, 10)
    assert (out["n10"], out["n11"], out["n1x"]) == (2, 3, 5)
    assert out["pgck"] == Fraction(2, 3)
    assert out["identity_holds"]


def test_decompose_absent_split():
    out = pgck_decompose([PgckRecord(SPLIT_1X, True, NOT_APPLICABLE)])
    assert out["ratio11"] is None and out["pgck"] is None and out["identity_holds"]


def random_records(rnd):
    recs = []
    for _ in range(rnd.randint(1, 40)):
        split = rnd.choice(SPLITS)
        if split == SPLIT_11:
            cls = rnd.choice([UNDERLINE, TILDE, OVERLINE, MISS])
            recs.append(PgckRecord(split, cls in (UNDERLINE, TILDE), cls))
        else:
            recs.append(PgckRecord(split, rnd.random() < 0.5, NOT_APPLICABLE))
    return recs


def test_identity_random_record_sets():
    rnd = random.Random(0)
    for _ in range(300):
        recs = random_records(rnd)
        out = pgck_decompose(recs)
        total = sum((out[f"ratio{s}"] * out[f"weight{s}"] for s in SPLITS if out[f"n{s}"]), Fraction(0))
        assert total == out["pck"] == Fraction(sum(r.correct for r in recs), len(recs))


def test_ambiguity_examples():
    r = 10.0
    far = result((0.0, 0.0), (0.0, 0.0), sym=(3 * r, 0.0), split=SPLIT_11)
    assert ambiguity_class(far, 0.1) == UNDERLINE
    near = result((r / 2, 0.0), (0.0, 0.0), sym=(r, 0.0), split=SPLIT_11)
    assert ambiguity_class(near, 0.1) == TILDE
    swapped = result((2 * r, 0.0), (0.0, 0.0), sym=(2 * r, 0.0), split=SPLIT_11)
    assert ambiguity_class(swapped, 0.1) == OVERLINE
    lost = result((40.0, 40.0), (0.0, 0.0), sym=(2 * r, 0.0), split=SPLIT_11)
    assert ambiguity_class(lost, 0.1) == MISS
    with pytest.raises(EvalError):
        ambiguity_class(result((0.0, 0.0), (0.0, 0.0), split=SPLIT_11), 0.1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(*[st.floats(0, 100)] * 6), min_size=1, max_size=20))
def test_ambiguity_partition(coords):
    results = [result((a, b), (c, d), sym=(e, f), split=SPLIT_11) for a, b, c, d, e, f in coords]
    for alpha in parse_sweep("0.01:0.15:0.01"):
        amb = ambiguity_split(results, alpha)
        assert sum(amb[f"n_{c}"] for c in (UNDERLINE, TILDE, OVERLINE, MISS)) == amb["n11"] == len(results)
        hits = sum(1 for r in results if np.hypot(r.pred[0] - r.gt[0], r.pred[1] - r.gt[1]) < r.radius(alpha))
        assert amb["n_hat11"] == hits == amb[f"n_{UNDERLINE}"] + amb[f"n_{TILDE}"]


def test_parse_sweep():
    alphas = parse_sweep("0.01:0.15:0.01")
    assert len(alphas) == 15 and alphas[0] == 0.01 and alphas[-1] == 0.15
    assert parse_sweep("0.05,0.1") == [0.05, 0.1]
    with pytest.raises(EvalError):
        parse_sweep("0.1:0.05:0.01")


def test_radius_sweep_monotone_on_synthetic():
    results = []
    for xs, xt, ann in gen_dataset(SyntheticPairSpec(), range(20)):
        results += match_pair(xs, xt, ann)
    table = radius_sweep(results, [0.05, 0.1, 0.15, 0.5, 2.0])
    pcks = [row["pck"] for row in table]
    assert pcks == sorted(pcks)
    assert table[-1]["pck"] == 1.0
    exact = sum(r.pred == r.gt for r in results) / len(results)
    assert radius_sweep(results, [1e-6])[0]["pck"] == exact
    with pytest.raises(EvalError):
        radius_sweep(results, [])
