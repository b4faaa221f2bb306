import numpy as np
import pytest

from geco.features import Keypoint, PairAnnotation


def make_pair(n_rows=3, n_cols=3, patch=14, src=None, tgt=None, mask_src=None, mask_tgt=None):
    """Small hand-built annotation; ``src``/``tgt`` map keypoint id -> (x, y) or None."""
    size = (n_cols * patch, n_rows * patch)
    src = src if src is not None else {0: (7.0, 7.0), 1: (35.0, 7.0), 2: (21.0, 21.0)}
    tgt = tgt if tgt is not None else {0: (7.0, 35.0), 1: None, 2: (35.0, 35.0)}
    sym = {0: 1, 1: 0, 2: None}

    def kps(locs):
        out = []
        for k in sorted(locs):
            loc = locs[k]
            if loc is None:
                out.append(Keypoint(k, None, None, False, sym.get(k)))
            else:
                out.append(Keypoint(k, loc[0], loc[1], True, sym.get(k)))
        return out

    full = np.ones((n_rows, n_cols), dtype=bool)
    return PairAnnotation(
        "a", "b", size, size, kps(src), kps(tgt),
        full if mask_src is None else mask_src,
        full if mask_tgt is None else mask_tgt,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
