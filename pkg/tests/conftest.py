"""Shared fixtures, hypothesis strategies and independent brute-force oracles."""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import strategies as st

from scipy.stats import rankdata

from segagree.volgrid import BinaryMask


def brute_surface(fg: np.ndarray):
    """Surface voxels by explicit neighbour inspection (no morphology routines)."""
    dims = fg.shape
    out = []
    for idx in itertools.product(*(range(n) for n in dims)):
        if not fg[idx]:
            continue
        for axis in range(3):
            for step in (-1, 1):
                nb = list(idx)
                nb[axis] += step
                if not 0 <= nb[axis] < dims[axis] or not fg[tuple(nb)]:
                    out.append(idx)
                    break
            else:
                continue
            break
    return out


def brute_directed(src, dst, spacing):
    """Nearest-neighbour distances by exhaustive pairwise comparison."""
    out = []
    for a in src:
        best = math.inf
        for b in dst:
            d = math.sqrt(sum(((a[k] - b[k]) * spacing[k]) ** 2 for k in range(3)))
            best = min(best, d)
        out.append(best)
    return out


def linear_percentile(values, q):
    """Percentile by linear interpolation between order statistics, written out by hand."""
    xs = sorted(values)
    h = (len(xs) - 1) * q / 100.0
    lo = math.floor(h)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (h - lo) * (xs[hi] - xs[lo])


def brute_hd95_sdt(pred: np.ndarray, ref: np.ndarray, spacing, tol):
    sp, sr = brute_surface(pred), brute_surface(ref)
    if not sp or not sr:
        return None, None
    dpr = brute_directed(sp, sr, spacing)
    drp = brute_directed(sr, sp, spacing)
    hd = max(linear_percentile(dpr, 95), linear_percentile(drp, 95))
    sdt = (sum(d <= tol for d in dpr) + sum(d <= tol for d in drp)) / (len(dpr) + len(drp))
    return hd, sdt


def enumerate_tail(diffs):
    """P(W+ >= observed) by listing every sign pattern of the observed ranks."""
    d = np.asarray(diffs, dtype=float)
    d = d[d != 0]
    ranks = rankdata(np.abs(d))
    observed = ranks[d > 0].sum()
    hits = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        if np.dot(signs, ranks) >= observed - 1e-9:
            hits += 1
    return hits / 2 ** len(d)


def recursion_tail_table(n):
    """Upper-tail table of W+ for ranks 1..n by polynomial multiplication of (1 + x^k)."""
    poly = np.array([1], dtype=object)
    for k in range(1, n + 1):
        shifted = np.concatenate([np.zeros(k, dtype=object), poly])
        poly = np.concatenate([poly, np.zeros(k, dtype=object)]) + shifted
    tail = np.cumsum(poly[::-1])[::-1]
    return [int(t) / 2 ** n for t in tail]


def random_mask_pair(rng: np.random.Generator, max_side: int = 16):
    """Two random masks on one grid; a mix of blobs and speckle so surfaces are non-trivial."""
    dims = tuple(int(v) for v in rng.integers(2, max_side + 1, size=3))
    spacing = tuple(float(v) for v in rng.uniform(0.3, 4.0, size=3))
    masks = []
    for _ in range(2):
        style = rng.integers(3)
        if style == 0:
            fg = rng.random(dims) < rng.uniform(0.05, 0.6)
        else:
            c = rng.uniform(0, 1, 3) * np.array(dims)
            r = rng.uniform(1, max(dims) / 2, 3)
            zz, yy, xx = np.indices(dims)
            fg = ((zz - c[0]) / r[0]) ** 2 + ((yy - c[1]) / r[1]) ** 2 + ((xx - c[2]) / r[2]) ** 2 <= 1
            if style == 2:
                fg ^= rng.random(dims) < 0.05
        masks.append(fg)
    return masks[0], masks[1], spacing


def as_mask(fg, spacing=(1.0, 1.0, 1.0)) -> BinaryMask:
    return BinaryMask(np.asarray(fg, dtype=np.uint8), spacing)


@st.composite
def mask_pairs(draw, max_side: int = 8, allow_empty: bool = True):
    dims = tuple(draw(st.integers(1, max_side)) for _ in range(3))
    spacing = tuple(draw(st.floats(0.25, 4.0, allow_nan=False)) for _ in range(3))
    n = int(np.prod(dims))
    bits = st.lists(st.booleans(), min_size=n, max_size=n)
    a = np.array(draw(bits), dtype=bool).reshape(dims)
    b = np.array(draw(bits), dtype=bool).reshape(dims)
    if not allow_empty:
        a.flat[0] = True
        b.flat[-1] = True
    return a, b, spacing


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
