"""Slow, obviously-correct reference implementations used by the tests."""
import itertools

import numpy as np


def set_dice_iou(g, p):
    G = {tuple(ix) for ix in np.argwhere(g)}
    P = {tuple(ix) for ix in np.argwhere(p)}
    if not G and not P:
        return 1.0, 1.0
    return 2 * len(G & P) / (len(G) + len(P)), len(G & P) / len(G | P)


def surface_points(mask):
    h, w = mask.shape
    pts = []
    for i, j in np.argwhere(mask):
        border = i in (0, h - 1) or j in (0, w - 1)
        if border or not (mask[i - 1, j] and mask[i + 1, j] and mask[i, j - 1] and mask[i, j + 1]):
            pts.append((i, j))
    return np.array(pts, dtype=float).reshape(-1, 2)


def nearest(a, b):
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return d.min(axis=1)


def brute_distances(g, p, boundary=False):
    if boundary:
        a, b = surface_points(g), surface_points(p)
    else:
        a, b = np.argwhere(g).astype(float), np.argwhere(p).astype(float)
    return nearest(a, b), nearest(b, a)


def brute_hd(g, p, boundary=False):
    x, y = brute_distances(g, p, boundary)
    return max(x.max(), y.max())


def brute_hd95(g, p, boundary=False):
    x, y = brute_distances(g, p, boundary)
    pooled = np.sort(np.concatenate([x, y]))
    # linear interpolation between closest ranks, written out by hand
    pos = 0.95 * (len(pooled) - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(pooled) - 1)
    return pooled[lo] + (pos - lo) * (pooled[hi] - pooled[lo])


def brute_assd(g, p):
    x, y = brute_distances(g, p, boundary=True)
    return (x.sum() + y.sum()) / (len(x) + len(y))


def signflip_pvalue(d):
    """Two-sided p by enumerating every sign pattern of the non-zero |d|."""
    d = np.asarray(d, dtype=float)
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return 1.0
    a = np.abs(d)
    ranks = np.array([np.sum(a < v) + (np.sum(a == v) + 1) / 2 for v in a])
    w_obs = min(ranks[d > 0].sum(), ranks[d < 0].sum())
    signs = np.array(list(itertools.product((0, 1), repeat=n)), dtype=float)
    wp = signs @ ranks
    hits = np.count_nonzero(np.minimum(wp, ranks.sum() - wp) <= w_obs + 1e-9)
    return min(1.0, hits / 2**n)
