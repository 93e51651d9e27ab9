"""Slow, obviously-correct reference computations used only by the tests."""
from __future__ import annotations

import itertools
import math

import numpy as np


def conv3d_loops(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation on numpy arrays."""
    n, cin, d, h, wd = x.shape
    cout, _, kd, kh, kw = w.shape
    xp = np.zeros((n, cin, d + 2 * pad, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + d, pad : pad + h, pad : pad + wd] = x
    od = (d + 2 * pad - kd) // stride + 1
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, od, oh, ow))
    for bi in range(n):
        for co in range(cout):
            for z in range(od):
                for y in range(oh):
                    for xx in range(ow):
                        acc = 0.0 if b is None else float(b[co])
                        for ci in range(cin):
                            for i in range(kd):
                                for j in range(kh):
                                    for k in range(kw):
                                        acc += w[co, ci, i, j, k] * xp[bi, ci, z * stride + i, y * stride + j, xx * stride + k]
                        out[bi, co, z, y, xx] = acc
    return out


def _src_coord(o, n_in, n_out):
    s = (o + 0.5) * n_in / n_out - 0.5
    s = max(s, 0.0)
    i0 = min(int(math.floor(s)), n_in - 1)
    i1 = min(i0 + 1, n_in - 1)
    return i0, i1, s - i0


def trilinear_voxel(vol, size):
    """Per-output-voxel trilinear interpolation, half-pixel centres."""
    d, h, w = vol.shape
    out = np.zeros(size)
    for z in range(size[0]):
        z0, z1, fz = _src_coord(z, d, size[0])
        for y in range(size[1]):
            y0, y1, fy = _src_coord(y, h, size[1])
            for x in range(size[2]):
                x0, x1, fx = _src_coord(x, w, size[2])
                acc = 0.0
                for zi, wz in ((z0, 1 - fz), (z1, fz)):
                    for yi, wy in ((y0, 1 - fy), (y1, fy)):
                        for xi, wx in ((x0, 1 - fx), (x1, fx)):
                            acc += wz * wy * wx * vol[zi, yi, xi]
                out[z, y, x] = acc
    return out


def kmeans_objective_two_pass(features, labels):
    """Mean squared distance to hard-cluster centroids: centroid pass, then distance pass.

    ``features`` is [p, ...spatial], ``labels`` integer [...spatial].
    """
    p = features.shape[0]
    pts = features.reshape(p, -1).T
    lab = labels.reshape(-1)
    n = len(lab)
    centroids = {}
    for k in np.unique(lab):
        members = [pts[i] for i in range(n) if lab[i] == k]
        acc = np.zeros(p)
        for v in members:
            acc = acc + v
        centroids[k] = acc / len(members)
    total = 0.0
    for i in range(n):
        diff = pts[i] - centroids[lab[i]]
        total += float(diff @ diff)
    return total / n


def surface_voxels(mask):
    d, h, w = mask.shape
    out = []
    for z, y, x in zip(*np.nonzero(mask)):
        on_surface = False
        for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            zz, yy, xx = z + dz, y + dy, x + dx
            if not (0 <= zz < d and 0 <= yy < h and 0 <= xx < w) or not mask[zz, yy, xx]:
                on_surface = True
                break
        if on_surface:
            out.append((z, y, x))
    return np.array(out, dtype=np.float64)


def hd95_all_pairs(a, b, spacing=(1.0, 1.0, 1.0)):
    sp = np.asarray(spacing)
    sa = surface_voxels(a) * sp
    sb = surface_voxels(b) * sp
    dists = []
    for p in sa:
        dists.append(np.sqrt(((sb - p) ** 2).sum(axis=1)).min())
    for p in sb:
        dists.append(np.sqrt(((sa - p) ** 2).sum(axis=1)).min())
    return float(np.percentile(dists, 95))


def dice_np(a, b):
    s = a.sum() + b.sum()
    return 1.0 if s == 0 else 2.0 * np.logical_and(a, b).sum() / s


def exhaustive_match_cost(pred, gt, k):
    """Minimum of -sum(dice) over every injective map gt-label -> pred-label."""
    gts = list(np.unique(gt))
    best = math.inf
    for perm in itertools.permutations(range(k), len(gts)):
        c = -sum(dice_np(pred == p, gt == g) for p, g in zip(perm, gts))
        best = min(best, c)
    return best
