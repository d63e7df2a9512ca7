"""Independent reference computations used by the tests."""

import math

import numpy as np

FD_STEP = 1e-6


def numeric_grad(f, arr: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, n: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a, n = np.asarray(a), np.asarray(n)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0


def joint_histogram_mi(p0_or_probs, labels, num_classes):
    """Brute-force soft-joint MI over an explicit pixel loop with math.log.

    ``p0_or_probs`` is a list (one entry per pixel, row-major) of length-K probability lists.
    """
    n = len(labels)
    joint = [[0.0] * num_classes for _ in range(num_classes)]
    for probs, y in zip(p0_or_probs, labels):
        for c in range(num_classes):
            joint[c][y] += probs[c] / n
    row = [sum(joint[c]) for c in range(num_classes)]
    col = [sum(joint[c][k] for c in range(num_classes)) for k in range(num_classes)]
    info = 0.0
    for c in range(num_classes):
        for k in range(num_classes):
            j = joint[c][k]
            if j > 0:
                info += j * (math.log(j) - math.log(row[c] * col[k]))
    return info


def scalar_softmax(values):
    m = max(values)
    e = [math.exp(v - m) for v in values]
    s = sum(e)
    return [v / s for v in e]


def bilinear_pixel(src: np.ndarray, H: int, W: int, i: int, j: int) -> float:
    """align_corners=False bilinear sample for output pixel (i, j), edge clamped."""
    h, w = src.shape

    def coord(o, n_out, n_in):
        s = (o + 0.5) * n_in / n_out - 0.5
        s = max(s, 0.0)
        i0 = min(int(math.floor(s)), n_in - 1)
        return i0, min(i0 + 1, n_in - 1), s - i0

    y0, y1, fy = coord(i, H, h)
    x0, x1, fx = coord(j, W, w)
    top = (1 - fx) * src[y0, x0] + fx * src[y0, x1]
    bot = (1 - fx) * src[y1, x0] + fx * src[y1, x1]
    return (1 - fy) * top + fy * bot
