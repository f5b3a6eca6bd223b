"""Independent brute-force oracles used to freeze expected values.

Everything here is written as plain loops over scalars, deliberately
avoiding the vectorized code paths under test.
"""

import math

import numpy as np


def conv2d_loops(x, kernel, bias=None, stride=1, padding=0):
    """Quadruple-loop sliding-window cross-correlation (BCHW / OCHW)."""
    b, c_in, h, w = x.shape
    c_out, _, k_h, k_w = kernel.shape
    if padding == "same":
        p_h, p_w = (k_h - 1) // 2, (k_w - 1) // 2
    elif isinstance(padding, tuple):
        p_h, p_w = padding
    else:
        p_h = p_w = padding
    h_out = (h + 2 * p_h - k_h) // stride + 1
    w_out = (w + 2 * p_w - k_w) // stride + 1
    out = np.zeros((b, c_out, h_out, w_out), dtype=np.float64)
    for bi in range(b):
        for o in range(c_out):
            for i in range(h_out):
                for j in range(w_out):
                    acc = 0.0
                    for c in range(c_in):
                        for u in range(k_h):
                            for v in range(k_w):
                                yy = i * stride + u - p_h
                                xx = j * stride + v - p_w
                                if 0 <= yy < h and 0 <= xx < w:
                                    acc += x[bi, c, yy, xx] * kernel[o, c, u, v]
                    out[bi, o, i, j] = acc + (bias[o] if bias is not None else 0.0)
    return out


def dft2_naive(x):
    """O(N^2) per output bin direct 2-D DFT of a single HxW field."""
    h, w = x.shape
    out = np.zeros((h, w), dtype=np.complex128)
    for ky in range(h):
        for kx in range(w):
            acc = 0.0 + 0.0j
            for n in range(h):
                for m in range(w):
                    acc += x[n, m] * np.exp(-2j * math.pi * (ky * n / h + kx * m / w))
            out[ky, kx] = acc
    return out


def distance_map_loops(centers, height, width):
    """Min-over-centers Euclidean distance on the integer grid."""
    out = np.zeros((height, width), dtype=np.float64)
    for y in range(height):
        for x in range(width):
            best = math.inf
            for cx, cy in centers:
                dx = x - cx
                dy = y - cy
                best = min(best, math.sqrt(dx * dx + dy * dy))
            out[y, x] = best
    return out


def radial_order_sorted(dist):
    """Descending-distance order with raster tie-break via python sort."""
    flat = dist.reshape(-1)
    return np.array(sorted(range(flat.size), key=lambda i: (-flat[i], i)), dtype=np.int64)


def heatmap_loops(centers, height, width, sigma):
    out = np.zeros((height, width), dtype=np.float64)
    for y in range(height):
        for x in range(width):
            best = 0.0
            for cx, cy in centers:
                d2 = (x - cx) ** 2 + (y - cy) ** 2
                best = max(best, math.exp(-d2 / (2.0 * sigma * sigma)))
            out[y, x] = best
    return out


def nms_loops(heatmap, threshold, window):
    """Exhaustive local-max scan with the raster-first plateau rule."""
    h, w = heatmap.shape
    r = window // 2
    peaks = []
    for y in range(h):
        for x in range(w):
            v = heatmap[y, x]
            if v < threshold:
                continue
            ok = True
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    if dy == 0 and dx == 0:
                        continue
                    yy, xx = y + dy, x + dx
                    if not (0 <= yy < h and 0 <= xx < w):
                        continue
                    q = heatmap[yy, xx]
                    earlier = dy < 0 or (dy == 0 and dx < 0)
                    if earlier and not v > q:
                        ok = False
                    if not earlier and not v >= q:
                        ok = False
                if not ok:
                    break
            if ok:
                peaks.append((x, y, v))
    return peaks


def scan_loops(x, abar, bbar, c_seq, feed, w=None, prompt=None):
    """Scalar-loop reference of the excited recurrence."""
    length, channels = x.shape
    d_state = abar.shape[1]
    if w is None:
        w = np.ones((length, d_state))
    if prompt is None:
        prompt = np.zeros((length, d_state))
    h = np.zeros((channels, d_state))
    y = np.zeros((length, channels))
    for i in range(length):
        for ch in range(channels):
            for s in range(d_state):
                h[ch, s] = abar[i, s] * h[ch, s] + bbar[i, s] * w[i, s] * x[i, ch]
            acc = 0.0
            for s in range(d_state):
                acc += (c_seq[i, s] * w[i, s] + prompt[i, s]) * h[ch, s]
            y[i, ch] = acc + feed[ch] * x[i, ch]
    return y
