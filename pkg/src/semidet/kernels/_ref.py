"""Pure-numpy reference implementations of the hot kernels.

Semantics match the compiled module ``_corec`` exactly; the convolution
results may differ from it in the last float bits because the reference
uses im2col + matmul while the extension accumulates directly.
"""

from __future__ import annotations

import numpy as np


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Unfold (C,H,W) into (C*kh*kw, Ho*Wo) patch columns."""
    c, h, w = x.shape
    ho = _out_size(h, kh, stride, pad)
    wo = _out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, kh, kw, ho, wo), dtype=np.float64)
    for ky in range(kh):
        for kx in range(kw):
            cols[:, ky, kx] = xp[:, ky : ky + ho * stride : stride, kx : kx + wo * stride : stride]
    return cols.reshape(c * kh * kw, ho * wo)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """2-D convolution: x (Cin,H,W), w (Cout,Cin,kh,kw), b (Cout,) -> (Cout,Ho,Wo)."""
    cout, cin, kh, kw = w.shape
    assert x.shape[0] == cin
    ho = _out_size(x.shape[1], kh, stride, pad)
    wo = _out_size(x.shape[2], kw, stride, pad)
    cols = _im2col(x, kh, kw, stride, pad)
    y = w.reshape(cout, -1) @ cols + b[:, None]
    return np.ascontiguousarray(y.reshape(cout, ho, wo))


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, dy: np.ndarray, stride: int, pad: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d_forward w.r.t. input, weights, and bias."""
    cout, cin, kh, kw = w.shape
    _, ho, wo = dy.shape
    h, wdt = x.shape[1], x.shape[2]

    db = dy.sum(axis=(1, 2))

    cols = _im2col(x, kh, kw, stride, pad)
    dy_flat = dy.reshape(cout, -1)
    dw = (dy_flat @ cols.T).reshape(cout, cin, kh, kw)

    dcols = (w.reshape(cout, -1).T @ dy_flat).reshape(cin, kh, kw, ho, wo)
    dxp = np.zeros((cin, h + 2 * pad, wdt + 2 * pad), dtype=np.float64)
    for ky in range(kh):
        for kx in range(kw):
            dxp[:, ky : ky + ho * stride : stride, kx : kx + wo * stride : stride] += dcols[:, ky, kx]
    dx = dxp[:, pad : pad + h, pad : pad + wdt]
    return np.ascontiguousarray(dx), dw, db


def warp_affine_nearest(img: np.ndarray, inv: np.ndarray) -> np.ndarray:
    """Warp an (H,W,3) uint8 image; ``inv`` maps output pixel centers to source coords.

    Nearest-neighbor sampling at pixel centers (x+0.5, y+0.5); out-of-bounds
    sources produce black pixels.
    """
    h, w = img.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    cx = xs + 0.5
    cy = ys + 0.5
    sx = np.floor(inv[0, 0] * cx + inv[0, 1] * cy + inv[0, 2]).astype(np.int64)
    sy = np.floor(inv[1, 0] * cx + inv[1, 1] * cy + inv[1, 2]).astype(np.int64)
    valid = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    out = np.zeros_like(img)
    out[valid] = img[sy[valid], sx[valid]]
    return out


def greedy_nms_mask(boxes: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy suppression over boxes already sorted by priority.

    Walks boxes in order; a box is kept unless its IoU with some earlier
    kept box exceeds ``iou_threshold`` (strictly). Returns a bool mask.
    """
    n = boxes.shape[0]
    keep = np.zeros(n, dtype=bool)
    if n == 0:
        return keep
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    kept: list[int] = []
    for i in range(n):
        suppressed = False
        for j in kept:
            ix1 = max(x1[i], x1[j])
            iy1 = max(y1[i], y1[j])
            ix2 = min(x2[i], x2[j])
            iy2 = min(y2[i], y2[j])
            iw = ix2 - ix1
            ih = iy2 - iy1
            if iw > 0 and ih > 0:
                inter = iw * ih
                if inter / (areas[i] + areas[j] - inter) > iou_threshold:
                    suppressed = True
                    break
        if not suppressed:
            keep[i] = True
            kept.append(i)
    return keep
