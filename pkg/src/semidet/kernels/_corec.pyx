# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: conv2d forward/backward, nearest warp, greedy NMS."""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def conv2d_forward(cnp.ndarray x_arr, cnp.ndarray w_arr, cnp.ndarray b_arr, int stride, int pad):
    """2-D convolution: x (Cin,H,W), w (Cout,Cin,kh,kw), b (Cout,) -> (Cout,Ho,Wo)."""
    cdef double[:, :, ::1] x = np.ascontiguousarray(x_arr, dtype=np.float64)
    cdef double[:, :, :, ::1] w = np.ascontiguousarray(w_arr, dtype=np.float64)
    cdef double[::1] b = np.ascontiguousarray(b_arr, dtype=np.float64)
    cdef int cin = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef int cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef int ho = (h + 2 * pad - kh) // stride + 1
    cdef int wo = (wd + 2 * pad - kw) // stride + 1
    y_arr = np.empty((cout, ho, wo), dtype=np.float64)
    cdef double[:, :, ::1] y = y_arr
    cdef int co, ci, oy, ox, ky, kx, iy, ix
    cdef double acc
    for co in range(cout):
        for oy in range(ho):
            for ox in range(wo):
                acc = b[co]
                for ci in range(cin):
                    for ky in range(kh):
                        iy = oy * stride + ky - pad
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(kw):
                            ix = ox * stride + kx - pad
                            if ix < 0 or ix >= wd:
                                continue
                            acc += w[co, ci, ky, kx] * x[ci, iy, ix]
                y[co, oy, ox] = acc
    return y_arr


def conv2d_backward(cnp.ndarray x_arr, cnp.ndarray w_arr, cnp.ndarray dy_arr, int stride, int pad):
    """Gradients of conv2d_forward w.r.t. input, weights, and bias."""
    cdef double[:, :, ::1] x = np.ascontiguousarray(x_arr, dtype=np.float64)
    cdef double[:, :, :, ::1] w = np.ascontiguousarray(w_arr, dtype=np.float64)
    cdef double[:, :, ::1] dy = np.ascontiguousarray(dy_arr, dtype=np.float64)
    cdef int cin = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef int cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef int ho = dy.shape[1], wo = dy.shape[2]
    dx_arr = np.zeros((cin, h, wd), dtype=np.float64)
    dw_arr = np.zeros((cout, cin, kh, kw), dtype=np.float64)
    db_arr = np.zeros(cout, dtype=np.float64)
    cdef double[:, :, ::1] dx = dx_arr
    cdef double[:, :, :, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef int co, ci, oy, ox, ky, kx, iy, ix
    cdef double g
    for co in range(cout):
        for oy in range(ho):
            for ox in range(wo):
                g = dy[co, oy, ox]
                db[co] += g
                for ci in range(cin):
                    for ky in range(kh):
                        iy = oy * stride + ky - pad
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(kw):
                            ix = ox * stride + kx - pad
                            if ix < 0 or ix >= wd:
                                continue
                            dw[co, ci, ky, kx] += g * x[ci, iy, ix]
                            dx[ci, iy, ix] += g * w[co, ci, ky, kx]
    return dx_arr, dw_arr, db_arr


def warp_affine_nearest(cnp.ndarray img_arr, cnp.ndarray inv_arr):
    """Warp an (H,W,3) uint8 image; ``inv`` maps output pixel centers to source coords."""
    cdef unsigned char[:, :, ::1] img = np.ascontiguousarray(img_arr, dtype=np.uint8)
    cdef double[:, ::1] inv = np.ascontiguousarray(inv_arr, dtype=np.float64)
    cdef int h = img.shape[0], w = img.shape[1]
    out_arr = np.zeros((h, w, 3), dtype=np.uint8)
    cdef unsigned char[:, :, ::1] out = out_arr
    cdef int y, x, sx, sy
    cdef double cx, cy
    for y in range(h):
        for x in range(w):
            cx = x + 0.5
            cy = y + 0.5
            sx = <int>floor(inv[0, 0] * cx + inv[0, 1] * cy + inv[0, 2])
            sy = <int>floor(inv[1, 0] * cx + inv[1, 1] * cy + inv[1, 2])
            if 0 <= sx < w and 0 <= sy < h:
                out[y, x, 0] = img[sy, sx, 0]
                out[y, x, 1] = img[sy, sx, 1]
                out[y, x, 2] = img[sy, sx, 2]
    return out_arr


def greedy_nms_mask(cnp.ndarray boxes_arr, double iou_threshold):
    """Greedy suppression over boxes already sorted by priority; bool keep mask."""
    cdef double[:, ::1] boxes = np.ascontiguousarray(boxes_arr, dtype=np.float64)
    cdef int n = boxes.shape[0]
    keep_arr = np.zeros(n, dtype=bool)
    cdef cnp.uint8_t[::1] keep = keep_arr.view(np.uint8)
    if n == 0:
        return keep_arr
    cdef double[::1] areas = np.empty(n, dtype=np.float64)
    cdef int i, j, k, nkept = 0
    cdef long[::1] kept = np.empty(n, dtype=np.int64)
    cdef double ix1, iy1, ix2, iy2, iw, ih, inter
    cdef bint suppressed
    for i in range(n):
        areas[i] = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
    for i in range(n):
        suppressed = False
        for k in range(nkept):
            j = kept[k]
            ix1 = max(boxes[i, 0], boxes[j, 0])
            iy1 = max(boxes[i, 1], boxes[j, 1])
            ix2 = min(boxes[i, 2], boxes[j, 2])
            iy2 = min(boxes[i, 3], boxes[j, 3])
            iw = ix2 - ix1
            ih = iy2 - iy1
            if iw > 0 and ih > 0:
                inter = iw * ih
                if inter / (areas[i] + areas[j] - inter) > iou_threshold:
                    suppressed = True
                    break
        if not suppressed:
            keep[i] = 1
            kept[nkept] = i
            nkept += 1
    return keep_arr
