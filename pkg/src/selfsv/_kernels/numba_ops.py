"""@njit kernels, same contracts as numpy_ops.

The convolution kernels fuse the window gather/scatter loops in nopython
code and hand the dense contraction to BLAS via ``np.dot``; the centroid
search is a single fused pass.  Everything is single-threaded with
dtype-preserving accumulation, so results are reproducible bit-for-bit.
``cache=True`` persists compiled code next to the package.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def conv1d_forward(x, w, stride, dilation, groups):
    b, cin, t = x.shape
    cout, cin_g, kernel = w.shape
    tout = (t - dilation * (kernel - 1) - 1) // stride + 1
    cout_g = cout // groups
    w2 = np.ascontiguousarray(w.reshape(cout, cin_g * kernel))
    out = np.empty((b, cout, tout), dtype=x.dtype)
    col = np.empty((cin_g * kernel, tout), dtype=x.dtype)
    for bi in range(b):
        for g in range(groups):
            c0 = g * cin_g
            for ci in range(cin_g):
                for k in range(kernel):
                    row = ci * kernel + k
                    base = k * dilation
                    for ti in range(tout):
                        col[row, ti] = x[bi, c0 + ci, base + ti * stride]
            out[bi, g * cout_g : (g + 1) * cout_g, :] = np.dot(
                w2[g * cout_g : (g + 1) * cout_g], col
            )
    return out


@njit(cache=True)
def conv1d_grad_input(gout, w, t_in, stride, dilation, groups):
    b, cout, tout = gout.shape
    _, cin_g, kernel = w.shape
    cout_g = cout // groups
    w2 = np.ascontiguousarray(w.reshape(cout, cin_g * kernel))
    gx = np.zeros((b, cin_g * groups, t_in), dtype=gout.dtype)
    for bi in range(b):
        for g in range(groups):
            c0 = g * cin_g
            # tmp[row, t] = sum_o w[o, row] * gout[o, t] over this group
            tmp = np.dot(
                w2[g * cout_g : (g + 1) * cout_g].T,
                np.ascontiguousarray(gout[bi, g * cout_g : (g + 1) * cout_g]),
            )
            for ci in range(cin_g):
                for k in range(kernel):
                    row = ci * kernel + k
                    base = k * dilation
                    for ti in range(tout):
                        gx[bi, c0 + ci, base + ti * stride] += tmp[row, ti]
    return gx


@njit(cache=True)
def conv1d_grad_weight(gout, x, kernel, stride, dilation, groups):
    b, cout, tout = gout.shape
    cin = x.shape[1]
    cin_g = cin // groups
    cout_g = cout // groups
    gw2 = np.zeros((cout, cin_g * kernel), dtype=gout.dtype)
    colt = np.empty((tout, cin_g * kernel), dtype=x.dtype)
    for bi in range(b):
        for g in range(groups):
            c0 = g * cin_g
            for ci in range(cin_g):
                for k in range(kernel):
                    row = ci * kernel + k
                    base = k * dilation
                    for ti in range(tout):
                        colt[ti, row] = x[bi, c0 + ci, base + ti * stride]
            gw2[g * cout_g : (g + 1) * cout_g, :] += np.dot(
                np.ascontiguousarray(gout[bi, g * cout_g : (g + 1) * cout_g]), colt
            )
    return gw2.reshape(cout, cin_g, kernel)


@njit(cache=True)
def nearest_centroid(points, centroids):
    n, d = points.shape
    k = centroids.shape[0]
    labels = np.empty(n, dtype=np.int64)
    sqd = np.empty(n, dtype=np.float64)
    for i in range(n):
        best = np.inf
        best_j = 0
        for j in range(k):
            acc = 0.0
            for c in range(d):
                # np.float64, not float(): numba's float() keeps float32 inputs narrow
                diff = np.float64(points[i, c]) - np.float64(centroids[j, c])
                acc += diff * diff
            if acc < best:
                best = acc
                best_j = j
        labels[i] = best_j
        sqd[i] = best
    return labels, sqd
