"""Pure-numpy fallbacks for the hot kernels.

Convolution inputs are pre-padded by the caller; shapes are
x (B, Cin, T), w (Cout, Cin/groups, K), gout (B, Cout, Tout).
"""

import numpy as np


def _out_len(t, kernel, stride, dilation):
    return (t - dilation * (kernel - 1) - 1) // stride + 1


def _window_view(x, kernel, stride, dilation):
    # (B, C, Tout, K) sliding-window view, no copy
    b, c, t = x.shape
    tout = _out_len(t, kernel, stride, dilation)
    sb, sc, st = x.strides
    return np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, tout, kernel),
        strides=(sb, sc, st * stride, st * dilation),
        writeable=False,
    )


def conv1d_forward(x, w, stride, dilation, groups):
    cout, cin_g, kernel = w.shape
    view = _window_view(x, kernel, stride, dilation)
    if groups == 1:
        out = np.tensordot(view, w, axes=([1, 3], [1, 2]))  # (B, Tout, Cout)
        return np.ascontiguousarray(out.transpose(0, 2, 1))
    if cin_g == 1 and groups == cout:
        # depthwise
        return np.einsum("bctk,ck->bct", view, w[:, 0, :], optimize=True)
    cout_g = cout // groups
    parts = []
    for g in range(groups):
        vg = view[:, g * cin_g : (g + 1) * cin_g]
        wg = w[g * cout_g : (g + 1) * cout_g]
        parts.append(np.tensordot(vg, wg, axes=([1, 3], [1, 2])).transpose(0, 2, 1))
    return np.concatenate(parts, axis=1)


def conv1d_grad_input(gout, w, t_in, stride, dilation, groups):
    b, cout, tout = gout.shape
    _, cin_g, kernel = w.shape
    cin = cin_g * groups
    gx = np.zeros((b, cin, t_in), dtype=gout.dtype)
    span = (tout - 1) * stride + 1
    if groups == 1:
        # tmp[b, t, c, k] = sum_o gout[b, o, t] * w[o, c, k]
        tmp = np.tensordot(gout, w, axes=(1, 0))
        for k in range(kernel):
            lo = k * dilation
            gx[:, :, lo : lo + span : stride] += tmp[:, :, :, k].transpose(0, 2, 1)
        return gx
    if cin_g == 1 and groups == cout:
        for k in range(kernel):
            lo = k * dilation
            gx[:, :, lo : lo + span : stride] += gout * w[None, :, 0, k, None]
        return gx
    cout_g = cout // groups
    for g in range(groups):
        gg = gout[:, g * cout_g : (g + 1) * cout_g]
        tmp = np.tensordot(gg, w[g * cout_g : (g + 1) * cout_g], axes=(1, 0))
        for k in range(kernel):
            lo = k * dilation
            gx[:, g * cin_g : (g + 1) * cin_g, lo : lo + span : stride] += tmp[
                :, :, :, k
            ].transpose(0, 2, 1)
    return gx


def conv1d_grad_weight(gout, x, kernel, stride, dilation, groups):
    b, cout, tout = gout.shape
    cin = x.shape[1]
    cin_g = cin // groups
    view = _window_view(x, kernel, stride, dilation)
    if groups == 1:
        # gw[o, c, k] = sum_{b,t} gout[b, o, t] * view[b, c, t, k]
        return np.tensordot(gout, view, axes=([0, 2], [0, 2]))
    if cin_g == 1 and groups == cout:
        gw = np.einsum("bct,bctk->ck", gout, view, optimize=True)
        return gw[:, None, :]
    cout_g = cout // groups
    parts = []
    for g in range(groups):
        gg = gout[:, g * cout_g : (g + 1) * cout_g]
        vg = view[:, g * cin_g : (g + 1) * cin_g]
        parts.append(np.tensordot(gg, vg, axes=([0, 2], [0, 2])))
    return np.concatenate(parts, axis=0)


def nearest_centroid(points, centroids):
    """Labels and squared distances of each point's nearest centroid.

    Ties go to the lowest centroid index.  Accumulates dimension by
    dimension in float64 so the rounding sequence matches the loop kernel
    exactly; chunked so the (chunk, K) accumulator stays small.
    """
    n, dim = points.shape
    labels = np.empty(n, dtype=np.int64)
    sqd = np.empty(n, dtype=np.float64)
    cents = centroids.astype(np.float64)
    step = max(1, 2_000_000 // max(1, centroids.shape[0]))
    for i in range(0, n, step):
        chunk = points[i : i + step].astype(np.float64)
        acc = np.zeros((len(chunk), centroids.shape[0]))
        for c in range(dim):
            diff = chunk[:, c, None] - cents[None, :, c]
            acc += diff * diff
        labels[i : i + step] = acc.argmin(axis=1)
        sqd[i : i + step] = acc[np.arange(len(chunk)), labels[i : i + step]]
    return labels, sqd
