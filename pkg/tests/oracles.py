"""Independent brute-force references used across the test suite.

Everything here is deliberately written as plain loops over numpy scalars,
sharing no code with the library implementations it checks.
"""

import numpy as np


def naive_conv2d(x, weight, bias=None, stride=1, pad=None):
    """Six-nested-loop convolution reference, NCHW layout, zero padding."""
    n, c, h, w = x.shape
    c_out, c_in, k, _ = weight.shape
    assert c == c_in
    if pad is None:
        pad = (k - 1) // 2
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, c_out, oh, ow), dtype=np.float64)
    for ni in range(n):
        for co in range(c_out):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                ii = oi * stride + ki - pad
                                jj = oj * stride + kj - pad
                                if 0 <= ii < h and 0 <= jj < w:
                                    acc += float(x[ni, ci, ii, jj]) * float(weight[co, ci, ki, kj])
                    if bias is not None:
                        acc += float(bias[co])
                    out[ni, co, oi, oj] = acc
    return out


def naive_linear(x, weight, bias):
    """Loop reference for a dense layer: x (N, D), weight (D_out, D)."""
    n, d = x.shape
    d_out = weight.shape[0]
    out = np.zeros((n, d_out), dtype=np.float64)
    for i in range(n):
        for o in range(d_out):
            acc = float(bias[o])
            for j in range(d):
                acc += float(x[i, j]) * float(weight[o, j])
            out[i, o] = acc
    return out


def lookup_modulation(labels, table):
    """Per-pixel brute-force guided-sampling lookup.

    labels: (H, W) ints; table: (N_c, C) floats. Returns (C, H, W).
    """
    h, w = labels.shape
    c = table.shape[1]
    out = np.zeros((c, h, w), dtype=table.dtype)
    for i in range(h):
        for j in range(w):
            for k in range(c):
                out[k, i, j] = table[labels[i, j], k]
    return out


def counting_bank_gradient(labels, out_grad, num_classes):
    """Per-class sum of output gradients: dL/dT[l, k] = sum over pixels of class l.

    out_grad: (C, H, W). Returns (N_c, C) in float64.
    """
    c, h, w = out_grad.shape
    grad = np.zeros((num_classes, c), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            l = labels[i, j]
            for k in range(c):
                grad[l, k] += float(out_grad[k, i, j])
    return grad


def scan_edges(instance_map):
    """Neighbor-scan edge reference: 1 where any in-bounds 4-neighbor differs."""
    h, w = instance_map.shape
    e = np.zeros((h, w), dtype=np.float32)
    for i in range(h):
        for j in range(w):
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ii, jj = i + di, j + dj
                if 0 <= ii < h and 0 <= jj < w and instance_map[ii, jj] != instance_map[i, j]:
                    e[i, j] = 1.0
    return e


def confusion_metrics(pred, gt, num_classes):
    """Hand confusion-matrix pixel accuracy and mean IoU.

    IoU is averaged over the classes appearing in gt or pred.
    """
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    h, w = gt.shape
    for i in range(h):
        for j in range(w):
            conf[gt[i, j], pred[i, j]] += 1
    acc = float(np.trace(conf)) / float(h * w)
    ious = []
    for c in range(num_classes):
        inter = conf[c, c]
        union = conf[c, :].sum() + conf[:, c].sum() - inter
        if union > 0:
            ious.append(inter / union)
    return acc, float(np.mean(ious)) if ious else 0.0
