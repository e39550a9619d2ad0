"""Brute-force reference implementations used as independent test oracles."""

import numpy as np


def conv2d_loops(x, kernel, bias=None, pad=0):
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if bias is None else bias[oc]
                    for ic in range(c):
                        acc += np.sum(xp[b, ic, i:i + kh, j:j + kw] * kernel[oc, ic])
                    out[b, oc, i, j] = acc
    return out


def depthwise_loops(x, kernel, pad=0):
    n, c, h, w = x.shape
    _, kh, kw = kernel.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    out = np.zeros((n, c, ho, wo))
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    out[b, ch, i, j] = np.sum(xp[b, ch, i:i + kh, j:j + kw] * kernel[ch])
    return out
