import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def conv2d_oracle(x, k, stride=1, padding=0):
    """Direct quadruple-loop convolution, the independent reference."""
    b, c, h, w = x.shape
    oc, _, kh, kw = k.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((b, oc, oh, ow), dtype=x.dtype)
    for bi in range(b):
        for oi in range(oc):
            for yi in range(oh):
                for xi in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += xp[bi, ci, yi * stride + ky, xi * stride + kx] * k[oi, ci, ky, kx]
                    out[bi, oi, yi, xi] = acc
    return out


def bilinear_resize_oracle(x, oh, ow):
    """Per-pixel half-pixel-center bilinear resize."""
    b, c, h, w = x.shape
    out = np.zeros((b, c, oh, ow), dtype=x.dtype)
    for i in range(oh):
        sy = min(max((i + 0.5) * h / oh - 0.5, 0.0), h - 1.0)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(ow):
            sx = min(max((j + 0.5) * w / ow - 0.5, 0.0), w - 1.0)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[:, :, i, j] = (
                (1 - fy) * (1 - fx) * x[:, :, y0, x0]
                + (1 - fy) * fx * x[:, :, y0, x1]
                + fy * (1 - fx) * x[:, :, y1, x0]
                + fy * fx * x[:, :, y1, x1]
            )
    return out


def warp_oracle(x, flow):
    """Per-pixel border-clamped bilinear sampling at p + flow(p)."""
    b, c, h, w = x.shape
    out = np.zeros_like(x)
    for bi in range(b):
        for i in range(h):
            for j in range(w):
                sx = min(max(j + float(flow[bi, 0, i, j]), 0.0), w - 1.0)
                sy = min(max(i + float(flow[bi, 1, i, j]), 0.0), h - 1.0)
                x0, y0 = int(np.floor(sx)), int(np.floor(sy))
                x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
                fx, fy = sx - x0, sy - y0
                out[bi, :, i, j] = (
                    (1 - fy) * (1 - fx) * x[bi, :, y0, x0]
                    + (1 - fy) * fx * x[bi, :, y0, x1]
                    + fy * (1 - fx) * x[bi, :, y1, x0]
                    + fy * fx * x[bi, :, y1, x1]
                )
    return out


def lcs_oracle(fd, d):
    """Exhaustive neighborhood scan: for every pixel return the flat index
    of the in-window, non-center neighbor with minimal channel correlation,
    raster-order first on ties."""
    b, c, h, w = fd.shape
    r = d // 2
    partner = np.zeros((b, h * w), dtype=int)
    for bi in range(b):
        for i in range(h):
            for j in range(w):
                best = None
                best_flat = -1
                for di in range(-r, r + 1):
                    for dj in range(-r, r + 1):
                        if di == 0 and dj == 0:
                            continue
                        y, x = i + di, j + dj
                        if not (0 <= y < h and 0 <= x < w):
                            continue
                        corr = float(np.dot(fd[bi, :, i, j], fd[bi, :, y, x]))
                        if best is None or corr < best:
                            best = corr
                            best_flat = y * w + x
                partner[bi, i * w + j] = best_flat
    return partner


def ppa_oracle(pred, gt, window):
    """Two-loop reference for the position-weighted BCE + IoU loss."""
    eps = 1e-7
    b, _, h, w = pred.shape
    r = window // 2
    total = 0.0
    for bi in range(b):
        wmap = np.zeros((h, w))
        for i in range(h):
            for j in range(w):
                ys = slice(max(0, i - r), min(h, i + r + 1))
                xs = slice(max(0, j - r), min(w, j + r + 1))
                wmap[i, j] = 1 + 5 * abs(gt[bi, 0][ys, xs].mean() - gt[bi, 0, i, j])
        p = np.clip(pred[bi, 0], eps, 1 - eps)
        g = gt[bi, 0]
        bce = -(g * np.log(p) + (1 - g) * np.log(1 - p))
        bce_term = (wmap * bce).sum() / wmap.sum()
        inter = (wmap * p * g).sum()
        union = (wmap * (p + g - p * g)).sum()
        total += bce_term + 1 - inter / union
    return total / b


def confusion_oracle(pred, gt, threshold):
    tp = fp = tn = fn = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        if p >= threshold and g == 1:
            tp += 1
        elif p >= threshold and g == 0:
            fp += 1
        elif p < threshold and g == 1:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn
