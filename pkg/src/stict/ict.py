"""Interpolation machinery for consistency training.

Spatial side: each feature-map pixel is paired with its least-correlated
neighbor inside a d x d window (or a random one, for the ablation schemes)
and blended with per-pixel uniform coefficients. Temporal side: a frame's
prediction target is the flow-warped blend of the predictions at the two
surrounding frames.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

SCHEMES = ("si", "ri-feature", "ri-rgb")

# flow warping lives with the tensor ops (it needs the autodiff internals)
# but belongs to this module's surface
warp = T.warp


@dataclass
class MixPlan:
    """Per-pixel partner indices plus blend coefficients for one batch.

    partner_flat[b, p] is the flat spatial index (row * W + col) of the
    pixel that position p blends with; lam[b, 0, i, j] in [0, 1] weights
    the original pixel.
    """

    partner_flat: np.ndarray  # (B, H*W) int
    lam: np.ndarray  # (B, 1, H, W)
    d: int
    scheme: str

    def __post_init__(self):
        b, _, h, w = self.lam.shape
        if self.partner_flat.shape != (b, h * w):
            raise T.ShapeError(f"plan: partner shape {self.partner_flat.shape} != {(b, h * w)}")
        if self.partner_flat.min() < 0 or self.partner_flat.max() >= h * w:
            raise ValueError("plan: partner index out of bounds")
        if (self.partner_flat == np.arange(h * w)[None, :]).any():
            raise ValueError("plan: a pixel partners with itself")
        if self.lam.min() < 0.0 or self.lam.max() > 1.0:
            raise ValueError("plan: lambda outside [0, 1]")

    @property
    def spatial(self):
        return self.lam.shape[2:]

    def lam_at(self, size, dtype=np.float32):
        """Coefficients nearest-upsampled to another (H, W), for blending
        full-resolution prediction maps with the same per-pixel weights."""
        h, w = self.lam.shape[2:]
        oh, ow = size
        if (oh, ow) == (h, w):
            return self.lam.astype(dtype)
        ri = np.minimum(np.arange(oh) * h // oh, h - 1)
        ci = np.minimum(np.arange(ow) * w // ow, w - 1)
        return self.lam[:, :, ri[:, None], ci[None, :]].astype(dtype)


def _offsets(d):
    r = d // 2
    return [(di, dj) for di in range(-r, r + 1) for dj in range(-r, r + 1) if (di, dj) != (0, 0)]


def _shifted_correlation(fd, di, dj):
    """Channel dot product of each pixel with its (di,dj) neighbor; +inf
    where the neighbor falls outside the map."""
    b, _, h, w = fd.shape
    corr = np.full((b, h, w), np.inf, dtype=np.float64)
    ys = slice(max(0, -di), min(h, h - di))
    xs = slice(max(0, -dj), min(w, w - dj))
    yd = slice(max(0, di), min(h, h + di))
    xd = slice(max(0, dj), min(w, w + dj))
    corr[:, ys, xs] = (fd[:, :, ys, xs].astype(np.float64) * fd[:, :, yd, xd]).sum(axis=1)
    return corr


def lcs_plan(feature, d, rng, scheme="si"):
    """Build a mix plan for `feature` (B,C,H,W).

    scheme "si": partner is the in-window pixel with minimum channel
    correlation, ties broken by smallest raster-order offset. "ri-feature"
    and "ri-rgb": partner drawn uniformly from the in-window candidates.
    Blend coefficients are i.i.d. uniform [0,1] per location.
    """
    fd = feature.data if isinstance(feature, Tensor) else np.asarray(feature)
    b, _, h, w = fd.shape
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    # the window is border-clipped, so d only needs to fit the larger extent
    if d % 2 == 0 or d < 3 or d > max(h, w) or h * w < 2:
        raise ValueError(f"window d={d} invalid for a {h}x{w} map (need odd, 3..{max(h, w)})")
    offsets = _offsets(d)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")

    if scheme == "si":
        best_val = None
        best_flat = None
        for di, dj in offsets:
            corr = _shifted_correlation(fd, di, dj)
            flat = np.broadcast_to(((yy + di) * w + (xx + dj)), (b, h, w))
            if best_val is None:
                best_val, best_flat = corr, flat.copy()
            else:
                better = corr < best_val
                best_val = np.where(better, corr, best_val)
                best_flat = np.where(better, flat, best_flat)
        partner = best_flat
    else:
        valid = np.stack(
            [(yy + di >= 0) & (yy + di < h) & (xx + dj >= 0) & (xx + dj < w) for di, dj in offsets]
        )
        flats = np.stack([(yy + di) * w + (xx + dj) for di, dj in offsets])
        count = valid.sum(axis=0)
        pick = np.minimum((rng.random((b, h, w)) * count).astype(int), count - 1)
        order = np.cumsum(valid, axis=0) - 1  # rank of each valid offset per position
        chosen = valid[None] & (order[None] == pick[:, None])  # (B, n_off, H, W)
        partner = (flats[None] * chosen).sum(axis=1)

    lam = rng.random((b, 1, h, w))
    return MixPlan(partner.reshape(b, h * w), lam, d, scheme)


def apply_shuffle(feature, plan):
    """Replace every pixel by its plan partner, across all channels."""
    if feature.shape[2:] != plan.spatial:
        raise T.ShapeError(f"shuffle: feature {feature.shape} vs plan {plan.spatial}")
    return T.spatial_gather(feature, plan.partner_flat)


def mix(feature, shuffled, lam):
    """Convex per-pixel blend lam*feature + (1-lam)*shuffled; lam broadcasts
    over channels and gradients reach both inputs."""
    feature = T.as_tensor(feature)
    shuffled = T.as_tensor(shuffled, like=feature)
    if feature.shape != shuffled.shape:
        raise T.ShapeError(f"mix: shapes {feature.shape} vs {shuffled.shape}")
    lam_d = lam.data if isinstance(lam, Tensor) else np.asarray(lam, dtype=feature.dtype.type)
    if lam_d.min() < 0.0 or lam_d.max() > 1.0:
        raise ValueError("mix: lambda outside [0, 1]")
    lam_t = Tensor(lam_d.astype(feature.dtype))
    return T.add(T.multiply(lam_t, feature), T.multiply(T.subtract(1.0, lam_t), shuffled))


@dataclass
class FlowField:
    """(B,2,H,W) pixel displacements, u along width then v along height."""

    uv: np.ndarray

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=np.float32)
        if self.uv.ndim != 4 or self.uv.shape[1] != 2:
            raise T.ShapeError(f"flow must be (B,2,H,W), got {self.uv.shape}")
        if not np.isfinite(self.uv).all():
            raise T.NonFiniteError("flow contains non-finite values")


@dataclass
class FrameTriplet:
    """Three frames around time t with the flows that map t onto t-k/t+k."""

    prev: np.ndarray  # (B,3,H,W)
    cur: np.ndarray
    next: np.ndarray
    flow_bwd: FlowField  # t -> t-k
    flow_fwd: FlowField  # t -> t+k
    lam_t: float = 0.5
    k: int = 1

    def __post_init__(self):
        if not (self.prev.shape == self.cur.shape == self.next.shape):
            raise T.ShapeError("triplet frames must share one shape")
        for f in (self.flow_bwd, self.flow_fwd):
            if f.uv.shape[0] != self.cur.shape[0] or f.uv.shape[2:] != self.cur.shape[2:]:
                raise T.ShapeError(f"flow {f.uv.shape} does not match frames {self.cur.shape}")
        if not 0.0 <= self.lam_t <= 1.0:
            raise ValueError(f"lam_t={self.lam_t} outside [0, 1]")
        if self.k < 1:
            raise ValueError("k must be positive")


def temporal_target(pred_prev, pred_next, triplet):
    """Blend the warped surrounding-frame predictions into the target for
    the middle frame: lam_t * warp(prev, bwd) + (1 - lam_t) * warp(next, fwd).

    Predictions are treated as constants; the result carries no gradient.
    """
    pp = pred_prev.data if isinstance(pred_prev, Tensor) else np.asarray(pred_prev)
    pn = pred_next.data if isinstance(pred_next, Tensor) else np.asarray(pred_next)
    if pp.shape != pn.shape:
        raise T.ShapeError(f"temporal_target: {pp.shape} vs {pn.shape}")
    with T.no_grad():
        wp = T.warp(Tensor(pp), triplet.flow_bwd.uv)
        wn = T.warp(Tensor(pn), triplet.flow_fwd.uv)
        lam = triplet.lam_t
        return Tensor(lam * wp.data + (1.0 - lam) * wn.data)
