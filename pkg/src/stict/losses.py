"""Training objectives: the position-weighted supervised loss, its
deep-supervision aggregate, the three consistency losses, the ramp-up
schedule, and the total.

Consistency targets always come from the teacher and carry no gradient;
the mean-squared penalties therefore update only the student.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

PPA_EPS = 1e-7


@dataclass
class LossWeights:
    beta_max: float = 1.0
    t_max: int = 10
    eta_sic: float = 1.0
    eta_tic: float = 1.0
    eta_sc: float = 1.0

    def validate(self):
        vals = (self.beta_max, self.t_max, self.eta_sic, self.eta_tic, self.eta_sc)
        if any(v < 0 for v in vals):
            raise ValueError(f"loss weights must be non-negative, got {self}")
        return self


@dataclass
class LossBreakdown:
    sup: float
    sic: float
    tic: float
    sc: float
    beta: float
    total: float

    CSV_HEADER = "step,epoch,L_sup,L_sic,L_tic,L_sc,beta,L_total"

    def csv_row(self, step, epoch):
        return (
            f"{step},{epoch},{self.sup:.8g},{self.sic:.8g},{self.tic:.8g},"
            f"{self.sc:.8g},{self.beta:.8g},{self.total:.8g}"
        )


def _check_binary(gt):
    gt = np.asarray(gt)
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("ground truth must be binary {0, 1}")
    return gt


def box_mean(x, k):
    """Border-clipped k x k local mean (each window averages only its
    in-bounds pixels), computed with an integral image."""
    b, c, h, w = x.shape
    r = k // 2
    ii = np.zeros((b, c, h + 1, w + 1), dtype=np.float64)
    ii[:, :, 1:, 1:] = x.cumsum(axis=2).cumsum(axis=3)
    y0 = np.maximum(np.arange(h) - r, 0)
    y1 = np.minimum(np.arange(h) + r + 1, h)
    x0 = np.maximum(np.arange(w) - r, 0)
    x1 = np.minimum(np.arange(w) + r + 1, w)
    area = (y1 - y0)[:, None] * (x1 - x0)[None, :]
    s = (
        ii[:, :, y1[:, None], x1[None, :]]
        - ii[:, :, y0[:, None], x1[None, :]]
        - ii[:, :, y1[:, None], x0[None, :]]
        + ii[:, :, y0[:, None], x0[None, :]]
    )
    return s / area


def ppa_loss(pred, gt, weight_window=7):
    """Position-weighted BCE plus weighted IoU.

    Pixels near mask boundaries (where the local mean of gt disagrees with
    gt) get up to 6x weight: w = 1 + 5*|boxmean(gt) - gt|. Per sample,
    L = sum(w*BCE)/sum(w) + 1 - sum(w*p*g)/sum(w*(p+g-p*g)); the batch
    mean is returned. Predictions are clamped into [eps, 1-eps] first.
    """
    pred = T.as_tensor(pred)
    gt = _check_binary(gt).astype(np.float64)
    if pred.shape != gt.shape:
        raise T.ShapeError(f"ppa: pred {pred.shape} vs gt {gt.shape}")
    w = (1.0 + 5.0 * np.abs(box_mean(gt, weight_window) - gt)).astype(pred.dtype)
    g = Tensor(gt.astype(pred.dtype))
    one_minus_g = Tensor((1.0 - gt).astype(pred.dtype))
    wt = Tensor(w)
    axes = (1, 2, 3)
    w_sum = Tensor(w.sum(axis=axes))

    p = T.clamp(pred, PPA_EPS, 1.0 - PPA_EPS)
    bce = T.subtract(0.0, T.add(T.multiply(g, T.logarithm(p)), T.multiply(one_minus_g, T.logarithm(T.subtract(1.0, p)))))
    bce_term = T.divide(T.reduce(T.multiply(wt, bce), "sum", axes), w_sum)

    pg = T.multiply(p, g)
    inter = T.reduce(T.multiply(wt, pg), "sum", axes)
    union = T.reduce(T.multiply(wt, T.subtract(T.add(p, g), pg)), "sum", axes)
    iou_term = T.subtract(1.0, T.divide(inter, union))

    return T.reduce(T.add(bce_term, iou_term), "mean")


def supervised_loss(outputs, gt, weight_window=7):
    """Deep-supervision aggregate: scale pairs weighted 1/2, 1/4, 1/8 and
    the two final maps weighted 1/2 each."""
    total = None
    for i, (dm, rm) in enumerate(zip(outputs.d_scales, outputs.r_scales)):
        pair = T.add(ppa_loss(dm, gt, weight_window), ppa_loss(rm, gt, weight_window))
        term = T.multiply(pair, 1.0 / 2 ** (i + 1))
        total = term if total is None else T.add(total, term)
    finals = T.add(ppa_loss(outputs.d_final, gt, weight_window), ppa_loss(outputs.r_final, gt, weight_window))
    return T.add(total, T.multiply(finals, 0.5))


def _mse(student, target_data):
    diff = T.subtract(student, Tensor(target_data.astype(student.dtype)))
    return T.reduce(T.multiply(diff, diff), "mean")


def sic_loss(student_mix_pred, teacher_pred, teacher_shuffled_pred, lam):
    """Spatial consistency: MSE between the student's prediction on the
    mixed feature and the lam-blend of the teacher's two predictions."""
    tp = teacher_pred.data if isinstance(teacher_pred, Tensor) else np.asarray(teacher_pred)
    ts = teacher_shuffled_pred.data if isinstance(teacher_shuffled_pred, Tensor) else np.asarray(teacher_shuffled_pred)
    lam = lam.data if isinstance(lam, Tensor) else np.asarray(lam)
    if tp.shape != ts.shape or student_mix_pred.shape != tp.shape:
        raise T.ShapeError("sic: prediction shapes disagree")
    target = lam * tp + (1.0 - lam) * ts
    return _mse(student_mix_pred, target)


def tic_loss(student_pred, target):
    """Temporal consistency: MSE against the warped-blend target."""
    td = target.data if isinstance(target, Tensor) else np.asarray(target)
    if student_pred.shape != td.shape:
        raise T.ShapeError(f"tic: {student_pred.shape} vs {td.shape}")
    return _mse(student_pred, td)


def sc_loss(student_scales, teacher_scales):
    """Scale consistency: each student scale map is pulled toward the
    teacher's average over its three scale maps."""
    if len(student_scales) != 3 or len(teacher_scales) != 3:
        raise ValueError("scale consistency needs exactly 3 maps per side")
    t1, t2, t3 = ((m.data if isinstance(m, Tensor) else np.asarray(m)) for m in teacher_scales)
    # mean written base+residuals so identical maps give an exactly-zero loss
    favg = t1 + ((t2 - t1) + (t3 - t1)) / 3.0
    total = None
    for s in student_scales:
        term = _mse(s, favg)
        total = term if total is None else T.add(total, term)
    return T.multiply(total, 1.0 / 3.0)


def ramp(t, weights):
    """Gaussian ramp-up beta(t) = beta_max * exp(-5 (1 - t/t_max)^2),
    clamped to beta_max from t_max onwards."""
    if t < 0:
        raise ValueError(f"epoch index must be >= 0, got {t}")
    if weights.t_max <= 0 or t >= weights.t_max:
        return weights.beta_max
    return weights.beta_max * float(np.exp(-5.0 * (1.0 - t / weights.t_max) ** 2))


def total_loss(sup, sic, tic, sc, beta, weights):
    """Combine the parts into the optimized total; disabled parts are None.

    Returns (total tensor, breakdown). A non-finite part aborts with the
    offending term named.
    """
    named = {"L_sup": sup, "L_sic": sic, "L_tic": tic, "L_sc": sc}
    for name, part in named.items():
        if part is not None and not np.isfinite(part.data).all():
            raise T.NonFiniteError(f"{name} is non-finite")
    etas = {"L_sic": weights.eta_sic, "L_tic": weights.eta_tic, "L_sc": weights.eta_sc}
    total = sup
    cons = None
    for name in ("L_sic", "L_tic", "L_sc"):
        part = named[name]
        if part is None:
            continue
        term = T.multiply(part, etas[name])
        cons = term if cons is None else T.add(cons, term)
    if cons is not None:
        total = T.add(total, T.multiply(cons, beta))
    breakdown = LossBreakdown(
        sup=float(sup.data),
        sic=float(sic.data) if sic is not None else 0.0,
        tic=float(tic.data) if tic is not None else 0.0,
        sc=float(sc.data) if sc is not None else 0.0,
        beta=beta,
        total=float(total.data),
    )
    return total, breakdown
