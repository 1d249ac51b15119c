"""Binary segmentation metrics (MAE, F-measure, IoU, balanced error rate)
plus a temporal-stability diagnostic for video predictions.

MAE uses the continuous probabilities; the other three binarize at a fixed
threshold. BER needs both classes present in a frame: single-class frames
are flagged and excluded from the BER average rather than scored.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("negative confusion count")

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def _check_pred_gt(pred, gt):
    pred = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    gt = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if pred.shape != gt.shape:
        raise T.ShapeError(f"metrics: pred {pred.shape} vs gt {gt.shape}")
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("metrics: ground truth must be binary")
    return pred, gt


def confusion(pred, gt, threshold=0.5):
    pred, gt = _check_pred_gt(pred, gt)
    pos = pred >= threshold
    shadow = gt == 1
    return ConfusionCounts(
        tp=int(np.count_nonzero(pos & shadow)),
        fp=int(np.count_nonzero(pos & ~shadow)),
        tn=int(np.count_nonzero(~pos & ~shadow)),
        fn=int(np.count_nonzero(~pos & shadow)),
    )


@dataclass
class FrameMetrics:
    mae: float
    fbeta: float
    iou: float
    ber: float  # NaN when flagged
    ber_valid: bool


def compute(pred, gt, threshold=0.5, beta2=0.3):
    """Score one frame. Divisions by zero give 0 for precision/recall/
    F-beta/IoU; a frame whose ground truth has a single class gets a
    flagged (NaN) BER."""
    pred_arr, gt_arr = _check_pred_gt(pred, gt)
    c = confusion(pred_arr, gt_arr, threshold)
    mae = float(np.abs(pred_arr - gt_arr).mean())
    prec = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    rec = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    fbeta = (1 + beta2) * prec * rec / (beta2 * prec + rec) if beta2 * prec + rec > 0 else 0.0
    iou = c.tp / (c.tp + c.fp + c.fn) if c.tp + c.fp + c.fn else 0.0
    pos, neg = c.tp + c.fn, c.tn + c.fp
    if pos and neg:
        ber = 100.0 * (1.0 - 0.5 * (c.tp / pos + c.tn / neg))
        return FrameMetrics(mae, fbeta, iou, ber, True)
    return FrameMetrics(mae, fbeta, iou, float("nan"), False)


@dataclass
class VideoMetrics:
    vid: str
    mae: float
    fbeta: float
    iou: float
    ber: float
    stability: float
    flagged_frames: int


@dataclass
class MetricReport:
    """Per-video scores plus their dataset-level means."""

    videos: list = field(default_factory=list)

    @property
    def flagged_frames(self):
        return sum(v.flagged_frames for v in self.videos)

    def _mean(self, attr):
        vals = [getattr(v, attr) for v in self.videos if not np.isnan(getattr(v, attr))]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mae(self):
        return self._mean("mae")

    @property
    def fbeta(self):
        return self._mean("fbeta")

    @property
    def iou(self):
        return self._mean("iou")

    @property
    def ber(self):
        return self._mean("ber")

    @property
    def stability(self):
        return self._mean("stability")

    def to_csv(self):
        lines = ["video,MAE,Fbeta,IoU,BER,stability,flagged"]
        for v in self.videos:
            lines.append(
                f"{v.vid},{v.mae:.6f},{v.fbeta:.6f},{v.iou:.6f},{v.ber:.4f},{v.stability:.6f},{v.flagged_frames}"
            )
        lines.append(
            f"mean,{self.mae:.6f},{self.fbeta:.6f},{self.iou:.6f},{self.ber:.4f},{self.stability:.6f},{self.flagged_frames}"
        )
        return "\n".join(lines) + "\n"

    def to_text(self):
        header = f"{'video':<12}{'MAE':>9}{'Fbeta':>9}{'IoU':>9}{'BER':>9}{'stab':>9}{'flag':>6}"
        rows = [header]
        for v in self.videos + [None]:
            if v is None:
                rows.append(
                    f"{'mean':<12}{self.mae:>9.4f}{self.fbeta:>9.4f}{self.iou:>9.4f}"
                    f"{self.ber:>9.2f}{self.stability:>9.4f}{self.flagged_frames:>6}"
                )
            else:
                rows.append(
                    f"{v.vid:<12}{v.mae:>9.4f}{v.fbeta:>9.4f}{v.iou:>9.4f}"
                    f"{v.ber:>9.2f}{v.stability:>9.4f}{v.flagged_frames:>6}"
                )
        return "\n".join(rows) + "\n"


def predict_video(model, clip, domain="labeled"):
    """Per-frame student predictions (final refiner map), eval mode."""
    was_training = model.training
    model.eval()
    preds = np.empty((clip.length, 1) + clip.frames.shape[2:], dtype=np.float32)
    with T.no_grad():
        for t in range(clip.length):
            out = model.forward(Tensor(clip.frames[t : t + 1]), domain)
            preds[t] = out.r_final.data[0]
    model.train(was_training)
    return preds


def temporal_stability(preds, clip):
    """Mean over t of mean |warp(pred_{t+1}, flow t->t+1) - pred_t|."""
    diffs = []
    with T.no_grad():
        for t in range(clip.length - 1):
            warped = T.warp(Tensor(preds[t + 1 : t + 2]), clip.fwd(t)[None])
            diffs.append(float(np.abs(warped.data - preds[t : t + 1]).mean()))
    return float(np.mean(diffs))


def evaluate_predictions(preds_per_video, clips, threshold=0.5, beta2=0.3):
    report = MetricReport()
    for preds, clip in zip(preds_per_video, clips):
        if clip.masks is None:
            raise ValueError(f"video {clip.vid} has no masks; cannot evaluate")
        frames = [compute(preds[t], clip.masks[t], threshold, beta2) for t in range(clip.length)]
        bers = [f.ber for f in frames if f.ber_valid]
        report.videos.append(
            VideoMetrics(
                vid=clip.vid,
                mae=float(np.mean([f.mae for f in frames])),
                fbeta=float(np.mean([f.fbeta for f in frames])),
                iou=float(np.mean([f.iou for f in frames])),
                ber=float(np.mean(bers)) if bers else float("nan"),
                stability=temporal_stability(preds, clip),
                flagged_frames=sum(not f.ber_valid for f in frames),
            )
        )
    return report


def evaluate(model, videos, threshold=0.5, beta2=0.3, domain="labeled"):
    """Score the student on mask-carrying clips: frame metrics averaged per
    video, then across videos, plus the warp-based stability diagnostic."""
    preds = [predict_video(model, clip, domain) for clip in videos]
    return evaluate_predictions(preds, videos, threshold, beta2)
