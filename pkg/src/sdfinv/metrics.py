"""PSNR / IoU / rotation-error reporting."""

from dataclasses import dataclass, field

import numpy as np

from .geometry import rotation_error

PSNR_CAP = 99.0
MASK_THRESHOLD = 0.5


def psnr(pred_rgb, gt_rgb):
    """10 log10(1/MSE) on [0,1] images composited over a zero background."""
    a = np.clip(np.asarray(pred_rgb, dtype=np.float64), 0.0, 1.0)
    b = np.clip(np.asarray(gt_rgb, dtype=np.float64), 0.0, 1.0)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def iou(pred_mask, gt_mask, threshold=MASK_THRESHOLD):
    a = np.asarray(pred_mask) > threshold
    b = np.asarray(gt_mask) > threshold
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class MetricReport:
    psnr: float
    iou: float
    rotation_error_deg: float = float("nan")
    per_scene: list = field(default_factory=list)

    def line(self):
        rot = ("" if np.isnan(self.rotation_error_deg)
               else f"  rot={self.rotation_error_deg:.3f}deg")
        return f"psnr={self.psnr:.3f}dB  iou={self.iou:.4f}{rot}"


def metrics(pred, gt, pred_pose=None, gt_pose=None) -> MetricReport:
    """Compare two RenderOutput-like objects (tensor or numpy fields)."""
    def val(x):
        return x.value if hasattr(x, "value") else np.asarray(x)

    pr, gr = val(pred.rgb), val(gt.rgb)
    if pr.shape != gr.shape:
        raise ValueError(f"shape mismatch {pr.shape} vs {gr.shape}")
    rot = float("nan")
    if pred_pose is not None and gt_pose is not None:
        rot = rotation_error(pred_pose.q, gt_pose.q)
    return MetricReport(psnr=psnr(pr, gr), iou=iou(val(pred.mask), val(gt.mask)),
                        rotation_error_deg=rot)
