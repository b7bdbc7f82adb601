"""Image quality metrics: NMSE, PSNR, SSIM, and error maps."""

from dataclasses import dataclass, field

import numpy as np

PSNR_CAP_DB = 100.0  # table sentinel for identical images


def nmse(pred, gt):
    """Squared L2 error normalized by the squared L2 norm of the reference."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("nmse: shape mismatch %r vs %r" % (pred.shape, gt.shape))
    denom = np.sum(gt * gt)
    if denom == 0.0:
        raise ValueError("nmse undefined for an all-zero reference")
    return float(np.sum((pred - gt) ** 2) / denom)


def psnr(pred, gt, peak=1.0):
    """10*log10(peak^2 / MSE); identical inputs give +inf."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("psnr: shape mismatch %r vs %r" % (pred.shape, gt.shape))
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def _gaussian_window(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(pred, gt, k1=0.01, k2=0.03, window_size=11, sigma=1.5, dynamic_range=1.0):
    """Mean structural similarity over valid (unpadded) Gaussian windows."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("ssim: shape mismatch %r vs %r" % (pred.shape, gt.shape))
    if pred.ndim != 2:
        raise ValueError("ssim expects single-channel 2-D images")
    if min(pred.shape) < window_size:
        raise ValueError("image %r smaller than the %dx%d window"
                         % (pred.shape, window_size, window_size))
    w = _gaussian_window(window_size, sigma)
    view = np.lib.stride_tricks.sliding_window_view
    px = view(pred, (window_size, window_size))
    gx = view(gt, (window_size, window_size))
    axes = ([2, 3], [0, 1])
    mu_p = np.tensordot(px, w, axes=axes)
    mu_g = np.tensordot(gx, w, axes=axes)
    var_p = np.tensordot(px * px, w, axes=axes) - mu_p ** 2
    var_g = np.tensordot(gx * gx, w, axes=axes) - mu_g ** 2
    cov = np.tensordot(px * gx, w, axes=axes) - mu_p * mu_g
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    num = (2.0 * mu_p * mu_g + c1) * (2.0 * cov + c2)
    den = (mu_p ** 2 + mu_g ** 2 + c1) * (var_p + var_g + c2)
    return float(np.mean(num / den))


def error_map(pred, gt):
    """|pred - gt| rescaled so its maximum is 1 (zero map if identical)."""
    diff = np.abs(np.asarray(pred, dtype=np.float64)
                  - np.asarray(gt, dtype=np.float64))
    peak = diff.max()
    if peak > 0.0:
        diff = diff / peak
    return diff


@dataclass
class MetricsReport:
    """Mean and standard deviation of each metric over a split, with the
    per-sample values kept for inspection."""

    nmse_values: list = field(default_factory=list)
    psnr_values: list = field(default_factory=list)
    ssim_values: list = field(default_factory=list)

    def add(self, pred, gt):
        self.nmse_values.append(nmse(pred, gt))
        self.psnr_values.append(psnr(pred, gt))
        self.ssim_values.append(ssim(pred, gt))

    @property
    def count(self):
        return len(self.nmse_values)

    def _capped_psnr(self):
        return [min(p, PSNR_CAP_DB) for p in self.psnr_values]

    def summary(self):
        """Dict of metric -> (mean, std); PSNR capped at the sentinel."""
        out = {}
        for name, values in (("nmse", self.nmse_values),
                             ("psnr", self._capped_psnr()),
                             ("ssim", self.ssim_values)):
            arr = np.asarray(values, dtype=np.float64)
            out[name] = (float(arr.mean()), float(arr.std()))
        return out

    def format_row(self, label):
        s = self.summary()
        return ("%-12s nmse %.5f +/- %.5f   psnr %8.4f +/- %7.4f   "
                "ssim %.5f +/- %.5f"
                % (label, s["nmse"][0], s["nmse"][1], s["psnr"][0],
                   s["psnr"][1], s["ssim"][0], s["ssim"][1]))
