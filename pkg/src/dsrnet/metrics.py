"""Luma PSNR/SSIM with border shaving, evaluation reports, inference timing.

Metric computation is pure and may run in parallel across images; the
timing harness must run alone on an otherwise idle process.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import Image, luma
from .tensor import Rng, Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_L = 255.0


def _shaved_luma(pred: Image, ref: Image, shave: int) -> tuple[np.ndarray, np.ndarray]:
    if (pred.width, pred.height) != (ref.width, ref.height):
        raise ValueError(
            f"image dims differ: {pred.width}x{pred.height} vs {ref.width}x{ref.height}"
        )
    if shave < 0 or 2 * shave >= min(pred.width, pred.height):
        raise ValueError(f"shave {shave} out of range for {pred.width}x{pred.height}")
    ya, yb = luma(pred), luma(ref)
    if shave:
        ya = ya[shave:-shave, shave:-shave]
        yb = yb[shave:-shave, shave:-shave]
    return ya, yb


def psnr_y(pred: Image, ref: Image, shave: int = 0) -> float:
    """PSNR in dB on the shaved [0, 1] luma; identical inputs give +inf."""
    ya, yb = _shaved_luma(pred, ref, shave)
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with a 1-D window along both axes."""
    out = sliding_window_view(img, g.size, axis=0) @ g
    out = sliding_window_view(out, g.size, axis=1) @ g
    return out


def ssim_y(pred: Image, ref: Image, shave: int = 0) -> float:
    """Mean local SSIM on the shaved luma, 11x11 Gaussian window, L = 255."""
    ya, yb = _shaved_luma(pred, ref, shave)
    if min(ya.shape) < SSIM_WINDOW:
        raise ValueError(f"shaved image {ya.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    a = ya * 255.0
    b = yb * 255.0
    g = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def format_metric(value: float, digits: int = 4) -> str:
    return "inf" if math.isinf(value) else f"{value:.{digits}f}"


@dataclass
class EvalRow:
    name: str
    method: str
    psnr: float
    ssim: float
    ms: float = 0.0


@dataclass
class EvalReport:
    """Per-image metric rows plus arithmetic-mean aggregates."""

    scale: int
    shave: int
    rows: list[EvalRow] = field(default_factory=list)

    def add(self, name: str, method: str, psnr: float, ssim: float, ms: float = 0.0) -> None:
        self.rows.append(EvalRow(name, method, psnr, ssim, ms))

    def methods(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            if r.method not in seen:
                seen.append(r.method)
        return seen

    def aggregate(self, method: str) -> tuple[float, float, float]:
        rows = [r for r in self.rows if r.method == method]
        if not rows:
            raise ValueError(f"no rows for method {method!r}")
        mean_psnr = float(np.mean([r.psnr for r in rows]))
        mean_ssim = float(np.mean([r.ssim for r in rows]))
        mean_ms = float(np.mean([r.ms for r in rows]))
        return mean_psnr, mean_ssim, mean_ms

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fp:
            writer = csv.writer(fp)
            writer.writerow(["method", "image", "psnr_db", "ssim", "ms"])
            for r in self.rows:
                writer.writerow([r.method, r.name, format_metric(r.psnr, 4),
                                 format_metric(r.ssim, 6), f"{r.ms:.3f}"])
            for method in self.methods():
                psnr, ssim, ms = self.aggregate(method)
                writer.writerow([method, "MEAN", format_metric(psnr, 4),
                                 format_metric(ssim, 6), f"{ms:.3f}"])

    def format_table(self) -> str:
        """Aligned text table, one (PSNR/SSIM) column per method."""
        methods = self.methods()
        names = []
        for r in self.rows:
            if r.name not in names:
                names.append(r.name)
        cells = {(r.method, r.name): f"{format_metric(r.psnr, 2)}/{format_metric(r.ssim, 4)}"
                 for r in self.rows}
        header = ["image"] + [f"{m} x{self.scale} (PSNR/SSIM)" for m in methods]
        lines = [header]
        for name in names:
            lines.append([name] + [cells.get((m, name), "-") for m in methods])
        agg = ["MEAN"]
        for m in methods:
            psnr, ssim, _ = self.aggregate(m)
            agg.append(f"{format_metric(psnr, 2)}/{format_metric(ssim, 4)}")
        lines.append(agg)
        widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
        out = []
        for i, row in enumerate(lines):
            out.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
            if i == 0:
                out.append("  ".join("-" * w for w in widths))
        return "\n".join(out)


@dataclass
class TimingResult:
    lr_size: int
    median_ms: float
    mean_ms: float
    times_ms: list[float]


def time_inference(m, lr_size: int, runs: int = 10, warmup: int = 2, seed: int = 0) -> TimingResult:
    """Median/mean wall-clock of a forward pass on a fixed random LR input.

    Warm-up passes are excluded; uses the monotonic clock; single-threaded.
    """
    if runs < 10:
        raise ValueError(f"runs must be >= 10, got {runs}")
    if warmup < 2:
        raise ValueError(f"warmup must be >= 2, got {warmup}")
    rng = Rng(seed)
    from .tensor import DTYPES

    x = Tensor(rng.normal((1, m.config.in_channels, lr_size, lr_size),
                          std=0.25, dtype=DTYPES[m.config.dtype]) + 0.5)
    for _ in range(warmup):
        m.forward(x)
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        m.forward(x)
        times.append((time.perf_counter() - t0) * 1e3)
    return TimingResult(lr_size, float(np.median(times)), float(np.mean(times)), times)
