"""Image-quality metrics and per-session metric reports.

SSIM follows the classic windowed formulation: an 11x11 Gaussian window with
sigma 1.5, K1=0.01, K2=0.03, dynamic range L=255, weighted (not sample)
moments, valid-mode windows only, mean over the SSIM map. PSNR is
10*log10(255^2 / MSE) with +inf for identical images. The perceptual distance
runs the encoder's own image tower and compares unit-normalized patch
features — a deliberately lightweight stand-in for learned perceptual metrics,
so it is named by what it does rather than after any published metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from sketchlab.errors import DimensionError, ValidationError
from sketchlab.images import GrayImage

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DYNAMIC_RANGE = 255.0

METRIC_KEYS = ("ssim", "psnr", "clip_score", "perceptual_distance")


def _as_pixels(image: GrayImage | np.ndarray, what: str) -> np.ndarray:
    if isinstance(image, GrayImage):
        arr = image.pixels
    else:
        arr = np.asarray(image)
    if arr.ndim != 2:
        raise DimensionError(f"{what} must be 2-D, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating) or arr.min() < 0 or arr.max() > 255:
            raise ValidationError(f"{what} must hold 8-bit pixel values")
        arr = arr.astype(np.uint8)
    return arr


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-D Gaussian kernel used to weight window moments."""
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(a: GrayImage | np.ndarray, b: GrayImage | np.ndarray) -> float:
    """Mean structural similarity over all valid 11x11 windows."""
    pa = _as_pixels(a, "ssim input a").astype(np.float64)
    pb = _as_pixels(b, "ssim input b").astype(np.float64)
    _check_same_shape(pa, pb)
    if min(pa.shape) < SSIM_WINDOW:
        raise ValidationError(
            f"ssim needs dims >= {SSIM_WINDOW}, got {pa.shape}"
        )
    kernel = gaussian_window()
    wa = sliding_window_view(pa, (SSIM_WINDOW, SSIM_WINDOW))
    wb = sliding_window_view(pb, (SSIM_WINDOW, SSIM_WINDOW))
    mu_a = np.tensordot(wa, kernel, axes=([2, 3], [0, 1]))
    mu_b = np.tensordot(wb, kernel, axes=([2, 3], [0, 1]))
    e_aa = np.tensordot(wa * wa, kernel, axes=([2, 3], [0, 1]))
    e_bb = np.tensordot(wb * wb, kernel, axes=([2, 3], [0, 1]))
    e_ab = np.tensordot(wa * wb, kernel, axes=([2, 3], [0, 1]))
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    c1 = (SSIM_K1 * DYNAMIC_RANGE) ** 2
    c2 = (SSIM_K2 * DYNAMIC_RANGE) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def psnr(a: GrayImage | np.ndarray, b: GrayImage | np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB; +inf when the images are identical."""
    pa = _as_pixels(a, "psnr input a").astype(np.float64)
    pb = _as_pixels(b, "psnr input b").astype(np.float64)
    _check_same_shape(pa, pb)
    mse = float(((pa - pb) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(DYNAMIC_RANGE ** 2 / mse)


def perceptual_distance(a: GrayImage | np.ndarray, b: GrayImage | np.ndarray,
                        extractor) -> float:
    """Feature-space pseudometric built on the encoder's image tower.

    Each intermediate patch feature map is unit-normalized per patch position
    (across channels); the distance is the mean squared difference of those
    normalized features, averaged over maps. Non-negative, symmetric, and zero
    for identical inputs — a pseudometric, not a true metric.
    """
    img_a = a if isinstance(a, GrayImage) else GrayImage.from_array(np.asarray(a))
    img_b = b if isinstance(b, GrayImage) else GrayImage.from_array(np.asarray(b))
    if (img_a.width, img_a.height) != (img_b.width, img_b.height):
        raise DimensionError(
            f"image shapes differ: {img_a.pixels.shape} vs {img_b.pixels.shape}"
        )
    feats_a = extractor.image_features(img_a)
    feats_b = extractor.image_features(img_b)
    total = 0.0
    for fa, fb in zip(feats_a, feats_b):
        na = _unit_rows(fa)
        nb = _unit_rows(fb)
        total += float(((na - nb) ** 2).mean())
    return total / len(feats_a)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


@dataclass
class MetricReport:
    """Per-iteration metric arrays for one session against one reference kind."""

    reference_kind: str  # "ground_truth" | "previous_iteration"
    ssim: list[float] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    clip_score: list[float] = field(default_factory=list)
    perceptual_distance: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.reference_kind not in ("ground_truth", "previous_iteration"):
            raise ValidationError(
                f"unknown reference_kind {self.reference_kind!r}"
            )
        lengths = {len(self.ssim), len(self.psnr), len(self.clip_score),
                   len(self.perceptual_distance)}
        if len(lengths) != 1:
            raise ValidationError("metric report arrays must share one length")

    def __len__(self) -> int:
        return len(self.ssim)

    def to_text(self) -> str:
        """Columnar record file: comment header plus one line per iteration."""
        lines = [
            f"# reference_kind={self.reference_kind}",
            "iteration ssim psnr clip_score perceptual_distance",
        ]
        for i in range(len(self.ssim)):
            lines.append(
                f"{i + 1} {self.ssim[i]!r} {self.psnr[i]!r} "
                f"{self.clip_score[i]!r} {self.perceptual_distance[i]!r}"
            )
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        reference_kind = None
        rows: list[tuple[int, float, float, float, float]] = []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line.lstrip("#").strip()
                if body.startswith("reference_kind="):
                    reference_kind = body.split("=", 1)[1]
                continue
            if line.startswith("iteration"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValidationError(f"bad metric report line: {line!r}")
            rows.append((int(parts[0]), float(parts[1]), float(parts[2]),
                         float(parts[3]), float(parts[4])))
        if reference_kind is None:
            raise ValidationError("metric report text lacks a reference_kind header")
        rows.sort(key=lambda r: r[0])
        return cls(
            reference_kind=reference_kind,
            ssim=[r[1] for r in rows],
            psnr=[r[2] for r in rows],
            clip_score=[r[3] for r in rows],
            perceptual_distance=[r[4] for r in rows],
        )

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def report_session(session, reference: GrayImage | None = None,
                   *, model=None) -> dict[str, MetricReport]:
    """Build metric reports for a finished session.

    Always returns the previous-iteration report; adds a ground-truth report
    when the session carried a reference (reusing the stored per-iteration
    metrics) or when an explicit `reference` plus `model` are supplied.
    """
    if not session.records:
        raise ValidationError("session has no iterations to report")
    reports: dict[str, MetricReport] = {}
    reports["previous_iteration"] = _report_from_records(session, ref=False)
    if session.reference is not None and all(
            r.metrics_ref is not None for r in session.records):
        reports["ground_truth"] = _report_from_records(session, ref=True)
    elif reference is not None:
        if model is None:
            raise ValidationError(
                "reporting against a new reference image needs the encoder "
                "(pass model=...)"
            )
        from sketchlab.refine import _iteration_metrics

        ref = reference.resize(model.config.image_size, model.config.image_size)
        report = MetricReport(reference_kind="ground_truth")
        for rec in session.records:
            m = _iteration_metrics(model, rec.prompt_tokens, rec.image, ref)
            report.ssim.append(m["ssim"])
            report.psnr.append(m["psnr"])
            report.clip_score.append(m["clip_score"])
            report.perceptual_distance.append(m["perceptual_distance"])
        reports["ground_truth"] = report
    return reports


def _report_from_records(session, *, ref: bool) -> MetricReport:
    kind = "ground_truth" if ref else "previous_iteration"
    report = MetricReport(reference_kind=kind)
    for rec in session.records:
        source = rec.metrics_ref if ref else rec.metrics_prev
        report.ssim.append(source["ssim"])
        report.psnr.append(source["psnr"])
        report.clip_score.append(source["clip_score"])
        report.perceptual_distance.append(source["perceptual_distance"])
    return report
