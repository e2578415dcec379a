"""Reconstruction metrics and the context-extent ablation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import MaskSpec, fit_square, mask_center, mask_context_beyond, quantize8
from .nets import CeParams, ce_forward

PSNR_CAP_DB = 100.0
MSE_FLOOR = 1e-10

# Full-scale reference numbers (k -> l1 %, l2 %, PSNR dB), not reproducible at desk scale.
REFERENCE_CONTEXT_TABLE = {
    4: (11.31, 2.11, 17.38),
    8: (8.67, 1.54, 19.36),
    12: (8.74, 1.54, 19.36),
    16: (8.08, 1.42, 19.98),
    24: (7.71, 1.38, 20.39),
    36: (7.53, 1.35, 20.59),
}


def _pair(y, target) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if y.shape != target.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {target.shape}")
    return y, target


def l1_error_pct(y, target) -> float:
    y, target = _pair(y, target)
    return float(np.mean(np.abs(y - target)) * 100.0)


def l2_error_pct(y, target) -> float:
    y, target = _pair(y, target)
    return float(np.mean((y - target) ** 2) * 100.0)


def psnr(y, target) -> float:
    """Peak signal-to-noise ratio for unit peak, capped at 100 dB."""
    y, target = _pair(y, target)
    mse = float(np.mean((y - target) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


@dataclass
class EvalReport:
    """Per-image metrics on the hole region; aggregates are plain means."""

    l1_pct: list[float] = field(default_factory=list)
    l2_pct: list[float] = field(default_factory=list)
    psnr_db: list[float] = field(default_factory=list)
    geometry: str = ""

    def add(self, y, target) -> None:
        self.l1_pct.append(l1_error_pct(y, target))
        self.l2_pct.append(l2_error_pct(y, target))
        self.psnr_db.append(psnr(y, target))

    @property
    def count(self) -> int:
        return len(self.l1_pct)

    @property
    def mean_l1(self) -> float:
        return float(np.mean(self.l1_pct)) if self.l1_pct else float("nan")

    @property
    def mean_l2(self) -> float:
        return float(np.mean(self.l2_pct)) if self.l2_pct else float("nan")

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_db)) if self.psnr_db else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image", "l1_pct", "l2_pct", "psnr_db"])
            for i, row in enumerate(zip(self.l1_pct, self.l2_pct, self.psnr_db)):
                w.writerow([i, *(f"{v:.6f}" for v in row)])
            w.writerow(["mean", f"{self.mean_l1:.6f}", f"{self.mean_l2:.6f}", f"{self.mean_psnr:.6f}"])

    def to_text(self) -> str:
        lines = [f"{'':>10}  {'av. l1 error':>12}  {'av. l2 error':>12}  {'PSNR':>9}",
                 f"{'mean':>10}  {self.mean_l1:>11.2f}%  {self.mean_l2:>11.2f}%  {self.mean_psnr:>7.2f}dB",
                 f"{self.count} images, {self.geometry}"]
        return "\n".join(lines) + "\n"


def _hole_region(img: np.ndarray, spec: MaskSpec) -> np.ndarray:
    return img[spec.hole_in_center]


def evaluate(ce: CeParams, images: Sequence[np.ndarray], spec: MaskSpec | None = None,
             context: int | None = None, quantize: bool = False) -> EvalReport:
    """Inpaint each image and score the hole region of the prediction against the truth.

    ``context`` limits the visible frame around the hole (``None`` keeps it all).
    ``quantize`` scores predictions as they would be stored in an 8-bit image.
    """
    spec = spec or MaskSpec.from_config(ce.config)
    geometry = f"M={spec.input_size} hole={spec.hole_size} context={context or spec.max_context}"
    report = EvalReport(geometry=geometry)
    for img in images:
        sample = mask_center(fit_square(img, spec.input_size), spec)
        if context is not None:
            sample = mask_context_beyond(sample, context)
        y = ce_forward(ce, sample.masked).data
        if quantize:
            y = quantize8(y)
        report.add(_hole_region(y, spec), _hole_region(sample.center, spec))
    return report


@dataclass
class AblationTable:
    rows: list[tuple[int, EvalReport]]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "l1_pct", "l2_pct", "psnr_db"])
            for k, rep in self.rows:
                w.writerow([k, f"{rep.mean_l1:.6f}", f"{rep.mean_l2:.6f}", f"{rep.mean_psnr:.6f}"])

    def to_text(self) -> str:
        lines = [f"{'pix.':>6}  {'l1':>8}  {'l2':>8}  {'PSNR':>8}"]
        for k, rep in self.rows:
            lines.append(f"{k:>6}  {rep.mean_l1:>8.2f}  {rep.mean_l2:>8.2f}  {rep.mean_psnr:>8.2f}")
        return "\n".join(lines) + "\n"


def context_ablation(ce: CeParams, images: Sequence[np.ndarray], k_list: Sequence[int],
                     spec: MaskSpec | None = None, quantize: bool = False) -> AblationTable:
    """Evaluate with the context cut at each ``k``; rows keep the requested order."""
    spec = spec or MaskSpec.from_config(ce.config)
    for k in k_list:
        if not 0 < k <= spec.max_context:
            raise ValueError(f"context extent {k} outside (0, {spec.max_context}]")
    return AblationTable([(k, evaluate(ce, images, spec, k, quantize)) for k in k_list])
