"""Corrected image-quality metrics (cMSE / cPSNR / cSSIM).

Each metric searches the ``(2d+1)^2`` alignments of the cropped SR image
against the HR target, removes the masked mean bias per alignment and scores
only pixels clear in the HR mask. Inputs are 16-bit intensity arrays.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

log = logging.getLogger(__name__)

MAX_VALUE = 2**16 - 1
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius 5 -> 11x11 window
SSIM_K1, SSIM_K2 = 0.01, 0.03


class UndefinedMetric(ValueError):
    """Every alignment candidate is fully masked."""


def _candidates(sr, hr, hr_mask, d):
    sr = np.asarray(sr, dtype=np.float64)
    hr = np.asarray(hr, dtype=np.float64)
    if sr.shape != hr.shape:
        raise ValueError(f"sr {sr.shape} and hr {hr.shape} differ")
    mask = np.ones(hr.shape, bool) if hr_mask is None else np.asarray(hr_mask, dtype=bool)
    H, W = hr.shape
    h, w = H - 2 * d, W - 2 * d
    if h <= 0 or w <= 0:
        raise ValueError(f"crop d={d} leaves nothing of a {H}x{W} image")
    sr_c = sr[d:d + h, d:d + w]
    n = 2 * d + 1
    hr_p = np.stack([hr[u:u + h, v:v + w] for u in range(n) for v in range(n)])
    m_p = np.stack([mask[u:u + h, v:v + w] for u in range(n) for v in range(n)]).astype(np.float64)
    count = m_p.sum(axis=(1, 2))
    with np.errstate(invalid="ignore", divide="ignore"):
        bias = (m_p * (hr_p - sr_c)).sum(axis=(1, 2)) / count
    return sr_c, hr_p, m_p, count, bias


def clear_mse(hr_patch, sr_patch, mask_patch, bias: float = 0.0) -> float:
    """Mean squared error of ``hr - (sr + bias)`` over clear pixels."""
    m = np.asarray(mask_patch, dtype=np.float64)
    n = m.sum()
    if n == 0:
        raise UndefinedMetric("empty mask")
    e = np.asarray(hr_patch, np.float64) - (np.asarray(sr_patch, np.float64) + bias)
    return float((m * e * e).sum() / n)


def cmse(sr, hr, hr_mask=None, d: int = 3) -> float:
    sr_c, hr_p, m_p, count, bias = _candidates(sr, hr, hr_mask, d)
    ok = count > 0
    if not ok.any():
        raise UndefinedMetric("all alignment candidates are fully masked")
    e = hr_p - (sr_c + bias[:, None, None])
    mse = np.where(ok, (m_p * e * e).sum(axis=(1, 2)) / np.where(ok, count, 1), np.inf)
    return float(mse.min())


def psnr_from_mse(mse: float) -> float:
    return math.inf if mse == 0 else 10.0 * math.log10(MAX_VALUE**2 / mse)


def cpsnr(sr, hr, hr_mask=None, d: int = 3) -> float:
    """cPSNR in dB; ``math.inf`` when some alignment matches exactly up to a bias."""
    return psnr_from_mse(cmse(sr, hr, hr_mask, d))


def _ssim_batch(x: np.ndarray, y: np.ndarray, data_range: float = MAX_VALUE) -> np.ndarray:
    """Mean SSIM for each image pair along axis 0 (Gaussian window, population statistics)."""
    f = dict(sigma=(0, SSIM_SIGMA, SSIM_SIGMA), truncate=SSIM_TRUNCATE, mode="reflect")
    mx, my = gaussian_filter(x, **f), gaussian_filter(y, **f)
    vx = gaussian_filter(x * x, **f) - mx * mx
    vy = gaussian_filter(y * y, **f) - my * my
    vxy = gaussian_filter(x * y, **f) - mx * my
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    s = ((2 * mx * my + c1) * (2 * vxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    pad = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
    if min(x.shape[1:]) <= 2 * pad:
        raise ValueError(f"SSIM needs images larger than the {2 * pad + 1}px window, got {x.shape[1:]}")
    return s[:, pad:-pad, pad:-pad].mean(axis=(1, 2))


def cssim(sr, hr, hr_mask=None, d: int = 3) -> float:
    """Max over alignments of SSIM(HR_uv * M_uv, SR_crop * M_uv + b_uv)."""
    sr_c, hr_p, m_p, count, bias = _candidates(sr, hr, hr_mask, d)
    ok = count > 0
    if not ok.any():
        raise UndefinedMetric("all alignment candidates are fully masked")
    x = hr_p[ok] * m_p[ok]
    y = sr_c[None] * m_p[ok] + bias[ok][:, None, None]
    return float(_ssim_batch(x, y).max())


@dataclass(frozen=True)
class EvalRecord:
    scene_id: str
    band: str
    method: str
    cpsnr: float
    cssim: float

    def __post_init__(self):
        if not (math.isinf(self.cpsnr) or math.isnan(self.cpsnr)) and self.cpsnr <= 0:
            log.debug("%s/%s: non-positive cPSNR %.3f", self.scene_id, self.method, self.cpsnr)
        if self.cssim > 1 + 1e-12:
            raise ValueError(f"cSSIM {self.cssim} > 1")


def evaluate_pair(scene_id, band, method, sr, hr, hr_mask, d: int = 3) -> EvalRecord:
    try:
        return EvalRecord(scene_id, str(band), method, cpsnr(sr, hr, hr_mask, d), cssim(sr, hr, hr_mask, d))
    except UndefinedMetric:
        log.warning("%s: metrics undefined (fully masked target)", scene_id)
        return EvalRecord(scene_id, str(band), method, math.nan, math.nan)


@dataclass(frozen=True)
class Summary:
    band: str
    method: str
    cpsnr: float
    cssim: float
    n_scenes: int
    n_infinite: int


def aggregate(records) -> list[Summary]:
    """Per (band, method) means; infinite cPSNR values are left out of the mean and counted."""
    groups = defaultdict(list)
    for r in records:
        groups[(r.band, r.method)].append(r)
    out = []
    for (band, method), recs in sorted(groups.items()):
        finite = [r.cpsnr for r in recs if math.isfinite(r.cpsnr)]
        n_inf = sum(1 for r in recs if math.isinf(r.cpsnr))
        if n_inf:
            log.info("%s/%s: %d infinite cPSNR value(s) excluded", band, method, n_inf)
        ssims = [r.cssim for r in recs if not math.isnan(r.cssim)]
        out.append(Summary(
            band, method,
            float(np.mean(finite)) if finite else math.inf if n_inf else math.nan,
            float(np.mean(ssims)) if ssims else math.nan,
            len(recs), n_inf,
        ))
    return out


RECORD_FIELDS = ("scene_id", "band", "method", "cpsnr", "cssim")


def write_records(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([r.scene_id, r.band, r.method, repr(r.cpsnr), repr(r.cssim)])


def read_records(path) -> list[EvalRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    return [EvalRecord(r["scene_id"], r["band"], r["method"], float(r["cpsnr"]), float(r["cssim"])) for r in rows]
