"""Integer-translation registration by masked normalized cross-correlation.

All windowed sums are computed at once in the Fourier domain; only pixels clear
in both masks contribute at every candidate displacement.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft

from .scene_io import ImageGrid, QualityMask

DEFAULT_MAX_RADIUS = 5
# candidates whose NCC lies this close to the best are treated as ties
TIE_TOL = 1e-9


class RegistrationError(Exception):
    """No candidate displacement has a usable overlap."""


@dataclass(frozen=True)
class ShiftVector:
    dy: int
    dx: int

    def __iter__(self):
        return iter((self.dy, self.dx))

    def __neg__(self):
        return ShiftVector(-self.dy, -self.dx)


def _as_float(img) -> np.ndarray:
    px = img.pixels if isinstance(img, ImageGrid) else img
    return np.asarray(px, dtype=np.float64)


def _as_bool(mask) -> np.ndarray:
    bits = mask.bits if isinstance(mask, QualityMask) else mask
    return np.asarray(bits, dtype=bool)


def masked_ncc_window(reference, moving, ref_mask, mov_mask, max_radius: int) -> np.ndarray:
    """NCC for every displacement in ``[-R, R]^2``.

    Entry ``[dy + R, dx + R]`` correlates ``reference[y, x]`` with
    ``moving[y + dy, x + dx]`` over pixels clear in both masks. Undefined
    candidates (fewer than 2 overlapping pixels, zero variance) hold NaN.
    """
    r = _as_float(reference)
    m = _as_float(moving)
    mr = _as_bool(ref_mask).astype(np.float64)
    mm = _as_bool(mov_mask).astype(np.float64)
    if r.shape != m.shape or mr.shape != r.shape or mm.shape != m.shape:
        raise ValueError("reference, moving and masks must share one shape")
    h, w = r.shape
    R = int(max_radius)
    if R < 0 or R >= min(h, w):
        raise ValueError(f"max_radius {R} invalid for {h}x{w} images")

    # pre-centering keeps the variance terms well conditioned; NCC is unaffected
    if mr.any():
        r = (r - r[mr > 0].mean()) * mr
    if mm.any():
        m = (m - m[mm > 0].mean()) * mm
    shape = (fft.next_fast_len(h + R), fft.next_fast_len(w + R))

    def spectrum(a):
        return fft.rfft2(a, shape)

    def corr(fa, fb):
        # c[dy, dx] = sum_{y,x} a[y, x] * b[y + dy, x + dx]
        return fft.irfft2(np.conj(fa) * fb, shape)

    f_r, f_rr, f_mr = spectrum(r), spectrum(r * r), spectrum(mr)
    f_m, f_mm, f_mmask = spectrum(m), spectrum(m * m), spectrum(mm)
    n = np.round(corr(f_mr, f_mmask))
    s_r = corr(f_r, f_mmask)
    s_m = corr(f_mr, f_m)
    s_rr = corr(f_rr, f_mmask)
    s_mm = corr(f_mr, f_mm)
    s_rm = corr(f_r, f_m)

    idx_y = np.arange(-R, R + 1) % shape[0]
    idx_x = np.arange(-R, R + 1) % shape[1]
    sel = np.ix_(idx_y, idx_x)
    n, s_r, s_m, s_rr, s_mm, s_rm = (a[sel] for a in (n, s_r, s_m, s_rr, s_mm, s_rm))

    with np.errstate(divide="ignore", invalid="ignore"):
        num = s_rm - s_r * s_m / n
        var_r = s_rr - s_r**2 / n
        var_m = s_mm - s_m**2 / n
        scale = np.sqrt(np.maximum(s_rr, 0) * np.maximum(s_mm, 0))
        ok = (n >= 2) & (var_r > 1e-10 * scale) & (var_m > 1e-10 * scale)
        ncc = np.where(ok, num / np.sqrt(np.where(ok, var_r * var_m, 1.0)), np.nan)
    return np.clip(ncc, -1.0, 1.0)


def best_displacement(ncc: np.ndarray, tie_tol: float = TIE_TOL) -> ShiftVector:
    """Argmax of an NCC window; near-ties go to the smallest shift, then lowest (dy, dx)."""
    if np.all(np.isnan(ncc)):
        raise RegistrationError("no candidate displacement has a usable overlap")
    R = ncc.shape[0] // 2
    best = np.nanmax(ncc)
    cands = [
        (dy * dy + dx * dx, dy, dx)
        for dy in range(-R, R + 1)
        for dx in range(-R, R + 1)
        if not np.isnan(ncc[dy + R, dx + R]) and ncc[dy + R, dx + R] >= best - tie_tol
    ]
    _, dy, dx = min(cands)
    return ShiftVector(dy, dx)


def estimate_shift(reference, moving, ref_mask, mov_mask, max_radius: int = DEFAULT_MAX_RADIUS) -> ShiftVector:
    """Displacement of ``moving`` relative to ``reference``.

    If ``moving`` is ``reference`` translated by ``(dy, dx)`` the result is
    ``(dy, dx)``; ``apply_shift(moving, mask, -result)`` registers it back.
    """
    return best_displacement(masked_ncc_window(reference, moving, ref_mask, mov_mask, max_radius))


def apply_shift(image, mask, shift) -> tuple[ImageGrid, QualityMask]:
    """Translate content by ``shift``: ``out[y, x] = in[y - dy, x - dx]``.

    Image borders are reflect-padded, mask borders zero-padded so injected
    pixels count as unreliable.
    """
    px = image.pixels if isinstance(image, ImageGrid) else np.asarray(image)
    bits = _as_bool(mask)
    dy, dx = (int(v) for v in shift)
    h, w = px.shape
    if abs(dy) >= h or abs(dx) >= w:
        raise ValueError(f"shift {(dy, dx)} exceeds image size {(h, w)}")
    pad = ((abs(dy), abs(dy)), (abs(dx), abs(dx)))
    y0, x0 = abs(dy) - dy, abs(dx) - dx
    out = np.pad(px, pad, mode="reflect")[y0:y0 + h, x0:x0 + w]
    out_mask = np.pad(bits, pad, mode="constant", constant_values=False)[y0:y0 + h, x0:x0 + w]
    return ImageGrid(out), QualityMask(out_mask)
