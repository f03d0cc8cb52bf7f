"""Synthetic Proba-V-like scenes for tests, demos and desk-scale runs.

Each scene draws a smooth 14-bit HR field, then renders LR frames by shifting
it by a random number of HR pixels (sub-LR-pixel motion), box-averaging 3x3,
adding a per-frame brightness offset and noise, and covering random blobs
with clouds that the quality mask marks unreliable.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .scene_io import Band, ImageGrid, QualityMask, SceneRecord, save_scene, write_manifest


def _field(rng, shape, sigma):
    f = gaussian_filter(rng.normal(size=shape), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def cloud_mask(rng, shape, coverage: float) -> np.ndarray:
    """Boolean mask, True = clear, with roughly ``coverage`` of the area clouded."""
    if coverage <= 0:
        return np.ones(shape, bool)
    f = _field(rng, shape, sigma=max(shape) / 12)
    thr = np.quantile(f, 1 - coverage)
    return f < thr


def make_hr(rng, size: int = 384, margin: int = 24) -> np.ndarray:
    """Float HR field with a ``margin`` border so shifted crops stay inside it."""
    n = size + 2 * margin
    f = 0.6 * _field(rng, (n, n), 12) + 0.3 * _field(rng, (n, n), 4) + 0.1 * _field(rng, (n, n), 1.5)
    # a few sharp-edged parcels
    for _ in range(rng.integers(3, 8)):
        y, x = rng.integers(0, n, 2)
        h, w = rng.integers(n // 16, n // 4, 2)
        f[y:y + h, x:x + w] += rng.normal(0, 0.8)
    lo, hi = rng.uniform(1500, 4000), rng.uniform(9000, 14000)
    f = (f - f.min()) / (f.max() - f.min())
    return lo + (hi - lo) * f


def make_scene(seed: int, scene_id: str | None = None, band: Band | str = Band.RED,
               n_frames: int | None = None, lr_size: int = 128, scale: int = 3,
               max_lr_shift: int = 2, noise: float = 40.0, with_hr: bool = True,
               clearance_range: tuple[float, float] = (0.75, 1.0)) -> SceneRecord:
    rng = np.random.default_rng(seed)
    hr_size = lr_size * scale
    margin = scale * (max_lr_shift + 1)
    full = make_hr(rng, hr_size, margin)
    n_frames = int(n_frames if n_frames is not None else rng.integers(9, 20))
    frames, masks = [], []
    for _ in range(n_frames):
        off = rng.integers(-scale * max_lr_shift, scale * max_lr_shift + 1, 2) if max_lr_shift else (0, 0)
        y0, x0 = margin + off[0], margin + off[1]
        crop = full[y0:y0 + hr_size, x0:x0 + hr_size]
        lr = crop.reshape(lr_size, scale, lr_size, scale).mean(axis=(1, 3))
        lr = lr + rng.normal(0, 150) + rng.normal(0, noise, lr.shape)
        clear = cloud_mask(rng, lr.shape, 1 - rng.uniform(*clearance_range))
        lr = np.where(clear, lr, lr + 6000 + 2000 * _field(rng, lr.shape, 3))
        frames.append(ImageGrid(np.clip(np.round(lr), 0, 2**14 - 1).astype(np.uint16)))
        masks.append(QualityMask(clear))
    hr = hr_mask = None
    if with_hr:
        hr_arr = full[margin:margin + hr_size, margin:margin + hr_size]
        hr = ImageGrid(np.clip(np.round(hr_arr), 0, 2**14 - 1).astype(np.uint16))
        hr_mask = QualityMask(cloud_mask(rng, hr_arr.shape, rng.uniform(0.0, 0.08)))
    return SceneRecord(scene_id or f"imgset{seed:04d}", Band(band), frames, masks, hr, hr_mask)


def write_dataset(root: str | Path, band: Band | str = Band.RED, n_train: int = 4, n_val: int = 2,
                  seed: int = 0, **scene_kwargs) -> Path:
    """Write ``<root>/<band>/{train,val}/imgsetNNNN`` plus split manifests."""
    root, band = Path(root), Band(band)
    offset = 0 if band == Band.RED else 100000
    for split, count, base in (("train", n_train, 0), ("val", n_val, 10000)):
        ids = []
        for i in range(count):
            sid = f"imgset{base + i:04d}"
            scene = make_scene(seed * 1000003 + offset + base + i, sid, band, **scene_kwargs)
            save_scene(scene, root / band.value / split / sid)
            ids.append(sid)
        write_manifest(root / band.value / f"{split}.txt", ids)
    return root
