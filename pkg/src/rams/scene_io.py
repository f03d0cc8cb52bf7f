"""Proba-V style scene directories: 16-bit LR/HR frames plus binary quality masks.

Layout::

    <root>/<band>/<split>.txt           one scene_id per line (split manifest)
    <root>/<band>/<split>/<scene_id>/   LR000.png, QM000.png, ..., HR.png, SM.png
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

UINT16_MAX = 2**16 - 1
LR_SHAPE = (128, 128)
HR_SHAPE = (384, 384)
MIN_FRAMES, MAX_FRAMES = 9, 35

_LR_RE = re.compile(r"^LR(\d+)\.png$", re.IGNORECASE)
_QM_RE = re.compile(r"^QM(\d+)\.png$", re.IGNORECASE)


class Band(str, Enum):
    RED = "RED"
    NIR = "NIR"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"


class DatasetError(Exception):
    """Base class for malformed-data errors."""


class PairingError(DatasetError):
    pass


class ShapeError(DatasetError):
    pass


class FormatError(DatasetError):
    pass


class ManifestError(DatasetError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ImageGrid:
    pixels: np.ndarray
    bit_depth: int = 14

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or 0 in px.shape:
            raise ShapeError(f"image must be a non-empty 2D array, got shape {px.shape}")
        if px.dtype != np.uint16:
            if not np.issubdtype(px.dtype, np.integer):
                raise TypeError(f"image pixels must be integers, got {px.dtype}")
            if px.min() < 0 or px.max() > UINT16_MAX:
                raise ValueError("pixel values outside [0, 65535]")
            px = px.astype(np.uint16)
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class QualityMask:
    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2:
            raise ShapeError(f"mask must be 2D, got shape {b.shape}")
        if b.dtype != bool:
            if not np.isin(b, (0, 1)).all():
                raise ValueError("mask values must be exactly 0 or 1")
            b = b.astype(bool)
        object.__setattr__(self, "bits", _frozen(b))

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape


@dataclass(frozen=True)
class BandStats:
    mean: float
    std: float
    band: Band

    def __post_init__(self):
        if not np.isfinite(self.std) or self.std <= 0:
            raise ValueError(f"band std must be > 0, got {self.std}")
        object.__setattr__(self, "band", Band(self.band))

    def to_text(self) -> str:
        return f"band {self.band.value}\nmean {self.mean!r}\nstd {self.std!r}\n"

    @classmethod
    def from_text(cls, text: str) -> "BandStats":
        kv = dict(line.split(None, 1) for line in text.splitlines() if line.strip())
        return cls(mean=float(kv["mean"]), std=float(kv["std"]), band=Band(kv["band"].strip()))


@dataclass(frozen=True)
class SceneRecord:
    scene_id: str
    band: Band
    lr_frames: tuple[ImageGrid, ...]
    lr_masks: tuple[QualityMask, ...]
    hr: ImageGrid | None = None
    hr_mask: QualityMask | None = None
    # per-frame registration bookkeeping, filled by preprocess.register_scene
    shifts: tuple[tuple[int, int], ...] | None = field(default=None, compare=False)
    unregistered: tuple[int, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "band", Band(self.band))
        object.__setattr__(self, "lr_frames", tuple(self.lr_frames))
        object.__setattr__(self, "lr_masks", tuple(self.lr_masks))
        if len(self.lr_frames) != len(self.lr_masks):
            raise PairingError(
                f"{self.scene_id}: {len(self.lr_frames)} frames but {len(self.lr_masks)} masks"
            )
        if not self.lr_frames:
            raise PairingError(f"{self.scene_id}: no LR frames")
        shape = self.lr_frames[0].shape
        for img, m in zip(self.lr_frames, self.lr_masks):
            if img.shape != shape or m.shape != shape:
                raise ShapeError(f"{self.scene_id}: inconsistent LR frame/mask shapes")
        if (self.hr is None) != (self.hr_mask is None):
            raise PairingError(f"{self.scene_id}: HR and SM must be given together")
        if self.hr is not None and self.hr.shape != self.hr_mask.shape:
            raise ShapeError(f"{self.scene_id}: HR and SM shapes differ")

    @property
    def n_frames(self) -> int:
        return len(self.lr_frames)

    @property
    def has_hr(self) -> bool:
        return self.hr is not None

    def lr_array(self) -> np.ndarray:
        """``T x H x W`` uint16 stack."""
        return np.stack([f.pixels for f in self.lr_frames])

    def mask_array(self) -> np.ndarray:
        return np.stack([m.bits for m in self.lr_masks])

    def clearances(self) -> list[float]:
        return [compute_clearance(m) for m in self.lr_masks]


def compute_clearance(mask: QualityMask | np.ndarray) -> float:
    bits = mask.bits if isinstance(mask, QualityMask) else np.asarray(mask)
    return float(np.count_nonzero(bits)) / bits.size


def _read_png(path: Path) -> Image.Image:
    try:
        return Image.open(path)
    except OSError as exc:
        raise FormatError(f"{path}: cannot decode image ({exc})") from exc


def load_image_16bit(path: str | Path) -> ImageGrid:
    path = Path(path)
    im = _read_png(path)
    if im.mode not in ("I;16", "I;16B", "I;16L", "I"):
        raise FormatError(f"{path}: expected 16-bit grayscale, got mode {im.mode}")
    px = np.array(im)
    if px.dtype != np.uint16:
        if px.min() < 0 or px.max() > UINT16_MAX:
            raise FormatError(f"{path}: values exceed the 16-bit range")
        px = px.astype(np.uint16)
    return ImageGrid(px)


def load_mask(path: str | Path) -> QualityMask:
    path = Path(path)
    im = _read_png(path)
    if im.mode not in ("1", "L", "I;16", "I;16B", "I;16L", "I"):
        raise FormatError(f"{path}: expected a single-channel mask, got mode {im.mode}")
    return QualityMask(np.array(im) != 0)


def save_image_16bit(image: ImageGrid | np.ndarray, path: str | Path) -> None:
    px = image.pixels if isinstance(image, ImageGrid) else np.asarray(image)
    if not np.issubdtype(px.dtype, np.integer):
        raise TypeError(f"refusing to save {px.dtype} data as 16-bit; round and clip first")
    if px.size and (px.min() < 0 or px.max() > UINT16_MAX):
        raise ValueError("values outside [0, 65535]; clip before saving")
    Image.fromarray(np.ascontiguousarray(px, dtype=np.uint16)).save(Path(path), format="PNG")


def save_mask(mask: QualityMask | np.ndarray, path: str | Path) -> None:
    bits = mask.bits if isinstance(mask, QualityMask) else np.asarray(mask, dtype=bool)
    Image.fromarray(bits.astype(bool)).save(Path(path), format="PNG")


def _indexed(files, pattern) -> dict[int, Path]:
    out = {}
    for f in files:
        m = pattern.match(f.name)
        if m:
            out[int(m.group(1))] = f
    return out


def load_scene(
    scene_dir: str | Path,
    band: Band | str | None = None,
    lr_shape: tuple[int, int] = LR_SHAPE,
    hr_shape: tuple[int, int] = HR_SHAPE,
    frame_range: tuple[int, int] = (MIN_FRAMES, MAX_FRAMES),
) -> SceneRecord:
    """Read one imgset directory; frames and masks are paired by filename index."""
    scene_dir = Path(scene_dir)
    if not scene_dir.is_dir():
        raise DatasetError(f"{scene_dir} is not a directory")
    if band is None:
        band = scene_dir.parent.parent.name
    files = sorted(scene_dir.iterdir())
    lrs, qms = _indexed(files, _LR_RE), _indexed(files, _QM_RE)
    if set(lrs) != set(qms):
        missing = sorted(set(lrs) ^ set(qms))
        raise PairingError(f"{scene_dir.name}: unpaired LR/QM indices {missing}")
    lo, hi = frame_range
    if not lo <= len(lrs) <= hi:
        raise PairingError(f"{scene_dir.name}: {len(lrs)} LR frames, expected {lo}..{hi}")

    frames, masks = [], []
    for idx in sorted(lrs):
        img, m = load_image_16bit(lrs[idx]), load_mask(qms[idx])
        if img.shape != tuple(lr_shape) or m.shape != tuple(lr_shape):
            raise ShapeError(f"{lrs[idx].name}: shape {img.shape}/{m.shape}, expected {lr_shape}")
        frames.append(img)
        masks.append(m)

    hr = hr_mask = None
    hr_path, sm_path = scene_dir / "HR.png", scene_dir / "SM.png"
    if hr_path.exists() or sm_path.exists():
        if not (hr_path.exists() and sm_path.exists()):
            raise PairingError(f"{scene_dir.name}: HR.png and SM.png must both be present")
        hr, hr_mask = load_image_16bit(hr_path), load_mask(sm_path)
        if hr.shape != tuple(hr_shape) or hr_mask.shape != tuple(hr_shape):
            raise ShapeError(f"{scene_dir.name}: HR shape {hr.shape}, expected {hr_shape}")
    return SceneRecord(scene_dir.name, Band(band), frames, masks, hr, hr_mask)


def save_scene(scene: SceneRecord, scene_dir: str | Path) -> Path:
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    for i, (img, m) in enumerate(zip(scene.lr_frames, scene.lr_masks)):
        save_image_16bit(img, scene_dir / f"LR{i:03d}.png")
        save_mask(m, scene_dir / f"QM{i:03d}.png")
    if scene.hr is not None:
        save_image_16bit(scene.hr, scene_dir / "HR.png")
        save_mask(scene.hr_mask, scene_dir / "SM.png")
    return scene_dir


@dataclass(frozen=True)
class SceneRef:
    scene_id: str
    band: Band
    split: Split
    path: Path

    def load(self, **kwargs) -> SceneRecord:
        return load_scene(self.path, self.band, **kwargs)


def manifest_path(root: str | Path, band: Band | str, split: Split | str) -> Path:
    return Path(root) / Band(band).value / f"{Split(split).value}.txt"


def read_manifest(path: Path) -> list[str]:
    ids = [ln.strip() for ln in path.read_text().splitlines()]
    return [i for i in ids if i and not i.startswith("#")]


def write_manifest(path: Path, scene_ids) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{s}\n" for s in sorted(scene_ids)))


def scan_dataset(root: str | Path, band: Band | str, split: Split | str) -> list[SceneRef]:
    band, split = Band(band), Split(split)
    split_dir = Path(root) / band.value / split.value
    manifest = manifest_path(root, band, split)
    if not manifest.exists():
        if not split_dir.is_dir() or not any(split_dir.iterdir()):
            log.warning("no scenes under %s", split_dir)
            return []
        raise ManifestError(f"missing split manifest {manifest}")
    refs = []
    for scene_id in sorted(set(read_manifest(manifest))):
        path = split_dir / scene_id
        if not path.is_dir():
            raise ManifestError(f"{manifest.name} lists {scene_id} but {path} does not exist")
        refs.append(SceneRef(scene_id, band, split, path))
    return refs
