"""Scene preprocessing: registration, clearance-based frame selection, temporal
permutation pre-augmentation, normalization and training-patch extraction."""
from __future__ import annotations

import io
import json
import logging
import zipfile
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .registration import DEFAULT_MAX_RADIUS, RegistrationError, apply_shift, estimate_shift
from .scene_io import UINT16_MAX, Band, BandStats, SceneRecord, SceneRef, compute_clearance

log = logging.getLogger(__name__)

# stream ids for per-scene RNG derivation
_SELECT, _PERMUTE, _PATCH, _ENSEMBLE = 1, 2, 3, 4


@dataclass(frozen=True)
class PreprocessConfig:
    T: int = 9
    c_min: float = 0.85
    n_p: int = 7
    max_radius: int = DEFAULT_MAX_RADIUS
    patches_per_image: int = 16
    lr_patch_size: int = 32
    patch_min_clearance: float = 0.85
    scale: int = 3
    seed: int = 0


def scene_rng(seed: int, scene_id: str, stream: int) -> np.random.Generator:
    """Independent generator per (run seed, scene, purpose); order of processing is irrelevant."""
    return np.random.default_rng([int(seed), zlib.crc32(scene_id.encode()), stream])


# ---------------------------------------------------------------- registration


def reference_index(scene: SceneRecord) -> int:
    # np.argmax returns the first maximum: ties go to the lowest frame index
    return int(np.argmax(scene.clearances()))


def register_scene(scene: SceneRecord, max_radius: int = DEFAULT_MAX_RADIUS) -> SceneRecord:
    ref = reference_index(scene)
    frames, masks = list(scene.lr_frames), list(scene.lr_masks)
    shifts: list[tuple[int, int]] = [(0, 0)] * scene.n_frames
    failed = []
    for i in range(scene.n_frames):
        if i == ref:
            continue
        try:
            shift = estimate_shift(frames[ref], frames[i], masks[ref], masks[i], max_radius)
        except RegistrationError:
            log.warning("%s: frame %d could not be registered; kept unshifted", scene.scene_id, i)
            failed.append(i)
            continue
        shifts[i] = (shift.dy, shift.dx)
        if shift.dy or shift.dx:
            frames[i], masks[i] = apply_shift(frames[i], masks[i], -shift)
    return replace(scene, lr_frames=frames, lr_masks=masks, shifts=tuple(shifts), unregistered=tuple(failed))


# ------------------------------------------------------------------- selection


@dataclass(frozen=True)
class Selection:
    indices: tuple[int, ...]
    n_acceptable: int
    clearances: tuple[float, ...]


def select_frames(scene: SceneRecord, T: int = 9, c_min: float = 0.85, rng_seed: int = 0) -> Selection | None:
    """Pick the T clearest frames with clearance >= c_min.

    Short scenes are topped up by sampling acceptable frames with replacement;
    ``None`` means the scene has no acceptable frame and must be dropped.
    """
    clear = scene.clearances()
    acceptable = sorted((i for i, c in enumerate(clear) if c >= c_min), key=lambda i: (-clear[i], i))
    if not acceptable:
        return None
    chosen = acceptable[:T]
    if len(chosen) < T:
        rng = scene_rng(rng_seed, scene.scene_id, _SELECT)
        extra = rng.choice(np.array(acceptable), size=T - len(chosen), replace=True)
        chosen += [int(i) for i in extra]
    return Selection(tuple(chosen), len(acceptable), tuple(clear[i] for i in chosen))


def permute_augment(selected, n_p: int, rng_seed: int = 0, scene_id: str = "") -> list[list]:
    """``n_p`` temporal orderings of ``selected``; the first keeps the original order."""
    if n_p < 1:
        raise ValueError("n_p must be >= 1")
    selected = list(selected)
    rng = scene_rng(rng_seed, scene_id, _PERMUTE)
    out = [selected]
    for _ in range(n_p - 1):
        out.append([selected[i] for i in rng.permutation(len(selected))])
    return out


# --------------------------------------------------------------- normalization


def compute_band_stats(scenes, band: Band | str) -> BandStats:
    """Mean/std (population) over every LR pixel; exact integer accumulation makes
    the result independent of scene order."""
    n = total = total_sq = 0
    for scene in scenes:
        for frame in scene.lr_frames:
            px = frame.pixels.astype(np.int64)
            n += px.size
            total += int(px.sum())
            total_sq += int((px * px).sum())
    if n == 0:
        raise ValueError("cannot compute band statistics from no data")
    mean = total / n
    var = (n * total_sq - total * total) / (n * n)
    return BandStats(mean=mean, std=float(np.sqrt(var)), band=Band(band))


def normalize(x, stats: BandStats) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - stats.mean) / stats.std


def denormalize(y, stats: BandStats) -> np.ndarray:
    """Back to uint16: round half up, then clip to the 16-bit range."""
    v = np.floor(np.asarray(y, dtype=np.float64) * stats.std + stats.mean + 0.5)
    return np.clip(v, 0, UINT16_MAX).astype(np.uint16)


# ------------------------------------------------------------------ datapoints


@dataclass
class LRStack:
    """Registered, selected, normalized model input: values ``H x W x T x C``, masks ``H x W x T``."""

    values: np.ndarray
    masks: np.ndarray
    scene_id: str
    band: Band

    def __post_init__(self):
        if self.values.ndim != 4:
            raise ValueError("values must be H x W x T x C")
        if self.masks.shape != self.values.shape[:3]:
            raise ValueError("masks must be H x W x T matching values")
        if not np.isfinite(self.values).all():
            raise ValueError("non-finite values in LR stack")

    @property
    def T(self) -> int:
        return self.values.shape[2]


@dataclass
class Datapoint:
    stack: LRStack
    order: tuple[int, ...]  # original frame indices, in stack order
    perm_index: int = 0
    hr: np.ndarray | None = None  # sH x sW x C, normalized
    hr_mask: np.ndarray | None = None
    patch_origins: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))

    @property
    def name(self) -> str:
        return f"{self.stack.scene_id}_p{self.perm_index:02d}"


@dataclass
class TrainingPatch:
    lr: np.ndarray  # h x w x T x C
    hr: np.ndarray  # sh x sw x C
    hr_mask: np.ndarray  # sh x sw
    origin: tuple[int, int] = (0, 0)


def build_stack(scene: SceneRecord, order, stats: BandStats) -> LRStack:
    lr = scene.lr_array()[list(order)]  # T x H x W
    masks = scene.mask_array()[list(order)]
    values = normalize(lr, stats).transpose(1, 2, 0)[..., None].astype(np.float32)
    return LRStack(values, masks.transpose(1, 2, 0), scene.scene_id, scene.band)


def patch_origins(hr_mask: np.ndarray, lr_shape, n_patches: int, lr_size: int, rng,
                  scale: int = 3, min_clearance: float = 0.85) -> np.ndarray:
    """Random LR-grid corners whose HR mask crop keeps at least ``min_clearance``."""
    h, w = lr_shape
    if lr_size > min(h, w):
        raise ValueError(f"patch size {lr_size} exceeds frame {lr_shape}")
    ys = rng.integers(0, h - lr_size + 1, size=n_patches)
    xs = rng.integers(0, w - lr_size + 1, size=n_patches)
    hs = lr_size * scale
    keep = [
        (int(y), int(x)) for y, x in zip(ys, xs)
        if compute_clearance(hr_mask[y * scale:y * scale + hs, x * scale:x * scale + hs]) >= min_clearance
    ]
    return np.array(keep, dtype=np.int64).reshape(-1, 2)


def crop_patch(dp: Datapoint, origin, lr_size: int, scale: int = 3) -> TrainingPatch:
    y, x = (int(v) for v in origin)
    hs = lr_size * scale
    return TrainingPatch(
        lr=dp.stack.values[y:y + lr_size, x:x + lr_size],
        hr=dp.hr[y * scale:y * scale + hs, x * scale:x * scale + hs],
        hr_mask=dp.hr_mask[y * scale:y * scale + hs, x * scale:x * scale + hs],
        origin=(y, x),
    )


def extract_patches(dp: Datapoint, n_patches: int = 16, lr_size: int = 32, rng_seed: int = 0,
                    scale: int = 3, min_clearance: float = 0.85) -> list[TrainingPatch]:
    if dp.hr is None:
        raise ValueError(f"{dp.name}: patches need HR ground truth")
    rng = scene_rng(rng_seed, dp.name, _PATCH)
    origins = patch_origins(dp.hr_mask, dp.stack.values.shape[:2], n_patches, lr_size, rng, scale, min_clearance)
    return [crop_patch(dp, o, lr_size, scale) for o in origins]


def scene_datapoints(scene: SceneRecord, stats: BandStats, cfg: PreprocessConfig,
                     training: bool = True) -> list[Datapoint]:
    """Full per-scene pipeline. Returns [] if the scene is rejected."""
    registered = register_scene(scene, cfg.max_radius)
    sel = select_frames(registered, cfg.T, cfg.c_min, cfg.seed)
    if sel is None:
        log.warning("%s: no frame with clearance >= %.2f; scene dropped", scene.scene_id, cfg.c_min)
        return []
    orders = permute_augment(sel.indices, cfg.n_p if training else 1, cfg.seed, scene.scene_id)
    hr = hr_mask = None
    if scene.has_hr:
        hr = normalize(scene.hr.pixels, stats)[..., None].astype(np.float32)
        hr_mask = scene.hr_mask.bits.copy()
    out = []
    for k, order in enumerate(orders):
        dp = Datapoint(build_stack(registered, order, stats), tuple(order), k, hr, hr_mask)
        if training and hr is not None:
            rng = scene_rng(cfg.seed, dp.name, _PATCH)
            dp.patch_origins = patch_origins(
                hr_mask, dp.stack.values.shape[:2], cfg.patches_per_image, cfg.lr_patch_size,
                rng, cfg.scale, cfg.patch_min_clearance,
            )
        out.append(dp)
    return out


# ----------------------------------------------------------------------- cache

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def write_datapoint(path: str | Path, dp: Datapoint) -> Path:
    """One ``.npz`` container per datapoint; fixed zip timestamps keep reruns byte-identical."""
    path = Path(path)
    arrays = {
        "values": dp.stack.values,
        "masks": dp.stack.masks,
        "order": np.asarray(dp.order, dtype=np.int64),
        "patch_origins": dp.patch_origins.astype(np.int64),
    }
    if dp.hr is not None:
        arrays["hr"] = dp.hr
        arrays["hr_mask"] = dp.hr_mask
    meta = {"scene_id": dp.stack.scene_id, "band": dp.stack.band.value, "perm_index": dp.perm_index}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(arrays):
            info = zipfile.ZipInfo(f"{key}.npy", date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, _npy_bytes(arrays[key]))
    return path


def read_datapoint(path: str | Path) -> Datapoint:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        stack = LRStack(z["values"], z["masks"], meta["scene_id"], Band(meta["band"]))
        return Datapoint(
            stack=stack,
            order=tuple(int(i) for i in z["order"]),
            perm_index=int(meta["perm_index"]),
            hr=z["hr"] if "hr" in z else None,
            hr_mask=z["hr_mask"] if "hr_mask" in z else None,
            patch_origins=z["patch_origins"],
        )


def write_stats(path: str | Path, stats: BandStats) -> None:
    Path(path).write_text(stats.to_text())


def read_stats(path: str | Path) -> BandStats:
    return BandStats.from_text(Path(path).read_text())


@dataclass
class CacheSummary:
    split: str
    scenes: int
    dropped: list[str]
    datapoints: int
    patches: int


def _process_ref(args):
    ref, stats, cfg, training = args
    scene = ref.load()
    if not scene.has_hr:
        log.warning("%s: no HR ground truth; skipped for %s", ref.scene_id, ref.split.value)
        return ref.scene_id, None
    return ref.scene_id, scene_datapoints(scene, stats, cfg, training)


def preprocess_split(refs: list[SceneRef], out_dir: str | Path, stats: BandStats,
                     cfg: PreprocessConfig, training: bool, workers: int = 1) -> CacheSummary:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(ref, stats, cfg, training) for ref in refs]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_process_ref, jobs))
    else:
        results = [_process_ref(j) for j in jobs]
    dropped, n_dp, n_patch = [], 0, 0
    for scene_id, dps in results:
        if not dps:
            dropped.append(scene_id)
            continue
        for dp in dps:
            write_datapoint(out_dir / f"{dp.name}.npz", dp)
            n_dp += 1
            n_patch += len(dp.patch_origins)
    if dropped:
        log.warning("dropped %d scene(s): %s", len(dropped), ", ".join(dropped))
    split = refs[0].split.value if refs else ""
    return CacheSummary(split, len(refs) - len(dropped), dropped, n_dp, n_patch)


def load_cache(cache_dir: str | Path) -> list[Datapoint]:
    return [read_datapoint(p) for p in sorted(Path(cache_dir).glob("*.npz"))]
