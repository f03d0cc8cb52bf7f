"""Full-frame inference, temporal self-ensemble, bicubic baseline and evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from .metrics import EvalRecord, evaluate_pair
from .model import RAMS
from .preprocess import (
    _ENSEMBLE, PreprocessConfig, Selection, build_stack, denormalize, register_scene, scene_rng, select_frames,
)
from .scene_io import UINT16_MAX, BandStats, ImageGrid, SceneRecord

log = logging.getLogger(__name__)


class SceneRejected(Exception):
    """No LR frame passed the clearance threshold."""


@dataclass
class PreparedScene:
    scene: SceneRecord  # registered
    selection: Selection


def prepare_scene(scene: SceneRecord, cfg: PreprocessConfig = PreprocessConfig()) -> PreparedScene:
    registered = register_scene(scene, cfg.max_radius)
    sel = select_frames(registered, cfg.T, cfg.c_min, cfg.seed)
    if sel is None:
        raise SceneRejected(scene.scene_id)
    return PreparedScene(registered, sel)


def predict_normalized(model: RAMS, values: np.ndarray) -> np.ndarray:
    """``H x W x T x C`` normalized stack -> ``sH x sW x C`` normalized prediction."""
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(np.ascontiguousarray(values)).to(dtype)
    x = x.permute(3, 2, 0, 1)[None]
    was_training = model.training
    model.eval()
    with torch.no_grad():
        y = model(x)[0].permute(1, 2, 0).double().numpy()
    model.train(was_training)
    return y


def _check_band(model_stats: BandStats, scene: SceneRecord):
    if model_stats.band != scene.band:
        raise ValueError(f"model is for {model_stats.band.value}, scene {scene.scene_id} is {scene.band.value}")


def infer_scene(scene: SceneRecord | PreparedScene, model: RAMS, stats: BandStats,
                cfg: PreprocessConfig = PreprocessConfig()) -> ImageGrid:
    prep = scene if isinstance(scene, PreparedScene) else prepare_scene(scene, cfg)
    _check_band(stats, prep.scene)
    stack = build_stack(prep.scene, prep.selection.indices, stats)
    y = predict_normalized(model, stack.values)
    return ImageGrid(denormalize(y[..., 0], stats))


def ensemble_orders(prep: PreparedScene, P: int, rng_seed: int = 0) -> list[list[int]]:
    """P temporal orderings; the first is the selection order, so P=1 is plain inference."""
    rng = scene_rng(rng_seed, prep.scene.scene_id, _ENSEMBLE)
    base = list(prep.selection.indices)
    orders = [base]
    for _ in range(P - 1):
        orders.append([base[i] for i in rng.permutation(len(base))])
    return orders


def infer_ensemble(scene: SceneRecord | PreparedScene, model: RAMS, stats: BandStats, P: int = 20,
                   rng_seed: int = 0, cfg: PreprocessConfig = PreprocessConfig(),
                   orders: list[list[int]] | None = None, return_normalized: bool = False):
    """Average of the predictions over P temporal permutations, taken in normalized space."""
    if P < 1:
        raise ValueError("P must be >= 1")
    prep = scene if isinstance(scene, PreparedScene) else prepare_scene(scene, cfg)
    _check_band(stats, prep.scene)
    orders = orders or ensemble_orders(prep, P, rng_seed)
    acc = None
    for order in orders:
        y = predict_normalized(model, build_stack(prep.scene, order, stats).values)
        acc = y if acc is None else acc + y
    mean = acc / len(orders)
    if return_normalized:
        return mean
    return ImageGrid(denormalize(mean[..., 0], stats))


# -------------------------------------------------------------------- bicubic

def cubic_kernel(t, a: float = -0.5):
    t = np.abs(t)
    return np.where(
        t <= 1, (a + 2) * t**3 - (a + 3) * t**2 + 1,
        np.where(t < 2, a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a, 0.0),
    )


def bicubic_matrix(n_in: int, scale: int, a: float = -0.5) -> np.ndarray:
    """``(scale*n_in, n_in)`` interpolation matrix; pixel-centre grid, edge-clamped taps."""
    n_out = n_in * scale
    src = (np.arange(n_out) + 0.5) / scale - 0.5
    base = np.floor(src).astype(int)
    m = np.zeros((n_out, n_in))
    for k in range(-1, 3):
        idx = base + k
        w = cubic_kernel(src - idx, a)
        np.add.at(m, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), w)
    return m


def bicubic_upsample(img: np.ndarray, scale: int = 3, a: float = -0.5) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    ry = bicubic_matrix(img.shape[0], scale, a)
    rx = bicubic_matrix(img.shape[1], scale, a)
    return ry @ img @ rx.T


def bicubic_baseline(scene: SceneRecord, scale: int = 3) -> ImageGrid:
    """x3 bicubic upsampling of the clearest LR frame (lowest index on ties)."""
    best = int(np.argmax(scene.clearances()))
    up = bicubic_upsample(scene.lr_frames[best].pixels, scale)
    return ImageGrid(np.clip(np.floor(up + 0.5), 0, UINT16_MAX).astype(np.uint16))


# ------------------------------------------------------------------ evaluation

def evaluate(scenes, methods, model: RAMS | None = None, stats: BandStats | None = None,
             cfg: PreprocessConfig = PreprocessConfig(), P: int = 20, d: int = 3) -> list[EvalRecord]:
    """Per-scene records for each method in ``methods``.

    Methods: ``bicubic``, ``rams``, ``rams+`` (ensemble of ``P``) or ``rams+<P>``,
    and ``identity`` (SR = HR, a sanity check).
    """
    records = []
    for scene in scenes:
        if not scene.has_hr:
            log.warning("%s: no HR ground truth; skipped", scene.scene_id)
            continue
        prep = None
        for method in methods:
            if method == "bicubic":
                sr = bicubic_baseline(scene).pixels
            elif method == "identity":
                sr = scene.hr.pixels
            elif method == "rams" or method.startswith("rams+"):
                if model is None or stats is None:
                    raise ValueError(f"method {method} needs a model and band stats")
                try:
                    prep = prep or prepare_scene(scene, cfg)
                except SceneRejected:
                    log.warning("%s: rejected by clearance filter; skipped for %s", scene.scene_id, method)
                    continue
                if method == "rams":
                    sr = infer_scene(prep, model, stats).pixels
                else:
                    p = int(method[5:]) if method[5:] else P
                    sr = infer_ensemble(prep, model, stats, p, cfg.seed).pixels
            else:
                raise ValueError(f"unknown method {method!r}")
            records.append(evaluate_pair(scene.scene_id, scene.band.value, method, sr,
                                         scene.hr.pixels, scene.hr_mask.bits, d))
    return records


def win_rate(records, method_a: str, method_b: str, band: str | None = None) -> float:
    """Fraction of scenes where ``method_a`` has strictly higher cPSNR than ``method_b``."""
    a = {r.scene_id: r.cpsnr for r in records if r.method == method_a and (band is None or r.band == band)}
    b = {r.scene_id: r.cpsnr for r in records if r.method == method_b and (band is None or r.band == band)}
    common = sorted(set(a) & set(b))
    if not common:
        return math.nan
    return sum(a[s] > b[s] for s in common) / len(common)


def ensemble_curve(scenes, model: RAMS, stats: BandStats, sizes, cfg: PreprocessConfig = PreprocessConfig(),
                   d: int = 3) -> list[tuple[int, float]]:
    """Mean cPSNR against ensemble size. Predictions for the largest P are reused
    so each size is a prefix of one ordering list."""
    from .metrics import cpsnr

    sizes = sorted(set(int(p) for p in sizes))
    per_size = {p: [] for p in sizes}
    for scene in scenes:
        if not scene.has_hr:
            continue
        try:
            prep = prepare_scene(scene, cfg)
        except SceneRejected:
            continue
        orders = ensemble_orders(prep, sizes[-1], cfg.seed)
        acc, k = None, 0
        for i, order in enumerate(orders, 1):
            y = predict_normalized(model, build_stack(prep.scene, order, stats).values)
            acc = y if acc is None else acc + y
            if i in per_size:
                sr = denormalize(acc[..., 0] / i, stats)
                per_size[i].append(cpsnr(sr, scene.hr.pixels, scene.hr_mask.bits, d))
                k += 1
    return [(p, float(np.mean([v for v in per_size[p] if math.isfinite(v)]))) for p in sizes if per_size[p]]
