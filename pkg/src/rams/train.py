"""Training loop: on-the-fly augmentation, Adam with per-step linear LR decay,
per-epoch validation and checkpoints, divergence guard."""
from __future__ import annotations

import logging
import math
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import TrainState, load_checkpoint, restore_adam, save_checkpoint
from .loss import LossConfig, batch_loss
from .metrics import evaluate_pair
from .model import RAMS, ModelConfig
from .preprocess import Datapoint, TrainingPatch, crop_patch, denormalize
from .inference import predict_normalized
from .scene_io import Band, BandStats

log = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    def __init__(self, batch_ids):
        super().__init__(f"non-finite loss on batch {batch_ids}")
        self.batch_ids = batch_ids


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 100
    lr_initial: float = 5e-4
    lr_final: float = 5e-7
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-7
    seed: int = 0
    band: Band = Band.RED
    lr_patch_size: int = 32
    validate_every: int = 1
    divergence_factor: float = 10.0
    divergence_patience: int = 3

    def __post_init__(self):
        self.band = Band(self.band)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_final > self.lr_initial:
            raise ValueError("lr_final must not exceed lr_initial")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["band"] = self.band.value
        return d


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    if total_steps <= 0:
        return cfg.lr_initial
    step = min(max(step, 0), total_steps)
    t = step / total_steps
    # this form hits both endpoints exactly
    return (1 - t) * cfg.lr_initial + t * cfg.lr_final


def augment(patch: TrainingPatch, rng: np.random.Generator) -> TrainingPatch:
    """Same random rotation (0/90/180/270) and horizontal flip on LR frames, HR and mask."""
    k = int(rng.integers(4))
    flip = bool(rng.random() < 0.5)

    def tf(a):
        a = np.rot90(a, k, axes=(0, 1))
        return np.flip(a, axis=1) if flip else a

    return TrainingPatch(
        np.ascontiguousarray(tf(patch.lr)), np.ascontiguousarray(tf(patch.hr)),
        np.ascontiguousarray(tf(patch.hr_mask)), patch.origin,
    )


def collate(patches: list[TrainingPatch], dtype=torch.float32):
    lr = torch.from_numpy(np.stack([p.lr for p in patches])).to(dtype)  # B h w T C
    hr = torch.from_numpy(np.stack([p.hr for p in patches])).to(dtype)  # B sh sw C
    mask = torch.from_numpy(np.stack([p.hr_mask for p in patches]).astype(np.float32)).to(dtype)
    return lr.permute(0, 4, 3, 1, 2), hr.permute(0, 3, 1, 2), mask


class PatchIndex:
    """Flat list of (datapoint, patch origin) pairs over a preprocessed cache."""

    def __init__(self, datapoints: list[Datapoint], lr_size: int = 32, scale: int = 3):
        self.datapoints = datapoints
        self.lr_size = lr_size
        self.scale = scale
        self.items = [(i, tuple(o)) for i, dp in enumerate(datapoints) for o in dp.patch_origins]

    def __len__(self):
        return len(self.items)

    def patch(self, j: int) -> TrainingPatch:
        i, origin = self.items[j]
        return crop_patch(self.datapoints[i], origin, self.lr_size, self.scale)

    def name(self, j: int) -> str:
        i, (y, x) = self.items[j]
        return f"{self.datapoints[i].name}@{y},{x}"


def make_optimizer(model: RAMS, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(), lr=cfg.lr_initial,
        betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_epsilon,
    )


def train_step(model: RAMS, optimizer, batch, lr: float, loss_cfg: LossConfig = LossConfig(),
               batch_ids=None) -> float:
    x, hr, mask = batch
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    loss, _ = batch_loss(model(x), hr, mask, loss_cfg)
    if not torch.isfinite(loss):
        log.error("non-finite loss; offending batch: %s", batch_ids)
        raise NonFiniteLoss(batch_ids)
    loss.backward()
    optimizer.step()
    return loss.item()


def seed_everything(seed: int):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def new_model(model_cfg: ModelConfig, seed: int, use_rta: bool = True) -> RAMS:
    model = RAMS(model_cfg, use_rta=use_rta)
    model.reset_parameters(torch.Generator().manual_seed(seed))
    return model


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_cpsnr: float
    val_cssim: float
    lr: float
    wall_time: float

    def line(self) -> str:
        return (f"{self.epoch}\t{self.train_loss:.6g}\t{self.val_cpsnr:.4f}\t"
                f"{self.val_cssim:.6f}\t{self.lr:.6g}\t{self.wall_time:.1f}")


LOG_HEADER = "epoch\ttrain_loss\tval_cpsnr\tval_cssim\tlr\twall_time"


def validate(model: RAMS, val: list[Datapoint], stats: BandStats, d: int = 3) -> tuple[float, float]:
    """Mean cPSNR / cSSIM over full validation frames (16-bit space)."""
    ps, ss = [], []
    for dp in val:
        if dp.hr is None:
            continue
        sr = denormalize(predict_normalized(model, dp.stack.values)[..., 0], stats)
        hr = denormalize(dp.hr[..., 0], stats)
        rec = evaluate_pair(dp.stack.scene_id, stats.band.value, "rams", sr, hr, dp.hr_mask, d)
        if math.isfinite(rec.cpsnr):
            ps.append(rec.cpsnr)
        if not math.isnan(rec.cssim):
            ss.append(rec.cssim)
    return (float(np.mean(ps)) if ps else math.nan, float(np.mean(ss)) if ss else math.nan)


@dataclass
class FitResult:
    history: list[EpochLog] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    best: Path | None = None
    last_valid: Path | None = None
    diverged: bool = False
    step_losses: list[float] = field(default_factory=list)


def fit(train: list[Datapoint], val: list[Datapoint], stats: BandStats, out_dir: str | Path,
        cfg: TrainConfig = TrainConfig(), model_cfg: ModelConfig = ModelConfig(),
        loss_cfg: LossConfig = LossConfig(), ablate_rta: bool = False,
        resume: str | Path | None = None, max_steps: int | None = None) -> FitResult:
    """Train one band's model; writes ``epoch_NNN.ckpt``, ``best.ckpt`` and ``train_log.tsv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for dp in (*train, *val):
        if dp.stack.band != cfg.band:
            raise ValueError(f"{dp.name} is {dp.stack.band.value}; run is configured for {cfg.band.value}")
    if stats.band != cfg.band:
        raise ValueError("band statistics do not match the run band")
    seed_everything(cfg.seed)

    index = PatchIndex(train, cfg.lr_patch_size, model_cfg.s)
    if len(index) == 0:
        raise ValueError("training cache holds no patches")
    steps_per_epoch = math.ceil(len(index) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    start_epoch, global_step, history = 0, 0, []

    if resume is not None:
        ck = load_checkpoint(resume, band=cfg.band, model_config=model_cfg)
        if ck.use_rta == ablate_rta:
            raise ValueError("checkpoint RTA setting differs from this run")
        model = ck.build_model()
        optimizer = make_optimizer(model, cfg)
        ts = ck.train_state
        if ts is not None:
            restore_adam(model, optimizer, ts)
            start_epoch, global_step = ts.epoch, ts.global_step
            total_steps = ts.total_steps or total_steps  # decay keeps the original budget
            history = [EpochLog(**h) for h in ts.history]
            if ts.torch_rng is not None:
                torch.set_rng_state(torch.frombuffer(bytearray(ts.torch_rng), dtype=torch.uint8))
    else:
        model = new_model(model_cfg, cfg.seed, use_rta=not ablate_rta)
        optimizer = make_optimizer(model, cfg)

    result = FitResult(history=list(history))
    log_path = out_dir / "train_log.tsv"
    if not log_path.exists() or resume is None:
        log_path.write_text(LOG_HEADER + "\n" + "".join(h.line() + "\n" for h in history))
    best_score = max((h.val_cpsnr for h in history if math.isfinite(h.val_cpsnr)), default=-math.inf)
    reference_loss = history[0].train_loss if history else None
    bad_epochs = 0

    model.train()
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(index))
        losses = []
        try:
            for b in range(steps_per_epoch):
                if max_steps is not None and global_step >= max_steps:
                    break
                ids = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                batch = collate([augment(index.patch(j), rng) for j in ids])
                lr = lr_schedule(global_step, total_steps, cfg)
                losses.append(train_step(model, optimizer, batch, lr, loss_cfg, [index.name(j) for j in ids]))
                global_step += 1
        except NonFiniteLoss:
            result.diverged = True
            log.error("training halted at epoch %d; last valid checkpoint %s", epoch, result.last_valid)
            break
        result.step_losses.extend(losses)
        mean_loss = float(np.mean(losses)) if losses else math.nan
        if (epoch + 1) % cfg.validate_every == 0 or epoch + 1 == cfg.epochs:
            vp, vs = validate(model, val, stats, loss_cfg.d) if val else (math.nan, math.nan)
        else:
            vp, vs = math.nan, math.nan
        entry = EpochLog(epoch + 1, mean_loss, vp, vs, lr_schedule(global_step, total_steps, cfg),
                         time.perf_counter() - t0)
        history.append(entry)
        result.history.append(entry)
        with open(log_path, "a") as fh:
            fh.write(entry.line() + "\n")
        log.info("epoch %s", entry.line())

        if reference_loss is None:
            reference_loss = mean_loss
        if not math.isfinite(mean_loss) or mean_loss > cfg.divergence_factor * reference_loss:
            bad_epochs += 1
        else:
            bad_epochs = 0

        ts = TrainState(epoch + 1, global_step, total_steps, cfg.to_dict(),
                        torch_rng=bytes(torch.get_rng_state().numpy().tobytes()),
                        history=[asdict(h) for h in history])
        ck_path = save_checkpoint(out_dir / f"epoch_{epoch + 1:03d}.ckpt", model, stats, optimizer, ts)
        result.checkpoints.append(ck_path)
        if bad_epochs == 0:
            result.last_valid = ck_path
            if math.isfinite(vp) and vp > best_score:
                best_score = vp
                save_checkpoint(out_dir / "best.ckpt", model, stats, optimizer, ts)
                result.best = out_dir / "best.ckpt"
        if bad_epochs >= cfg.divergence_patience:
            result.diverged = True
            log.error("loss diverged for %d epochs; last valid checkpoint %s", bad_epochs, result.last_valid)
            break
        if max_steps is not None and global_step >= max_steps:
            break

    if result.last_valid is not None:
        (out_dir / "last_valid.txt").write_text(result.last_valid.name + "\n")
    if result.best is None and result.last_valid is not None:
        shutil.copyfile(result.last_valid, out_dir / "best.ckpt")  # no validation score available
        result.best = out_dir / "best.ckpt"
    return result
