"""Self-describing checkpoint container.

Layout: ``b"RAMSCKPT"``, ``uint32`` format version, ``uint64`` header length,
UTF-8 JSON header, then raw little-endian float32 tensor payloads. The header
lists every tensor as ``{key, shape, offset, nbytes}`` (offsets relative to the
payload start) and embeds the model config, band statistics and, for training
checkpoints, the optimizer/step/RNG state.

Weight keys are hierarchical (``rfabs.3.conv1.weight``, ``rta.upconv.bias``).
The final sub-pixel layers use the row-major depth-to-space convention: channel
``c*s*s + k`` feeds output offset ``(k // s, k % s)``.
"""
from __future__ import annotations

import base64
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import RAMS, ModelConfig
from .scene_io import Band, BandStats

MAGIC = b"RAMSCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class TrainState:
    epoch: int = 0
    global_step: int = 0
    total_steps: int = 0
    train_config: dict = field(default_factory=dict)
    adam_step: int = 0
    adam_moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    torch_rng: bytes | None = None
    history: list[dict] = field(default_factory=list)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    use_rta: bool
    stats: BandStats
    weights: dict[str, np.ndarray]
    train_state: TrainState | None = None

    @property
    def band(self) -> Band:
        return self.stats.band

    def build_model(self, dtype=torch.float32) -> RAMS:
        model = RAMS(self.model_config, use_rta=self.use_rta)
        expected = set(model.state_dict())
        if expected != set(self.weights):
            raise CheckpointError("checkpoint tensors do not match the model configuration")
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.weights.items()})
        return model.to(dtype)


def _le32(a) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a, dtype="<f4"))


def save_checkpoint(path: str | Path, model: RAMS, stats: BandStats, optimizer=None,
                    train_state: TrainState | None = None) -> Path:
    path = Path(path)
    weights = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    entries, blobs, offset = [], [], 0

    def add(key, arr):
        nonlocal offset
        data = _le32(arr).tobytes()
        entries.append({"key": key, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)

    for k, v in weights.items():
        add(k, v)

    header = {
        "format_version": FORMAT_VERSION,
        "model_config": model.cfg.to_dict(),
        "use_rta": model.use_rta,
        "stats": {"band": stats.band.value, "mean": stats.mean, "std": stats.std},
        "tensors": entries,
    }
    if train_state is not None:
        ts = train_state
        if optimizer is not None:
            ts.adam_step, ts.adam_moments = _adam_state(model, optimizer)
        for k, (m, v) in ts.adam_moments.items():
            add(f"adam.exp_avg.{k}", m)
            add(f"adam.exp_avg_sq.{k}", v)
        header["train_state"] = {
            "epoch": ts.epoch,
            "global_step": ts.global_step,
            "total_steps": ts.total_steps,
            "train_config": ts.train_config,
            "adam_step": ts.adam_step,
            "torch_rng": base64.b64encode(ts.torch_rng).decode() if ts.torch_rng else None,
            "history": ts.history,
        }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)
    return path


def _adam_state(model, optimizer):
    names = {id(p): k for k, p in model.named_parameters()}
    moments, step = {}, 0
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if not st:
                continue
            step = int(st["step"])
            moments[names[id(p)]] = (st["exp_avg"].detach().cpu().numpy(), st["exp_avg_sq"].detach().cpu().numpy())
    return step, moments


def restore_adam(model, optimizer, ts: TrainState) -> None:
    if not ts.adam_moments:
        return
    params = dict(model.named_parameters())
    for k, (m, v) in ts.adam_moments.items():
        p = params[k]
        optimizer.state[p] = {
            "step": torch.tensor(float(ts.adam_step)),
            "exp_avg": torch.from_numpy(m.copy()).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(v.copy()).to(p.dtype),
        }


def load_checkpoint(path: str | Path, band: Band | str | None = None,
                    model_config: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; refuses it if ``band`` or ``model_config`` are given and differ."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a RAMS checkpoint")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = 8 + 12
    header = json.loads(data[start:start + hlen])
    payload = memoryview(data)[start + hlen:]
    tensors = {}
    for e in header["tensors"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["key"]] = np.frombuffer(buf, dtype="<f4").reshape(e["shape"]).astype(np.float32)

    cfg = ModelConfig(**header["model_config"])
    st = header["stats"]
    stats = BandStats(mean=st["mean"], std=st["std"], band=Band(st["band"]))
    if band is not None and Band(band) != stats.band:
        raise CheckpointError(f"checkpoint was trained on {stats.band.value}, refusing to use it for {Band(band).value}")
    if model_config is not None and model_config != cfg:
        raise CheckpointError(f"checkpoint config {cfg} differs from requested {model_config}")

    weights = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    ts = None
    if "train_state" in header:
        h = header["train_state"]
        moments = {
            k[len("adam.exp_avg."):]: (v, tensors["adam.exp_avg_sq." + k[len("adam.exp_avg."):]])
            for k, v in tensors.items() if k.startswith("adam.exp_avg.")
        }
        ts = TrainState(
            epoch=h["epoch"], global_step=h["global_step"], total_steps=h["total_steps"],
            train_config=h["train_config"], adam_step=h["adam_step"], adam_moments=moments,
            torch_rng=base64.b64decode(h["torch_rng"]) if h["torch_rng"] else None,
            history=h.get("history", []),
        )
    return Checkpoint(cfg, header["use_rta"], stats, weights, ts)
