"""Shift- and brightness-bias-tolerant masked L1 loss.

The SR output is cropped by ``d`` pixels per border and compared with every
``(2d+1)^2`` aligned crop of the target; each comparison removes the masked
mean bias first and the best alignment wins.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    d: int = 3
    use_mask: bool = True

    def __post_init__(self):
        if self.d < 0:
            raise ValueError("border crop d must be >= 0")


def _as_bchw(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[:, None]
    return x


def candidate_losses(sr, hr, hr_mask, d: int = 3, use_mask: bool = True):
    """Per-sample, per-candidate masked L1 values, shape ``(B, (2d+1)^2)``.

    Candidate ``u * (2d+1) + v`` compares ``sr[d:-d, d:-d]`` with
    ``hr[u:u+h, v:v+w]``. Fully masked candidates are ``+inf``.
    """
    sr, hr = _as_bchw(sr), _as_bchw(hr)
    if sr.shape != hr.shape:
        raise ValueError(f"sr {tuple(sr.shape)} and hr {tuple(hr.shape)} differ")
    if hr_mask is None or not use_mask:
        mask = torch.ones_like(hr)
    else:
        mask = _as_bchw(hr_mask).to(hr.dtype).expand_as(hr)
    H, W = sr.shape[-2:]
    h, w = H - 2 * d, W - 2 * d
    if h <= 0 or w <= 0:
        raise ValueError(f"crop d={d} leaves nothing of a {H}x{W} image")
    sr_c = sr[..., d:d + h, d:d + w]
    out = []
    for u in range(2 * d + 1):
        for v in range(2 * d + 1):
            hp = hr[..., u:u + h, v:v + w]
            mp = mask[..., u:u + h, v:v + w]
            n = mp.sum(dim=(1, 2, 3))
            safe_n = torch.where(n > 0, n, torch.ones_like(n))
            diff = hp - sr_c
            bias = (mp * diff).sum(dim=(1, 2, 3)) / safe_n
            err = (mp * (diff - bias[:, None, None, None]).abs()).sum(dim=(1, 2, 3)) / safe_n
            out.append(torch.where(n > 0, err, torch.full_like(err, float("inf"))))
    return torch.stack(out, dim=1)


def shift_bias_l1_loss(sr, hr, hr_mask=None, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Per-sample loss ``(B,)``; ``+inf`` marks samples with no usable candidate.

    Ties between candidates resolve to the lowest ``(u, v)``; gradients flow
    through the chosen candidate only.
    """
    vals = candidate_losses(sr, hr, hr_mask, cfg.d, cfg.use_mask)
    with torch.no_grad():
        best = vals.min(dim=1, keepdim=True).values
        first = (vals == best).to(torch.int8).argmax(dim=1)
    return vals.gather(1, first[:, None])[:, 0]


def batch_loss(sr, hr, hr_mask=None, cfg: LossConfig = LossConfig()) -> tuple[torch.Tensor, int]:
    """Mean over samples with a defined loss, and the number of samples dropped."""
    per = shift_bias_l1_loss(sr, hr, hr_mask, cfg)
    valid = torch.isfinite(per)
    dropped = int((~valid).sum())
    if dropped:
        log.warning("%d sample(s) with fully masked targets excluded from the batch loss", dropped)
    if not valid.any():
        return per.new_tensor(float("nan")), dropped
    return per[valid].mean(), dropped
