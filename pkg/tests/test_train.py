import math

import numpy as np
import pytest
import torch

from rams.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from rams.model import RAMS, ModelConfig
from rams.preprocess import PreprocessConfig, TrainingPatch, compute_band_stats, scene_datapoints
from rams.scene_io import Band, compute_clearance
from rams.synthetic import make_scene
from rams.train import (
    PatchIndex, TrainConfig, augment, collate, fit, lr_schedule, make_optimizer, new_model, train_step,
)

TINY = ModelConfig(F=8, N=1, r=4, T=5)
PRE = PreprocessConfig(T=5, n_p=1, patches_per_image=4, lr_patch_size=8)


@pytest.fixture(scope="module")
def tiny_data():
    scenes = [make_scene(40 + i, f"t{i}", Band.RED, n_frames=9, lr_size=24) for i in range(3)]
    stats = compute_band_stats(scenes, Band.RED)
    train = [dp for s in scenes[:2] for dp in scene_datapoints(s, stats, PRE)]
    val = scene_datapoints(scenes[2], stats, PRE, training=False)
    return train, val, stats


def test_lr_schedule_endpoints():
    cfg = TrainConfig()
    assert lr_schedule(0, 1000, cfg) == 5e-4
    assert lr_schedule(1000, 1000, cfg) == 5e-7
    assert lr_schedule(500, 1000, cfg) == pytest.approx((5e-4 + 5e-7) / 2, rel=1e-12)
    vals = [lr_schedule(s, 37, cfg) for s in range(38)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(lr_final=1e-3)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def _patch(rng, n=6, T=3):
    lr = rng.normal(size=(n, n, T, 1)).astype(np.float32)
    hr = rng.normal(size=(3 * n, 3 * n, 1)).astype(np.float32)
    mask = rng.random((3 * n, 3 * n)) > 0.3
    return TrainingPatch(lr, hr, mask, (0, 0))


class _Fixed:
    def __init__(self, k, flip):
        self.k, self.flip = k, flip

    def integers(self, n):
        return self.k

    def random(self):
        return 0.0 if self.flip else 1.0


def test_rotate_180_twice_restores(rng):
    p = _patch(rng)
    q = augment(augment(p, _Fixed(2, False)), _Fixed(2, False))
    for a, b in [(p.lr, q.lr), (p.hr, q.hr), (p.hr_mask, q.hr_mask)]:
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("k", range(4))
@pytest.mark.parametrize("flip", [False, True])
def test_augment_is_joint(rng, k, flip):
    # hr built from lr by nearest x3 upsampling: the relation must survive augmentation
    lr = rng.normal(size=(5, 5, 3, 1)).astype(np.float32)
    hr = np.repeat(np.repeat(lr[:, :, 0], 3, 0), 3, 1)
    mask = rng.random((15, 15)) > 0.5
    out = augment(TrainingPatch(lr, hr, mask, (0, 0)), _Fixed(k, flip))
    np.testing.assert_array_equal(out.hr[1::3, 1::3], out.lr[:, :, 0])
    assert compute_clearance(out.hr_mask) == compute_clearance(mask)
    assert out.lr.shape == lr.shape


def test_augment_covers_all_transforms(rng):
    p = _patch(rng, 4)
    seen = set()
    r = np.random.default_rng(0)
    for _ in range(200):
        seen.add(augment(p, r).lr.tobytes())
    assert len(seen) == 8


def test_collate_layout(rng):
    x, hr, m = collate([_patch(rng), _patch(rng)])
    assert x.shape == (2, 1, 3, 6, 6)
    assert hr.shape == (2, 1, 18, 18)
    assert m.shape == (2, 18, 18)


def _batch(rng, b=2, n=6, T=5):
    return collate([_patch(rng, n, T) for _ in range(b)])


def test_lr_zero_leaves_weights(rng):
    model = RAMS(TINY)
    opt = make_optimizer(model, TrainConfig())
    before = [p.detach().clone() for p in model.parameters()]
    batch = _batch(rng)
    train_step(model, opt, batch, 0.0)
    train_step(model, opt, batch, 0.0)
    for a, b in zip(before, model.parameters()):
        assert torch.equal(a, b)


def test_adam_first_step_is_sign_of_gradient():
    w = torch.nn.Parameter(torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64))
    opt = torch.optim.Adam([w], lr=1e-3, eps=1e-7)
    target = torch.tensor([1.0, -2.0, 2.5], dtype=torch.float64)
    before = w.detach().clone()
    loss = ((w - target) ** 2).sum()
    loss.backward()
    g = w.grad.clone()
    opt.step()
    expected = -1e-3 * g / (g.abs() + 1e-7)
    torch.testing.assert_close(w.detach() - before, expected, rtol=1e-9, atol=1e-12)
    torch.testing.assert_close(w.detach() - before, -1e-3 * g.sign(), rtol=1e-5, atol=0)


def test_checkpoint_round_trip(tmp_path, tiny_data):
    _, _, stats = tiny_data
    model = new_model(TINY, seed=3)
    path = save_checkpoint(tmp_path / "m.ckpt", model, stats)
    ck = load_checkpoint(path, band="RED")
    assert ck.model_config == TINY and ck.stats == stats
    for k, v in model.state_dict().items():
        assert np.array_equal(ck.weights[k], v.numpy())
    again = ck.build_model()
    for a, b in zip(model.parameters(), again.parameters()):
        assert torch.equal(a, b)


def test_checkpoint_refuses_band_and_config(tmp_path, tiny_data):
    _, _, stats = tiny_data
    path = save_checkpoint(tmp_path / "m.ckpt", new_model(TINY, 0), stats)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, band=Band.NIR)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, model_config=ModelConfig())
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_fit_emits_checkpoints_and_log(tmp_path, tiny_data):
    train, val, stats = tiny_data
    cfg = TrainConfig(batch_size=4, epochs=3, lr_patch_size=8, seed=1)
    res = fit(train, val, stats, tmp_path, cfg, TINY)
    assert len(res.checkpoints) == 3
    assert (tmp_path / "best.ckpt").exists()
    lines = (tmp_path / "train_log.tsv").read_text().splitlines()
    assert len(lines) == 4 and lines[0].startswith("epoch\t")
    assert all(math.isfinite(h.train_loss) for h in res.history)
    ts = load_checkpoint(res.checkpoints[-1]).train_state
    assert ts.epoch == 3 and ts.global_step == ts.total_steps


def test_fit_band_mismatch(tmp_path, tiny_data):
    train, val, stats = tiny_data
    with pytest.raises(ValueError):
        fit(train, val, stats, tmp_path, TrainConfig(band=Band.NIR, lr_patch_size=8), TINY)


def test_resume_is_bit_compatible(tmp_path, tiny_data):
    train, _, stats = tiny_data
    cfg = TrainConfig(batch_size=4, epochs=2, lr_patch_size=8, seed=2)
    full = fit(train, [], stats, tmp_path / "a", cfg, TINY)
    part = fit(train, [], stats, tmp_path / "b", cfg, TINY, max_steps=math.ceil(len(PatchIndex(train, 8)) / 4))
    assert len(part.checkpoints) == 1
    resumed = fit(train, [], stats, tmp_path / "b", cfg, TINY, resume=part.checkpoints[0])
    assert full.step_losses == part.step_losses + resumed.step_losses
    a = load_checkpoint(full.checkpoints[-1]).weights
    b = load_checkpoint(resumed.checkpoints[-1]).weights
    assert all(np.array_equal(a[k], b[k]) for k in a)
    ts = load_checkpoint(resumed.checkpoints[-1]).train_state
    assert ts.global_step == ts.total_steps


def test_ablated_model_has_no_rta(tmp_path, tiny_data):
    train, _, stats = tiny_data
    cfg = TrainConfig(batch_size=8, epochs=1, lr_patch_size=8)
    res = fit(train, [], stats, tmp_path, cfg, TINY, ablate_rta=True)
    ck = load_checkpoint(res.checkpoints[0])
    assert not ck.use_rta
    assert not any(k.startswith("rta.") for k in ck.weights)


def test_divergence_guard_keeps_last_valid(tmp_path, tiny_data, monkeypatch):
    import rams.train as train_mod

    calls = []
    real_step = train_mod.train_step

    def exploding(*a, **k):
        real_step(*a, **k)
        calls.append(1)
        return 1.0 if len(calls) <= 2 else 1e3

    monkeypatch.setattr(train_mod, "train_step", exploding)
    train, _, stats = tiny_data
    cfg = TrainConfig(batch_size=4, epochs=8, lr_patch_size=8)
    res = fit(train, [], stats, tmp_path, cfg, TINY)
    assert res.diverged
    assert len(res.history) == 1 + cfg.divergence_patience
    assert res.last_valid.name == "epoch_001.ckpt"
    assert (tmp_path / "last_valid.txt").read_text().strip() == "epoch_001.ckpt"
