import math

import numpy as np
import pytest

from pnerv import trainer
from pnerv.gradcheck import TINY_CONFIG
from pnerv.metrics import psnr
from pnerv.model import PNeRVConfig, build_model
from pnerv.trainer import (AdamState, TrainConfig, adam_step, cosine_lr, l2_loss, log_to_csv, reconstruct,
                           split_frames, train)
from pnerv.video import constant_clip, moving_gradient_clip

SMALL = dict(embed_content_shape=(4, 1, 2), embed_temporal_shape=(2, 4, 8), mainstream_strides=(2, 2, 2, 1, 1, 1),
             channel_widths=(4, 4, 4, 4, 4, 4), encoder_width=4)


def test_l2_loss_values(rng):
    a = rng.standard_normal((3, 4, 4))
    assert l2_loss(a, a)[0] == 0.0
    assert l2_loss(np.zeros((3, 2, 2)), np.ones((3, 2, 2)))[0] == 1.0
    b = rng.standard_normal((3, 4, 4))
    total = 0.0
    for x, y in zip(a.ravel(), b.ravel()):
        total += (x - y) ** 2
    assert l2_loss(a, b)[0] == pytest.approx(total / a.size, rel=1e-13)
    with pytest.raises(ValueError):
        l2_loss(a, b[:2])


def test_adam_first_step():
    params = {"w": np.array([1.0])}
    adam_step(params, {"w": np.array([1.0])}, AdamState(), lr=0.1)
    assert abs((1.0 - params["w"][0]) - 0.1) < 1e-7


def test_adam_matches_hand_recurrence(rng):
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.01
    w = rng.standard_normal(4)
    params, state = {"w": w.copy()}, AdamState()
    m = v = np.zeros(4)
    ref = w.copy()
    for t in range(1, 6):
        g = rng.standard_normal(4)
        adam_step(params, {"w": g}, state, lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref = ref - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    np.testing.assert_allclose(params["w"], ref, rtol=1e-13)


def test_adam_zero_gradient_is_identity():
    params, state = {"w": np.array([0.3, -2.0])}, AdamState()
    adam_step(params, {"w": np.zeros(2)}, state, lr=0.5)
    np.testing.assert_array_equal(params["w"], [0.3, -2.0])
    np.testing.assert_array_equal(state.m["w"], 0.0)
    np.testing.assert_array_equal(state.v["w"], 0.0)
    assert state.step == 1


def test_adam_skips_missing_gradients():
    params, state = {"a": np.ones(2), "b": np.ones(2)}, AdamState()
    adam_step(params, {"a": np.ones(2), "b": None}, state, lr=0.1)
    np.testing.assert_array_equal(params["b"], 1.0)
    assert "b" not in state.m


def test_adam_converges_on_quadratic():
    params, state = {"w": np.array([0.0])}, AdamState()
    for _ in range(500):
        adam_step(params, {"w": 2 * (params["w"] - 3.0)}, state, lr=0.05)
    assert abs(params["w"][0] - 3.0) < 1e-2


def test_cosine_schedule():
    assert cosine_lr(0, 100, 1e-3, 1e-5) == 1e-3
    assert cosine_lr(100, 100, 1e-3, 1e-5) == pytest.approx(1e-5, abs=1e-18)
    assert cosine_lr(50, 100, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2, rel=1e-14)
    lrs = [cosine_lr(t, 40, 1.0) for t in range(41)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


@pytest.mark.parametrize("n", [2, 7, 8, 16])
def test_interpolation_split(n):
    train_idx, held = split_frames(n, "interpolation")
    assert not set(train_idx) & set(held)
    assert sorted(train_idx + held) == list(range(n))
    assert train_idx == list(range(0, n, 2))
    assert split_frames(n, "regression") == (list(range(n)), [])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="shuffle")
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_max=1e-4, lr_min=1e-3)
    with pytest.raises(ValueError):
        TrainConfig(loss="L1")
    assert TrainConfig(lr_max=0.0).lr_max == 0.0
    cfg = TrainConfig(epochs=3, mode="interpolation")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_interpolation_trains_on_four_of_eight(monkeypatch):
    seen = []
    real = trainer.train_step

    def spy(model, frames, t):
        seen.append(t)
        return real(model, frames, t)

    monkeypatch.setattr(trainer, "train_step", spy)
    model = build_model(PNeRVConfig(**SMALL))
    res = train(model, moving_gradient_clip(frames=8, height=8, width=16).frames,
                TrainConfig(epochs=2, mode="interpolation"))
    assert seen == [0, 2, 4, 6] * 2
    assert res.eval_frames == [1, 3, 5, 7]


def test_zero_lr_leaves_params_unchanged():
    model = build_model(PNeRVConfig(**SMALL))
    before = {k: v.copy() for k, v in model.params.items()}
    train(model, moving_gradient_clip(frames=2, height=8, width=16).frames, TrainConfig(epochs=3, lr_max=0.0))
    for k, v in before.items():
        np.testing.assert_array_equal(model.params[k], v)


def test_reproducible_logs():
    clip = moving_gradient_clip(frames=2, height=8, width=16, seed=3)
    logs = []
    for _ in range(2):
        res = train(build_model(PNeRVConfig(**SMALL, seed=1)), clip.frames, TrainConfig(epochs=4, lr_max=5e-3))
        logs.append([(e.loss, e.psnr, e.lr) for e in res.log])
    assert logs[0] == logs[1]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_decreases_with_default_lr(seed):
    clip = moving_gradient_clip(frames=2, height=8, width=16, seed=seed)
    res = train(build_model(PNeRVConfig(**SMALL, seed=seed)), clip.frames, TrainConfig(epochs=50))
    assert res.final_loss < res.log[0].loss


def test_constant_frame_overfit():
    # threshold from a pilot: the tiny config reached ~44 dB here
    clip = constant_clip(frames=1, height=4, width=8, value=0.3)
    model = build_model(PNeRVConfig(**TINY_CONFIG))
    train(model, clip.frames, TrainConfig(epochs=200, lr_max=1e-2))
    assert psnr(reconstruct(model, clip.frames)[0], clip.frames[0]) >= 40.0


def test_epoch_log_and_csv():
    seen = []
    res = train(build_model(PNeRVConfig(**SMALL)), moving_gradient_clip(frames=2, height=8, width=16).frames,
                TrainConfig(epochs=3, lr_max=1e-3), on_epoch=seen.append)
    assert [e.epoch for e in seen] == [1, 2, 3]
    assert seen[0].lr == 1e-3
    assert all(math.isfinite(e.loss) and math.isfinite(e.psnr) for e in seen)
    lines = log_to_csv(res.log).splitlines()
    assert lines[0] == "epoch,loss,psnr,lr" and len(lines) == 4
