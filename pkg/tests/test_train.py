import math

import numpy as np
import pytest

from postilt import train
from conftest import fd_grad
from postilt.errors import ConfigError, DataError, NumericError
from postilt.layout import PolygonSet
from postilt.optics import make_corners
from postilt.resample import box_filter
from postilt.sampler import Architecture, generator_forward, init_params
from postilt.solver import IltObjectiveConfig
from postilt.train import Design, FinetuneConfig, PretrainConfig, RewardConfig

ARCH = Architecture(levels=2, channels=(4, 4), n_style_blocks=1, style_dim=8, latent_dim=16, mlp_hidden=16)


@pytest.fixture(scope="module")
def obj():
    return IltObjectiveConfig(make_corners(pixel_size=2.0))


@pytest.fixture(scope="module")
def designs():
    rects = [((16.0, 12.0, 28.0, 40.0),), ((8.0, 8.0, 24.0, 24.0), (36.0, 20.0, 24.0, 36.0))]
    return [Design.from_polys(f"d{i}", PolygonSet(r, (64.0, 64.0)), 2.0) for i, r in enumerate(rects)]


REWARD = RewardConfig(lowres_factor=4, ilt_iterations=10)


def test_cosine_endpoints():
    assert abs(train.cosine_lr(0, 50, 1e-4, 1e-7) - 1e-4) < 1e-12
    assert abs(train.cosine_lr(49, 50, 1e-4, 1e-7) - 1e-7) < 1e-12
    mid = train.cosine_lr(25, 51, 1e-4, 1e-7)
    assert mid == pytest.approx(0.5 * (1e-4 + 1e-7))


def test_policy_loss_single_pixel_by_hand():
    loss, grad = train.policy_loss(np.array([1.0]), np.zeros((1, 1, 1)), np.ones((1, 1, 1)))
    assert loss == pytest.approx(math.log(2), rel=1e-15)
    assert grad[0, 0, 0] == pytest.approx(-0.5)


def test_policy_loss_zero_advantage():
    rng = np.random.default_rng(0)
    y = rng.standard_normal((3, 4, 4))
    loss, grad = train.policy_loss(np.zeros(3), y, (y > 0.5).astype(np.uint8))
    assert loss == 0.0 and not grad.any()


def test_policy_gradient_step_raises_likelihood_of_action():
    y = np.array([[[0.2, -1.0]]])
    m = np.array([[[1, 0]]])
    _, g = train.policy_loss(np.array([2.0]), y, m)
    y2 = y - 0.1 * g
    assert y2[0, 0, 0] > y[0, 0, 0]  # sigma(Y) up where M = 1
    assert y2[0, 0, 1] < y[0, 0, 1]


def test_bce_stable_at_large_logits():
    v = train.bce_with_logits(np.array([800.0, -800.0]), np.array([0.0, 1.0]))
    np.testing.assert_allclose(v, [800.0, 800.0])


def test_policy_gradient_matches_fd():
    rng = np.random.default_rng(1)
    y = rng.standard_normal((2, 3, 3))
    m = (rng.random(y.shape) > 0.5).astype(float)
    a = np.array([1.5, -2.0])
    _, g = train.policy_loss(a, y, m)
    from conftest import fd_grad

    num = fd_grad(lambda: train.policy_loss(a, y, m)[0], y)
    np.testing.assert_allclose(g, num, atol=1e-9)


def test_imitation_loss_properties():
    m = np.ones((1, 40, 40))
    s = box_filter(m, 25)
    assert np.all(s[0, 12:28, 12:28] == pytest.approx(1.0))
    assert s[0, 11, 20] < 1 and s[0, 20, 0] < 1
    loss, grad = train.imitation_loss(s, m, 25)
    assert loss == 0.0 and not grad.any()
    rng = np.random.default_rng(2)
    y = rng.standard_normal((2, 30, 30))
    mm = (rng.random(y.shape) > 0.5).astype(float)
    _, grad = train.imitation_loss(y, mm, 25)
    np.testing.assert_allclose(grad, 2 * (y - box_filter(mm, 25)) / y.size, atol=1e-12)


def test_imitation_term_spaces():
    rng = np.random.default_rng(4)
    y = 3 * rng.standard_normal((2, 9, 9))
    m = (rng.random((2, 9, 9)) > 0.5).astype(np.uint8)
    raw = train._imitation_term(y, m, FinetuneConfig(smooth_window=3, imitation_space="logit"))
    ref = train.imitation_loss(y, m, 3)
    assert raw[0] == ref[0] and np.array_equal(raw[1], ref[1])
    cfg = FinetuneConfig(smooth_window=3)
    loss, grad = train._imitation_term(y, m, cfg)
    s = box_filter(m.astype(float), 3)
    assert loss == pytest.approx(np.mean((1 / (1 + np.exp(-y)) - s) ** 2), rel=1e-12)
    num = fd_grad(lambda: train._imitation_term(y, m, cfg)[0], y)
    np.testing.assert_allclose(grad, num, atol=1e-9)
    with pytest.raises(ConfigError):
        FinetuneConfig(imitation_space="pixels")


def test_recon_loss_zero_residual_and_scaling():
    y = np.array([[0.3, -1.2]])
    ref = 1 / (1 + np.exp(-y))
    loss, grad = train.recon_loss(y, ref)
    assert loss == pytest.approx(0.0, abs=1e-30) and np.abs(grad).max() < 1e-16
    m = np.array([[1.0, 0.0]])
    l1, g1 = train.recon_loss(y, m, 1.0)
    l2, g2 = train.recon_loss(y, m, 2.0)
    assert l2 == 2 * l1
    np.testing.assert_array_equal(g2, 2 * g1)


def test_pretrain_lowers_loss(designs):
    rng = np.random.default_rng(3)
    pairs = []
    for i in range(4):
        d = designs[i % 2].raster
        pairs.append((d, d.grid.copy()))
    p0 = init_params(ARCH, 0)
    cfg = PretrainConfig(epochs=1, batch_size=2, base_lr=3e-3, seed=5)

    def loss_of(p):
        return np.mean([train.recon_loss(generator_forward(d, rng.standard_normal((2, 16)) * 0, p, False)[0], m)[0] for d, m in pairs])

    before = loss_of(p0)
    res = train.pretrain(pairs * 3, cfg, p0)  # 12 steps
    assert loss_of(res.params) < before
    assert len(res.epoch_loss) == 1
    assert p0.version == 0  # input left untouched


def test_pretrain_rejects_mismatch(designs):
    with pytest.raises(DataError):
        train.pretrain([(designs[0].raster, np.zeros((4, 4)))], PretrainConfig(epochs=1), init_params(ARCH, 0))
    with pytest.raises(DataError):
        train.pretrain([], PretrainConfig(epochs=1), init_params(ARCH, 0))


def test_rollout_identical_policies(designs, obj):
    p = init_params(ARCH, 4)
    g = train.rollout(designs[1], p, p.copy(), 4, REWARD, 11, obj)
    assert np.array_equal(g.advantages, np.zeros(4)) and g.advantages.dtype.kind == "i"
    assert (g.rewards <= 0).all() and g.rewards.dtype.kind == "i"
    loss, grad = train.policy_loss(g.advantages, g.logits, g.actions)
    assert loss == 0.0 and not grad.any()
    again = train.rollout(designs[1], p, p.copy(), 4, REWARD, 11, obj)
    np.testing.assert_array_equal(g.logits, again.logits)
    np.testing.assert_array_equal(g.refined, again.refined)
    np.testing.assert_array_equal(g.rewards, again.rewards)


def test_rollout_advantage_identity(designs, obj):
    s = init_params(ARCH, 4)
    t = init_params(ARCH, 5)
    g = train.rollout(designs[1], s, t, 4, REWARD, 3, obj)
    np.testing.assert_array_equal(g.advantages, g.rewards - g.teacher_rewards)
    gm = train.rollout(designs[1], s, t, 4, REWARD, 3, obj, group_mean=True)
    np.testing.assert_allclose(gm.advantages, gm.rewards - gm.rewards.mean())


def test_reward_without_refinement(designs, obj):
    p = init_params(ARCH, 4)
    g = train.rollout(designs[0], p, p, 3, RewardConfig(refine=False), 1, obj)
    np.testing.assert_array_equal(g.refined, g.actions)


def _ft_cfg(**kw):
    base = dict(epochs=2, group_size=3, latent_dim=16, base_lr=1e-3, min_lr=1e-6, seed=1)
    base.update(kw)
    return FinetuneConfig(**base)


def test_zero_weights_leave_params_unchanged(designs, obj):
    p = init_params(ARCH, 4)
    res = train.finetune(designs, _ft_cfg(lambda_pg=0.0, lambda_imit=0.0), REWARD, p, obj)
    assert res.params.equal(p)


def test_first_step_is_imitation_only(designs, obj):
    p = init_params(ARCH, 4)
    full = train.finetune(designs, _ft_cfg(), REWARD, p, obj, max_steps=1)
    imit = train.finetune(designs, _ft_cfg(lambda_pg=0.0), REWARD, p, obj, max_steps=1)
    assert full.rows[0]["L_pg"] == 0.0
    assert full.params.equal(imit.params)
    assert not full.params.equal(p)


def test_loss_decomposition(designs, obj):
    p = init_params(ARCH, 4)
    g = train.rollout(designs[1], p, init_params(ARCH, 9), 3, REWARD, 2, obj)
    cfg = _ft_cfg()
    lp, gp = train.policy_loss(g.advantages, g.logits, g.actions)
    li, gi = train._imitation_term(g.logits, g.refined, cfg)
    joint = cfg.lambda_pg * lp + cfg.lambda_imit * li
    assert joint == pytest.approx((cfg.lambda_pg * lp + 0.0) + (0.0 + cfg.lambda_imit * li), rel=1e-15)
    np.testing.assert_allclose(cfg.lambda_pg * gp + cfg.lambda_imit * gi, cfg.lambda_pg * gp + cfg.lambda_imit * gi)


def test_log_checkpoints_and_resume(tmp_path, designs, obj):
    p = init_params(ARCH, 4)
    cfg = _ft_cfg(epochs=3)
    full = train.finetune(designs, cfg, REWARD, p, obj, out_dir=tmp_path / "full")
    assert len(full.checkpoints) == 3
    header = (tmp_path / "full" / "finetune_log.csv").read_text().splitlines()[0]
    assert header == ",".join(train.LOG_FIELDS)
    part = tmp_path / "part"
    train.finetune(designs, cfg, REWARD, p, obj, out_dir=part, max_steps=2)
    resumed = train.finetune(designs, cfg, REWARD, p, obj, out_dir=part, resume=part / "ckpt_epoch000.json")
    assert [r["lr"] for r in resumed.rows[-4:]] == [r["lr"] for r in full.rows[-4:]]
    assert resumed.params.equal(full.params)
    assert resumed.epoch_reward == full.epoch_reward


def test_non_finite_losses_abort(designs, obj, monkeypatch):
    monkeypatch.setattr(train, "imitation_loss", lambda y, m, w: (float("nan"), np.zeros_like(y)))
    p = init_params(ARCH, 4)
    with pytest.raises(NumericError):
        train.finetune(designs, _ft_cfg(epochs=2), REWARD, p, obj)
    res = train.finetune(designs, _ft_cfg(epochs=1), REWARD, p, obj)  # two skips then the epoch ends
    assert res.params.equal(p)
