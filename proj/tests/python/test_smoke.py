import numpy as np
import pytest

import matchformer as mf


def test_lite_shapes():
    cfg = mf.make_config("lite", "sea")
    shapes = mf.pyramid_shapes(cfg, 480, 640)
    assert [s[1] for s in shapes] == [128, 192, 256, 512]
    assert shapes[0][2:] == [120, 160]
    assert shapes[3][2:] == [15, 20]


def test_large_starts_at_half_resolution():
    cfg = mf.make_config("large", "la")
    assert cfg.coarse_scale == 2
    assert cfg.fine_channels == 256


def test_config_text_roundtrip():
    cfg = mf.config_from_text("toy = true\nattention = la\ncross_flags.stage1 = SSS\n")
    assert cfg.key_values()["cross_flags.stage1"] == "SSS"
    with pytest.raises(mf.ConfigError):
        mf.config_from_text("bogus = 1\n")


def test_identity_pair_matches_itself():
    model = mf.Model(mf.make_config("lite", "sea", toy=True), seed=3)
    a, _, _ = mf.make_pair(7)
    m = mf.match(model, a, a, theta=0.0)
    assert m.shape[1] == 5 and len(m) > 200
    offsets = np.hypot(m[:, 2] - m[:, 0], m[:, 3] - m[:, 1])
    assert np.mean(offsets < 4.0) >= 0.95


def test_match_is_deterministic():
    model = mf.Model(mf.make_config("lite", "la", toy=True), seed=1)
    a, b, _ = mf.make_pair(11)
    assert np.array_equal(mf.match(model, a, b), mf.match(model, a, b))


def test_mismatched_extent_raises():
    model = mf.Model(mf.make_config("lite", "sea", toy=True), seed=0)
    with pytest.raises(mf.ShapeError):
        mf.match(model, np.zeros((60, 64)), np.zeros((60, 64)))


def test_geometry_on_exact_matches():
    _, _, h = mf.make_pair(5)
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 63, size=(40, 2))
    hom = np.c_[pts, np.ones(40)] @ h.T
    m = np.c_[pts, hom[:, :2] / hom[:, 2:], np.ones(40)]
    est, inliers = mf.ransac(m)
    assert len(inliers) == 40
    assert mf.corner_error(est, h, 64, 64) < 1e-6
    assert mf.mma(m, h) == [1.0] * 10


def test_short_training_lowers_loss(tmp_path):
    model = mf.Model(mf.make_config("lite", "sea", toy=True), seed=0)
    log, precision = mf.train(model, steps=20, lr=3e-4, heldout_pairs=2)
    assert len(log) == 20
    assert log[-1]["loss_coarse"] < log[0]["loss_coarse"]
    assert 0.0 <= precision <= 1.0
    path = tmp_path / "ck.txt"
    model.save(str(path))
    again = mf.Model.load(str(path))
    a, b, _ = mf.make_pair(2)
    assert np.array_equal(mf.match(model, a, b, theta=0.0), mf.match(again, a, b, theta=0.0))


def test_flops_breakdown():
    total, kinds = mf.flops(mf.make_config("lite", "sea"))
    assert total == pytest.approx(sum(kinds.values()))
    assert kinds["matcher"] == 0.0
