import numpy as np
import pytest

from cstn import tensor as T
from cstn.mri import ComplexImage, MultiEchoVolume, generate_phantom
from cstn.model import CSTNConfig, init_weights, load_checkpoint
from cstn.swin import RSTBConfig
from cstn.tensor import ShapeError, Tensor
from cstn.train import (AdamState, EvalConfig, NumericError, TrainConfig, adam_step, encode_target, evaluate, fit,
                        loss, make_pairs, phantom_seed, sample_crops, score_pairs, train)


def tiny_model(size=16):
    return CSTNConfig(num_rstb=1, rstb=RSTBConfig(depth=2, num_heads=2, embed_dim=8, window_size=4),
                      in_echoes=3, target_size=(size, size), shallow_channels=4, head_channels=4)


def rand_volume(seed, n=8):
    rng = np.random.default_rng(seed)
    return MultiEchoVolume.from_stacks(rng.uniform(0.1, 1, (3, n, n)), rng.uniform(-3, 3, (3, n, n)), (14.0, 27.0, 40.0))


# ---------------------------------------------------------------- loss

def test_perfect_prediction_is_zero():
    v = rand_volume(0)
    gm, gc = encode_target(v)
    assert loss(Tensor(gm), Tensor(gc), v).item() == 0.0


def test_phase_wrap_safety():
    v = rand_volume(1)
    shifted = MultiEchoVolume([ComplexImage(e.magnitude, e.phase.astype(np.float64) + 2 * np.pi) for e in v.echoes],
                              v.echo_times_ms)
    pm, pc = encode_target(rand_volume(2))
    a = loss(Tensor(pm), Tensor(pc), v).item()
    b = loss(Tensor(pm), Tensor(pc), shifted).item()
    assert a == pytest.approx(b, abs=1e-6)


def test_magnitude_only_loss():
    v = rand_volume(3)
    pm, pc = encode_target(rand_volume(4))
    gm, _ = encode_target(v)
    got = loss(Tensor(pm), Tensor(pc), v, lambda_phase=0.0).item()
    assert got == pytest.approx(np.mean(np.abs(pm.astype(np.float64) - gm)), rel=1e-6)


def test_phase_term_ignores_empty_pixels():
    v = rand_volume(5)
    mags = v.magnitude_stack().copy()
    mags[:, :, :3] = 0
    v0 = MultiEchoVolume.from_stacks(mags, v.phase_stack(), v.echo_times_ms)
    gm, gc = encode_target(v0)
    pc = gc.copy()
    pc[:, :, :, :3] = 7.0
    assert loss(Tensor(gm), Tensor(pc), v0).item() == 0.0


def test_loss_shape_mismatch():
    v = rand_volume(6)
    with pytest.raises(ShapeError):
        loss(T.zeros((1, 3, 4, 4)), T.zeros((1, 6, 4, 4)), v)


# ---------------------------------------------------------------- Adam

def test_adam_quadratic_converges():
    w = {"w": Tensor(np.array([1.0], np.float64))}
    state = AdamState()
    for _ in range(200):
        adam_step(w, {"w": 2 * w["w"].data}, state, 0.1)
    assert abs(w["w"].data[0]) < 0.01
    assert state.step == 200


@pytest.mark.parametrize("scale", [1e-6, 1.0, 1e6])
def test_first_step_is_lr_sized(scale):
    w = {"w": Tensor(np.zeros(3, np.float64))}
    adam_step(w, {"w": np.array([scale, -scale, 2 * scale])}, AdamState(), 1e-3)
    np.testing.assert_allclose(np.abs(w["w"].data), 1e-3, rtol=1e-2)


def test_zero_gradient_keeps_weights_and_decays_moments():
    w = {"w": Tensor(np.ones(2, np.float64))}
    state = AdamState()
    adam_step(w, {"w": np.ones(2)}, state, 0.1)
    before, m1 = w["w"].data.copy(), state.m["w"].copy()
    state.v["w"][:] = 1.0  # large second moment: the residual momentum step is negligible
    adam_step(w, {"w": np.zeros(2)}, state, 0.0)
    np.testing.assert_array_equal(w["w"].data, before)
    np.testing.assert_allclose(state.m["w"], 0.9 * m1)


def test_lr_schedule_halves():
    cfg = TrainConfig(learning_rate=1.0, total_steps=100)
    assert [cfg.lr_at(s) for s in (0, 49, 50, 74, 75, 99)] == [1.0, 1.0, 0.5, 0.5, 0.25, 0.25]


def test_train_config_items_round_trip():
    cfg = TrainConfig(learning_rate=3e-4, total_steps=7, echo_times=(10.0,))
    assert TrainConfig.from_items(dict(cfg.to_items())) == cfg


# ---------------------------------------------------------------- data and loop

def test_make_pairs_channels():
    x, y = make_pairs([1, 2], 48, 32, (14.0, 27.0, 40.0))
    assert x.shape == y.shape == (2, 9, 48, 48)


def test_crops_prefer_tissue():
    _, y = make_pairs([3], 64, 48, (14.0, 27.0, 40.0))
    picks = sample_crops(np.random.default_rng(0), y, 6, 16, 3, min_fg=0.9)
    for i, r, c in picks:
        assert (y[i, :3, r:r + 16, c:c + 16].max(axis=0) > 0.05).mean() >= 0.9


def small_train_cfg(**kw):
    base = dict(total_steps=3, batch_size=2, patch_size=16, num_train=2, num_val=1, hr_size=48, lr_size=32,
                checkpoint_every=2, learning_rate=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_seed_replay_bit_identical(tmp_path):
    cfg = small_train_cfg()
    train(cfg, tiny_model(), tmp_path / "a")
    train(cfg, tiny_model(), tmp_path / "b")
    assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
    assert (tmp_path / "a" / "final.cstck").read_bytes() == (tmp_path / "b" / "final.cstck").read_bytes()
    lines = (tmp_path / "a" / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss,lr" and len(lines) == 4


def test_zero_steps_checkpoint_equals_init(tmp_path):
    cfg = small_train_cfg(total_steps=0)
    train(cfg, tiny_model(), tmp_path)
    mc, w = load_checkpoint(tmp_path / "final.cstck")
    init = init_weights(mc, cfg.seed)
    for k in init:
        assert w[k].data.tobytes() == init[k].data.tobytes()


def test_non_finite_loss_aborts():
    mc = tiny_model(32)
    x, y = make_pairs([4], 32, 24, (14.0, 27.0, 40.0))
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        fit(x, y, mc, small_train_cfg())


def test_overfit_loss_decreases():
    mc = tiny_model(32)
    x, y = make_pairs([5], 32, 24, (14.0, 27.0, 40.0))
    r = fit(x, y, mc, small_train_cfg(total_steps=30, learning_rate=3e-3))
    assert r.losses[-1] < r.losses[0]


def test_echo_mismatch_rejected():
    with pytest.raises(ValueError):
        train(small_train_cfg(echo_times=(10.0,)), tiny_model())


# ---------------------------------------------------------------- evaluation

def test_ground_truth_scores_perfect():
    vols = [generate_phantom(s, 48, 48)[0] for s in (1, 2)]
    rep = score_pairs(vols, vols)
    assert rep["smwi/ssim"].format(100) == "100.00 ± 0.00"
    assert rep["smwi/mse"].mean == 0.0


def test_identity_network_equals_bicubic():
    mc = tiny_model(384)
    scans = [generate_phantom(s, 384, 384)[0] for s in (3, 4)]
    res = evaluate((mc, init_weights(mc)), EvalConfig(protocol=192, scans=scans))
    for k in res.cstn:
        assert res.cstn[k].values == res.baseline[k].values
    table = res.table()
    assert "192x192 CSTN" in table and "192x192 bicubic" in table


def test_evaluate_does_not_mutate_checkpoint():
    mc = tiny_model(384)
    w = init_weights(mc, 1)
    before = {k: v.data.copy() for k, v in w.items()}
    evaluate((mc, w), EvalConfig(scans=[generate_phantom(6, 384, 384)[0]]))
    for k in w:
        np.testing.assert_array_equal(w[k].data, before[k])


def test_eval_config_protocol():
    with pytest.raises(ValueError):
        EvalConfig(protocol=128)


def test_phantom_seed_stable():
    assert phantom_seed(0, 1) == phantom_seed(0, 1) != phantom_seed(0, 2)
