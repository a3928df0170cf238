import numpy as np
import pytest

from vtmorph import data as vd
from vtmorph import faces, spatial
from vtmorph.autodiff import Tensor
from vtmorph.networks import IDENTITY_THETA
from vtmorph.training import (
    LOSS_NAMES, TrainConfig, TrainingAborted, TrainState, augment, fit_arrays, l1, read_results,
    register_batch, registered_l1, theta_penalty, train_step, write_loss_log,
)

TINY = dict(unet_width=4, disc_width=4, vit_dim=16, vit_depth=1, vit_heads=2,
            regressor_widths=(16, 16, 8, 8, 8), batch_size=4)


@pytest.fixture(scope="module")
def pairs():
    rng = np.random.default_rng(0)
    vis, thr = [], []
    for k, (_, _, img) in enumerate(faces.render_subjects(4, 2, 64, seed=0)):
        v, t, _ = vd.synth_pair(img, vd.WarpRange(0.1, 5.0, (0.95, 1.05), 0.0), style_seed=k, rng=rng)
        vis.append(v)
        thr.append(t)
    return np.array(vis), np.array(thr)


def _cfg(**kw):
    return TrainConfig(**{**TINY, **kw})


# config


@pytest.mark.parametrize("key,value", [("batch_size", 0), ("lr_stn", 0.0), ("beta1", -1.0), ("vit_depth", 0)])
def test_config_rejects_nonpositive(key, value):
    with pytest.raises(ValueError, match=key):
        TrainConfig(**{key: value})


@pytest.mark.parametrize("key,value", [("lambda_cyc", -1.0), ("stn_warmup", -1), ("augment_joint", -0.1)])
def test_config_rejects_negative(key, value):
    with pytest.raises(ValueError, match=key):
        TrainConfig(**{key: value})


@pytest.mark.parametrize("key,value", [("cycle_target", "thermal"), ("t2v_l1_path", "warped"), ("vit_pool", "max")])
def test_config_rejects_unknown_choice(key, value):
    with pytest.raises(ValueError, match=key):
        TrainConfig(**{key: value})


def test_config_dict_round_trip_and_unknown_keys():
    cfg = _cfg(seed=3, lambda_l1_t2v=5.0)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown TrainConfig keys"):
        TrainConfig.from_dict({"lamda_cyc": 1.0})


def test_separate_l1_weights_default_to_shared():
    cfg = TrainConfig(lambda_l1=7.0, lambda_l1_t2v=2.0)
    assert (cfg.l1_v2t, cfg.l1_t2v) == (7.0, 2.0)


# loss pieces


def test_l1_and_theta_penalty_values():
    assert float(l1(Tensor(np.zeros(4)), Tensor(np.full(4, 0.5))).data) == pytest.approx(0.5)
    th = Tensor(np.array([IDENTITY_THETA, IDENTITY_THETA + [0, 0, 0.3, 0, 0, 0.4]]))
    assert float(theta_penalty(th).data) == pytest.approx(0.25 / 2, rel=1e-6)


def test_cycle_zero_for_perfect_registration_and_lookup_generator():
    A = np.random.default_rng(0).uniform(-1, 1, (1, 1, 64, 64)).astype(np.float32)
    state = TrainState.create(_cfg())
    model = state.model
    # constructed oracle: GAN2 is an exact lookup from the aligned thermal to A
    B = np.random.default_rng(1).uniform(-1, 1, A.shape).astype(np.float32)
    model.gen_t2v = lambda x: Tensor(A) if np.array_equal(x.data, B) else Tensor(np.zeros_like(A))
    _, cyc = model.flow4_cycle(Tensor(B), Tensor(A))
    assert float(cyc.data) == 0.0


def test_registered_l1_equals_l1_at_identity():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(-1, 1, (2, 1, 16, 16)), rng.uniform(-1, 1, (2, 1, 16, 16))
    th = Tensor(np.tile(IDENTITY_THETA, (2, 1)))
    assert float(registered_l1(Tensor(a), th, b).data) == pytest.approx(float(l1(a, b).data), rel=1e-6)


def test_augment_disabled_is_identity_and_flip_is_joint():
    rng = np.random.default_rng(0)
    A, B = rng.random((4, 1, 8, 8)), rng.random((4, 1, 8, 8))
    a2, b2 = augment(A, B, _cfg(), np.random.default_rng(1))
    assert a2 is A and b2 is B
    a3, b3 = augment(A, B, _cfg(augment_flip=True), np.random.default_rng(1))
    flipped = ~np.all(a3 == A, axis=(1, 2, 3))
    assert np.array_equal(flipped, ~np.all(b3 == B, axis=(1, 2, 3)))
    assert np.array_equal(a3[flipped], A[flipped][..., ::-1])


def test_joint_augment_pads_visible_white_thermal_black():
    A, B = np.ones((2, 1, 32, 32)), -np.ones((2, 1, 32, 32))
    a, b = augment(A, B, _cfg(augment_joint=0.5), np.random.default_rng(0))
    assert np.allclose(a, 1.0) and np.allclose(b, -1.0)


# training runs


def test_theta_regularizer_alone_keeps_identity(pairs):
    vis, thr = pairs
    st = fit_arrays(vis, thr, _cfg(steps=5, lambda_adv=0.0, lambda_l1=0.0, lambda_cyc=0.0), log_every=0)
    theta, _ = st.model.register(vd.to_network(vis[:4, None]).astype(np.float32),
                                 vd.to_network(thr[:4, None]).astype(np.float32))
    assert np.array_equal(theta, np.tile(IDENTITY_THETA, (4, 1)).astype(np.float32))


def test_training_is_deterministic(pairs):
    vis, thr = pairs
    h1 = fit_arrays(vis, thr, _cfg(steps=10), log_every=0).history
    h2 = fit_arrays(vis, thr, _cfg(steps=10), log_every=0).history
    assert h1 == h2
    h3 = fit_arrays(vis, thr, _cfg(steps=10, seed=1), log_every=0).history
    assert h1 != h3


def test_resume_matches_uninterrupted_run(pairs, tmp_path):
    vis, thr = pairs
    full = fit_arrays(vis, thr, _cfg(steps=8, augment_joint=0.1), log_every=0)
    part = fit_arrays(vis, thr, _cfg(steps=5, augment_joint=0.1), log_every=0)
    part.save(tmp_path / "p.ckpt")
    resumed = fit_arrays(vis, thr, _cfg(steps=8, augment_joint=0.1), TrainState.load(tmp_path / "p.ckpt"),
                         log_every=0)
    assert [r["total"] for r in resumed.history] == [r["total"] for r in full.history[5:]]
    a, b = full.model.state_dict(), resumed.model.state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_losses_decrease_on_small_overfit(pairs):
    vis, thr = pairs
    hist = fit_arrays(vis, thr, _cfg(steps=200, batch_size=8), log_every=0).history
    for name in ("l1_v2t", "cycle"):
        first = np.mean([r[name] for r in hist[:50]])
        last = np.mean([r[name] for r in hist[-50:]])
        assert last < first, name


def test_non_finite_input_aborts_with_loss_name():
    state = TrainState.create(_cfg())
    A = np.zeros((2, 1, 64, 64), dtype=np.float32)
    B = A.copy()
    B[0, 0, 0, 0] = np.inf
    with pytest.raises(TrainingAborted) as info:
        train_step(state, A, B)
    assert info.value.step == 1 and info.value.loss_name
    assert state.step == 0


def test_stn_warmup_freezes_regressor(pairs):
    vis, thr = pairs
    st = fit_arrays(vis, thr, _cfg(steps=4, stn_warmup=4), log_every=0)
    assert np.all(st.model.regressor.head.weight.data == 0)


def test_fit_arrays_validates_shapes():
    with pytest.raises(ValueError, match="N x H x W"):
        fit_arrays(np.zeros((2, 64, 64)), np.zeros((3, 64, 64)), _cfg())
    with pytest.raises(ValueError, match="config expects 64x64"):
        fit_arrays(np.zeros((2, 32, 32)), np.zeros((2, 32, 32)), _cfg())


def test_fit_writes_checkpoints_and_loss_log(pairs, tmp_path):
    vis, thr = pairs
    fit_arrays(vis, thr, _cfg(steps=4, checkpoint_every=2), out_dir=tmp_path, log_every=0)
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == [
        "checkpoint_000002.ckpt", "checkpoint_000004.ckpt", "checkpoint_final.ckpt"]
    header = (tmp_path / "losses.csv").read_text().splitlines()[0]
    assert header == ",".join(["step", *LOSS_NAMES])


def test_loss_log_round_trips_exactly(tmp_path):
    rows = [{"step": 1, **{k: 0.1 + i / 3 for i, k in enumerate(LOSS_NAMES)}}]
    text = write_loss_log(tmp_path / "l.csv", rows).read_text().splitlines()[1].split(",")
    assert [float(v) for v in text[1:]] == [rows[0][k] for k in LOSS_NAMES]


# batch registration


def _manifest(tmp_path, pairs):
    vis, thr = pairs
    items = []
    for i in range(3):
        vp = vd.write_image(tmp_path / f"P{i}_vis.png", vis[i])
        tp = vd.write_image(tmp_path / f"P{i}_thr.png", thr[i])
        items.append(vd.ImagePair(f"P{i}", f"S{i}", vp, tp))
    return items


def test_register_batch_at_init_is_bit_identical(tmp_path, pairs):
    items = _manifest(tmp_path, pairs)
    state = TrainState.create(_cfg())
    results = register_batch(state, items, tmp_path / "out")
    for r, p in zip(results, items):
        _, thr = p.load()
        assert np.array_equal(vd.quantize(vd.read_image(r.output_path)), vd.quantize(thr))
    thetas = read_results(tmp_path / "out" / "results.csv")
    assert list(thetas) == ["P0", "P1", "P2"]
    assert all(np.array_equal(t, IDENTITY_THETA) for t in thetas.values())


def test_register_batch_continue_on_error(tmp_path, pairs):
    items = _manifest(tmp_path, pairs)
    vd.write_image(tmp_path / "small.png", np.zeros((32, 32)))
    items.append(vd.ImagePair("BAD", "S9", tmp_path / "small.png", tmp_path / "small.png"))
    state = TrainState.create(_cfg())
    with pytest.raises(ValueError, match="BAD"):
        register_batch(state, items)
    results = register_batch(state, items, continue_on_error=True)
    assert [r.pair_id for r in results] == ["P0", "P1", "P2", "BAD"]
    assert results[-1].error and all(r.error is None for r in results[:3])


def test_register_batch_results_deterministic(tmp_path, pairs):
    items = _manifest(tmp_path, pairs)
    vis, thr = pairs
    st = fit_arrays(vis, thr, _cfg(steps=3), log_every=0)
    register_batch(st, items, tmp_path / "r1")
    register_batch(st, items, tmp_path / "r2")
    assert (tmp_path / "r1" / "results.csv").read_bytes() == (tmp_path / "r2" / "results.csv").read_bytes()


def test_warp_convention_matches_registration_target():
    # registering B = warp(T, th) with invert(th) restores T in the interior
    img = faces.render_face(faces.FaceParams.sample(np.random.default_rng(2)), 64)
    th = spatial.make_theta(0.1, 0.05, 6.0, 1.05)
    back = spatial.warp_array(spatial.warp_array(img, th), spatial.invert(th))
    assert np.abs(back - img)[8:-8, 8:-8].mean() < 0.02
