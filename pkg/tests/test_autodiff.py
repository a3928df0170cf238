import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtmorph import autodiff as ad
from vtmorph import spatial
from vtmorph.autodiff import Tensor


def _leaf(shape, seed=0, dtype=np.float64):
    return Tensor(np.random.default_rng(seed).normal(size=shape).astype(dtype), requires_grad=True)


# tape semantics


def test_backward_rejects_non_scalar():
    x = _leaf((3,))
    with pytest.raises(ValueError, match="scalar"):
        (x * 2).backward()


def test_backward_rejects_detached():
    with pytest.raises(RuntimeError, match="detached"):
        Tensor(np.ones(3)).sum().backward()


def test_backward_returns_map_and_accumulates():
    x = _leaf((4,))
    grads = (x * x).sum().backward()
    assert np.allclose(grads[x], 2 * x.data)
    (x * 3.0).sum().backward()
    assert np.allclose(x.grad, 2 * x.data + 3.0)


def test_backward_linearity():
    with ad.precision(np.float64):
        x, w = _leaf((5,), 1), _leaf((5,), 2)
        f = lambda: (x * w).sum()
        g = lambda: (x.exp() if hasattr(x, "exp") else ad.exp(x)).sum()
        ga = f().backward()
        gb = g().backward()
        x.grad = w.grad = None
        both = (f() + g()).backward()
        assert np.allclose(both[x], ga[x] + gb[x])
        assert np.allclose(both[w], ga[w])


def test_shared_subexpression_gradient():
    x = _leaf((3,))
    y = x * 2.0
    grads = (y * y).sum().backward()
    assert np.allclose(grads[x], 8 * x.data)


def test_no_grad_builds_no_tape():
    x = _leaf((3,))
    with ad.no_grad():
        y = x * 2
    assert not y.requires_grad
    assert ad.is_grad_enabled()


def test_detach_cuts_graph():
    x = _leaf((3,))
    y = (x * 2).detach()
    assert not y.requires_grad and np.array_equal(y.data, 2 * x.data)


def test_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4,\)"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(4))


def test_default_dtype_and_precision_context():
    assert ad.get_default_dtype() == np.float32
    assert Tensor([1.0, 2.0]).dtype == np.float32
    with ad.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert ad.get_default_dtype() == np.float32


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_raises():
    with pytest.raises(FloatingPointError):
        ad.log(Tensor(np.array([-1.0, 1.0])))


def test_broadcast_gradient_unbroadcasts():
    a, b = _leaf((3, 4)), _leaf((4,), 1)
    grads = (a * b).sum().backward()
    assert grads[b].shape == (4,)
    assert np.allclose(grads[b], a.data.sum(axis=0))


def test_getitem_advanced_index_accumulates():
    x = _leaf((5,))
    grads = x[np.array([0, 0, 3])].sum().backward()
    assert np.allclose(grads[x], [2, 0, 0, 1, 0])


def test_softmax_rows_sum_to_one():
    s = ad.softmax(Tensor(np.random.default_rng(0).normal(size=(4, 7))), axis=-1)
    assert np.allclose(s.data.sum(-1), 1.0, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(0, 10**6))
def test_matmul_gradient_closed_form(n, k, m, seed):
    with ad.precision(np.float64):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.normal(size=(n, k)), requires_grad=True)
        b = Tensor(rng.normal(size=(k, m)), requires_grad=True)
        g = (a @ b).sum().backward()
        assert np.allclose(g[a], np.ones((n, m)) @ b.data.T)
        assert np.allclose(g[b], a.data.T @ np.ones((n, m)))


# gradcheck


def test_grad_check_eps_bounds():
    with pytest.raises(ValueError, match="eps"):
        ad.grad_check(lambda t: t.sum(), np.ones(2), eps=1e-2)


def test_grad_check_detects_corruption():
    f = lambda t: (ad.tanh(t) * 1.3).sum()
    x = np.random.default_rng(0).normal(size=(4,))
    assert ad.grad_check(f, x) < 1e-6
    with ad.corrupt_gradient("tanh"):
        assert ad.grad_check(f, x) > 0.1


def test_grad_check_runs_float64():
    seen = []
    ad.grad_check(lambda t: seen.append(t.dtype) or t.sum(), np.ones(2, dtype=np.float32))
    assert all(d == np.float64 for d in seen)


# torch oracle for the heavy kernels


def _torch():
    return pytest.importorskip("torch")


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (1, 1)])
def test_conv2d_matches_torch(stride, padding):
    torch = _torch()
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(2, 3, 9, 8)), rng.normal(size=(4, 3, 4, 4)), rng.normal(size=4)
    g = rng.normal(size=(2, 4, (9 + 2 * padding - 4) // stride + 1, (8 + 2 * padding - 4) // stride + 1))
    with ad.precision(np.float64):
        xt, wt, bt = (Tensor(v, requires_grad=True) for v in (x, w, b))
        out = ad.conv2d(xt, wt, bt, stride, padding)
        grads = (out * Tensor(g)).sum().backward()
    tx, tw, tb = (torch.tensor(v, requires_grad=True) for v in (x, w, b))
    ref = torch.nn.functional.conv2d(tx, tw, tb, stride, padding)
    (ref * torch.tensor(g)).sum().backward()
    assert np.allclose(out.data, ref.detach().numpy(), atol=1e-10)
    for mine, theirs in ((xt, tx), (wt, tw), (bt, tb)):
        assert np.allclose(grads[mine], theirs.grad.numpy(), atol=1e-10)


@pytest.mark.parametrize("stride,padding", [(2, 1), (1, 0)])
def test_conv_transpose2d_matches_torch(stride, padding):
    torch = _torch()
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 3, 5, 6)), rng.normal(size=(3, 2, 4, 4)), rng.normal(size=2)
    with ad.precision(np.float64):
        xt, wt, bt = (Tensor(v, requires_grad=True) for v in (x, w, b))
        out = ad.conv_transpose2d(xt, wt, bt, stride, padding)
        g = rng.normal(size=out.shape)
        grads = (out * Tensor(g)).sum().backward()
    tx, tw, tb = (torch.tensor(v, requires_grad=True) for v in (x, w, b))
    ref = torch.nn.functional.conv_transpose2d(tx, tw, tb, stride, padding)
    (ref * torch.tensor(g)).sum().backward()
    assert np.allclose(out.data, ref.detach().numpy(), atol=1e-10)
    for mine, theirs in ((xt, tx), (wt, tw), (bt, tb)):
        assert np.allclose(grads[mine], theirs.grad.numpy(), atol=1e-10)


def test_grid_sample_matches_torch():
    torch = _torch()
    rng = np.random.default_rng(2)
    img = rng.normal(size=(2, 3, 7, 9))
    theta = np.stack([spatial.make_theta(0.2, -0.1, 12, 1.1, 0.05), spatial.make_theta(-0.3, 0.2, -25, 0.9)])
    with ad.precision(np.float64):
        it, tt = Tensor(img, requires_grad=True), Tensor(theta, requires_grad=True)
        out = spatial.warp(it, tt)
        g = rng.normal(size=out.shape)
        grads = (out * Tensor(g)).sum().backward()
    ti, th = torch.tensor(img, requires_grad=True), torch.tensor(theta.reshape(2, 2, 3), requires_grad=True)
    grid = torch.nn.functional.affine_grid(th, list(img.shape), align_corners=False)
    ref = torch.nn.functional.grid_sample(ti, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    (ref * torch.tensor(g)).sum().backward()
    assert np.allclose(out.data, ref.detach().numpy(), atol=1e-10)
    assert np.allclose(grads[it], ti.grad.numpy(), atol=1e-10)
    assert np.allclose(grads[tt], th.grad.numpy().reshape(2, 6), atol=1e-8)


def test_instance_and_layer_norm_match_torch():
    torch = _torch()
    x = np.random.default_rng(3).normal(size=(2, 3, 5, 5))
    with ad.precision(np.float64):
        assert np.allclose(ad.instance_norm(Tensor(x)).data,
                           torch.nn.functional.instance_norm(torch.tensor(x), eps=1e-5).numpy(), atol=1e-10)
        assert np.allclose(ad.layer_norm(Tensor(x)).data,
                           torch.nn.functional.layer_norm(torch.tensor(x), (5,), eps=1e-5).numpy(), atol=1e-10)


def test_pooling_matches_torch():
    torch = _torch()
    x = np.random.default_rng(4).normal(size=(1, 2, 6, 6))
    with ad.precision(np.float64):
        assert np.allclose(ad.avg_pool2d(Tensor(x), 2).data, torch.nn.functional.avg_pool2d(torch.tensor(x), 2))
        assert np.allclose(ad.max_pool2d(Tensor(x), 2).data, torch.nn.functional.max_pool2d(torch.tensor(x), 2))


def test_adam_matches_torch():
    torch = _torch()
    rng = np.random.default_rng(5)
    p0 = rng.normal(size=(3, 4))
    grads = [rng.normal(size=(3, 4)) for _ in range(5)]
    mine = p0.copy()
    state = ad.OptimState(lr=1e-2, beta1=0.5, beta2=0.999, eps=1e-8)
    tp = torch.tensor(p0.copy(), requires_grad=True)
    opt = torch.optim.Adam([tp], lr=1e-2, betas=(0.5, 0.999), eps=1e-8)
    for g in grads:
        ad.adam_step([mine], [g], state)
        tp.grad = torch.tensor(g)
        opt.step()
    assert np.allclose(mine, tp.detach().numpy(), atol=1e-12)


def test_adam_hand_computed_first_step():
    p = np.array([1.0])
    ad.adam_step([p], [np.array([0.5])], ad.OptimState(lr=0.1))
    # bias-corrected first step moves by lr * sign(g)
    assert p[0] == pytest.approx(0.9, abs=1e-7)


def test_adam_none_grad_leaves_param():
    p = np.array([1.0, 2.0])
    ad.adam_step([p], [None], ad.OptimState(lr=0.1))
    assert np.array_equal(p, [1.0, 2.0])


def test_optim_state_validation():
    with pytest.raises(ValueError, match="lr"):
        ad.OptimState(lr=0.0)


# checkpoint


def test_checkpoint_round_trip(tmp_path):
    tensors = {"b": np.arange(6, dtype=np.float32).reshape(2, 3), "a": np.array([1.5, -2.0])}
    path = ad.save_checkpoint(tmp_path / "c.ckpt", tensors, {"step": 3, "note": "x"})
    assert path.read_bytes().startswith(ad.MAGIC)
    back, meta = ad.load_checkpoint(path)
    assert meta["step"] == 3
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and np.array_equal(back[k], v)


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(ad.CheckpointError):
        ad.load_checkpoint(tmp_path / "bad.ckpt")


def test_checkpoint_truncated(tmp_path):
    path = ad.save_checkpoint(tmp_path / "c.ckpt", {"a": np.ones(100)}, {})
    path.write_bytes(path.read_bytes()[:-40])
    with pytest.raises(ad.CheckpointError):
        ad.load_checkpoint(path)
