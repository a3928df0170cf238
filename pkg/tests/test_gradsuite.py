import numpy as np
import pytest

from vtmorph import autodiff as ad
from vtmorph import gradsuite


def test_registry_covers_every_forward_op():
    required = {"add", "sub", "mul", "div", "neg", "pow", "exp", "log", "sqrt", "abs", "relu", "leaky_relu",
                "sigmoid", "tanh", "softmax", "log_softmax", "matmul", "linear", "sum", "mean", "reshape",
                "transpose", "concatenate", "slice", "conv2d", "conv_transpose2d", "avg_pool2d", "max_pool2d",
                "instance_norm", "layer_norm", "affine_grid", "grid_sample"}
    assert required <= set(gradsuite.REGISTRY)
    assert set(gradsuite.TAPE_OP) == set(gradsuite.REGISTRY)


@pytest.mark.parametrize("name", sorted(gradsuite.REGISTRY))
def test_case_inputs_are_small(name):
    # kernels need a minimal spatial extent, so image-shaped probes go up to 32 elements
    sizes = [x.size for _, _, x in gradsuite.REGISTRY[name](np.random.default_rng(0))]
    assert max(sizes) <= 32 and sizes[0] >= 4


def test_small_suite_passes():
    res = gradsuite.run_suite(seeds=5)
    assert res.passed, res.worst
    assert res.worst_op[1] < gradsuite.THRESHOLD


def test_sum_of_squares_and_cross_entropy():
    with ad.precision(np.float64):
        x = np.random.default_rng(0).normal(size=8)
        assert ad.grad_check(lambda t: (t * t).sum(), x) < 1e-6
        onehot = np.eye(5)[[1, 3, 0]]
        logits = np.random.default_rng(1).normal(size=(3, 5))
        ce = lambda t: -(ad.log_softmax(t, axis=-1) * ad.Tensor(onehot)).sum()
        assert ad.grad_check(ce, logits) < 1e-4


@pytest.mark.parametrize("op", ["tanh", "conv2d", "grid_sample", "matmul"])
def test_corrupted_backward_is_caught(op):
    with ad.corrupt_gradient(gradsuite.TAPE_OP[op]):
        res = gradsuite.run_suite(seeds=2, ops=[op])
    assert not res.passed and res.failures == [op]


def test_unknown_op_rejected():
    with pytest.raises(KeyError, match="unregistered"):
        gradsuite.run_suite(seeds=1, ops=["nope"])
