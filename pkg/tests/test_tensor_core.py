import math

import numpy as np
import pytest
from fd import gradcheck

from pcdarts.tensor import (
    SGD,
    Adam,
    NumericalError,
    ShapeError,
    Tensor,
    backward,
    checkpoint,
    cosine_lr,
    kernels,
    no_grad,
)
from pcdarts.tensor import functional as F

SEEDS = range(20)


def _shape(rng, lo=1, hi=4):
    return tuple(int(v) for v in rng.integers(lo, hi, size=4))


def test_conv_all_ones_center_and_corner():
    out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), stride=1, padding=1)
    assert out.data[0, 0, 1, 1] == 9.0
    assert out.data[0, 0, 0, 0] == 4.0
    assert out.data[0, 0, 2, 2] == 4.0


def test_softmax_symmetric():
    np.testing.assert_array_equal(F.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_cross_entropy_uniform_is_log_classes():
    loss = F.cross_entropy(Tensor(np.zeros((3, 10))), [0, 4, 9])
    assert loss.item() == pytest.approx(math.log(10), abs=1e-12)
    assert loss.item() == pytest.approx(2.302585, abs=1e-6)


def test_product_rule():
    w = Tensor(2.0, requires_grad=True)
    x = Tensor(3.0, requires_grad=True)
    backward(F.mul(w, x))
    assert w.grad == 3.0
    assert x.grad == 2.0


def test_softmax_cross_entropy_gradient_is_p_minus_onehot(rng):
    z = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    y = np.array([0, 3, 1, 4])
    backward(F.cross_entropy(z, y))
    p = np.exp(z.data) / np.exp(z.data).sum(axis=1, keepdims=True)
    p[np.arange(4), y] -= 1
    np.testing.assert_allclose(z.grad, p / 4, rtol=1e-12, atol=1e-15)


def test_gradients_accumulate_over_branches(rng):
    x = Tensor(rng.normal(size=(3,)), requires_grad=True)
    branches = [F.scale(x, c) for c in (1.0, 2.0, -0.5)]
    total = F.sum_all(F.add(F.add(branches[0], branches[1]), branches[2]))
    backward(total)
    np.testing.assert_allclose(x.grad, np.full(3, 2.5))


def test_grads_accumulate_across_backward_calls():
    x = Tensor(1.5, requires_grad=True)
    backward(F.scale(x, 2.0))
    backward(F.scale(x, 3.0))
    assert x.grad == 5.0


# ---------------------------------------------------------------------------
# finite differences, one parametrised family per primitive

@pytest.mark.parametrize("seed", SEEDS)
def test_fd_elementwise(seed):
    rng = np.random.default_rng(seed)
    s = _shape(rng)
    a, b = rng.normal(size=s), rng.normal(size=(1, s[1], 1, 1))
    assert gradcheck(lambda t: F.add(F.mul(t[0], t[1]), F.sub(t[0], t[1])), [a, b], seed) < 1e-4
    assert gradcheck(lambda t: F.scale(F.square(t[0]), -1.7), [a], seed) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_fd_matmul(seed):
    rng = np.random.default_rng(seed)
    n, k, m = (int(v) for v in rng.integers(1, 6, size=3))
    assert gradcheck(lambda t: F.matmul(t[0], t[1]), [rng.normal(size=(n, k)), rng.normal(size=(k, m))], seed) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_fd_conv2d(seed):
    rng = np.random.default_rng(seed)
    groups = int(rng.choice([1, 2]))
    cin = groups * int(rng.integers(1, 3))
    cout = groups * int(rng.integers(1, 3))
    k = int(rng.choice([1, 3]))
    stride, dilation = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    hw = int(rng.integers(k + (k - 1) * (dilation - 1), 7))
    x = rng.normal(size=(2, cin, hw, hw))
    w = rng.normal(size=(cout, cin // groups, k, k))
    err = gradcheck(lambda t: F.conv2d(t[0], t[1], stride, pad, dilation, groups), [x, w], seed)
    assert err < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_fd_depthwise_conv2d(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 4))
    k = int(rng.choice([3, 5]))
    dilation = int(rng.integers(1, 3))
    stride = int(rng.integers(1, 3))
    pad = dilation * (k - 1) // 2
    x = rng.normal(size=(2, c, 6, 6))
    w = rng.normal(size=(c, 1, k, k))
    err = gradcheck(lambda t: F.conv2d(t[0], t[1], stride, pad, dilation, groups=c), [x, w], seed)
    assert err < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_fd_pools(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, int(rng.integers(1, 4)), 6, 6))
    stride = int(rng.integers(1, 3))
    assert gradcheck(lambda t: F.max_pool2d(t[0], 3, stride, 1), [x], seed) < 1e-4
    assert gradcheck(lambda t: F.avg_pool2d(t[0], 3, stride, 1), [x], seed) < 1e-4
    assert gradcheck(lambda t: F.max_pool2d(t[0], 2, 2), [x], seed) < 1e-4
    assert gradcheck(lambda t: F.global_avg_pool(t[0]), [x], seed) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("training", [True, False])
def test_fd_batch_norm(seed, training):
    rng = np.random.default_rng(seed)
    s = (int(rng.integers(2, 4)), int(rng.integers(1, 4)), 3, 3)
    x = rng.normal(size=s) * 2 + 1
    gamma, beta = rng.normal(size=s[1]), rng.normal(size=s[1])
    rm, rv = rng.normal(size=s[1]), rng.uniform(0.5, 2, size=s[1])

    def fn(t):
        return F.batch_norm(t[0], rm.copy(), rv.copy(), t[1], t[2], training=training)

    assert gradcheck(fn, [x, gamma, beta], seed) < 1e-4
    assert gradcheck(lambda t: F.batch_norm(t[0], rm.copy(), rv.copy(), training=training), [x], seed) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_fd_relu_softmax_xent(seed):
    rng = np.random.default_rng(seed)
    s = _shape(rng, 1, 5)
    x = rng.normal(size=s)
    assert gradcheck(lambda t: F.relu(t[0]), [x], seed) < 1e-4
    axis = int(rng.integers(0, 4))
    assert gradcheck(lambda t: F.softmax(t[0], axis=axis), [x], seed) < 1e-4
    n, c = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    labels = rng.integers(0, c, size=n)
    assert gradcheck(lambda t: F.cross_entropy(t[0], labels), [rng.normal(size=(n, c))], seed) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_fd_structural(seed):
    rng = np.random.default_rng(seed)
    c1, c2 = (int(v) for v in rng.integers(1, 4, size=2))
    a, b = rng.normal(size=(2, c1, 3, 3)), rng.normal(size=(2, c2, 3, 3))
    assert gradcheck(lambda t: F.concat([t[0], t[1]], axis=1), [a, b], seed) < 1e-4
    x = rng.normal(size=(2, c1 + c2, 3, 3))
    assert gradcheck(lambda t: F.narrow(t[0], 1, c1, c1 + c2), [x], seed) < 1e-4
    perm = rng.permutation(c1 + c2)
    assert gradcheck(lambda t: F.take(t[0], 1, perm), [x], seed) < 1e-4
    assert gradcheck(lambda t: F.select(t[0], 1), [x], seed) < 1e-4
    assert gradcheck(lambda t: F.reshape(t[0], (2, -1)), [x], seed) < 1e-4
    w = rng.normal(size=3)
    parts = [rng.normal(size=(2, 2, 3, 3)) for _ in range(3)]
    assert gradcheck(lambda t: F.mix(t[0], t[1:]), [w, *parts], seed) < 1e-4
    assert gradcheck(lambda t: F.mean_all(F.square(t[0])), [x], seed) < 1e-4


# ---------------------------------------------------------------------------
# errors and invariants

def test_shape_mismatch_names_primitive_and_extents():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="conv2d: groups=2"):
        F.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 1, 3, 3))), groups=2)
    with pytest.raises(ShapeError, match="add"):
        F.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_conv_dtype_mismatch_rejected():
    x = Tensor(np.zeros((1, 2, 3, 3), np.float64))
    w = Tensor(np.zeros((2, 1, 3, 3), np.float32))
    with pytest.raises(ShapeError, match="conv2d: input dtype float64"):
        F.conv2d(x, w, groups=2)


def test_invalid_attrs_rejected():
    x, w = Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3)))
    with pytest.raises(ShapeError):
        F.conv2d(x, w, stride=0)
    with pytest.raises(ShapeError):
        F.conv2d(x, w, dilation=0)


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_output_is_fatal():
    with pytest.raises(NumericalError, match="scale"):
        F.scale(Tensor([1e308]), 1e10)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(F.scale(x, 2.0))


def test_no_record_without_grad():
    from pcdarts.tensor import tape
    F.add(Tensor(1.0), Tensor(2.0))
    assert not tape().records
    with no_grad():
        F.add(Tensor(1.0, requires_grad=True), Tensor(2.0))
    assert not tape().records


def test_tape_is_topologically_ordered(rng):
    from pcdarts.tensor import tape
    x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    y = F.relu(F.matmul(x, x))
    F.sum_all(F.add(y, x))
    produced = set()
    for rec in tape().records:
        for inp in rec.inputs:
            assert inp.is_leaf or id(inp) in produced
        produced.add(id(rec.out))


def test_batch_norm_eval_is_per_channel_affine(rng):
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
    g, b = Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3))
    x1 = rng.normal(size=(4, 3, 2, 2))
    x2 = x1.copy()
    x2[1:] = rng.normal(size=(3, 3, 2, 2)) * 10
    y1 = F.batch_norm(Tensor(x1), rm, rv, g, b, training=False).data
    y2 = F.batch_norm(Tensor(x2), rm, rv, g, b, training=False).data
    np.testing.assert_array_equal(y1[0], y2[0])
    scale = g.data / np.sqrt(rv + 1e-5)
    np.testing.assert_allclose(y1, x1 * scale[None, :, None, None]
                               + (b.data - rm * scale)[None, :, None, None], rtol=1e-12, atol=1e-12)


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(3, 1, 3, 3))
    a = F.conv2d(Tensor(x), Tensor(w), 1, 2, 2, 3).data
    b = F.conv2d(Tensor(x), Tensor(w), 1, 2, 2, 3).data
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("name", kernels.available())
def test_kernel_backends_agree_with_fallback(name, rng):
    from pcdarts.tensor import _fallback
    xp = rng.normal(size=(2, 3, 9, 9))
    w = rng.normal(size=(3, 3, 3))
    g = rng.normal(size=(2, 3, 3, 3))
    prev = kernels.BACKEND
    kernels.use(name)
    try:
        np.testing.assert_allclose(kernels.dw_conv_forward(xp, w, 2, 2, 3, 3),
                                   _fallback.dw_conv_forward(xp, w, 2, 2, 3, 3), rtol=1e-12)
        for a, b in zip(kernels.dw_conv_backward(xp, w, g, 2, 2), _fallback.dw_conv_backward(xp, w, g, 2, 2)):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
        for a, b in zip(kernels.window_max_forward(xp, 3, 3, 3, 3), _fallback.window_max_forward(xp, 3, 3, 3, 3)):
            np.testing.assert_array_equal(a, b)
        out, arg = kernels.window_max_forward(xp, 3, 3, 3, 3)
        np.testing.assert_array_equal(kernels.window_max_backward(g, arg, xp.shape, 3, 3),
                                      _fallback.window_max_backward(g, arg, xp.shape, 3, 3))
        np.testing.assert_allclose(kernels.window_sum_forward(xp, 3, 2, 4, 4),
                                   _fallback.window_sum_forward(xp, 3, 2, 4, 4), rtol=1e-12)
        np.testing.assert_allclose(kernels.window_sum_backward(g, xp.shape, 3, 3),
                                   _fallback.window_sum_backward(g, xp.shape, 3, 3), rtol=1e-12)
        cols = rng.normal(size=(2, 3, 3, 3, 3, 3))
        np.testing.assert_allclose(kernels.col2im(cols, xp.shape, 2, 1),
                                   _fallback.col2im(cols, xp.shape, 2, 1), rtol=1e-12, atol=1e-12)
        # float32 path
        x32 = xp.astype(np.float32)
        assert kernels.dw_conv_forward(x32, w.astype(np.float32), 1, 1, 7, 7).dtype == np.float32
    finally:
        kernels.use(prev)


# ---------------------------------------------------------------------------
# optimizers and schedule

def _param(v, g):
    p = Tensor(np.array([v]), requires_grad=True)
    p.grad = np.array([g])
    return p


def test_sgd_plain_step():
    p = _param(0.0, 1.0)
    SGD([p], momentum=0.0, weight_decay=0.0).step(0.1)
    assert p.data[0] == pytest.approx(-0.1)


def test_sgd_weight_decay():
    p = _param(1.0, 0.0)
    SGD([p], momentum=0.0, weight_decay=0.1).step(1.0)
    assert p.data[0] == pytest.approx(0.9)


def test_sgd_momentum_two_steps():
    p = _param(0.0, 1.0)
    opt = SGD([p], momentum=0.9, weight_decay=0.0)
    opt.step(0.1)
    p.grad = np.array([1.0])
    opt.step(0.1)
    # buffers: 1, then 0.9*1 + 1 = 1.9
    assert p.data[0] == pytest.approx(-0.1 - 0.19)


def test_adam_first_step_hand_computed():
    g, lr = 0.3, 6e-4
    p = _param(1.0, g)
    Adam([p], lr=lr, betas=(0.5, 0.999), weight_decay=0.0).step()
    m = 0.5 * g / (1 - 0.5)
    v = 0.001 * g * g / (1 - 0.999)
    assert p.data[0] == pytest.approx(1.0 - lr * m / (math.sqrt(v) + 1e-8), rel=1e-12)
    # bias-corrected first step moves by lr * sign(g) up to eps
    assert 1.0 - p.data[0] == pytest.approx(lr, rel=1e-6)


def test_adam_second_step_hand_computed():
    p = _param(0.0, 1.0)
    opt = Adam([p], lr=0.1, betas=(0.5, 0.999))
    opt.step()
    p.grad = np.array([-2.0])
    opt.step()
    m = 0.5 * 0.5 * 1.0 + 0.5 * -2.0
    v = 0.999 * 0.001 * 1.0 + 0.001 * 4.0
    step2 = 0.1 * (m / 0.75) / (math.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    step1 = 0.1 * 1.0 / (1.0 + 1e-8)
    assert p.data[0] == pytest.approx(-step1 - step2, rel=1e-12)
    assert opt.steps == 2


def test_optimizer_rejects_missing_grad():
    p = Tensor(np.zeros(2), requires_grad=True, name="w0")
    with pytest.raises(RuntimeError, match="w0"):
        SGD([p]).step(0.1)
    with pytest.raises(RuntimeError, match="w0"):
        Adam([p]).step()


def test_optimizer_does_not_zero_grads():
    p = _param(0.0, 1.0)
    opt = SGD([p], momentum=0.0)
    opt.step(0.1)
    assert p.grad is not None
    opt.zero_grads()
    assert p.grad is None


def test_cosine_schedule():
    assert cosine_lr(0, 100, 0.1) == 0.1
    assert cosine_lr(100, 100, 0.1) == 0.0
    assert cosine_lr(50, 100, 0.1) == pytest.approx(0.05, abs=1e-15)
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 0.1)
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 0.1)


# ---------------------------------------------------------------------------
# checkpoint container

def test_checkpoint_roundtrip(tmp_path, rng):
    tensors = {"a": rng.normal(size=(2, 3)), "b.c": rng.normal(size=4).astype(np.float32),
               "scalar": np.array(1.5), "ids": np.arange(5, dtype=np.int64), "ünï": np.zeros((0, 3))}
    path = tmp_path / "x.pcnt"
    checkpoint.save(path, tensors)
    raw = path.read_bytes()
    assert raw[:4] == b"PCNT"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 5
    back = checkpoint.load(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype
        np.testing.assert_array_equal(back[k], tensors[k])


def test_checkpoint_layout_bytes():
    blob = checkpoint.dumps({"w": np.array([1.0, 2.0], dtype=np.float32)})
    expected = (b"PCNT" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
                + (1).to_bytes(4, "little") + b"w" + (1).to_bytes(4, "little")
                + (2).to_bytes(8, "little") + bytes([0])
                + np.array([1.0, 2.0], dtype="<f4").tobytes())
    assert blob == expected


def test_checkpoint_rejects_garbage():
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.loads(b"NOPE")
    blob = checkpoint.dumps({"w": np.ones(4)})
    with pytest.raises(checkpoint.CheckpointError, match="truncated"):
        checkpoint.loads(blob[:-3])
