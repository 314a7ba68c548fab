"""Tests for the reverse-mode differentiation tape and optimizer."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from np3m import autodiff as ad
from np3m.autodiff import AdamW, AutodiffError, Tensor, backward, no_grad


def _fd_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar f at array x."""
    g = np.zeros_like(x, dtype=float)
    flat = g.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + eps
        hi = f(x)
        xf[i] = orig - eps
        lo = f(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2 * eps)
    return g


def _check_grad(build, x0, tol=1e-6):
    """Compare backward() against finite differences for scalar build(x)."""
    t = Tensor(x0.copy(), requires_grad=True)
    out = build(t)
    backward(out)
    fd = _fd_grad(lambda x: build(Tensor(x)).item(), x0.copy())
    denom = max(np.linalg.norm(fd), 1e-12)
    assert np.linalg.norm(t.grad.data - fd) / denom < tol


def test_arithmetic_gradients():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(3, 4))
    y = Tensor(rng.normal(size=(3, 4)) + 2.0)
    _check_grad(lambda t: ad.sum_(ad.mul(ad.add(t, y), ad.sub(t, 1.5))), x0)
    _check_grad(lambda t: ad.sum_(ad.div(t, y)), x0)
    _check_grad(lambda t: ad.sum_(ad.div(y, ad.add(t, 5.0))), x0)


def test_matmul_transpose_reshape_gradients():
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(3, 4))
    w = Tensor(rng.normal(size=(4, 2)))
    _check_grad(lambda t: ad.sum_(ad.matmul(t, w)), x0)
    _check_grad(lambda t: ad.sum_(ad.square(ad.transpose(t))), x0)
    _check_grad(lambda t: ad.sum_(ad.square(ad.reshape(t, (2, 6)))), x0)
    with pytest.raises(AutodiffError):
        ad.matmul(Tensor(np.zeros(3)), Tensor(np.zeros(3)))


def test_reduction_and_broadcast_gradients():
    rng = np.random.default_rng(2)
    x0 = rng.normal(size=(3, 4))
    _check_grad(lambda t: ad.sum_(ad.square(ad.sum_(t, axis=0))), x0)
    _check_grad(lambda t: ad.sum_(ad.square(ad.mean_(t, axis=1, keepdims=True))), x0)
    _check_grad(
        lambda t: ad.sum_(ad.square(ad.broadcast_to(ad.reshape(t, (3, 4, 1)), (3, 4, 5)))),
        x0,
    )
    # broadcasting in arithmetic reduces correctly
    row = rng.normal(size=(1, 4))
    _check_grad(lambda t: ad.sum_(ad.mul(t, Tensor(np.ones((3, 4))))), row)


def test_elementwise_gradients():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(10,))
    _check_grad(lambda t: ad.sum_(ad.exp(t)), x0)
    _check_grad(lambda t: ad.sum_(ad.sqrt(ad.add(ad.square(t), 1.0))), x0)
    _check_grad(lambda t: ad.sum_(ad.mul(ad.sin(t), ad.cos(t))), x0)
    _check_grad(lambda t: ad.sum_(ad.silu(t)), x0)
    _check_grad(lambda t: ad.sum_(ad.sigmoid(t)), x0)


def test_concatenate_and_narrow_gradients():
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=(4, 3))

    def build(t):
        joined = ad.concatenate([t, ad.mul(t, 2.0)], axis=0)
        return ad.sum_(ad.square(ad.narrow(joined, 0, 2, 4)))

    _check_grad(build, x0)


def test_layer_norm_gradient_and_zero_rows():
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=(3, 6))
    scale = Tensor(rng.normal(size=6) + 1.0)
    offset = Tensor(rng.normal(size=6))
    _check_grad(lambda t: ad.sum_(ad.square(ad.layer_norm(t, scale, offset))), x0, tol=1e-5)
    # constant rows normalize to the offset; exactly-zero rows stay zero
    const = ad.layer_norm(Tensor(np.full((1, 6), 3.0)), scale, offset)
    assert np.allclose(const.data, offset.data, atol=1e-2)
    zeros = ad.layer_norm(Tensor(np.zeros((2, 6))), scale, offset)
    assert np.all(zeros.data == 0.0)


def test_l2_norm_zero_vector_has_zero_gradient():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    backward(ad.sum_(ad.l2_norm(x)))
    assert np.all(np.isfinite(x.grad.data))
    assert np.all(x.grad.data == 0.0)
    rng = np.random.default_rng(6)
    _check_grad(lambda t: ad.sum_(ad.l2_norm(t)), rng.normal(size=(4, 3)))


def test_silu_at_zero():
    assert ad.silu(Tensor(0.0)).item() == 0.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_gather_scatter_adjoint(seed):
    # <gather(a, idx), v> == <a, scatter_add(v, idx, n)> for all a, v
    rng = np.random.default_rng(seed)
    n = rng.integers(2, 8)
    idx = rng.integers(0, n, size=rng.integers(1, 12))
    a = rng.normal(size=(n, 3))
    v = rng.normal(size=(len(idx), 3))
    lhs = np.sum(ad.gather(Tensor(a), idx).data * v)
    rhs = np.sum(a * ad.scatter_add(Tensor(v), idx, n).data)
    assert np.isclose(lhs, rhs)


def test_gather_scatter_gradients():
    rng = np.random.default_rng(7)
    idx = np.array([0, 2, 2, 1])
    _check_grad(
        lambda t: ad.sum_(ad.square(ad.gather(t, idx))), rng.normal(size=(3, 2))
    )
    _check_grad(
        lambda t: ad.sum_(ad.square(ad.scatter_add(t, idx, 5))),
        rng.normal(size=(4, 2)),
    )
    with pytest.raises(AutodiffError):
        ad.gather(Tensor(np.zeros((3, 2))), np.array([3]))


def test_permute_axis_gradient():
    rng = np.random.default_rng(8)
    perm = np.array([2, 0, 3, 1])
    weight = Tensor(rng.normal(size=(4, 2)))
    _check_grad(
        lambda t: ad.sum_(ad.mul(ad.permute_axis(t, perm, 0), weight)),
        rng.normal(size=(4, 2)),
    )


def test_fft_pair_roundtrip_and_adjoint():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 3, 4, 5))
    back = ad.ifft_pair(ad.fft_pair(Tensor(x), (0, 1, 2)), (0, 1, 2))
    assert np.abs(back.data - x).max() < 1e-12
    # adjoint identity over every axis subset, including a non-transformed
    # trailing channel axis
    for axes in [(0,), (1,), (0, 1), (0, 1, 2)]:
        a = rng.normal(size=(2, 3, 4, 5))
        b = rng.normal(size=(2, 3, 4, 5))
        t = Tensor(a, requires_grad=True)
        out = ad.sum_(ad.mul(ad.fft_pair(t, axes), Tensor(b)))
        backward(out)
        fd = _fd_grad(lambda arr: float(np.sum(ad.fft_pair(Tensor(arr), axes).data * b)), a.copy())
        assert np.linalg.norm(t.grad.data - fd) / np.linalg.norm(fd) < 1e-7


def test_fft_pair_matches_numpy_values():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(2, 4, 4))
    z = np.fft.fftn(x[0] + 1j * x[1], axes=(0, 1))
    out = ad.fft_pair(Tensor(x), (0, 1)).data
    assert np.abs(out[0] - z.real).max() < 1e-12
    assert np.abs(out[1] - z.imag).max() < 1e-12


def test_backward_requires_scalar_and_runs_once():
    x = Tensor(np.ones(3), requires_grad=True)
    vec = ad.mul(x, 2.0)
    with pytest.raises(AutodiffError):
        backward(vec)
    out = ad.sum_(vec)
    backward(out)
    with pytest.raises(AutodiffError):
        backward(out)


def test_gradient_accumulates_across_backwards():
    x = Tensor(np.ones(3), requires_grad=True)
    backward(ad.sum_(ad.mul(x, 2.0)))
    backward(ad.sum_(ad.mul(x, 3.0)))
    assert np.allclose(x.grad.data, 5.0)
    ad.zero_grads([x])
    assert x.grad is None


def test_no_grad_blocks_taping():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = ad.sum_(ad.square(x))
    assert not y.requires_grad


def test_double_backward_analytic():
    # s(x) = sum(sin(x)^2); with g = ds/dx = sin(2x),
    # d/dx sum(g^2) = d/dx sum(sin(2x)^2) = 2*sin(4x)
    x = Tensor(np.array([0.3, -1.1, 2.5]), requires_grad=True)
    s = ad.sum_(ad.square(ad.sin(x)))
    g = backward(s, wrt=[x], create_graph=True)[id(x)]
    ad.zero_grads([x])
    backward(ad.sum_(ad.square(g)))
    assert np.abs(x.grad.data - 2.0 * np.sin(4.0 * x.data)).max() < 1e-12


def test_double_backward_through_matmul():
    rng = np.random.default_rng(11)
    w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    x0 = rng.normal(size=(2, 3))

    def force_loss(wt, x_arr):
        x = Tensor(x_arr, requires_grad=True)
        e = ad.sum_(ad.square(ad.matmul(x, wt)))
        gx = backward(e, wrt=[x], create_graph=True)[id(x)]
        return ad.sum_(ad.square(gx))

    backward(force_loss(w, x0))
    fd = _fd_grad(lambda arr: force_loss(Tensor(arr), x0).item(), w.data.copy(), eps=1e-5)
    assert np.linalg.norm(w.grad.data - fd) / np.linalg.norm(fd) < 1e-6


def test_adamw_minimizes_quadratic_bowl():
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = AdamW([x], lr=0.1)
    for _ in range(500):
        ad.zero_grads([x])
        backward(ad.sum_(ad.square(x)))
        opt.step()
    assert np.sum(x.data**2) < 1e-10


def test_adamw_warmup_ramps_linearly():
    x = Tensor(np.zeros(1), requires_grad=True)
    opt = AdamW([x], lr=1.0, warmup_steps=4)
    lrs = []
    for _ in range(5):
        opt.step_count += 1
        lrs.append(opt.lr)
        opt.step_count -= 1
        opt.step(grads=[np.zeros(1)])
    assert np.allclose(lrs, [0.25, 0.5, 0.75, 1.0, 1.0])


def test_adamw_plateau_decay_sequence():
    # metrics 5, 5, 5 with patience 2: the second and third epochs are "bad",
    # so exactly one decay fires at the third epoch
    opt = AdamW([Tensor(np.zeros(1), requires_grad=True)], lr=1.0, plateau_patience=2)
    decays = [opt.epoch_end(m) for m in (5.0, 5.0, 5.0)]
    assert decays == [False, False, True]
    assert np.isclose(opt.lr_scale, 0.8)
    assert opt.decay_events == 1
    # an improvement resets the bad-epoch counter
    assert opt.epoch_end(4.0) is False
    assert opt.bad_epochs == 0


def test_adamw_weight_decay_shrinks_parameters():
    x = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW([x], lr=0.1, weight_decay=0.5)
    opt.step(grads=[np.zeros(1)])
    assert x.data[0] == pytest.approx(1.0 - 0.1 * 0.5)


def test_adamw_state_roundtrip():
    rng = np.random.default_rng(12)
    x = Tensor(rng.normal(size=4), requires_grad=True)
    opt = AdamW([x], lr=0.05, warmup_steps=3, plateau_patience=1)
    for _ in range(5):
        opt.step(grads=[rng.normal(size=4)])
    opt.epoch_end(1.0)
    opt.epoch_end(2.0)
    state = opt.state_dict()
    fresh = AdamW([x], lr=0.05, warmup_steps=3, plateau_patience=1)
    fresh.load_state_dict(state)
    g = rng.normal(size=4)
    x1 = x.data.copy()
    opt.step(grads=[g])
    after_orig = x.data.copy()
    x.data = x1
    fresh.step(grads=[g])
    assert np.array_equal(x.data, after_orig)
