import math
import threading

import numpy as np
import pytest

from harmony import tensor as T
from harmony.errors import ContractError, ShapeError


def gradcheck(fn, shapes, rng, h=1e-5, tol=1e-4):
    """Central finite differences against the analytic gradient.

    fn takes len(shapes) tensors and returns one tensor of any shape; the
    check projects the output with a fixed random weight so the whole
    Jacobian is exercised.
    """
    datas = [rng.standard_normal(s) for s in shapes]
    proj = {}

    def run():
        T.reset_graph()
        ts = [T.Tensor(d, requires_grad=True) for d in datas]
        out = fn(*ts)
        if "w" not in proj:
            proj["w"] = rng.standard_normal(out.data.shape)
        return T.tsum(T.mul(out, T.Tensor(proj["w"]))), ts

    loss, ts = run()
    T.backward(loss)
    analytic = [t.grad.copy() for t in ts]
    for k, d in enumerate(datas):
        numeric = np.zeros_like(d)
        flat, nflat = d.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = run()[0].item()
            flat[i] = orig - h
            down = run()[0].item()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * h)
        denom = max(1.0, float(np.abs(numeric).max()))
        err = float(np.abs(analytic[k] - numeric).max()) / denom
        assert err < tol, f"input {k}: rel err {err:.3g}"


def test_matmul_identity():
    a = T.Tensor([[3.0, 4.0], [5.0, 6.0]])
    out = T.matmul(T.Tensor(np.eye(2)), a)
    assert np.array_equal(out.data, a.data)


def test_matmul_direct():
    out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))


def test_matmul_sum_gradient_is_column_sums(rng):
    a = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = T.Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    T.backward(T.tsum(T.matmul(a, b)))
    expected = np.repeat(b.data.sum(axis=1)[None, :], 3, axis=0)
    assert np.abs(a.grad - expected).max() < 1e-12
    gradcheck(lambda x, y: T.matmul(x, y), [(3, 4), (4, 5)], rng, tol=1e-6)


@pytest.mark.parametrize("trial", range(20))
def test_gradients_match_finite_differences(trial):
    """Every differentiable op, fresh random input per trial."""
    rng = np.random.default_rng(9000 + trial)
    gradcheck(lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)], rng)
    gradcheck(lambda a, b: T.add(a, b), [(3, 4), (3, 4)], rng)
    gradcheck(lambda a, b: T.add(a, b), [(3, 4), (4,)], rng)
    gradcheck(lambda a, b: T.add(a, b), [(3, 4), ()], rng)
    gradcheck(lambda a, b: T.sub(a, b), [(3, 4), (3, 4)], rng)
    gradcheck(lambda a, b: T.mul(a, b), [(3, 4), (3, 4)], rng)
    gradcheck(lambda a, b: T.mul(a, b), [(3, 4), (4,)], rng)
    gradcheck(lambda a, b: T.mul(a, b), [(3, 4), ()], rng)
    gradcheck(lambda a: T.scale(a, -1.7), [(3, 4)], rng)
    gradcheck(lambda a: T.shift(a, 0.3), [(3, 4)], rng)
    gradcheck(lambda a: T.sigmoid(a), [(3, 4)], rng)
    gradcheck(lambda a: T.tanh(a), [(3, 4)], rng)
    gradcheck(lambda a: T.gelu(a), [(3, 4)], rng)
    gradcheck(lambda a: T.layer_norm(a), [(3, 6)], rng)
    gradcheck(lambda a: T.softmax(a), [(3, 5)], rng)
    gradcheck(lambda a: T.tsum(a), [(3, 4)], rng)
    gradcheck(lambda a: T.mean_pool(a), [(5, 3)], rng)
    gradcheck(lambda a: T.transpose(a), [(3, 4)], rng)
    gradcheck(lambda a: T.reshape(a, (2, 6)), [(3, 4)], rng)
    gradcheck(lambda a, b: T.concat_rows([a, b]), [(2, 3), (4, 3)], rng)
    gradcheck(lambda a, b: T.concat_cols([a, b]), [(3, 2), (3, 4)], rng)
    gradcheck(lambda a: T.narrow_rows(a, 1, 2), [(4, 3)], rng)
    gradcheck(lambda a: T.narrow_cols(a, 0, 2), [(3, 4)], rng)
    gradcheck(lambda a: T.take_rows(a, [0, 2, 0, 1]), [(3, 4)], rng)
    gradcheck(lambda a, b: T.mse(a, b), [(3, 4), (3, 4)], rng)
    targets = rng.integers(0, 5, size=4)
    gradcheck(lambda lg: T.softmax_cross_entropy(lg, targets), [(4, 5)], rng)
    labels = rng.integers(0, 2, size=(4, 1)).astype(float)
    gradcheck(lambda lg: T.bce_with_logits(lg, labels), [(4, 1)], rng)


def test_backward_sum_is_ones():
    x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(T.tsum(x))
    assert x.grad.tolist() == [1.0, 1.0, 1.0]


def test_backward_elementwise_square():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.tsum(T.mul(x, x)))
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_twice_doubles_gradient():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    loss = T.tsum(T.mul(x, x))
    T.backward(loss)
    first = x.grad.copy()
    T.backward(loss)
    assert np.array_equal(x.grad, 2 * first)


def test_backward_rejects_non_scalar():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.mul(x, x))


def test_unreachable_node_grad_stays_zero():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    y = T.Tensor([3.0, 4.0], requires_grad=True)
    T.mul(y, y)  # recorded but not part of the loss
    T.backward(T.tsum(x))
    assert np.array_equal(y.grad, np.zeros(2))


def test_zero_grad_resets():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.tsum(x))
    T.zero_grad([x])
    assert np.array_equal(x.grad, np.zeros(2))


def test_no_grad_records_nothing():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    before = len(T.active_graph())
    with T.no_grad():
        out = T.mul(x, x)
    assert len(T.active_graph()) == before
    assert not out.requires_grad


def test_detach_blocks_gradient():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.tsum(T.mul(x.detach(), x)))
    assert np.array_equal(x.grad, x.data)  # only the non-detached factor


def test_softmax_rows_sum_to_one(rng):
    y = T.softmax(T.Tensor(rng.standard_normal((6, 9)) * 10)).data
    assert np.abs(y.sum(axis=1) - 1.0).max() < 1e-12


def test_layer_norm_moments(rng):
    y = T.layer_norm(T.Tensor(rng.standard_normal((5, 32)) * 3 + 1)).data
    assert np.abs(y.mean(axis=1)).max() < 1e-10
    assert np.abs(y.var(axis=1) - 1.0).max() < 1e-8


def test_sigmoid_stable_in_tails():
    y = T.sigmoid(T.Tensor([-1000.0, 1000.0])).data
    assert y[0] >= 0.0 and y[1] <= 1.0
    assert np.all(np.isfinite(y))


def test_cross_entropy_uniform_is_log_vocab():
    loss = T.softmax_cross_entropy(T.Tensor(np.zeros((3, 4))), [0, 1, 2])
    assert abs(loss.item() - math.log(4)) < 1e-12
    assert abs(loss.item() - 1.386294) < 1e-6


def test_cross_entropy_confident_logits():
    # closed form: lse([10, -10]) - 10 = log1p(exp(-20))
    loss = T.softmax_cross_entropy(T.Tensor([[10.0, -10.0]]), [0])
    assert abs(loss.item() - math.log1p(math.exp(-20))) < 1e-15
    assert loss.item() < 1e-8


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(T.Tensor(np.zeros((2, 3))), [0, 3])


def test_bce_zero_logit_is_log_two():
    loss = T.bce_with_logits(T.Tensor(np.zeros((3, 1))), np.ones((3, 1)))
    assert abs(loss.item() - math.log(2)) < 1e-12


def test_bce_saturated_logits_stay_finite():
    loss = T.bce_with_logits(T.Tensor([[500.0], [-500.0]]), [[1.0], [0.0]])
    assert loss.item() < 1e-12
    wrong = T.bce_with_logits(T.Tensor([[500.0]]), [[0.0]])
    assert abs(wrong.item() - 500.0) < 1e-12


def test_bce_gradient_is_sigmoid_minus_label():
    z = T.Tensor([[0.0], [2.0]], requires_grad=True)
    T.backward(T.bce_with_logits(z, [[1.0], [0.0]]))
    sig2 = 1.0 / (1.0 + math.exp(-2.0))
    assert abs(z.grad[0, 0] - (0.5 - 1.0) / 2) < 1e-12
    assert abs(z.grad[1, 0] - sig2 / 2) < 1e-12


def test_mse_zero_on_identical():
    assert T.mse(T.Tensor([1.0, 2.0]), T.Tensor([1.0, 2.0])).item() == 0.0


def test_mse_direct():
    assert T.mse(T.Tensor([0.0, 0.0]), T.Tensor([3.0, 4.0])).item() == 12.5


def test_mse_shape_mismatch():
    with pytest.raises(ShapeError):
        T.mse(T.Tensor(np.zeros(3)), T.Tensor(np.zeros(4)))


def test_mse_gradient_closed_form(rng):
    pred = T.Tensor(rng.standard_normal(4), requires_grad=True)
    target = T.Tensor(rng.standard_normal(4))
    T.backward(T.mse(pred, target))
    expected = 2 * (pred.data - target.data) / 4
    assert np.abs(pred.grad - expected).max() < 1e-12


def test_take_rows_scatter_adds_repeats():
    x = T.Tensor(np.ones((2, 3)), requires_grad=True)
    T.backward(T.tsum(T.take_rows(x, [0, 0, 1])))
    assert np.array_equal(x.grad, np.array([[2.0] * 3, [1.0] * 3]))


def test_replay_determinism():
    def run():
        rng = np.random.default_rng(77)
        w = T.Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        x = T.Tensor(rng.standard_normal((3, 4)))
        loss = T.mse(T.gelu(T.matmul(x, w)), T.Tensor(np.zeros((3, 4))))
        T.backward(loss)
        return loss.item(), w.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2
    assert np.array_equal(g1, g2)


def test_graphs_are_thread_confined():
    results = {}

    def work(name, seed):
        rng = np.random.default_rng(seed)
        x = T.Tensor(rng.standard_normal(8), requires_grad=True)
        for _ in range(50):
            T.backward(T.tsum(T.mul(x, x)))
            x.zero_grad()
            T.reset_graph()
        T.backward(T.tsum(T.mul(x, x)))
        results[name] = np.abs(x.grad - 2 * x.data).max()

    threads = [threading.Thread(target=work, args=(i, 10 + i)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(v < 1e-12 for v in results.values())


class TestSymEig:
    def test_diagonal(self):
        w, v = T.sym_eig(np.diag([1.0, 4.0]))
        assert np.abs(w - np.array([1.0, 4.0])).max() < 1e-12
        assert np.abs(np.abs(v) - np.eye(2)).max() < 1e-12

    def test_diagonal_reordered(self):
        w, v = T.sym_eig(np.diag([4.0, 1.0]))
        assert np.abs(w - np.array([1.0, 4.0])).max() < 1e-12
        assert np.abs(np.abs(v) - np.array([[0.0, 1.0], [1.0, 0.0]])).max() < 1e-12

    def test_two_by_two_hand_solved(self):
        # char poly of [[2,1],[1,2]]: (2-l)^2 - 1 = 0 -> l in {1, 3}
        w, _ = T.sym_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
        assert np.abs(w - np.array([1.0, 3.0])).max() < 1e-12

    def test_reconstruction_residual(self, rng):
        m = rng.standard_normal((8, 8))
        sym = 0.5 * (m + m.T)
        w, v = T.sym_eig(sym)
        assert np.abs(sym @ v - v * w[None, :]).max() < 1e-8
        assert np.abs(v.T @ v - np.eye(8)).max() < 1e-8

    def test_largest_supported_size(self, rng):
        m = rng.standard_normal((64, 64))
        sym = 0.5 * (m + m.T)
        w, v = T.sym_eig(sym)
        assert np.abs(sym @ v - v * w[None, :]).max() < 1e-8
        assert np.all(np.diff(w) >= 0)

    def test_rejects_asymmetric(self):
        with pytest.raises(ContractError):
            T.sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_rejects_oversize(self):
        with pytest.raises(ContractError):
            T.sym_eig(np.eye(65))

    def test_accepts_tensor_input(self):
        w, _ = T.sym_eig(T.Tensor(np.eye(3) * 2.0))
        assert np.abs(w - 2.0).max() < 1e-12
