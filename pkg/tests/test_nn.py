import numpy as np
import pytest

from voiannotate import nn
from voiannotate.geometry import VoiError
from voiannotate.nn import Tensor

rng64 = lambda s: np.random.default_rng(s).standard_normal


class TestForwardContracts:
    def test_conv_identity_kernel(self):
        x = rng64(0)((2, 3, 8, 8))
        w = np.zeros((3, 3, 1, 1))
        w[np.arange(3), np.arange(3), 0, 0] = 1.0
        out = nn.conv2d(Tensor(x), Tensor(w), padding="valid")
        assert np.abs(out.data - x).max() == 0

    def test_conv_hand_sum(self):
        out = nn.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), padding="valid")
        assert out.data.shape == (1, 1, 2, 2)
        assert (out.data == 9.0).all()

    def test_conv_same_stride2_shape(self):
        out = nn.conv2d(Tensor(np.zeros((1, 3, 224, 224))), Tensor(np.zeros((8, 3, 3, 3))), stride=2, padding="same")
        assert out.data.shape == (1, 8, 112, 112)

    def test_conv_channel_mismatch(self):
        with pytest.raises(VoiError, match="channel mismatch"):
            nn.conv2d(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((4, 2, 3, 3))))

    def test_softmax_rows_sum_to_one(self):
        s = nn.softmax(Tensor(rng64(1)((8, 12)) * 10))
        assert np.abs(s.data.sum(axis=1) - 1.0).max() < 1e-6

    def test_xent_uniform_logits(self):
        loss = nn.softmax_xent(Tensor(np.zeros((3, 12))), np.array([0, 5, 11]))
        assert loss.item() == pytest.approx(np.log(12), abs=1e-9)

    def test_xent_saturated(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 1000.0
        assert nn.softmax_xent(Tensor(logits), np.array([2])).item() < 1e-6

    def test_xent_closed_form(self):
        loss = nn.softmax_xent(Tensor(np.array([[1.0, 2.0]])), np.array([1]))
        assert loss.item() == pytest.approx(np.log(1 + np.exp(-1)), abs=1e-9)

    def test_xent_label_out_of_range(self):
        with pytest.raises(VoiError, match="label out of range"):
            nn.softmax_xent(Tensor(np.zeros((1, 3))), np.array([3]))

    def test_backward_needs_scalar(self):
        with pytest.raises(VoiError):
            Tensor(np.zeros(3), requires_grad=True).backward()


OP_CASES = {
    "dense": (lambda xs: nn.add(nn.matmul(xs[0], xs[1]), xs[2]),
              [rng64(1)((4, 6)), rng64(2)((6, 3)), rng64(3)(3)]),
    "conv2d_same_s1": (lambda xs: nn.conv2d(xs[0], xs[1], xs[2]),
                       [rng64(1)((2, 3, 7, 7)), rng64(2)((4, 3, 3, 3)) * 0.4, rng64(3)(4) * 0.1]),
    "conv2d_valid_s2": (lambda xs: nn.conv2d(xs[0], xs[1], stride=2, padding="valid"),
                        [rng64(4)((2, 2, 9, 9)), rng64(5)((3, 2, 3, 3)) * 0.4]),
    "conv2d_transpose": (lambda xs: nn.conv2d_transpose(xs[0], xs[1], xs[2], stride=2, padding=1),
                         [rng64(6)((2, 4, 5, 5)), rng64(7)((4, 3, 3, 3)) * 0.4, rng64(8)(3) * 0.1]),
    "maxpool": (lambda xs: nn.maxpool2d(xs[0], 2), [rng64(9)((2, 3, 6, 6))]),
    "upsample": (lambda xs: nn.upsample_nearest(xs[0], 2), [rng64(10)((2, 3, 4, 4))]),
    "gap": (lambda xs: nn.global_avg_pool(xs[0]), [rng64(11)((2, 5, 4, 4))]),
    "add_residual": (lambda xs: nn.add(xs[0], xs[1]), [rng64(12)((2, 3, 4, 4)), rng64(13)((2, 3, 4, 4))]),
    "relu_off_kink": (lambda xs: nn.relu(xs[0]),
                      [rng64(14)((6, 6)) + np.sign(rng64(14)((6, 6))) * 0.15]),
    "leaky_relu": (lambda xs: nn.leaky_relu(xs[0], 0.2),
                   [rng64(15)((6, 6)) + np.sign(rng64(15)((6, 6))) * 0.15]),
    "tanh": (lambda xs: nn.tanh(xs[0]), [rng64(16)((6, 6))]),
    "sigmoid": (lambda xs: nn.sigmoid(xs[0]), [rng64(17)((6, 6))]),
    "abs_off_kink": (lambda xs: nn.abs_(xs[0]),
                     [rng64(18)((6, 6)) + np.sign(rng64(18)((6, 6))) * 0.15]),
    "softmax": (lambda xs: nn.softmax(xs[0]), [rng64(19)((5, 7))]),
    "xent": (lambda xs: nn.softmax_xent(xs[0], np.array([0, 3, 2, 1])), [rng64(20)((4, 5))]),
    "mul_broadcast": (lambda xs: nn.mul(xs[0], xs[1]), [rng64(21)((2, 3, 4, 4)), rng64(22)((1, 3, 1, 1))]),
    "mean_axes": (lambda xs: nn.tmean(xs[0], axis=(0, 2, 3), keepdims=True), [rng64(23)((2, 3, 4, 4))]),
    "pow": (lambda xs: nn.pow_const(nn.add(nn.mul(xs[0], xs[0]), 0.5), -0.5), [rng64(24)((3, 3))]),
    "reshape_transpose": (lambda xs: nn.transpose(nn.reshape(xs[0], (2, 12)), (1, 0)), [rng64(25)((2, 3, 4))]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_grad_check_64bit(name):
    fn, arrays = OP_CASES[name]
    assert nn.grad_check(fn, arrays) < 1e-5


class TestNormalization:
    def test_batchnorm_train_stats(self):
        store = nn.ParameterStore()
        bn = nn.BatchNorm2d(store, "bn", 5)
        x = Tensor(np.random.default_rng(0).normal(3.0, 2.5, size=(8, 5, 6, 6)).astype(np.float64))
        out = bn(x, train=True)
        mean = out.data.mean(axis=(0, 2, 3))
        var = out.data.var(axis=(0, 2, 3))
        assert np.abs(mean).max() < 1e-5
        assert np.abs(var - 1.0).max() < 1e-4

    def test_batchnorm_inference_uses_running_stats(self):
        store = nn.ParameterStore()
        bn = nn.BatchNorm2d(store, "bn", 2, momentum=0.0)  # running stats = last batch
        x = np.random.default_rng(1).normal(-1.0, 0.5, size=(16, 2, 4, 4))
        bn(Tensor(x), train=True)
        out = bn(Tensor(x), train=False)
        assert np.abs(out.data.mean(axis=(0, 2, 3))).max() < 1e-5

    def test_batchnorm_grad(self):
        def fn(xs):
            store = nn.ParameterStore()
            bn = nn.BatchNorm2d(store, "bn", 3)
            return bn(xs[0], train=True)

        assert nn.grad_check(fn, [rng64(2)((4, 3, 5, 5))]) < 1e-5

    def test_instancenorm_grad(self):
        def fn(xs):
            store = nn.ParameterStore()
            inorm = nn.InstanceNorm2d(store, "in", 3)
            return inorm(xs[0])

        assert nn.grad_check(fn, [rng64(3)((2, 3, 5, 5))]) < 1e-5


class TestAdam:
    def test_zero_gradient_keeps_parameter(self):
        store = nn.ParameterStore()
        p = store.create("p", np.array([1.0, -2.0]))
        nn.adam_step(store, {"p": np.zeros(2)}, nn.AdamConfig(), t=1)
        assert (p.data == np.array([1.0, -2.0])).all()

    def test_first_step_is_signed_learning_rate(self):
        # bias-corrected first step: m_hat = g, v_hat = g^2 -> lr * sign(g)
        store = nn.ParameterStore()
        p = store.create("p", np.array([1.0, 1.0]))
        cfg = nn.AdamConfig(lr=0.001)
        nn.adam_step(store, {"p": np.array([0.5, -3.0])}, cfg, t=1)
        step = p.data - 1.0
        assert step[0] == pytest.approx(-0.001, rel=1e-3)
        assert step[1] == pytest.approx(+0.001, rel=1e-3)

    def test_constant_gradient_moves_monotonically(self):
        store = nn.ParameterStore()
        p = store.create("p", np.array([0.0]))
        cfg = nn.AdamConfig(lr=0.01)
        history = [p.data.copy()]
        for t in range(1, 6):
            nn.adam_step(store, {"p": np.array([2.0])}, cfg, t)
            history.append(p.data.copy())
        diffs = np.diff(np.concatenate(history))
        assert (diffs < 0).all()

    def test_shape_mismatch(self):
        store = nn.ParameterStore()
        store.create("p", np.zeros((2, 2)))
        with pytest.raises(VoiError, match="shape"):
            nn.adam_step(store, {"p": np.zeros(3)}, nn.AdamConfig(), 1)

    def test_step_index_starts_at_one(self):
        store = nn.ParameterStore()
        store.create("p", np.zeros(2))
        with pytest.raises(VoiError):
            nn.adam_step(store, None, nn.AdamConfig(), 0)


class TestParameterStore:
    def test_duplicate_name_rejected(self):
        store = nn.ParameterStore()
        store.create("w", np.zeros(2))
        with pytest.raises(VoiError, match="duplicate"):
            store.create("w", np.zeros(2))

    def test_checkpoint_round_trip_bits(self, tmp_path):
        store = nn.ParameterStore()
        store.create("a/w", np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32))
        store.create("b", np.random.default_rng(1).standard_normal(7).astype(np.float32), trainable=False)
        path = tmp_path / "model.ckpt"
        nn.save_checkpoint(store, path, meta={"kind": "test", "note": "two words"})
        values, meta = nn.load_checkpoint(path)
        assert meta == {"kind": "test", "note": "two words"}
        assert set(values) == {"a/w", "b"}
        assert values["a/w"].tobytes() == store.params["a/w"].data.tobytes()

    def test_checkpoint_header_magic(self, tmp_path):
        store = nn.ParameterStore()
        store.create("w", np.zeros(1, dtype=np.float32))
        path = tmp_path / "m.ckpt"
        nn.save_checkpoint(store, path)
        assert path.read_bytes().startswith(b"#voi-ckpt v1\n")

    def test_load_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(VoiError):
            nn.load_checkpoint(path)


def test_training_reproducible_same_seed():
    def run():
        store = nn.ParameterStore()
        rng = np.random.default_rng(3)
        dense = nn.Dense(store, "d", 6, 3, rng=rng)
        opt = nn.Adam(store, nn.AdamConfig(lr=0.01))
        data = np.random.default_rng(4).standard_normal((12, 6)).astype(np.float32)
        labels = np.random.default_rng(5).integers(0, 3, 12)
        losses = []
        for _ in range(5):
            store.zero_grad()
            loss = nn.softmax_xent(dense(Tensor(data)), labels)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        return losses, store.params["d/w"].data.copy()

    l1, w1 = run()
    l2, w2 = run()
    assert l1 == l2
    assert (w1 == w2).all()
