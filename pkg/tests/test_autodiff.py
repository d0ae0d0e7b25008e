import json

import numpy as np
import pytest

from gradcases import LOSS_CASES, N_CASES, OP_CASES
from tcsmae.autodiff import Adam, NonFiniteError, Tensor, gradcheck, load_checkpoint, ops, \
    save_checkpoint
from tcsmae.imaging import SOBEL_X, sobel_gradients


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradcheck(name):
    for case in range(N_CASES):
        fn, tensors = OP_CASES[name](np.random.default_rng([case, 17]))
        assert gradcheck(fn, tensors) < 1e-4, f"{name} case {case}"


@pytest.mark.parametrize("name", sorted(LOSS_CASES))
def test_loss_gradcheck(name):
    for case in range(N_CASES):
        fn, tensors = LOSS_CASES[name](np.random.default_rng([case, 23]))
        assert gradcheck(fn, tensors) < 1e-4, f"{name} case {case}"


def test_backward_sum_and_mean_square():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    ops.sum(x).backward()
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    y = Tensor([1.0, 2.0], requires_grad=True)
    ops.mean(ops.square(y)).backward()
    assert y.grad.tolist() == [1.0, 2.0]


def test_backward_accumulates_shared_subexpressions():
    x = Tensor(3.0, requires_grad=True)
    z = x * x + x
    z.backward()
    assert x.grad == 7.0


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_conv2d_reproduces_sobel_x_interior():
    img = np.zeros((5, 5))
    img[:, 3:] = 255.0
    w = Tensor(SOBEL_X[None, None].astype(float))
    out = ops.conv2d(Tensor(img[None, None]), w).data[0, 0]
    gx, _ = sobel_gradients(img)
    assert np.array_equal(out, gx[1:-1, 1:-1])


def test_nonfinite_is_located():
    with pytest.raises(NonFiniteError, match=r"\(1,\)"):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        ops.exp(Tensor([1000.0]))
    with pytest.raises(ZeroDivisionError):
        ops.div(Tensor(1.0), Tensor(0.0))
    with pytest.raises(ValueError):
        ops.l2_normalize(Tensor(np.zeros((1, 3))), axis=1)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3))))
    with pytest.raises(ValueError):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def adam_one_step(p, g, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = (1 - b1) * g / (1 - b1)
    v = (1 - b2) * g * g / (1 - b2)
    return p - lr * m / (v ** 0.5 + eps)


def test_adam_single_step_matches_closed_form():
    for g in (0.3, -2.0, 1e-3):
        p = Tensor(1.5, requires_grad=True, name="p")
        opt = Adam({"p": p}, lr=0.01)
        p.grad = np.array(g)
        opt.step()
        assert float(p.data) == pytest.approx(adam_one_step(1.5, g, 0.01), rel=1e-12)
        assert float(p.data) == pytest.approx(1.5 - 0.01 * np.sign(g), abs=1e-6)


def test_adam_zero_grad_and_identical_sets():
    p = Tensor(np.arange(4.0), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    opt.step()
    assert p.data.tolist() == [0.0, 1.0, 2.0, 3.0]
    a, b = Tensor(np.ones(3), requires_grad=True), Tensor(np.ones(3), requires_grad=True)
    oa, ob = Adam({"a": a}, lr=0.1), Adam({"b": b}, lr=0.1)
    for _ in range(3):
        a.grad = np.array([0.5, -1.0, 2.0])
        b.grad = np.array([0.5, -1.0, 2.0])
        oa.step()
        ob.step()
    assert np.array_equal(a.data, b.data)


def test_adam_nonfinite_grad_names_parameter():
    p = Tensor(1.0, requires_grad=True)
    opt = Adam({"encoder.1.conv.weight": p})
    p.grad = np.array(np.inf)
    with pytest.raises(FloatingPointError, match="encoder.1.conv.weight"):
        opt.step()


def test_determinism_of_forward_and_grads():
    def run():
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(2, 3, 8, 8)))
        w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        loss = ops.mean(ops.relu(ops.conv2d(x, w, padding=1)))
        loss.backward()
        return loss.data.tobytes(), w.grad.tobytes()
    assert run() == run()


def test_checkpoint_roundtrip_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    params = {"a.weight": Tensor(rng.normal(size=(3, 2, 3, 3))), "a.bias": Tensor(rng.normal(size=3)),
              "scalar": Tensor(0.5)}
    save_checkpoint(params, tmp_path / "c1.bin", tmp_path / "m1.json", meta={"kind": "x"})
    arrays, meta = load_checkpoint(tmp_path / "c1.bin", tmp_path / "m1.json")
    assert meta == {"kind": "x"}
    assert list(arrays) == list(params)
    save_checkpoint({k: Tensor(v) for k, v in arrays.items()}, tmp_path / "c2.bin", tmp_path / "m2.json",
                    meta=meta)
    assert (tmp_path / "c1.bin").read_bytes() == (tmp_path / "c2.bin").read_bytes()
    assert (tmp_path / "m1.json").read_bytes() == (tmp_path / "m2.json").read_bytes()
    manifest = json.loads((tmp_path / "m1.json").read_text())
    offsets = [t["offset"] for t in manifest["tensors"]]
    assert offsets == [0, 54 * 8, 57 * 8]
    assert manifest["total_bytes"] == 58 * 8


def test_checkpoint_truncated_file_rejected(tmp_path):
    save_checkpoint({"w": Tensor(np.ones(4))}, tmp_path / "c.bin", tmp_path / "m.json")
    (tmp_path / "c.bin").write_bytes(b"\0" * 8)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "c.bin", tmp_path / "m.json")
