import math
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from viewco.errors import DegenerateVector, FormatError, InvalidTemperature, NonFiniteObjective, ShapeError
from viewco.numerics import grad_check, l2_normalize, load_tensors, save_tensors, similarity_matrix, softmax

D = torch.float64


def test_l2_normalize_examples():
    assert l2_normalize(torch.tensor([3.0, 4.0], dtype=D)).tolist() == [0.6, 0.8]
    assert l2_normalize(torch.tensor([1.0, 0.0, 0.0], dtype=D)).tolist() == [1.0, 0.0, 0.0]
    with pytest.raises(DegenerateVector):
        l2_normalize(torch.zeros(2, 3, dtype=D))


@given(st.lists(st.floats(-1e3, 1e3), min_size=5, max_size=5).filter(lambda v: math.hypot(*v) > 1e-3))
def test_l2_normalize_against_fsum(v):
    out = l2_normalize(torch.tensor(v, dtype=D))
    assert abs(math.sqrt(math.fsum(x * x for x in out.tolist())) - 1) < 1e-9
    ref = oracles.normalize(v)
    assert oracles.dot(ref, out.tolist()) == pytest.approx(1.0, abs=1e-9)
    assert torch.allclose(l2_normalize(out), out, atol=1e-12, rtol=0)


def test_softmax_examples():
    assert torch.allclose(softmax(torch.full((3,), 7.0, dtype=D), 0.3), torch.full((3,), 1 / 3, dtype=D))
    assert softmax(torch.tensor([5.0], dtype=D), 2.0).item() == 1.0
    p = softmax(torch.tensor([1.0, 0.0], dtype=D), 1.0)
    assert p[0].item() == pytest.approx(math.e / (math.e + 1), abs=1e-15)
    for bad in (0.0, -1.0):
        with pytest.raises(InvalidTemperature):
            softmax(torch.zeros(2, dtype=D), bad)


@settings(max_examples=50)
@given(st.integers(0, 2**31), st.floats(-50, 50), st.floats(0.05, 3.0))
def test_softmax_rows_and_shift(seed, c, tau):
    x = torch.from_numpy(np.random.default_rng(seed).normal(size=(4, 6)) * 5)
    p = softmax(x, tau)
    assert (p >= 0).all() and torch.allclose(p.sum(-1), torch.ones(4, dtype=D), atol=1e-9)
    assert torch.allclose(softmax(x + c, tau), p, atol=1e-12, rtol=0)


def test_softmax_large_logits_stay_finite():
    p = softmax(torch.tensor([1000.0, 999.0], dtype=D), 0.01)
    assert torch.isfinite(p).all()


def test_similarity_matrix():
    eye = torch.eye(3, dtype=D)
    assert torch.equal(similarity_matrix(eye, eye), eye)
    rng = np.random.default_rng(0)
    a = l2_normalize(torch.from_numpy(rng.normal(size=(3, 2))))
    b = l2_normalize(torch.from_numpy(rng.normal(size=(4, 2))))
    s = similarity_matrix(a, b)
    naive = [[oracles.dot(x, y) for y in b.tolist()] for x in a.tolist()]
    assert np.allclose(s.numpy(), naive, atol=1e-12, rtol=0)
    assert torch.allclose(s, similarity_matrix(b, a).T, atol=1e-12)
    assert (s.abs() <= 1 + 1e-9).all()
    with pytest.raises(ShapeError):
        similarity_matrix(a, torch.ones(2, 3, dtype=D))


def test_grad_check_examples():
    x = torch.randn(5, dtype=D)
    assert grad_check(lambda t: t.sum(), [x]) < 1e-10
    assert grad_check(lambda t: (t * t).sum(), [torch.zeros(4, dtype=D)]) < 1e-10


def test_grad_check_catches_wrong_gradient():
    class Flip(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return (x * x).sum()

        @staticmethod
        def backward(ctx, g):
            return -g * torch.ones(3, dtype=D)

    assert grad_check(Flip.apply, [torch.ones(3, dtype=D)]) > 1.0


def test_grad_check_non_finite():
    with pytest.raises(NonFiniteObjective):
        grad_check(lambda t: t.log().sum(), [-torch.ones(2, dtype=D)])


@pytest.mark.parametrize("seed", range(20))
def test_grad_check_normalized_similarity(seed):
    rng = np.random.default_rng(seed)
    a, b = (torch.from_numpy(rng.normal(size=(3, 4))) for _ in range(2))
    f = lambda x, y: (softmax(similarity_matrix(l2_normalize(x), l2_normalize(y)), 0.3) ** 2).sum()
    assert grad_check(f, [a, b], step=1e-6) < 1e-4


def test_tensor_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a/w": torch.from_numpy(rng.normal(size=(2, 3))),
               "b": torch.from_numpy(rng.normal(size=4).astype(np.float32)),
               "scalar": torch.tensor(3.5, dtype=D), "empty": torch.zeros(0, 2, dtype=D)}
    p1, p2 = tmp_path / "a.vwct", tmp_path / "b.vwct"
    save_tensors(p1, tensors)
    back = load_tensors(p1)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype and torch.equal(back[k], tensors[k])
    save_tensors(p2, back)
    assert p1.read_bytes() == p2.read_bytes()


def test_tensor_file_layout(tmp_path):
    p = tmp_path / "x.vwct"
    save_tensors(p, {"w": torch.tensor([1.0, 2.0], dtype=torch.float32)})
    expected = b"VWCT" + struct.pack("<II", 1, 1) + struct.pack("<H", 1) + b"w" + bytes([1]) \
        + struct.pack("<I", 2) + bytes([0]) + struct.pack("<2f", 1.0, 2.0)
    assert p.read_bytes() == expected


@pytest.mark.parametrize("damage", [lambda b: b"XXXX" + b[4:], lambda b: b[:-3], lambda b: b + b"\0",
                                    lambda b: b[:4] + struct.pack("<I", 9) + b[8:], lambda b: b[:10]])
def test_tensor_file_rejects_damage(tmp_path, damage):
    p = tmp_path / "x.vwct"
    save_tensors(p, {"w": torch.ones(2, 2, dtype=D)})
    p.write_bytes(damage(p.read_bytes()))
    with pytest.raises(FormatError):
        load_tensors(p)
