import pytest
import torch

from dgsan import gradcheck
from dgsan.gradcheck import OPS, gradient_check


@pytest.mark.parametrize("op", sorted(OPS))
def test_op_gradients_match_finite_differences(op):
    report = gradient_check(op, seed=0)
    assert report.max_rel_error <= 1e-4, report.line()
    assert report.n_coords > 0


def test_head_is_near_exact():
    # affine map: central differences are exact up to round-off
    assert gradient_check("classify_head", seed=2).max_rel_error <= 1e-7


def test_unknown_op():
    with pytest.raises(KeyError):
        gradient_check("softmax_of_doom")


def test_detects_a_wrong_backward(monkeypatch):
    class BadGrad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x * x

        @staticmethod
        def backward(ctx, g):
            return g  # should be 2 x g

    def build(gen):
        m = torch.nn.Linear(3, 3).double()
        x = torch.randn(2, 3, generator=gen, dtype=torch.float64)
        return m, [x], lambda x: BadGrad.apply(m(x))

    monkeypatch.setitem(gradcheck.OPS, "bad", build)
    assert gradient_check("bad").max_rel_error > 1e-2


def test_report_line():
    line = gradient_check("classify_head").line()
    assert line.startswith("classify_head") and "seed=0" in line
