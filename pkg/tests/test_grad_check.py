import numpy as np
import pytest

from autodiff import Function, Tensor4, apply_op
from errors import ConfigurationError
from grad_check import SUITES, GradCheckReport, grad_check, run_suite


class DoubledSquare(Function):
    """x^2 whose backward is off by a factor of two."""

    @staticmethod
    def forward(ctx, x):
        ctx.x = x
        return x * x

    @staticmethod
    def backward(ctx, grad):
        return (4.0 * ctx.x * grad,)


class TestGradCheck:
    def test_correct_gradient_passes(self, rng):
        x = Tensor4(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
        report = grad_check(lambda t: (t * t * t).sum(), [x], tolerance=1e-6, name="cube")
        assert report.passed
        assert report.per_input[0][2] == 18

    def test_wrong_gradient_fails(self, rng):
        x = Tensor4(rng.normal(size=(1, 1, 2, 2)) + 2.0, requires_grad=True)
        report = grad_check(lambda t: apply_op(DoubledSquare, t).sum(), [x], name="wrong")
        assert not report.passed
        assert report.summary().startswith("❌ wrong")

    def test_perturbation_restores_inputs(self, rng):
        data = rng.normal(size=(1, 1, 2, 3))
        x = Tensor4(data.copy(), requires_grad=True)
        grad_check(lambda t: (t * 2.0).sum(), [x])
        np.testing.assert_array_equal(x.data, data)

    def test_subset_sampling(self, rng):
        x = Tensor4(rng.normal(size=(1, 4, 5, 5)), requires_grad=True)
        report = grad_check(lambda t: (t * t).sum(), [x], max_elements=7, labels=["x"])
        assert report.per_input[0][0] == "x"
        assert report.per_input[0][2] == 7

    def test_requires_float64(self):
        with pytest.raises(ConfigurationError):
            grad_check(lambda t: t.sum(), [Tensor4(np.zeros((1, 1, 1, 2), dtype=np.float32))])

    def test_report_without_inputs(self):
        assert GradCheckReport("empty", 1e-5).passed


class TestSuites:
    @pytest.mark.parametrize("name", ["tensor", "madf", "losses"])
    def test_suite_passes(self, name):
        reports = run_suite(name)
        assert reports
        failed = [r.summary() for r in reports if not r.passed]
        assert not failed, failed

    def test_model_suite_passes(self):
        with_pn, with_bn = run_suite("model")
        assert with_pn.passed, with_pn.summary()
        assert with_bn.passed, with_bn.summary()
        pn_labels = [label for label, _, _ in with_pn.per_input]
        bn_labels = [label for label, _, _ in with_bn.per_input]
        assert "enc.1.gen_w" in pn_labels and "ref2.1.pn_scale_w" in pn_labels
        assert "ref1.1.bn_gamma" in bn_labels and "ref2.2.bn_beta" in bn_labels
        assert not any("pn_" in label for label in bn_labels)

    def test_suite_names(self):
        assert SUITES == ("tensor", "madf", "losses", "model")
        with pytest.raises(ConfigurationError):
            run_suite("optimizer")
