"""Assertions shared by the gradient tests."""
import re

import numpy as np

# biases feeding a train-mode batch norm: the normalisation removes them, so
# the true gradient is exactly zero and a difference quotient is pure roundoff
PRE_NORM_BIAS = re.compile(r"(^|\.)(conv|pointwise)\.bias\[")


def assert_gradients(report, tol=1e-5, zero_atol=1e-7, train_norm=True):
    """Relative error within ``tol``.

    With ``train_norm`` (batch norm using batch statistics) pre-norm biases must
    instead be zero on both sides.
    """
    checked = 0
    for name, a, n in zip(report.names, report.analytic, report.numeric):
        if train_norm and PRE_NORM_BIAS.search(name):
            assert abs(a) <= 1e-10 and abs(n) <= zero_atol, (name, a, n)
            continue
        err = abs(a - n) / max(1e-8, abs(n))
        assert err <= tol, (name, a, n, err)
        checked += 1
    assert checked > 0
    return checked


def flat_params(module):
    return np.concatenate([p.data.ravel() for p in module.parameters()])
