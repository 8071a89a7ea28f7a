import numpy as np
import pytest

from ssmflow import gradcheck
from ssmflow import tensor as T
from ssmflow.selftest import CHECKS, run_selftest
from ssmflow.tensor import Tensor, make_op


def test_selftest_passes_and_covers_every_module(capsys):
    results = run_selftest(verbose=False)
    assert all(r.passed for r in results), [f"{r.module}: {r.name}: {r.message}" for r in results if not r.passed]
    modules = {r.module for r in results}
    assert {"tensor-core", "ssm-scan", "mamba-blocks", "polymamba", "matching", "pulsemamba", "metrics-io"} <= modules
    assert len({(m, n) for m, n, _ in CHECKS}) == len(CHECKS)


def test_gradcheck_flags_a_wrong_backward():
    def bad_square(x):
        return make_op(x.data ** 2, (x,), lambda g: (g * x.data,), "bad_square")  # missing factor 2

    x = Tensor(np.random.default_rng(0).normal(size=5), requires_grad=True)
    assert not gradcheck.check("bad", lambda: bad_square(x), [x]).passed
    assert gradcheck.check("good", lambda: T.mul(x, x), [x]).passed


@pytest.mark.parametrize("scope", ["primitives", "blocks"])
def test_gradcheck_scopes_pass(scope):
    results = gradcheck.run(scope)
    assert results and all(r.passed for r in results), [r.line() for r in results if not r.passed]


def test_gradcheck_rejects_unknown_scope():
    with pytest.raises(ValueError):
        gradcheck.run("everything")
