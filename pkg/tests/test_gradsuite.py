import numpy as np
import pytest

from demf import gradsuite


@pytest.mark.parametrize("op", list(gradsuite.PRIMITIVES))
def test_primitive_passes_on_twenty_seeds(op):
    results = gradsuite.run_suite([op], range(20), h=1e-5, tol=1e-6)
    worst = max(results, key=lambda r: r.max_rel_error)
    assert all(r.passed for r in results), worst


@pytest.mark.parametrize("op", list(gradsuite.BUILDERS))
def test_instances_are_small_and_deterministic(op):
    f1, in1 = gradsuite.build_instance(op, 3)
    f2, in2 = gradsuite.build_instance(op, 3)
    assert sum(t.size for t in in1) <= gradsuite.MAX_SCALARS
    if op in gradsuite.PRIMITIVES:
        assert all(t.size <= 32 for t in in1)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(in1, in2))
    assert f1(*in1).item() == f2(*in2).item()


def test_zero_tolerance_fails():
    results = gradsuite.run_suite(["softmax"], [0], h=1e-5, tol=0.0)
    assert not results[0].passed and results[0].max_rel_error > 0
