import numpy as np
import pytest


def numerical_grad(f, x, h=1e-5):
    """Central finite differences of scalar-valued f() w.r.t. array x (mutated in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
        it.iternext()
    return grad


def assert_grads_close(analytic, numeric, rel=1e-4, floor=1e-7):
    """Elementwise relative comparison with an absolute floor for near-zero grads."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    ok = (diff <= rel * scale) | (diff <= floor)
    if not ok.all():
        worst = np.unravel_index(np.argmax(diff - rel * scale), diff.shape)
        raise AssertionError(
            f"gradient mismatch at {worst}: analytic={analytic[worst]} "
            f"numeric={numeric[worst]} (diff {diff[worst]})")


def spread_values(rng, shape, gap_scale=1.0):
    """Random array whose values are pairwise separated, keeping pooling
    argmaxes and relu signs stable under finite-difference perturbation."""
    n = int(np.prod(shape))
    ranks = rng.permutation(n).astype(np.float64)
    gap = 2.0 * gap_scale / n
    values = (ranks / n - 0.5) * 2.0 * gap_scale + gap / 3.0  # keep every value off zero
    return values.reshape(shape)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
