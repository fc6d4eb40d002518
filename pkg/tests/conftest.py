import numpy as np
import pytest

import dbswin.autodiff as ad


@pytest.fixture(autouse=True)
def clean_tape():
    ad.active_tape().clear()
    yield
    ad.active_tape().clear()


def fd_max_relerr(make_loss, tensors, h=1e-5, sample=None, seed=0):
    """Central-difference oracle: max over checked elements of
    |analytic - numeric| / (|analytic| + 1e-8)."""
    rng = np.random.default_rng(seed)
    for p in tensors:
        p.zero_grad()
    ad.backward(make_loss())
    worst = 0.0
    for p in tensors:
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gf = grad.reshape(-1)
        if sample is None or flat.size <= sample:
            idxs = range(flat.size)
        else:
            idxs = rng.choice(flat.size, sample, replace=False)
        for j in idxs:
            orig = flat[j]
            flat[j] = orig + h
            with ad.no_grad():
                up = make_loss().item()
            flat[j] = orig - h
            with ad.no_grad():
                down = make_loss().item()
            flat[j] = orig
            numeric = (up - down) / (2 * h)
            worst = max(worst, abs(gf[j] - numeric) / (abs(gf[j]) + 1e-8))
    return worst
