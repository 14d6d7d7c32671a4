"""Shared finite-difference gradient checking.

Bilinear sampling and leaky-relu make most losses piecewise smooth; an FD
probe that straddles a kink is not a derivative estimate, so each probe is
validated by comparing steps h and h/2 (Richardson consistency) and the
whole random configuration is redrawn if a probe lands on a kink.
"""

import numpy as np

import sdfinv.autodiff as ad


def fd_directional(build, param, idx, h):
    old = param.value.copy()
    flat = param.value.reshape(-1)
    flat[idx] = old.reshape(-1)[idx] + h
    hi = float(build().value)
    flat[idx] = old.reshape(-1)[idx] - h
    lo = float(build().value)
    param.value = old
    return (hi - lo) / (2 * h)


def check_gradients(make_problem, n_configs=20, rel=1e-4, abs_floor=1e-6,
                    h=1e-5, coords_per_param=4, max_retries=6, rng=None):
    """FD-check analytic gradients over random configurations.

    make_problem(rng) -> (build, params): `build()` returns a fresh scalar
    loss Tensor from the current parameter values; `params` is the Parameter
    list to check. Raises AssertionError with context on mismatch.
    """
    rng = rng or np.random.default_rng(0)
    checked = 0
    attempts = 0
    while checked < n_configs:
        attempts += 1
        if attempts > n_configs * max_retries:
            raise AssertionError("too many kink retries; check op smoothness")
        build, params = make_problem(rng)
        for p in params:
            p.grad = None
        loss = build()
        ad.backward(loss)
        ok = True
        for p in params:
            grad = p.grad if p.grad is not None else np.zeros_like(p.value)
            n = p.value.size
            idxs = (range(n) if n <= coords_per_param
                    else rng.choice(n, size=coords_per_param, replace=False))
            for idx in idxs:
                fd1 = fd_directional(build, p, idx, h)
                fd2 = fd_directional(build, p, idx, h / 2)
                tol_consistency = max(5 * rel * abs(fd2), 5 * abs_floor)
                if abs(fd1 - fd2) > tol_consistency:
                    ok = False  # probe straddles a kink; replace the config
                    break
                ana = float(grad.reshape(-1)[idx])
                tol = max(rel * abs(fd2), abs_floor)
                assert abs(ana - fd2) <= tol, (
                    f"gradient mismatch at {getattr(p, 'name', '?')}[{idx}]: "
                    f"analytic {ana:.8g} vs fd {fd2:.8g} (tol {tol:.2g})")
            if not ok:
                break
        if ok:
            checked += 1
    return checked
