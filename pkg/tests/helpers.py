"""Shared helpers for the test suite."""
import math

import numpy as np

from fbm_lab import autodiff as ad

# criterion number -> (passed, detail); printed at the end of the session
ACCEPTANCE = {}

H = 1e-5
REL_TOL = 1e-4


def rel_error(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradcheck(loss_fn, params, coords=None, rng=None, h=H):
    """Max elementwise relative error between tape and central-difference gradients.

    ``loss_fn()`` rebuilds the scalar loss from the current parameter values.
    ``coords`` limits the check to that many random entries per parameter.
    """
    with ad.Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss, wrt=params)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and flat.size > coords:
            idx = rng.choice(flat.size, size=coords, replace=False)
        g = grads[p].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            with ad.no_tape():
                up = float(loss_fn().data)
            flat[i] = old - h
            with ad.no_tape():
                down = float(loss_fn().data)
            flat[i] = old
            num = (up - down) / (2 * h)
            worst = max(worst, float(rel_error(g[i], num)))
    return worst


def leaf(rng, *shape, low=None):
    """Random tracked leaf; ``low`` keeps entries away from zero (ReLU kinks)."""
    x = rng.normal(size=shape)
    if low is not None:
        x = np.where(np.abs(x) < low, np.sign(x + 1e-12) * low, x)
    return ad.Tensor(x, requires_grad=True)


def run_pipeline(root, variant="fb_m", steps=30):
    """gen-data, train and eval through the CLI in single-threaded subprocesses.

    Returns ``{relative path: bytes}`` for every artifact except manifests,
    which record wall-clock time.
    """
    import os
    import subprocess
    import sys

    env = {**os.environ, "OMP_NUM_THREADS": "1", "OPENBLAS_NUM_THREADS": "1",
           "MKL_NUM_THREADS": "1", "FBM_THREADS": "1"}
    data, ckpt, ev = (os.path.join(root, n) for n in ("data", "ckpt", "eval"))
    cmds = [
        ["gen-data", "--occlusion", "flickering", "--episodes", "3", "--seed", "5", "--out", data],
        ["train", "--dataset", data, "--variant", variant, "--steps", str(steps), "--batch", "16",
         "--checkpoint-every", str(steps // 2), "--seed", "3", "--out-dir", ckpt],
        ["eval", "--checkpoints", ckpt, "--dataset", data, "--rollouts", "2", "--labels-k", "100",
         "--out", ev],
    ]
    for cmd in cmds:
        subprocess.run([sys.executable, "-m", "fbm_lab"] + cmd, check=True, env=env,
                       capture_output=True)
    out = {}
    for d in (data, ckpt, ev):
        for name in sorted(os.listdir(d)):
            if name != "manifest.json":
                with open(os.path.join(d, name), "rb") as fh:
                    out[os.path.relpath(os.path.join(d, name), root)] = fh.read()
    return out


def binomial_central_interval(n, p, level=0.99):
    """Smallest [lo, hi] with P(X < lo) <= a/2 and P(X > hi) <= a/2 for X ~ Bin(n, p)."""
    a = (1.0 - level) / 2.0
    logpmf = [math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)
              + k * math.log(p) + (n - k) * math.log1p(-p) for k in range(n + 1)]
    pmf = np.exp(np.array(logpmf))
    cdf = np.cumsum(pmf)
    lo = int(np.searchsorted(cdf, a, side="right"))
    sf = np.cumsum(pmf[::-1])[::-1]  # P(X >= k)
    hi = int(np.nonzero(sf > a)[0][-1])
    return lo, hi


def record(n, ok, detail):
    """Log one acceptance line and keep it for the terminal summary."""
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    return bool(ok)
