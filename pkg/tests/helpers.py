"""Oracles shared by the unit and acceptance tests."""

import contextlib

import numpy as np

from surrotune import autodiff as ad

STEP = 1e-3


def rel_error(a, b) -> float:
    """Max-norm relative error, floored so all-zero gradients compare cleanly."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-10)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def analytic(loss_fn, tensors):
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with ad.Tape():
        ad.backward(loss_fn())
    return [t.grad.copy() for t in tensors]


def numeric(loss_fn, t, coords=None, step=STEP):
    """Central differences of ``loss_fn`` w.r.t. ``t`` at ``coords`` (default: all)."""
    flat = t.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = np.zeros(len(idx) if coords is not None else flat.size)
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn().item()
        flat[i] = orig - step
        down = loss_fn().item()
        flat[i] = orig
        out[j] = (up - down) / (2 * step)
    return out


def check(loss_fn, tensors, rng=None, max_coords=None):
    """Worst relative error over ``tensors``; subsample coordinates when asked."""
    grads = analytic(loss_fn, tensors)
    worst = 0.0
    for t, g in zip(tensors, grads):
        coords = None
        if max_coords is not None and t.data.size > max_coords:
            coords = sorted(rng.choice(t.data.size, max_coords, replace=False).tolist())
        num = numeric(loss_fn, t, coords)
        ana = g.reshape(-1) if coords is None else g.reshape(-1)[coords]
        worst = max(worst, rel_error(ana, num))
    return worst


@contextlib.contextmanager
def relu_patterns():
    """Record the active set of every relu evaluated inside the block."""
    log = []
    orig = ad.relu

    def spy(x):
        log.append(x.data > 0)
        return orig(x)

    ad.relu = spy
    try:
        yield log
    finally:
        ad.relu = orig


def _pattern(loss_fn):
    with relu_patterns() as log:
        value = loss_fn().item()
    return value, log


def check_piecewise(loss_fn, tensors, rng, per_tensor=6, step=STEP):
    """Finite-difference check for relu networks.

    A central difference is only a valid oracle when neither probe crosses a
    relu kink, so coordinates whose +/- step changes any active set are
    replaced by fresh random ones.  Returns (worst error, checked, rejected).
    """
    grads = analytic(loss_fn, tensors)
    _, base = _pattern(loss_fn)
    worst, checked, rejected = 0.0, 0, 0
    for t, g in zip(tensors, grads):
        flat = t.data.reshape(-1)
        order = rng.permutation(flat.size)
        ana, num = [], []
        for i in order:
            if len(num) == per_tensor:
                break
            orig = flat[i]
            flat[i] = orig + step
            up, pu = _pattern(loss_fn)
            flat[i] = orig - step
            down, pd = _pattern(loss_fn)
            flat[i] = orig
            if any((a != b).any() for a, b in zip(base, pu)) or any((a != b).any() for a, b in zip(base, pd)):
                rejected += 1
                continue
            ana.append(g.reshape(-1)[i])
            num.append((up - down) / (2 * step))
        checked += len(num)
        if num:
            worst = max(worst, rel_error(ana, num))
    return worst, checked, rejected


def weighted(out, rng):
    """A generic scalar readout: sum(out * W) with fixed random weights."""
    w = ad.Tensor(rng.standard_normal(out.shape))
    return ad.tensor_sum(ad.mul(out, w))


def shift_data(n=160, size=8, offset=0.08, seed=0):
    """Pairs where noisy = clean - offset, for the clamp(x + cff/100) black box."""
    from dataclasses import replace
    from surrotune import data

    ds = data.gen_synthetic(n, size, size, (0.0,), seed)
    pairs = []
    for p in ds.pairs:
        clean = (0.2 + 0.6 * p.clean).astype(np.float32)
        pairs.append(replace(p, clean=clean, noisy=(clean - offset).astype(np.float32)))
    return data.split(replace(ds, pairs=pairs))


def shift_oracle(ds, bb):
    """Brute-force best cff over every bin by mean train MSE."""
    from surrotune.metrics import mse

    train = ds.subset("train")
    errs = [np.mean([mse(bb.evaluate(p.noisy, (v,)), p.clean) for p in train]) for v in bb.space.dims[0].values]
    return bb.space.dims[0].values[int(np.argmin(errs))]


VERDICTS = []  # one line per acceptance criterion, echoed in the terminal summary
