"""Central finite-difference checks for every differentiable operator.

The numeric gradient is the independent oracle: each check builds a scalar
from an op via a fixed random projection, differentiates it with
``backward``, and compares against (f(x+h) - f(x-h)) / 2h at float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

FD_STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    rel_error: float
    passed: bool


def finite_diff(scalar_fn, arrays: list[np.ndarray], wrt: int, step: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar_fn(*arrays) w.r.t. arrays[wrt]."""
    work = [a.copy() for a in arrays]
    target = work[wrt]
    grad = np.zeros_like(target)
    flat = target.ravel()
    gflat = grad.ravel()
    with ad.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = scalar_fn(*work)
            flat[i] = orig - step
            fm = scalar_fn(*work)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = float(np.abs(analytic - numeric).max()) if analytic.size else 0.0
    scale = max(float(np.abs(numeric).max()) if numeric.size else 0.0, 1e-12)
    return diff / scale


def _check(name: str, graph_fn, arrays: list[np.ndarray], results: list[CheckResult]) -> None:
    """graph_fn(*Tensors) -> scalar Tensor; checks every input's gradient."""
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = graph_fn(*tensors)
    ad.backward(loss)

    def scalar(*work):
        return float(graph_fn(*[ad.Tensor(w) for w in work]).data)

    worst = 0.0
    for i, t in enumerate(tensors):
        numeric = finite_diff(scalar, arrays, wrt=i)
        analytic = t.grad if t.grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, rel_error(analytic, numeric))
    results.append(CheckResult(name, worst, worst < TOLERANCE))


def _projection(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def run_all(seed: int = 0) -> list[CheckResult]:
    """Run the full gradient-check suite at float64; returns per-op results."""
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    # conv3d
    x = rng.standard_normal((2, 2, 4, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3, 3)) * 0.5
    b = rng.standard_normal(3) * 0.1
    r = _projection(rng, (2, 3, 4, 4, 4))
    _check(
        "conv3d",
        lambda xt, wt, bt: _proj(ad.conv3d(xt, wt, bt), r),
        [x, w, b],
        results,
    )

    # batchnorm3d, train and eval modes
    x = rng.standard_normal((2, 3, 2, 2, 2))
    gamma = 1.0 + 0.2 * rng.standard_normal(3)
    beta = 0.1 * rng.standard_normal(3)
    r = _projection(rng, x.shape)
    for mode in ("train", "eval"):
        def bn_graph(xt, gt, bt, _mode=mode):
            state = ad.BNState(
                np.asarray([0.1, -0.2, 0.05]), np.asarray([1.2, 0.8, 1.0])
            )
            return _proj(ad.batchnorm3d(xt, gt, bt, state, _mode), r)

        _check(f"batchnorm3d[{mode}]", bn_graph, [x, gamma, beta], results)

    # maxpool3d (random values: tie/kink probability is zero at this scale)
    x = rng.standard_normal((2, 2, 4, 4, 4))
    r = _projection(rng, (2, 2, 2, 2, 2))
    _check("maxpool3d", lambda xt: _proj(ad.maxpool3d(xt), r), [x], results)

    # pointwise layer with ReLU; redraw until preactivations clear the kink
    while True:
        x = rng.standard_normal((2, 5, 7))
        w = rng.standard_normal((4, 5)) * 0.7
        b = rng.standard_normal(4) * 0.1
        z = np.matmul(w, x) + b[None, :, None]
        if np.abs(z).min() > 1e-3:
            break
    r = _projection(rng, (2, 4, 7))
    _check(
        "pointwise_layer[relu]",
        lambda xt, wt, bt: _proj(ad.pointwise_layer(xt, wt, bt, "relu"), r),
        [x, w, b],
        results,
    )

    # trilinear grid sampling (gradient w.r.t. grid values)
    grid = rng.standard_normal((2, 3, 3, 4, 5))
    pts = rng.uniform(-1.2, 1.2, size=(2, 6, 3))
    r = _projection(rng, (2, 3, 6))
    _check(
        "trilinear_sample",
        lambda gt: _proj(ad.trilinear_sample(gt, pts), r),
        [grid],
        results,
    )

    # losses
    logits = rng.standard_normal((4, 8))
    targets = (rng.random((4, 8)) > 0.5).astype(np.float64)
    _check("bce_with_logits", lambda lt: ad.bce_with_logits(lt, targets), [logits], results)

    logits = rng.standard_normal((2, 4, 5))
    ids = rng.integers(0, 4, size=(2, 5))
    _check("cross_entropy", lambda lt: ad.cross_entropy(lt, ids), [logits], results)

    # composite graph: conv -> bn -> relu -> pool -> trilinear -> pointwise -> bce
    x = rng.standard_normal((1, 1, 4, 4, 4))
    cw = rng.standard_normal((2, 1, 3, 3, 3)) * 0.5
    cb = rng.standard_normal(2) * 0.1
    gamma = 1.0 + 0.2 * rng.standard_normal(2)
    beta = 0.1 * rng.standard_normal(2)
    pw = rng.standard_normal((1, 2)) * 0.8
    pb = rng.standard_normal(1) * 0.1
    pts = rng.uniform(-0.9, 0.9, size=(1, 5, 3))
    targets = (rng.random((1, 1, 5)) > 0.5).astype(np.float64)

    def composite(xt, cwt, cbt, gt, bt, pwt, pbt):
        state = ad.BNState(np.zeros(2), np.ones(2))
        h = ad.relu(ad.batchnorm3d(ad.conv3d(xt, cwt, cbt), gt, bt, state, "train"))
        h = ad.maxpool3d(h)
        feats = ad.trilinear_sample(h, pts)
        logits = ad.pointwise_layer(feats, pwt, pbt, "none")
        return ad.bce_with_logits(logits, targets)

    _check("composite", composite, [x, cw, cb, gamma, beta, pw, pb], results)
    return results


def _proj(out: ad.Tensor, r: np.ndarray) -> ad.Tensor:
    """Random linear projection of an op output to a scalar, on the tape."""
    rt = ad.Tensor(np.asarray(r))
    prod = _mul(out, rt)
    return _sum_all(prod)


def _mul(a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    def back(g):
        if a.needs_grad():
            a.accumulate(g * b.data)
        if b.needs_grad():
            b.accumulate(g * a.data)

    return ad._result(a.data * b.data, (a, b), back)


def _sum_all(a: ad.Tensor) -> ad.Tensor:
    def back(g):
        if a.needs_grad():
            a.accumulate(np.full_like(a.data, float(g)))

    return ad._result(np.asarray(a.data.sum()), (a,), back)
