"""Central finite-difference checks for the autodiff ops.

``run_op_suite`` is what the ``gradcheck`` CLI subcommand executes. Each op is
checked on several random shapes by projecting its output onto a fixed random
tensor, so a single scalar drives both the analytic and numeric gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad

DEFAULT_STEP = 1e-6
DENOM_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    shape: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DENOM_FLOOR) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numeric_grad(
    f: Callable[[], float],
    x: np.ndarray,
    step: float = DEFAULT_STEP,
    indices: Sequence[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x``, perturbed in place.

    The step is scaled per entry by max(1, |x_i|). If ``indices`` is given only
    those entries are estimated and the rest are left at zero.
    """
    out = np.zeros_like(x)
    it = indices if indices is not None else list(np.ndindex(*x.shape))
    for idx in it:
        orig = x[idx]
        h = step * max(1.0, abs(orig))
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        out[idx] = (fp - fm) / (2.0 * h)
    return out


def check_function(
    build: Callable[[Sequence[ad.Tensor]], ad.Tensor],
    inputs: Sequence[np.ndarray],
    rng: np.random.Generator,
    step: float = DEFAULT_STEP,
) -> float:
    """Max relative error over all inputs of ``build`` projected onto a random tensor."""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    probe_out = build([ad.Tensor(a) for a in arrays]).data
    proj = rng.standard_normal(probe_out.shape)

    def scalar() -> float:
        return float((build([ad.Tensor(a) for a in arrays]).data * proj).sum())

    leaves = [ad.Tensor(a, requires_grad=True) for a in arrays]
    out = build(leaves)
    out.backward(proj)
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        # leaves share memory with ``arrays`` so perturbing arr is seen by scalar()
        leaf.data = arr
        worst = max(worst, rel_error(leaf.grad, numeric_grad(scalar, arr, step)))
    return worst


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _distinct(rng, shape):
    # spaced values keep maxpool away from ties under the FD step
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64) * 0.01 + rng.uniform(0, 0.001, n)).reshape(shape)


def op_cases(rng: np.random.Generator):
    """Yield (name, shape label, build, inputs) for every op on >= 5 shapes."""
    vec_shapes = [(3,), (2, 5), (4, 3), (2, 3, 4, 4), (1, 2, 3, 5)]
    for s in vec_shapes:
        yield "add", str(s), lambda t: ad.add(t[0], t[1]), [rng.standard_normal(s), rng.standard_normal(s)]
        yield "scale", str(s), lambda t: ad.scale(t[0], -1.7), [rng.standard_normal(s)]
        yield "relu", str(s), lambda t: ad.relu(t[0]), [_away_from_zero(rng, s)]
        yield "tanh", str(s), lambda t: ad.tanh(t[0]), [rng.standard_normal(s)]
        yield "sigmoid", str(s), lambda t: ad.sigmoid(t[0]), [2.0 * rng.standard_normal(s)]
        yield "reshape", str(s), lambda t: ad.reshape(t[0], (-1,)), [rng.standard_normal(s)]

    for s in [(2, 5), (3, 7), (1, 4), (4, 6), (2, 9)]:
        a, b = 1, s[1] - 1
        yield "columns", str(s), lambda t, a=a, b=b: ad.columns(t[0], a, b), [rng.standard_normal(s)]
        tgt = rng.standard_normal(s)
        yield "mse", str(s), lambda t, tgt=tgt: ad.mse(t[0], tgt), [rng.standard_normal(s)]
        yield (
            "summed_residual_mse",
            str(s),
            lambda t, tgt=tgt: ad.summed_residual_mse(t[0], tgt),
            [rng.standard_normal(s)],
        )

    for b, c1, c2, h, w in [(1, 1, 2, 3, 3), (2, 3, 1, 4, 5), (2, 2, 3, 2, 2), (1, 4, 4, 3, 1), (3, 1, 1, 2, 6)]:
        shapes = [(b, c1, h, w), (b, c2, h, w)]
        yield (
            "concat_channels",
            str(shapes),
            lambda t: ad.concat_channels([t[0], t[1]]),
            [rng.standard_normal(shapes[0]), rng.standard_normal(shapes[1])],
        )

    conv_cases = [
        ((2, 3, 8, 8), (4, 3, 1, 3), 1, (0, 1)),
        ((1, 2, 5, 5), (3, 2, 3, 3), 1, 1),
        ((2, 1, 6, 6), (2, 1, 3, 1), 1, (1, 0)),
        ((1, 3, 7, 7), (2, 3, 3, 3), 2, 1),
        ((2, 2, 8, 8), (3, 2, 4, 4), 2, 1),
        ((1, 4, 4, 4), (5, 4, 1, 1), 1, 0),
    ]
    for xs, ws, stride, pad in conv_cases:
        yield (
            "conv2d",
            f"x{xs} w{ws} s{stride} p{pad}",
            lambda t, stride=stride, pad=pad: ad.conv2d(t[0], t[1], t[2], stride=stride, padding=pad),
            [rng.standard_normal(xs), rng.standard_normal(ws), rng.standard_normal(ws[0])],
        )

    pool_cases = [((1, 1, 4, 4), 2, 2, 0), ((2, 3, 6, 6), 2, 2, 0), ((1, 2, 5, 5), 2, 2, 0),
                  ((2, 2, 4, 4), 3, 1, 1), ((1, 3, 5, 6), 3, 1, 1)]
    for s, k, st, p in pool_cases:
        yield (
            "maxpool2d",
            f"{s} k{k} s{st} p{p}",
            lambda t, k=k, st=st, p=p: ad.maxpool2d(t[0], k, st, p),
            [_distinct(rng, s)],
        )

    for s in [(1, 1, 2, 2), (2, 3, 4, 4), (1, 5, 3, 2), (3, 2, 1, 1), (2, 1, 5, 5)]:
        yield "global_avg_pool", str(s), lambda t: ad.global_avg_pool(t[0]), [rng.standard_normal(s)]

    for bsz, fi, fo in [(1, 3, 2), (2, 5, 4), (4, 8, 3), (3, 1, 6), (2, 16, 7)]:
        yield (
            "dense",
            f"x({bsz},{fi}) w({fi},{fo})",
            lambda t: ad.dense(t[0], t[1], t[2]),
            [rng.standard_normal((bsz, fi)), rng.standard_normal((fi, fo)), rng.standard_normal(fo)],
        )

    for s in [(3,), (1, 3), (2, 3), (5, 3), (8, 3)]:
        tgt = rng.uniform(0.05, 1.0, s)
        yield (
            "cosine_angle_loss",
            str(s),
            lambda t, tgt=tgt: ad.cosine_angle_loss(t[0], tgt),
            [rng.uniform(0.05, 1.0, s)],
        )


OP_TOLERANCE = 1e-5


def run_op_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, label, build, inputs in op_cases(rng):
        err = check_function(build, inputs, rng)
        results.append(CheckResult(name, label, err, OP_TOLERANCE))
    return results


E2E_TOLERANCE = 1e-4
E2E_SCALE_FLOOR = 1e-4
# the network loss sums many terms, so roundoff dominates below this step
E2E_STEP = 1e-5


def tiny_model_config(size: int = 16):
    from .estimator import ModelConfig

    return ModelConfig(input_size=size, stem_channels=4, stages=(("inception", 8),), decoder_hidden=6)


def end_to_end_check(seed: int = 0, size: int = 16, batch: int = 2) -> list[CheckResult]:
    """FD check of total_loss w.r.t. every parameter of a one-stage model."""
    from . import estimator as est
    from .lightmath import LightColor
    from .scenegen import LightGT

    rng = np.random.default_rng(seed)
    model = est.build_model(tiny_model_config(size), rng)
    # zero-initialized biases put ReLU inputs exactly on the kink; move them off it
    for name, t in model.params:
        if name.endswith(".b"):
            t.data[...] = rng.normal(0.0, 0.1, t.shape)
    images = rng.random((batch, 3, size, size))
    gts = [
        LightGT(float(rng.uniform(-180, 180)), float(rng.uniform(-80, 0)), LightColor(*rng.uniform(0.2, 1.0, 3)))
        for _ in range(batch)
    ]
    targets = est.Targets.from_gts(gts)

    def loss() -> float:
        return est.total_loss(model.forward(ad.Tensor(images)), targets).total.item()

    model.params.zero_grad()
    est.total_loss(model.forward(ad.Tensor(images)), targets).total.backward()
    results = []
    for name, t in model.params:
        analytic = t.grad.copy()
        numeric = numeric_grad(loss, t.data, E2E_STEP)
        # entries far below the tensor's gradient scale are compared against that scale
        floor = max(DENOM_FLOOR, E2E_SCALE_FLOOR * float(np.abs(analytic).max()))
        errs = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        bad = [tuple(i) for i in np.argwhere(errs >= E2E_TOLERANCE)]
        if bad:
            # a ReLU or max-pool switch inside the step; a smaller step avoids it
            retry = numeric_grad(loss, t.data, E2E_STEP / 10.0, bad)
            for i in bad:
                e2 = abs(analytic[i] - retry[i]) / max(abs(analytic[i]), abs(retry[i]), floor)
                errs[i] = min(errs[i], e2)
        err = float(errs.max()) if errs.size else 0.0
        results.append(CheckResult(f"total_loss/{name}", str(t.shape), err, E2E_TOLERANCE))
    model.params.zero_grad()
    return results
