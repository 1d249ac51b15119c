"""Registry of finite-difference checks covering every differentiable
operation, plus the whole-network composition.

Each builder seeds its own inputs away from kinks (relu zero crossings,
clamp edges, the log floor) so that central differences are meaningful;
the checks themselves run in double precision through `tensor.gradcheck`.
"""

import numpy as np

from . import ict
from . import tensor as T
from .losses import supervised_loss
from .sanet import ModelConfig, SANet
from .tensor import Tensor


def _param(rng, shape, lo=-1.0, hi=1.0, name=None):
    data = rng.uniform(lo, hi, size=shape)
    return Tensor(data, requires_grad=True, dtype=np.float64, name=name)


def _scalarize(out, rng):
    w = Tensor(rng.standard_normal(out.shape))
    return T.reduce(T.multiply(out, w), "sum")


def _away_from(x, gap):
    """Push values out of the +-gap band around zero."""
    return x + np.sign(x) * gap


def _binary_builder(op):
    def build(seed):
        rng = np.random.default_rng(seed)
        a = _param(rng, (2, 3, 4, 4), name="a")
        b = _param(rng, (2, 3, 4, 4), name="b")
        if op is T.divide:
            b.data = _away_from(b.data, 0.5)
        return lambda: _scalarize(op(a, b), np.random.default_rng(seed + 1)), [a, b]

    return build


def _unary_builder(op, lo=-1.0, hi=1.0, gap=None):
    def build(seed):
        rng = np.random.default_rng(seed)
        x = _param(rng, (2, 3, 4, 4), lo, hi, name="x")
        if gap:
            x.data = _away_from(x.data, gap)
        return lambda: _scalarize(op(x), np.random.default_rng(seed + 1)), [x]

    return build


def _broadcast_mul(seed):
    rng = np.random.default_rng(seed)
    a = _param(rng, (2, 3, 4, 4), name="a")
    lam = _param(rng, (2, 1, 4, 4), 0.1, 0.9, name="lam")
    return lambda: _scalarize(T.multiply(a, lam), np.random.default_rng(seed + 1)), [a, lam]


def _clamp(seed):
    rng = np.random.default_rng(seed)
    x = _param(rng, (2, 3, 4, 4), -2.0, 2.0, name="x")
    x.data = _away_from(x.data - np.rint(x.data), 0.01) + np.rint(x.data)  # off the +-1 edges
    return lambda: _scalarize(T.clamp(x, -1.0, 1.0), np.random.default_rng(seed + 1)), [x]


def _power(seed):
    rng = np.random.default_rng(seed)
    x = _param(rng, (2, 3, 4, 4), 0.2, 2.0, name="x")
    return lambda: _scalarize(T.power(x, 1.7), np.random.default_rng(seed + 1)), [x]


def _reduce(kind, axes):
    def build(seed):
        rng = np.random.default_rng(seed)
        x = _param(rng, (2, 3, 4, 5), name="x")
        return lambda: _scalarize(T.reduce(x, kind, axes), np.random.default_rng(seed + 1)), [x]

    return build


def _conv2d(seed):
    rng = np.random.default_rng(seed)
    x = _param(rng, (2, 3, 6, 6), name="input")
    k = _param(rng, (4, 3, 3, 3), -0.5, 0.5, name="kernel")
    stride = 1 + seed % 2
    return (
        lambda: _scalarize(T.conv2d(x, k, stride=stride, padding=1), np.random.default_rng(seed + 1)),
        [x, k],
    )


def _resample(mode, factor):
    def build(seed):
        rng = np.random.default_rng(seed)
        x = _param(rng, (2, 2, 4, 6), name="x")
        return lambda: _scalarize(T.resample(x, factor, mode), np.random.default_rng(seed + 1)), [x]

    return build


def _gather(seed):
    rng = np.random.default_rng(seed)
    x = _param(rng, (2, 3, 5, 5), name="x")
    plan = ict.lcs_plan(x.data, 3, np.random.default_rng(seed + 7))
    return lambda: _scalarize(ict.apply_shuffle(x, plan), np.random.default_rng(seed + 1)), [x]


def _mix(seed):
    rng = np.random.default_rng(seed)
    x = _param(rng, (1, 3, 5, 5), name="x")
    plan = ict.lcs_plan(x.data, 3, np.random.default_rng(seed + 7))
    f = lambda: _scalarize(
        ict.mix(x, ict.apply_shuffle(x, plan), plan.lam), np.random.default_rng(seed + 1)
    )
    return f, [x]


def _warp(seed):
    rng = np.random.default_rng(seed)
    x = _param(rng, (2, 2, 6, 6), name="map")
    flow = rng.standard_normal((2, 2, 6, 6)) * 1.5
    # keep sampling points off the integer lattice so the bilinear weights
    # are locally smooth in the probe
    flow += np.where(np.abs(flow - np.rint(flow)) < 0.05, 0.1, 0.0)
    return lambda: _scalarize(T.warp(x, flow), np.random.default_rng(seed + 1)), [x]


def _batchnorm(seed):
    rng = np.random.default_rng(seed)
    x = _param(rng, (2, 3, 4, 4), name="x")
    gamma = _param(rng, (1, 3, 1, 1), 0.5, 1.5, name="gamma")
    beta = _param(rng, (1, 3, 1, 1), -0.5, 0.5, name="beta")
    f = lambda: _scalarize(T.batchnorm_train(x, gamma, beta)[0], np.random.default_rng(seed + 1))
    return f, [x, gamma, beta]


OP_CHECKS = {
    "add": _binary_builder(T.add),
    "subtract": _binary_builder(T.subtract),
    "multiply": _binary_builder(T.multiply),
    "multiply_channel_broadcast": _broadcast_mul,
    "divide": _binary_builder(T.divide),
    "sigmoid": _unary_builder(T.sigmoid, -3.0, 3.0),
    "exponential": _unary_builder(T.exponential, -2.0, 1.0),
    "logarithm": _unary_builder(T.logarithm, 0.1, 2.0),
    "power": _power,
    "relu": _unary_builder(T.relu, -1.0, 1.0, gap=0.05),
    "clamp": _clamp,
    "reduce_sum": _reduce("sum", (0, 2)),
    "reduce_mean": _reduce("mean", None),
    "conv2d": _conv2d,
    "resample_bilinear_up": _resample("bilinear", 2),
    "resample_bilinear_down": _resample("bilinear", 0.5),
    "resample_nearest": _resample("nearest", 2),
    "spatial_gather": _gather,
    "mix": _mix,
    "warp": _warp,
    "batchnorm": _batchnorm,
}


def check_op(name, seeds=range(20), step=1e-4):
    """Run one op's finite-difference check over the seeds; returns the
    worst report."""
    worst = None
    for seed in seeds:
        f, params = OP_CHECKS[name](int(seed))
        report = T.gradcheck(f, params, step=step)
        if worst is None or report.max_rel_error > worst.max_rel_error or not report.passed:
            worst = report
        if not report.passed:
            break
    return worst


def check_model(seed=0, channels=(2, 3, 4, 5), size=16, step=1e-4):
    """Finite differences through the entire network plus the supervised
    loss. Batch 2: a single sample would let the deepest 1x1 stage
    normalize onto the relu kink exactly."""
    rng = np.random.default_rng(seed)
    model = SANet(ModelConfig(channels=channels), rng, dtype=np.float64)
    frame = Tensor(rng.random((2, 3, size, size)), dtype=np.float64)
    gt = (rng.random((2, 1, size, size)) > 0.5).astype(np.float64)
    params = [p for _, p in model.named_parameters()]
    for name, p in model.named_parameters():
        p.name = name
    return T.gradcheck(lambda: supervised_loss(model.forward(frame, "labeled"), gt), params, step=step)
