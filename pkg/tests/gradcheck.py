"""Finite-difference gradient harness shared by the unit and acceptance tests."""

import numpy as np

from tsrcan import tensor as T
from tsrcan.tensor import Tensor

FD_STEP = 1e-3
FD_TOL = 1e-4


def check_gradients(fn, arrays, rng, step=FD_STEP, tol=FD_TOL):
    """Analytic gradient of sum(fn(*inputs) * R) against central differences
    at every coordinate of every input.  Returns the worst relative error."""
    with T.float64_mode():
        inputs = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*inputs)
        weights = Tensor(rng.standard_normal(out.shape))

        def scalar():
            y = fn(*inputs)
            return T.sum(T.mul(y, weights)) if y.shape else y

        scalar().backward()
        worst = 0.0
        for t in inputs:
            for idx in np.ndindex(t.shape):
                num = T.numerical_gradient(scalar, t, idx, eps=step)
                err = float(T.relative_error(t.grad[idx], num, floor=1e-6))
                assert err < tol, f"coordinate {idx}: analytic {t.grad[idx]} vs numeric {num}"
                worst = max(worst, err)
    return worst


def away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def distinct(rng, shape, gap=0.01):
    return rng.permutation(np.arange(int(np.prod(shape))) * gap).reshape(shape)


def _bn(training):
    def make(rng):
        state = T.BatchNormState(3)
        state.running_mean = rng.standard_normal(3)
        state.running_var = rng.uniform(0.5, 2.0, 3)
        fn = lambda x, g, b: T.batchnorm2d(x, g, b, state, training=training)  # noqa: E731
        return fn, [rng.standard_normal((2, 3, 2, 2)), rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)]
    return make


# name -> rng -> (fn, input arrays); one entry per differentiable op
OP_CASES = {
    "add": lambda r: (T.add, [r.standard_normal((2, 3)), r.standard_normal((2, 3))]),
    "sub": lambda r: (T.sub, [r.standard_normal((2, 3)), r.standard_normal((2, 3))]),
    "mul": lambda r: (T.mul, [r.standard_normal((2, 3)), r.standard_normal((2, 3))]),
    "sum": lambda r: (T.sum, [r.standard_normal((2, 3, 2))]),
    "mean": lambda r: (T.mean, [r.standard_normal((2, 3, 2))]),
    "reshape": lambda r: (lambda x: T.reshape(x, (3, 4)), [r.standard_normal((2, 3, 2))]),
    "relu": lambda r: (T.relu, [away_from_zero(r, (2, 3, 3))]),
    "sigmoid": lambda r: (T.sigmoid, [3 * r.standard_normal((2, 5))]),
    "scale_channels": lambda r: (T.scale_channels,
                                 [r.standard_normal((2, 3, 2, 2)), r.standard_normal((2, 3, 1, 1))]),
    "global_avg_pool": lambda r: (T.global_avg_pool, [r.standard_normal((2, 3, 3, 2))]),
    "concat_channels": lambda r: (T.concat_channels,
                                  [r.standard_normal((1, 2, 2, 3)), r.standard_normal((1, 3, 2, 3))]),
    "slice_channels": lambda r: (lambda x: T.slice_channels(x, 1, 3), [r.standard_normal((2, 4, 2, 2))]),
    "depth_to_space": lambda r: (lambda x: T.depth_to_space(x, 2), [r.standard_normal((1, 8, 2, 3))]),
    "conv2d": lambda r: (lambda x, w, b: T.conv2d(x, w, b, stride=2, pad=1),
                         [r.standard_normal((2, 2, 5, 5)), r.standard_normal((3, 2, 3, 3)), r.standard_normal(3)]),
    "conv_transpose2d": lambda r: (lambda x, w, b: T.conv_transpose2d(x, w, b, stride=4, pad=2),
                                   [r.standard_normal((1, 2, 3, 3)), r.standard_normal((2, 2, 8, 8)),
                                    r.standard_normal(2)]),
    "maxpool2d": lambda r: (lambda x: T.maxpool2d(x, 3, 2, pad=1), [distinct(r, (1, 2, 5, 5))]),
    "batchnorm2d_train": _bn(True),
    "batchnorm2d_eval": _bn(False),
    "smooth_l1": lambda r: (T.smooth_l1, [np.array([0.3, -0.2, 2.5, -3.0, 0.9, -1.7]), r.standard_normal(6) * 0.01]),
}
