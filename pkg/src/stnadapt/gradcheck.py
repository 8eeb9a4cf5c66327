"""Finite-difference verification of every differentiable primitive.

Each check builds a random small input, reduces the primitive's output to a
scalar with a fixed random projection, and compares the autodiff gradient
against the central-difference oracle in double precision.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import layers, stn
from .autodiff import (
    Tensor,
    finite_difference_gradient,
    relative_gradient_error,
)

DEFAULT_TRIALS = 20
DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4


def _projected(out: Tensor, proj: np.ndarray) -> Tensor:
    from .autodiff import mul, tensor_sum

    return tensor_sum(mul(out, Tensor(proj)))


def _check(build: Callable, x0: np.ndarray, rng: np.random.Generator,
           h: float) -> float:
    """Relative error between autodiff and finite differences at x0."""
    proj = rng.standard_normal(build(Tensor(x0)).shape)

    def scalar(x: np.ndarray) -> float:
        return _projected(build(Tensor(x)), proj).item()

    xt = Tensor(x0.copy(), requires_grad=True)
    loss = _projected(build(xt), proj)
    loss.backward()
    numeric = finite_difference_gradient(scalar, x0, h)
    return relative_gradient_error(xt.grad, numeric)


def _jittered_theta(rng: np.random.Generator) -> np.ndarray:
    """Random theta whose sampling points avoid the pixel-center lattice."""
    t = stn.IDENTITY_THETA + 0.15 * rng.standard_normal(6)
    t[2] += 0.013
    t[5] += 0.017
    return t


# -- per-primitive checks ------------------------------------------------


def check_mul(rng, h):
    x0 = rng.standard_normal((4, 5))
    from .autodiff import mul

    return _check(lambda x: mul(x, x), x0, rng, h)


def check_matmul(rng, h):
    x0 = rng.standard_normal((3, 4))
    other = Tensor(rng.standard_normal((4, 2)))
    from .autodiff import matmul

    return _check(lambda x: matmul(x, other), x0, rng, h)


def check_conv2d_input(rng, h):
    w = Tensor(rng.standard_normal((2, 1, 3, 3)))
    b = Tensor(rng.standard_normal(2))
    x0 = rng.standard_normal((1, 1, 4, 4))
    return _check(lambda x: layers.conv2d(x, w, b), x0, rng, h)


def check_conv2d_kernel(rng, h):
    x = Tensor(rng.standard_normal((1, 2, 4, 4)))
    b = Tensor(rng.standard_normal(3))
    w0 = rng.standard_normal((3, 2, 3, 3))
    return _check(lambda w: layers.conv2d(x, w, b), w0, rng, h)


def check_conv3d_input(rng, h):
    w = Tensor(rng.standard_normal((2, 1, 2, 3, 3)))
    b = Tensor(rng.standard_normal(2))
    x0 = rng.standard_normal((1, 1, 4, 3, 3))
    return _check(
        lambda x: layers.conv3d(x, w, b, temporal_stride=2), x0, rng, h
    )


def check_conv3d_kernel(rng, h):
    x = Tensor(rng.standard_normal((1, 1, 5, 4, 4)))
    b = Tensor(rng.standard_normal(2))
    w0 = rng.standard_normal((2, 1, 3, 3, 3))
    return _check(
        lambda w: layers.conv3d(x, w, b, temporal_stride=1), w0, rng, h
    )


def check_maxpool(rng, h):
    x0 = rng.standard_normal((1, 2, 8, 8))
    return _check(layers.maxpool2d, x0, rng, h)


def check_dense(rng, h):
    w = Tensor(rng.standard_normal((6, 4)))
    b = Tensor(rng.standard_normal(4))
    x0 = rng.standard_normal((3, 6))
    return _check(lambda x: layers.dense(x, w, b), x0, rng, h)


def check_dense_weight(rng, h):
    x = Tensor(rng.standard_normal((3, 6)))
    b = Tensor(rng.standard_normal(4))
    w0 = rng.standard_normal((6, 4))
    return _check(lambda w: layers.dense(x, w, b), w0, rng, h)


def check_swish(rng, h):
    x0 = rng.standard_normal((5, 5))
    return _check(layers.swish, x0, rng, h)


def check_mse(rng, h):
    target = Tensor(rng.standard_normal((4, 7)))
    x0 = rng.standard_normal((4, 7))
    proj = np.ones(())

    def scalar(x):
        return layers.mse_loss(Tensor(x), target).item()

    xt = Tensor(x0.copy(), requires_grad=True)
    layers.mse_loss(xt, target).backward()
    numeric = finite_difference_gradient(scalar, x0, h)
    return relative_gradient_error(xt.grad, numeric)


def check_affine_grid(rng, h):
    t0 = _jittered_theta(rng)
    return _check(lambda t: stn.make_affine_grid(t, 5, 6), t0, rng, h)


def check_bilinear_image(rng, h):
    grid = stn.make_affine_grid(Tensor(_jittered_theta(rng)), 6, 7)
    grid = Tensor(grid.data)
    x0 = rng.standard_normal((2, 6, 7))
    return _check(lambda x: stn.bilinear_sample(x, grid), x0, rng, h)


def check_bilinear_theta(rng, h):
    img = Tensor(rng.standard_normal((1, 6, 7)))
    t0 = _jittered_theta(rng)
    return _check(
        lambda t: stn.bilinear_sample(img, stn.make_affine_grid(t, 6, 7)),
        t0,
        rng,
        h,
    )


PRIMITIVES: dict[str, Callable] = {
    "mul": check_mul,
    "matmul": check_matmul,
    "conv2d_input": check_conv2d_input,
    "conv2d_kernel": check_conv2d_kernel,
    "conv3d_input": check_conv3d_input,
    "conv3d_kernel": check_conv3d_kernel,
    "maxpool": check_maxpool,
    "dense_input": check_dense,
    "dense_weight": check_dense_weight,
    "swish": check_swish,
    "mse": check_mse,
    "affine_grid": check_affine_grid,
    "bilinear_image": check_bilinear_image,
    "bilinear_theta": check_bilinear_theta,
}


def run_primitive(
    name: str,
    trials: int = DEFAULT_TRIALS,
    h: float = DEFAULT_STEP,
    seed: int = 0,
) -> list[float]:
    """Relative errors over ``trials`` randomized checks of one primitive."""
    import zlib

    fn = PRIMITIVES[name]
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    return [fn(rng, h) for _ in range(trials)]


def run_all(
    trials: int = DEFAULT_TRIALS,
    h: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
    seed: int = 0,
) -> dict[str, dict]:
    """Check every primitive; returns per-primitive max error and verdict."""
    report = {}
    for name in PRIMITIVES:
        errs = run_primitive(name, trials=trials, h=h, seed=seed)
        report[name] = {
            "max_error": max(errs),
            "trials": len(errs),
            "passed": max(errs) < tol,
        }
    return report
