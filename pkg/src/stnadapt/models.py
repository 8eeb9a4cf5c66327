"""Builders for the 2-d and 3-d spectral regressors with an optional
spatial-transformer front end, plus checkpoint save/load.

Every trainable tensor has a name prefixed by its group (``stn``, ``trunk``
or ``output``); the groups form an exact partition and drive selective
freezing during adaptation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import containers, layers
from .autodiff import (
    ShapeError,
    Tensor,
    repeat_batch,
    reshape,
    slice_axis,
    transpose,
)
from .stn import IDENTITY_THETA, bilinear_sample, make_affine_grid

VARIANTS = ("regressor2d", "regressor3d")


def _scaled(value: int, scale: float, multiple: int = 1) -> int:
    out = max(multiple, int(round(value * scale)))
    return out - out % multiple if multiple > 1 else out


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; defaults follow the full-size configuration,
    ``scaled()`` shrinks images and widths proportionally for fast runs."""

    variant: str = "regressor2d"
    with_stn: bool = True
    in_height: int = 64
    in_width: int = 128
    block_frames: int = 25
    t_stride: int = 5
    conv_filters: tuple[int, ...] = (30, 60, 90, 120)
    fc_width: int = 300
    out_dim: int = 80
    dropout: float = 0.2
    loc_filters: tuple[int, ...] = (10, 20, 30, 40)
    loc_fc_width: int = 64
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if len(self.conv_filters) != 4 or len(self.loc_filters) != 4:
            raise ValueError("conv filter lists must have length 4")
        if self.out_dim <= 0 or not 0.0 <= self.dropout < 1.0:
            raise ValueError("invalid output dim or dropout rate")
        if self.in_height % 4 or self.in_width % 4:
            raise ValueError("input dims must be divisible by 4 (two poolings)")
        if self.variant == "regressor3d" and self.block_frames % self.t_stride:
            raise ValueError("block_frames must be a multiple of t_stride")

    @staticmethod
    def scaled(scale: float = 1.0, **overrides) -> "ModelSpec":
        base = ModelSpec(**overrides)
        if scale == 1.0:
            return base
        return replace(
            base,
            in_height=_scaled(base.in_height, scale, multiple=4),
            in_width=_scaled(base.in_width, scale, multiple=4),
            conv_filters=tuple(_scaled(f, scale) for f in base.conv_filters),
            fc_width=_scaled(base.fc_width, scale),
            loc_filters=tuple(_scaled(f, scale) for f in base.loc_filters),
            loc_fc_width=_scaled(base.loc_fc_width, scale),
        )

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def input_shape(self) -> tuple[int, ...]:
        if self.variant == "regressor3d":
            return (1, self.block_frames, self.in_height, self.in_width)
        return (1, self.in_height, self.in_width)


class Model:
    """An instantiated parameter set plus its spec.

    ``fixed_theta`` replaces the localization network with a constant
    transform; ``target_mean``/``target_std`` carry the output
    standardization statistics the model was trained against.
    """

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.params = params
        self.fixed_theta: np.ndarray | None = None
        self.target_mean: np.ndarray | None = None
        self.target_std: np.ndarray | None = None

    def group(self, name: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items()
                if k.split(".", 1)[0] == name}

    def group_names(self) -> list[str]:
        seen = dict.fromkeys(k.split(".", 1)[0] for k in self.params)
        return list(seen)

    def clone(self) -> "Model":
        other = Model(
            self.spec,
            {k: Tensor(v.data.copy(), requires_grad=True)
             for k, v in self.params.items()},
        )
        if self.fixed_theta is not None:
            other.fixed_theta = self.fixed_theta.copy()
        if self.target_mean is not None:
            other.target_mean = self.target_mean.copy()
            other.target_std = self.target_std.copy()
        return other


# -- construction --------------------------------------------------------


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _add_convnet_2d(params, prefix, rng, in_ch, filters, dtype):
    ch = in_ch
    for i, f in enumerate(filters, start=1):
        params[f"{prefix}.conv{i}.w"] = Tensor(
            _he(rng, (f, ch, 3, 3), ch * 9, dtype), requires_grad=True
        )
        params[f"{prefix}.conv{i}.b"] = Tensor(
            np.zeros(f, dtype=dtype), requires_grad=True
        )
        ch = f
    return ch


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    """Instantiate all parameters with seeded fan-in-scaled init; the
    localization head starts as the exact identity transform."""
    rng = np.random.default_rng([seed, 71])
    dtype = spec.np_dtype
    params: dict[str, Tensor] = {}
    h, w = spec.in_height, spec.in_width
    flat_h, flat_w = h // 4, w // 4

    if spec.with_stn:
        _add_convnet_2d(params, "stn", rng, 1, spec.loc_filters, dtype)
        loc_flat = spec.loc_filters[-1] * flat_h * flat_w
        params["stn.fc.w"] = Tensor(
            _he(rng, (loc_flat, spec.loc_fc_width), loc_flat, dtype),
            requires_grad=True,
        )
        params["stn.fc.b"] = Tensor(
            np.zeros(spec.loc_fc_width, dtype=dtype), requires_grad=True
        )
        params["stn.head.w"] = Tensor(
            np.zeros((spec.loc_fc_width, 6), dtype=dtype), requires_grad=True
        )
        params["stn.head.b"] = Tensor(
            IDENTITY_THETA.astype(dtype), requires_grad=True
        )

    if spec.variant == "regressor2d":
        _add_convnet_2d(params, "trunk", rng, 1, spec.conv_filters, dtype)
    else:
        t_blocks = spec.block_frames // spec.t_stride
        t_kernels = (spec.t_stride, 1, 1, t_blocks)
        ch = 1
        for i, (f, kt) in enumerate(zip(spec.conv_filters, t_kernels), start=1):
            fan = ch * kt * 9
            params[f"trunk.conv{i}.w"] = Tensor(
                _he(rng, (f, ch, kt, 3, 3), fan, dtype), requires_grad=True
            )
            params[f"trunk.conv{i}.b"] = Tensor(
                np.zeros(f, dtype=dtype), requires_grad=True
            )
            ch = f
    trunk_flat = spec.conv_filters[-1] * flat_h * flat_w
    params["trunk.fc.w"] = Tensor(
        _he(rng, (trunk_flat, spec.fc_width), trunk_flat, dtype),
        requires_grad=True,
    )
    params["trunk.fc.b"] = Tensor(
        np.zeros(spec.fc_width, dtype=dtype), requires_grad=True
    )
    # Small output init keeps initial predictions near zero, i.e. near the
    # mean of standardized targets.
    params["output.w"] = Tensor(
        (rng.standard_normal((spec.fc_width, spec.out_dim)) * 0.01).astype(dtype),
        requires_grad=True,
    )
    params["output.b"] = Tensor(
        np.zeros(spec.out_dim, dtype=dtype), requires_grad=True
    )
    return Model(spec, params)


# -- forward passes ------------------------------------------------------


def _convnet_2d(x, params, prefix, n_layers, p, mode, rng):
    for i in range(1, n_layers + 1):
        x = layers.conv2d(x, params[f"{prefix}.conv{i}.w"],
                          params[f"{prefix}.conv{i}.b"])
        x = layers.swish(x)
        if i % 2 == 0:
            x = layers.maxpool2d(x)
        x = layers.dropout(x, p, mode, rng)
    return x


def localization_forward(model: Model, x, mode="eval", rng=None) -> Tensor:
    """Theta per sample, [B,6], from the localization network."""
    spec = model.spec
    b = x.shape[0]
    h = _convnet_2d(x, model.params, "stn", 4, spec.dropout, mode, rng)
    h = reshape(h, (b, -1))
    h = layers.dense(h, model.params["stn.fc.w"], model.params["stn.fc.b"])
    h = layers.swish(h)
    h = layers.dropout(h, spec.dropout, mode, rng)
    return layers.dense(h, model.params["stn.head.w"],
                        model.params["stn.head.b"])


def stn_apply(model: Model, x, mode="eval", rng=None, capture=None):
    """Warp the input by the predicted (or fixed) transform.

    2-d input [B,C,H,W] is sampled directly; for a 3-d block [B,C,T,H,W] one
    theta is computed from the central frame and the same grid is applied to
    every frame.
    """
    spec = model.spec
    is_3d = x.ndim == 5
    if is_3d:
        b, c, t, hh, ww = x.shape
        ref = reshape(slice_axis(x, 2, t // 2, t // 2 + 1), (b, c, hh, ww))
    else:
        b, c, hh, ww = x.shape
        ref = x
    if model.fixed_theta is not None:
        theta = Tensor(np.broadcast_to(
            model.fixed_theta.astype(x.dtype), (b, 6)).copy())
    else:
        theta = localization_forward(model, ref, mode, rng)
    grid = make_affine_grid(theta, hh, ww)
    if capture is not None:
        capture["theta"] = theta.data.copy()
        capture["grid"] = grid.data.copy()
    if not is_3d:
        return bilinear_sample(x, grid)
    frames = reshape(transpose(x, (0, 2, 1, 3, 4)), (b * t, c, hh, ww))
    tiled = repeat_batch(grid, t)
    if capture is not None:
        capture["frame_grids"] = tiled.data.reshape(b, t, hh, ww, 2).copy()
    warped = bilinear_sample(frames, tiled)
    return transpose(reshape(warped, (b, t, c, hh, ww)), (0, 2, 1, 3, 4))


def forward(model: Model, x, mode: str = "eval", rng=None, capture=None) -> Tensor:
    """Predict standardized spectral vectors, [B,out_dim]."""
    spec = model.spec
    from .autodiff import _wrap

    x = _wrap(x)
    if x.ndim == len(spec.input_shape):
        x = reshape(x, (1,) + tuple(x.shape))
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeError(
            f"input {x.shape} does not match spec {spec.input_shape}"
        )
    b = x.shape[0]
    if spec.with_stn:
        x = stn_apply(model, x, mode, rng, capture)
    if spec.variant == "regressor2d":
        h = _convnet_2d(x, model.params, "trunk", 4, spec.dropout, mode, rng)
    else:
        t_blocks = spec.block_frames // spec.t_stride
        strides = (spec.t_stride, 1, 1, 1)
        for i, st in enumerate(strides, start=1):
            h0 = x if i == 1 else h
            h = layers.conv3d(h0, model.params[f"trunk.conv{i}.w"],
                              model.params[f"trunk.conv{i}.b"],
                              temporal_stride=st)
            h = layers.swish(h)
            if i % 2 == 0:
                h = layers.maxpool2d_time(h)
            h = layers.dropout(h, spec.dropout, mode, rng)
    h = reshape(h, (b, -1))
    h = layers.dense(h, model.params["trunk.fc.w"], model.params["trunk.fc.b"])
    h = layers.swish(h)
    h = layers.dropout(h, spec.dropout, mode, rng)
    return layers.dense(h, model.params["output.w"], model.params["output.b"])


# -- parameter accounting ------------------------------------------------


def count_parameters(model: Model) -> dict:
    """Exact per-group parameter counts and fractions of the total."""
    counts = {"stn": 0, "trunk": 0, "output": 0}
    for name, p in model.params.items():
        counts[name.split(".", 1)[0]] += p.size
    total = sum(counts.values())
    return {
        **counts,
        "total": total,
        "fractions": {k: counts[k] / total for k in counts},
    }


# -- checkpoints ---------------------------------------------------------


def _meta_tensors(model: Model) -> dict[str, np.ndarray]:
    spec = model.spec
    meta = {
        "meta/variant": np.float32(VARIANTS.index(spec.variant)),
        "meta/with_stn": np.float32(spec.with_stn),
        "meta/in_height": np.float32(spec.in_height),
        "meta/in_width": np.float32(spec.in_width),
        "meta/block_frames": np.float32(spec.block_frames),
        "meta/t_stride": np.float32(spec.t_stride),
        "meta/conv_filters": np.asarray(spec.conv_filters, dtype=np.float32),
        "meta/fc_width": np.float32(spec.fc_width),
        "meta/out_dim": np.float32(spec.out_dim),
        "meta/dropout": np.float32(spec.dropout),
        "meta/loc_filters": np.asarray(spec.loc_filters, dtype=np.float32),
        "meta/loc_fc_width": np.float32(spec.loc_fc_width),
    }
    if model.fixed_theta is not None:
        meta["stn/fixed_theta"] = model.fixed_theta.astype(np.float32)
    if model.target_mean is not None:
        meta["norm/target_mean"] = model.target_mean.astype(np.float32)
        meta["norm/target_std"] = model.target_std.astype(np.float32)
    return meta


def save_model(path, model: Model) -> None:
    tensors = dict(_meta_tensors(model))
    for name, p in model.params.items():
        tensors[f"param/{name}"] = p.data
    containers.write_checkpoint(path, tensors)


def load_model(path) -> Model:
    tensors = containers.read_checkpoint(path)
    spec = ModelSpec(
        variant=VARIANTS[int(tensors["meta/variant"])],
        with_stn=bool(tensors["meta/with_stn"]),
        in_height=int(tensors["meta/in_height"]),
        in_width=int(tensors["meta/in_width"]),
        block_frames=int(tensors["meta/block_frames"]),
        t_stride=int(tensors["meta/t_stride"]),
        conv_filters=tuple(int(v) for v in tensors["meta/conv_filters"]),
        fc_width=int(tensors["meta/fc_width"]),
        out_dim=int(tensors["meta/out_dim"]),
        dropout=round(float(tensors["meta/dropout"]), 6),
        loc_filters=tuple(int(v) for v in tensors["meta/loc_filters"]),
        loc_fc_width=int(tensors["meta/loc_fc_width"]),
    )
    params = {
        name[len("param/"):]: Tensor(arr, requires_grad=True)
        for name, arr in tensors.items()
        if name.startswith("param/")
    }
    model = Model(spec, params)
    if "stn/fixed_theta" in tensors:
        model.fixed_theta = tensors["stn/fixed_theta"].astype(np.float64)
    if "norm/target_mean" in tensors:
        model.target_mean = tensors["norm/target_mean"]
        model.target_std = tensors["norm/target_std"]
    return model
