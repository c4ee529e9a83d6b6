"""Layer zoo: specs, seeded initialization, and hand-coded forward/backward.

Feature maps are NCHW arrays, vector activations are (batch, features).
Dense layers (including the classifier head) flatten 4-D inputs on the fly.
Every backward pass is validated against the finite-difference oracle in
``stitchnet.gradcheck``; that oracle is the arbiter for all gradient code
in this package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels

LAYER_KINDS = ("dense", "conv2d", "relu", "maxpool2d", "flatten", "softmax_ce_head")


class ShapeError(ValueError):
    """An input does not match a layer's declared shape contract."""


class ContractError(RuntimeError):
    """Backward was called with a stale or mismatched forward cache."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network. Only the fields relevant to ``kind`` are used.

    kind-specific hyperparameters:
      dense            units
      conv2d           filters, kernel, stride
      maxpool2d        pool, stride
      softmax_ce_head  classes
    """

    kind: str
    name: str
    units: int = 0
    filters: int = 0
    kernel: int = 0
    stride: int = 1
    pool: int = 0
    classes: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if not self.name:
            raise ValueError("layer name must be non-empty")
        required = {
            "dense": ("units",),
            "conv2d": ("filters", "kernel", "stride"),
            "maxpool2d": ("pool", "stride"),
            "softmax_ce_head": ("classes",),
        }.get(self.kind, ())
        for field_name in required:
            if getattr(self, field_name) <= 0:
                raise ValueError(f"layer {self.name!r}: {field_name} must be a positive integer")


def dense(name: str, units: int) -> LayerSpec:
    return LayerSpec("dense", name, units=units)


def conv2d(name: str, filters: int, kernel: int, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv2d", name, filters=filters, kernel=kernel, stride=stride)


def relu(name: str) -> LayerSpec:
    return LayerSpec("relu", name)


def maxpool2d(name: str, pool: int = 2, stride: int | None = None) -> LayerSpec:
    return LayerSpec("maxpool2d", name, pool=pool, stride=pool if stride is None else stride)


def flatten(name: str) -> LayerSpec:
    return LayerSpec("flatten", name)


def softmax_ce_head(name: str, classes: int) -> LayerSpec:
    return LayerSpec("softmax_ce_head", name, classes=classes)


def output_shape(spec: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-example output shape for a per-example input shape (no batch dim)."""
    kind = spec.kind
    if kind in ("dense", "softmax_ce_head"):
        if len(in_shape) not in (1, 3):
            raise ShapeError(f"layer {spec.name!r}: expected vector or CHW input, got {in_shape}")
        return (spec.units if kind == "dense" else spec.classes,)
    if kind == "flatten":
        return (int(np.prod(in_shape)),)
    if kind == "relu":
        return tuple(in_shape)
    if len(in_shape) != 3:
        raise ShapeError(f"layer {spec.name!r}: expected CHW input, got {in_shape}")
    c, h, w = in_shape
    if kind == "conv2d":
        if spec.kernel > h or spec.kernel > w:
            raise ShapeError(f"layer {spec.name!r}: {spec.kernel}x{spec.kernel} kernel exceeds input {h}x{w}")
        return (spec.filters, (h - spec.kernel) // spec.stride + 1, (w - spec.kernel) // spec.stride + 1)
    if kind == "maxpool2d":
        if spec.pool > h or spec.pool > w:
            raise ShapeError(f"layer {spec.name!r}: {spec.pool}x{spec.pool} window exceeds input {h}x{w}")
        return (c, (h - spec.pool) // spec.stride + 1, (w - spec.pool) // spec.stride + 1)
    raise AssertionError(kind)


def init_params(spec: LayerSpec, in_shape: tuple[int, ...], rng: np.random.Generator, dtype) -> dict:
    """Seeded fan-in-scaled uniform weights, zero biases. No-param layers give {}."""
    if spec.kind == "conv2d":
        c = in_shape[0]
        fan_in = c * spec.kernel * spec.kernel
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(spec.filters, c, spec.kernel, spec.kernel))
        return {"W": w.astype(dtype), "b": np.zeros(spec.filters, dtype=dtype)}
    if spec.kind in ("dense", "softmax_ce_head"):
        fan_in = int(np.prod(in_shape))
        out = spec.units if spec.kind == "dense" else spec.classes
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, out))
        return {"W": w.astype(dtype), "b": np.zeros(out, dtype=dtype)}
    return {}


def param_count(spec: LayerSpec, in_shape: tuple[int, ...]) -> int:
    if spec.kind == "conv2d":
        return spec.filters * in_shape[0] * spec.kernel * spec.kernel + spec.filters
    if spec.kind == "dense":
        return int(np.prod(in_shape)) * spec.units + spec.units
    if spec.kind == "softmax_ce_head":
        return int(np.prod(in_shape)) * spec.classes + spec.classes
    return 0


@dataclass
class Cache:
    """Forward record consumed exactly once by the matching backward call."""

    layer: str
    kind: str
    out_shape: tuple[int, ...]
    data: tuple


def _check_upstream(spec: LayerSpec, cache: Cache, upstream: np.ndarray) -> None:
    if cache.layer != spec.name or cache.kind != spec.kind:
        raise ContractError(
            f"cache from layer {cache.layer!r} ({cache.kind}) passed to {spec.name!r} ({spec.kind})"
        )
    if tuple(upstream.shape) != cache.out_shape:
        raise ContractError(
            f"layer {spec.name!r}: upstream shape {tuple(upstream.shape)} != output shape {cache.out_shape}"
        )


def _as_matrix(spec: LayerSpec, x: np.ndarray) -> np.ndarray:
    if x.ndim == 2:
        return x
    if x.ndim == 4:
        return x.reshape(x.shape[0], -1)
    raise ShapeError(f"layer {spec.name!r}: expected 2-D or 4-D input, got shape {tuple(x.shape)}")


def layer_forward(spec: LayerSpec, params: dict, x: np.ndarray, labels=None):
    """Run one layer. Returns (output, cache).

    The classifier head is the one special case: its output is the pair
    (per_example_losses, class_probabilities); losses are None when no labels
    are supplied (pure inference).
    """
    kind = spec.kind
    if kind == "relu":
        out = np.maximum(x, 0)
        return out, Cache(spec.name, kind, out.shape, (x,))
    if kind == "flatten":
        if x.ndim != 4:
            raise ShapeError(f"layer {spec.name!r}: flatten expects NCHW input, got {tuple(x.shape)}")
        out = x.reshape(x.shape[0], -1)
        return out, Cache(spec.name, kind, out.shape, (x.shape,))
    if kind == "conv2d":
        if x.ndim != 4:
            raise ShapeError(f"layer {spec.name!r}: conv2d expects NCHW input, got {tuple(x.shape)}")
        w = params["W"]
        if x.shape[1] != w.shape[1]:
            raise ShapeError(
                f"layer {spec.name!r}: input has {x.shape[1]} channels, filters expect {w.shape[1]}"
            )
        if x.shape[2] < spec.kernel or x.shape[3] < spec.kernel:
            raise ShapeError(
                f"layer {spec.name!r}: {spec.kernel}x{spec.kernel} kernel exceeds input "
                f"{x.shape[2]}x{x.shape[3]}"
            )
        x = np.ascontiguousarray(x)
        out = _kernels.conv2d_forward(x, w, params["b"], spec.stride)
        return out, Cache(spec.name, kind, out.shape, (x,))
    if kind == "maxpool2d":
        if x.ndim != 4:
            raise ShapeError(f"layer {spec.name!r}: maxpool2d expects NCHW input, got {tuple(x.shape)}")
        if x.shape[2] < spec.pool or x.shape[3] < spec.pool:
            raise ShapeError(
                f"layer {spec.name!r}: {spec.pool}x{spec.pool} window exceeds input "
                f"{x.shape[2]}x{x.shape[3]}"
            )
        x = np.ascontiguousarray(x)
        out, arg = _kernels.maxpool2d_forward(x, spec.pool, spec.stride)
        return out, Cache(spec.name, kind, out.shape, (x, arg))
    if kind == "dense":
        x2 = _as_matrix(spec, x)
        w = params["W"]
        if x2.shape[1] != w.shape[0]:
            raise ShapeError(
                f"layer {spec.name!r}: input has {x2.shape[1]} features, weights expect {w.shape[0]}"
            )
        out = x2 @ w + params["b"]
        return out, Cache(spec.name, kind, out.shape, (x2, x.shape))
    if kind == "softmax_ce_head":
        x2 = _as_matrix(spec, x)
        w = params["W"]
        if x2.shape[1] != w.shape[0]:
            raise ShapeError(
                f"layer {spec.name!r}: input has {x2.shape[1]} features, weights expect {w.shape[0]}"
            )
        z = x2 @ w + params["b"]
        z -= z.max(axis=1, keepdims=True)  # overflow guard
        ez = np.exp(z)
        sez = ez.sum(axis=1, keepdims=True)
        probs = ez / sez
        if labels is None:
            losses = None
        else:
            labels = np.asarray(labels)
            if labels.shape != (x2.shape[0],):
                raise ShapeError(
                    f"layer {spec.name!r}: got {labels.shape} labels for batch of {x2.shape[0]}"
                )
            # -log p in log-sum-exp form: never evaluates log(0)
            losses = np.log(sez[:, 0]) - z[np.arange(x2.shape[0]), labels]
        cache = Cache(spec.name, kind, probs.shape, (x2, x.shape, probs, labels))
        return (losses, probs), cache
    raise AssertionError(kind)


def layer_backward(spec: LayerSpec, params: dict, cache: Cache, upstream: np.ndarray):
    """Backward pass matching layer_forward. Returns (input_grad, param_grads).

    For the classifier head, ``upstream`` is the vector of per-example loss
    weights (the derivative of the total loss with respect to each
    per-example cross-entropy term).
    """
    kind = spec.kind
    if kind == "softmax_ce_head":
        x2, orig_shape, probs, labels = cache.data
        if cache.layer != spec.name or cache.kind != kind:
            raise ContractError(f"cache from layer {cache.layer!r} passed to {spec.name!r}")
        if labels is None:
            raise ContractError(f"layer {spec.name!r}: backward requires a forward pass with labels")
        upstream = np.asarray(upstream)
        if upstream.shape != (x2.shape[0],):
            raise ContractError(
                f"layer {spec.name!r}: expected {x2.shape[0]} per-example loss weights, "
                f"got shape {tuple(upstream.shape)}"
            )
        dz = probs.copy()
        dz[np.arange(x2.shape[0]), labels] -= 1.0
        dz *= upstream[:, None]
        dw = x2.T @ dz
        db = dz.sum(axis=0)
        dx = (dz @ params["W"].T).reshape(orig_shape)
        return dx, {"W": dw, "b": db}
    _check_upstream(spec, cache, upstream)
    if kind == "relu":
        (x,) = cache.data
        return upstream * (x > 0), {}
    if kind == "flatten":
        (orig_shape,) = cache.data
        return upstream.reshape(orig_shape), {}
    if kind == "conv2d":
        (x,) = cache.data
        dx, dw, db = _kernels.conv2d_backward(x, params["W"], np.ascontiguousarray(upstream), spec.stride)
        return dx, {"W": dw, "b": db}
    if kind == "maxpool2d":
        x, arg = cache.data
        dx = _kernels.maxpool2d_backward(arg, np.ascontiguousarray(upstream), x.shape)
        return dx, {}
    if kind == "dense":
        x2, orig_shape = cache.data
        dw = x2.T @ upstream
        db = upstream.sum(axis=0)
        dx = (upstream @ params["W"].T).reshape(orig_shape)
        return dx, {"W": dw, "b": db}
    raise AssertionError(kind)
