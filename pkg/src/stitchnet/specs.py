"""Declarative network specs, the default architectures, and split enumeration."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .layers import LayerSpec, conv2d, dense, maxpool2d, output_shape, relu, softmax_ce_head


@dataclass(frozen=True)
class NetworkSpec:
    """An ordered layer list ending in a classifier head.

    stitch_sites are the layer names eligible for cross-stitch placement.
    When not given they default to every maxpool2d and every non-head dense
    layer, in layer order.
    """

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    stitch_sites: tuple[str, ...] = None  # type: ignore[assignment]

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if not layers:
            raise ValueError("a network needs at least a head layer")
        if any(d < 1 for d in self.input_shape):
            raise ValueError("input extents must be positive")
        heads = [l for l in layers if l.kind == "softmax_ce_head"]
        if len(heads) != 1 or layers[-1].kind != "softmax_ce_head":
            raise ValueError("spec must contain exactly one softmax_ce_head, as the last layer")
        names = [l.name for l in layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        if self.stitch_sites is None:
            sites = tuple(l.name for l in layers[:-1] if l.kind in ("maxpool2d", "dense"))
        else:
            sites = tuple(self.stitch_sites)
            non_head = {l.name for l in layers[:-1]}
            unknown = [s for s in sites if s not in non_head]
            if unknown:
                raise ValueError(f"stitch sites must name non-head layers; got {unknown}")
        object.__setattr__(self, "stitch_sites", sites)
        shapes_through(self)  # validates the whole shape chain early

    @property
    def head(self) -> LayerSpec:
        return self.layers[-1]

    @property
    def n_non_head(self) -> int:
        return len(self.layers) - 1

    def with_classes(self, classes: int) -> "NetworkSpec":
        """Same topology with a different head width."""
        head = replace(self.head, classes=classes)
        return NetworkSpec(self.layers[:-1] + (head,), self.input_shape, self.stitch_sites)


def shapes_through(spec: NetworkSpec) -> list[tuple[int, ...]]:
    """Per-example shape after each layer, in layer order."""
    shapes = []
    shape = spec.input_shape
    for layer in spec.layers:
        shape = output_shape(layer, shape)
        shapes.append(shape)
    return shapes


def site_channels(spec: NetworkSpec) -> dict[str, int]:
    """Channel count of each stitch site's output (features count as channels)."""
    shapes = shapes_through(spec)
    by_name = {l.name: s for l, s in zip(spec.layers, shapes)}
    return {site: by_name[site][0] for site in spec.stitch_sites}


def network_param_count(spec: NetworkSpec) -> int:
    from .layers import param_count

    total = 0
    shape = spec.input_shape
    for layer in spec.layers:
        total += param_count(layer, shape)
        shape = output_shape(layer, shape)
    return total


@dataclass(frozen=True)
class SplitArchitecture:
    """Share the first split_index layers; duplicate the rest plus the head.

    split_index 0 is two fully separate networks; split_index equal to the
    non-head layer count is a fully shared trunk with two sibling heads.
    """

    base: NetworkSpec
    split_index: int

    def __post_init__(self):
        if not 0 <= self.split_index <= self.base.n_non_head:
            raise ValueError(
                f"split_index must lie in [0, {self.base.n_non_head}], got {self.split_index}"
            )

    @property
    def shared_layers(self) -> tuple[LayerSpec, ...]:
        return self.base.layers[: self.split_index]

    @property
    def branch_layers(self) -> tuple[LayerSpec, ...]:
        return self.base.layers[self.split_index : -1]


def enumerate_splits(spec: NetworkSpec) -> list[SplitArchitecture]:
    """All split depths from fully separate (k=0) to fully shared (k=L)."""
    return [SplitArchitecture(spec, k) for k in range(spec.n_non_head + 1)]


def default_network_spec(classes: int = 8, input_shape=(1, 16, 16)) -> NetworkSpec:
    """The stock 4-layer architecture: conv, relu, pool, dense, then the head.

    Default stitch sites are the pool and the dense layer.
    """
    return NetworkSpec(
        layers=(
            conv2d("conv1", filters=8, kernel=3),
            relu("relu1"),
            maxpool2d("pool1", pool=2),
            dense("fc1", units=32),
            softmax_ce_head("head", classes=classes),
        ),
        input_shape=tuple(input_shape),
    )


def two_block_network_spec(classes: int = 8, input_shape=(1, 16, 16)) -> NetworkSpec:
    """A deeper two-conv, two-dense architecture (counting the head).

    Stitch sites default to both pools and the first dense layer; small enough
    for exhaustive finite-difference checking.
    """
    return NetworkSpec(
        layers=(
            conv2d("conv1", filters=4, kernel=3),
            relu("relu1"),
            maxpool2d("pool1", pool=2),
            conv2d("conv2", filters=8, kernel=3),
            relu("relu2"),
            maxpool2d("pool2", pool=2),
            dense("fc1", units=16),
            softmax_ce_head("head", classes=classes),
        ),
        input_shape=tuple(input_shape),
    )
