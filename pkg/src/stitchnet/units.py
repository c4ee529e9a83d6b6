"""Cross-stitch units: learnable 2x2 linear mixing of two task streams.

Each unit sits at one site (a named layer output) and mixes the two streams'
activations location-by-location. Index convention for every 2x2 matrix

    [[a_aa, a_ab],
     [a_ba, a_bb]]

is source-to-destination: the first letter names the stream an activation
comes from, the second the stream it feeds. The mixed activations are

    out_a = a_aa * x_a + a_ba * x_b
    out_b = a_ab * x_a + a_bb * x_b

so the same-task weights (a_aa, a_bb) sit on the diagonal and the
different-task weights (a_ab, a_ba) off it. Setting both off-diagonal
entries to zero fully decouples the streams. Gradients follow directly:
an entry's gradient accumulates upstream-at-destination times
activation-at-source over every location the matrix is applied to,

    d/d a_ab = sum(g_out_b * x_a),   d/d a_aa = sum(g_out_a * x_a),

and the input gradients reuse the same entries transposed back:
g_a = a_aa * g_out_a + a_ab * g_out_b.

Granularity is either one matrix per channel of the site's activation map
(``per_channel``; a dense activation of n units counts as n channels) or a
single matrix shared by the whole map (``per_map``). No range constraint is
enforced on the values after initialization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GRANULARITIES = ("per_channel", "per_map")


@dataclass
class CrossStitchUnit:
    """Mixing parameters attached to one placement site.

    alphas has shape (m, 2, 2): one matrix per channel for per_channel
    granularity, exactly one matrix for per_map. lr_scale multiplies this
    unit's learning rate on top of the trainer's global alpha scale.
    """

    site: str
    granularity: str
    alphas: np.ndarray
    lr_scale: float = 1.0

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        self.alphas = np.asarray(self.alphas)
        if self.alphas.ndim != 3 or self.alphas.shape[1:] != (2, 2):
            raise ValueError(f"alphas must have shape (m, 2, 2), got {self.alphas.shape}")
        if self.granularity == "per_map" and self.alphas.shape[0] != 1:
            raise ValueError("per_map units hold exactly one matrix")
        if self.lr_scale <= 0:
            raise ValueError("lr_scale must be positive")

    @property
    def n_matrices(self) -> int:
        return self.alphas.shape[0]

    def copy(self) -> "CrossStitchUnit":
        return CrossStitchUnit(self.site, self.granularity, self.alphas.copy(), self.lr_scale)


def init_alphas(alpha_s, alpha_d, granularity, site_channels, lr_scale=1.0, dtype=np.float64):
    """One unit per site, every matrix [[alpha_s, alpha_d], [alpha_d, alpha_s]].

    site_channels is an ordered mapping or sequence of (site, channel_count)
    pairs; channel counts are only consulted for per_channel granularity.
    Same/different weights summing to one give a convex mix and keep the
    mixed activations on the scale of the inputs, but nothing enforces that.
    """
    if granularity not in GRANULARITIES:
        raise ValueError(f"unknown granularity {granularity!r}")
    items = site_channels.items() if hasattr(site_channels, "items") else site_channels
    units = []
    for site, channels in items:
        m = int(channels) if granularity == "per_channel" else 1
        if m < 1:
            raise ValueError(f"site {site!r}: channel count must be positive")
        mats = np.empty((m, 2, 2), dtype=dtype)
        mats[:, 0, 0] = alpha_s
        mats[:, 1, 1] = alpha_s
        mats[:, 0, 1] = alpha_d
        mats[:, 1, 0] = alpha_d
        units.append(CrossStitchUnit(site, granularity, mats, lr_scale))
    return units


def _channel_axis(x: np.ndarray) -> int:
    return 1 if x.ndim >= 2 else 0


def _check_pair(xa: np.ndarray, xb: np.ndarray, unit: CrossStitchUnit) -> int:
    """Validate the activation pair against the unit; returns the channel axis."""
    if xa.shape != xb.shape:
        raise ValueError(
            f"unit at {unit.site!r}: stream shapes differ, {tuple(xa.shape)} vs {tuple(xb.shape)}"
        )
    if xa.ndim == 0:
        if unit.granularity == "per_channel":
            raise ValueError(f"unit at {unit.site!r}: per_channel needs a channel dimension")
        return 0
    axis = _channel_axis(xa)
    if unit.granularity == "per_channel" and unit.n_matrices != xa.shape[axis]:
        raise ValueError(
            f"unit at {unit.site!r}: {unit.n_matrices} matrices for {xa.shape[axis]} channels"
        )
    return axis


def _per_channel(values: np.ndarray, like: np.ndarray, axis: int) -> np.ndarray:
    shape = [1] * like.ndim
    shape[axis] = -1
    return values.reshape(shape)


def cross_stitch_forward(xa, xb, unit: CrossStitchUnit):
    """Mix two same-shape activations; returns (out_a, out_b), shapes preserved."""
    xa = np.asarray(xa)
    xb = np.asarray(xb)
    axis = _check_pair(xa, xb, unit)
    a = unit.alphas
    if unit.granularity == "per_channel":
        aa = _per_channel(a[:, 0, 0], xa, axis)
        ab = _per_channel(a[:, 0, 1], xa, axis)
        ba = _per_channel(a[:, 1, 0], xa, axis)
        bb = _per_channel(a[:, 1, 1], xa, axis)
    else:
        aa, ab, ba, bb = a[0, 0, 0], a[0, 0, 1], a[0, 1, 0], a[0, 1, 1]
    out_a = aa * xa + ba * xb
    out_b = ab * xa + bb * xb
    return out_a, out_b


def cross_stitch_backward(xa, xb, g_out_a, g_out_b, unit: CrossStitchUnit):
    """Backward through the mix: returns (g_a, g_b, alpha_grads).

    alpha_grads has the unit's (m, 2, 2) layout. Per-channel grads reduce over
    batch and spatial locations; per_map grads reduce over channels as well.
    """
    xa = np.asarray(xa)
    xb = np.asarray(xb)
    g_out_a = np.asarray(g_out_a)
    g_out_b = np.asarray(g_out_b)
    axis = _check_pair(xa, xb, unit)
    if g_out_a.shape != xa.shape or g_out_b.shape != xa.shape:
        raise ValueError(f"unit at {unit.site!r}: upstream shapes must match the activations")
    a = unit.alphas
    if unit.granularity == "per_channel":
        aa = _per_channel(a[:, 0, 0], xa, axis)
        ab = _per_channel(a[:, 0, 1], xa, axis)
        ba = _per_channel(a[:, 1, 0], xa, axis)
        bb = _per_channel(a[:, 1, 1], xa, axis)
        reduce_axes = tuple(i for i in range(xa.ndim) if i != axis)
    else:
        aa, ab, ba, bb = a[0, 0, 0], a[0, 0, 1], a[0, 1, 0], a[0, 1, 1]
        reduce_axes = tuple(range(xa.ndim))
    g_a = aa * g_out_a + ab * g_out_b
    g_b = ba * g_out_a + bb * g_out_b

    def _reduce(v):
        r = v.sum(axis=reduce_axes) if reduce_axes else v
        return np.atleast_1d(r)

    grads = np.empty_like(unit.alphas)
    grads[:, 0, 0] = _reduce(g_out_a * xa)
    grads[:, 0, 1] = _reduce(g_out_b * xa)
    grads[:, 1, 0] = _reduce(g_out_a * xb)
    grads[:, 1, 1] = _reduce(g_out_b * xb)
    return g_a, g_b, grads
