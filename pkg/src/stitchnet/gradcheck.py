"""Finite-difference oracle for every analytic gradient in the package.

Central differences at 64-bit are the arbiter: any disagreement above
tolerance with a hand-coded backward pass is a defect in the backward pass,
never in the oracle. Checks must run on float64 models; 32-bit checking is
out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

REL_FLOOR = 1e-12

# Absolute agreement below which central differences cannot resolve a relative
# comparison at 64-bit: the probes carry rounding noise of order
# eps_machine * |loss| / probe_size (~1e-10 for unit-scale losses), so
# coordinates whose analytic and numeric gradients agree this closely are
# counted as resolved regardless of their relative error. Real backward bugs
# produce disagreements proportional to the gradient scale and stay far above
# this floor.
RESOLUTION_FLOOR = 1e-8


@dataclass
class GroupReport:
    """Worst-case agreement for one parameter group.

    max_rel is the raw per-coordinate relative error maximum; max_rel_resolved
    ignores coordinates whose absolute disagreement sits under the oracle's
    resolution floor. The pass verdict uses the resolved value.
    """

    name: str
    max_rel: float
    max_rel_resolved: float
    max_abs: float
    worst_index: tuple
    analytic: float
    numeric: float

    def line(self) -> str:
        return (f"{self.name:<28s} rel={self.max_rel_resolved:.3e} "
                f"(raw {self.max_rel:.3e}) max_abs={self.max_abs:.3e} "
                f"at {self.worst_index} (analytic={self.analytic:.6e}, "
                f"numeric={self.numeric:.6e})")


@dataclass
class GradReport:
    groups: list
    tol: float
    resolution: float = RESOLUTION_FLOOR

    @property
    def passed(self) -> bool:
        return all(g.max_rel_resolved < self.tol for g in self.groups)

    def worst(self) -> GroupReport:
        return max(self.groups, key=lambda g: g.max_rel_resolved)

    def summary(self) -> str:
        lines = [g.line() for g in self.groups]
        w = self.worst()
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict}: worst group {w.name} rel={w.max_rel_resolved:.3e} "
                     f"(tol {self.tol:.1e}, abs resolution {self.resolution:.1e})")
        return "\n".join(lines)


def relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return np.abs(analytic - numeric) / scale


def finite_diff(loss_fn, params: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of loss_fn at params, coordinate by coordinate.

    loss_fn must be deterministic; it receives the perturbed array (the same
    buffer every call) and returns a scalar. The input array is restored
    before returning.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = np.asarray(params)
    grad = np.empty(params.shape, dtype=np.float64)
    flat = params.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        lp = float(loss_fn(params))
        flat[i] = orig - eps
        lm = float(loss_fn(params))
        flat[i] = orig
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise FloatingPointError(f"non-finite loss while probing coordinate {i}")
        gflat[i] = (lp - lm) / (2.0 * eps)
    return grad


def _numeric_grad_inplace(arr: np.ndarray, loss_fn, eps: float) -> np.ndarray:
    """finite_diff over a live parameter array, loss_fn taking no arguments."""
    return finite_diff(lambda _arr: loss_fn(), arr, eps)


def check_network(model, batch, eps: float = 1e-6, tol: float = 1e-5,
                  w_a: float = 1.0, w_b: float = 1.0,
                  resolution: float = RESOLUTION_FLOOR) -> GradReport:
    """Compare analytic gradients of every parameter group (layer weights and
    stitch matrices alike) against central differences on one batch.

    Exhaustive per-coordinate probing: intended for models of at most a few
    tens of thousands of parameters, float64 only. A coordinate fails only
    when its relative error reaches tol and its absolute disagreement exceeds
    the resolution floor (see RESOLUTION_FLOOR).
    """
    from .training import compute_loss

    if np.dtype(model.dtype) != np.float64:
        raise ValueError("gradient checks require a float64 model")
    _, _, analytic = model.loss_and_grads(batch, w_a, w_b)

    def loss_now():
        return compute_loss(model, batch, w_a, w_b)[0]

    groups = []
    for g in model.parameter_groups():
        numeric = _numeric_grad_inplace(g.array, loss_now, eps)
        ana = np.asarray(analytic[g.name], dtype=np.float64)
        rel = relative_error(ana, numeric)
        resolved = np.where(np.abs(ana - numeric) >= resolution, rel, 0.0)
        idx = np.unravel_index(int(np.argmax(resolved)), rel.shape)
        groups.append(GroupReport(
            name=g.name,
            max_rel=float(np.max(rel)),
            max_rel_resolved=float(resolved[idx]),
            max_abs=float(np.max(np.abs(ana - numeric))),
            worst_index=tuple(int(i) for i in idx),
            analytic=float(ana[idx]),
            numeric=float(numeric[idx]),
        ))
    return GradReport(groups, tol, resolution)


def kink_margin(model, x) -> float:
    """Distance of the forward pass from relu kinks and pool-window ties.

    Returns the smallest of: |pre-activation| over every relu input, and
    (max - runner_up) over every pooling window. Central differences are
    only trustworthy when this margin comfortably exceeds the probe size.
    """
    margin = np.inf
    for spec, cache in model.forward_caches(np.asarray(x, dtype=model.dtype)):
        if spec.kind == "relu":
            (z,) = cache.data
            if z.size:
                margin = min(margin, float(np.min(np.abs(z))))
        elif spec.kind == "maxpool2d":
            z, _ = cache.data
            from ._kernels.pykernels import _windows

            v = _windows(z, spec.pool, spec.pool, spec.stride, spec.stride)
            flat = v.reshape(*v.shape[:4], -1)
            if flat.shape[-1] >= 2:
                top2 = np.partition(flat, flat.shape[-1] - 2, axis=-1)[..., -2:]
                gap = top2[..., 1] - top2[..., 0]
                # ties between exact zeros come from relu clipping and carry no
                # gradient either way; only contested windows matter
                contested = ~((top2[..., 1] == 0.0) & (top2[..., 0] == 0.0))
                if contested.any():
                    margin = min(margin, float(gap[contested].min()))
    return margin


def draw_safe_batch(model, n: int, seed: int, classes_a: int, classes_b: int,
                    margin: float = 1e-4, max_tries: int = 64, mask_all_true: bool = False):
    """Random batch resampled until the forward pass stays clear of kinks.

    Inputs are standard normal; labels uniform; the task-B mask keeps roughly
    three quarters of the examples (at least one) unless mask_all_true.
    """
    from .training import TaskBatch

    input_shape = model.net_a.spec.input_shape if hasattr(model, "net_a") else model.spec.input_shape
    for t in range(max_tries):
        rng = np.random.default_rng(seed + 7919 * t)
        x = rng.standard_normal((n, *input_shape)).astype(model.dtype)
        la = rng.integers(0, classes_a, size=n)
        lb = rng.integers(0, classes_b, size=n)
        if mask_all_true:
            mb = np.ones(n, dtype=bool)
        else:
            mb = rng.random(n) < 0.75
            if not mb.any():
                mb[0] = True
        batch = TaskBatch(x, la, lb, mb)
        if kink_margin(model, x) > margin:
            return batch
    raise RuntimeError(f"could not draw a kink-safe batch in {max_tries} tries")
