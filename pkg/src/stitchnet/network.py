"""Instantiated networks: one-task, split, and cross-stitched two-stream.

All model kinds share a small protocol consumed by the trainer and the
gradient checker:

  parameter_groups()          live arrays for in-place updates
  loss_and_grads(batch, ...)  one forward/backward over a task batch
  compute_losses(batch)       forward-only per-task mean losses
  predict_probs(x)            per-task class probabilities
  forward_caches(x)           layer caches of the last forward (kink probing)

Task batches are duck-typed: anything with ``inputs``, ``labels_a``,
``labels_b`` and ``mask_b`` attributes works (see ``stitchnet.training``).
"""

from __future__ import annotations

import copy as _copy
from collections import namedtuple
from dataclasses import replace

import numpy as np

from .layers import LayerSpec, init_params, layer_backward, layer_forward
from .specs import NetworkSpec, SplitArchitecture, shapes_through, site_channels
from .units import CrossStitchUnit, cross_stitch_backward, cross_stitch_forward, init_alphas

ParamGroup = namedtuple("ParamGroup", ["name", "array", "alpha", "lr_scale"])


def _run_chain(layer_specs, params, x):
    """Forward through a list of non-head layers; returns (out, caches)."""
    caches = []
    for spec in layer_specs:
        x, cache = layer_forward(spec, params.get(spec.name, {}), x)
        caches.append((spec, cache))
    return x, caches


def _walk_back(caches, params, upstream, grads, prefix):
    """Backward through _run_chain caches, filling grads keyed by name."""
    for spec, cache in reversed(caches):
        upstream, pgrads = layer_backward(spec, params.get(spec.name, {}), cache, upstream)
        for pname, g in pgrads.items():
            grads[f"{prefix}{spec.name}.{pname}"] = g
    return upstream


def _head_losses(head_spec, params, x, labels):
    (losses, probs), cache = layer_forward(head_spec, params, x, labels=labels)
    return losses, probs, cache


def _task_loss_and_weights(losses, mask, weight, dtype):
    """Mean loss over the selected examples plus per-example loss weights.

    The weights are built as weight * (mask / count) so that scaling the task
    weight scales every gradient contribution by exactly that factor. With an
    all-false mask the loss is 0.0 and every weight is zero.
    """
    n = losses.shape[0]
    if mask is None:
        unit = np.full(n, 1.0 / n, dtype=dtype)
        mean_loss = float(losses.mean())
    else:
        count = int(mask.sum())
        if count == 0:
            return 0.0, np.zeros(n, dtype=dtype)
        unit = (mask.astype(dtype) / count).astype(dtype)
        mean_loss = float((losses * mask).sum() / count)
    return mean_loss, (weight * unit).astype(dtype)


def _batch_labels(batch, task):
    if task == "A":
        return np.asarray(batch.labels_a), None
    return np.asarray(batch.labels_b), np.asarray(batch.mask_b)


class Network:
    """A single-task network: layer parameters plus the task it predicts."""

    def __init__(self, spec: NetworkSpec, params: dict, task: str = "A",
                 dtype=np.float32, seed_lineage: dict | None = None):
        if task not in ("A", "B"):
            raise ValueError(f"task must be 'A' or 'B', got {task!r}")
        self.spec = spec
        self.params = params
        self.task = task
        self.dtype = np.dtype(dtype)
        self.seed_lineage = dict(seed_lineage or {})

    @property
    def tasks(self) -> tuple[str, ...]:
        return (self.task,)

    def copy(self) -> "Network":
        params = {name: {p: a.copy() for p, a in d.items()} for name, d in self.params.items()}
        return Network(self.spec, params, self.task, self.dtype, _copy.deepcopy(self.seed_lineage))

    def parameter_groups(self):
        groups = []
        for layer in self.spec.layers:
            for pname in ("W", "b"):
                if pname in self.params.get(layer.name, {}):
                    groups.append(ParamGroup(f"{layer.name}.{pname}",
                                             self.params[layer.name][pname], False, 1.0))
        return groups

    def param_count(self) -> int:
        return sum(g.array.size for g in self.parameter_groups())

    def _input(self, x):
        return np.asarray(x, dtype=self.dtype)

    def head_input(self, x):
        out, caches = _run_chain(self.spec.layers[:-1], self.params, self._input(x))
        return out, caches

    def forward_caches(self, x):
        _, caches = self.head_input(x)
        return caches

    def predict_probs(self, x) -> dict:
        h, _ = self.head_input(x)
        (_, probs), _ = layer_forward(self.spec.head, self.params[self.spec.head.name], h)
        return {self.task: probs}

    def compute_losses(self, batch) -> dict:
        labels, mask = _batch_labels(batch, self.task)
        h, _ = self.head_input(batch.inputs)
        losses, _, _ = _head_losses(self.spec.head, self.params[self.spec.head.name], h, labels)
        mean_loss, _ = _task_loss_and_weights(losses, mask, 1.0, self.dtype)
        return {self.task: mean_loss}

    def loss_and_grads(self, batch, w_a: float = 1.0, w_b: float = 1.0):
        labels, mask = _batch_labels(batch, self.task)
        if labels.shape[0] == 0:
            raise ValueError("batch with zero examples")
        weight = w_a if self.task == "A" else w_b
        h, caches = self.head_input(batch.inputs)
        head = self.spec.head
        losses, _, head_cache = _head_losses(head, self.params[head.name], h, labels)
        mean_loss, wvec = _task_loss_and_weights(losses, mask, weight, self.dtype)
        grads: dict = {}
        upstream, head_grads = layer_backward(head, self.params[head.name], head_cache, wvec)
        for pname, g in head_grads.items():
            grads[f"{head.name}.{pname}"] = g
        _walk_back(caches, self.params, upstream, grads, "")
        total = weight * mean_loss
        return total, {self.task: mean_loss}, grads


def build_one_task(spec: NetworkSpec, seed: int, task: str = "A", dtype=np.float32) -> Network:
    """Instantiate a spec with seeded parameters; deterministic given the seed."""
    rng = np.random.default_rng(seed)
    params = {}
    shape = spec.input_shape
    for layer in spec.layers:
        params[layer.name] = init_params(layer, shape, rng, dtype)
        from .layers import output_shape

        shape = output_shape(layer, shape)
    return Network(spec, params, task, dtype, {"init_seed": int(seed)})


class SplitNetwork:
    """Two tasks sharing the first k layers, with duplicated remainder and heads.

    The shared trunk receives the sum of both tasks' gradients; task loss
    weights are applied at the per-task losses.
    """

    def __init__(self, arch: SplitArchitecture, shared: dict, branch_a: dict, branch_b: dict,
                 head_b_spec: LayerSpec, dtype=np.float32, seed_lineage: dict | None = None):
        self.arch = arch
        self.shared = shared
        self.branch_a = branch_a
        self.branch_b = branch_b
        self.head_b_spec = head_b_spec
        self.dtype = np.dtype(dtype)
        self.seed_lineage = dict(seed_lineage or {})

    @property
    def tasks(self) -> tuple[str, ...]:
        return ("A", "B")

    @property
    def spec(self) -> NetworkSpec:
        return self.arch.base

    def copy(self) -> "SplitNetwork":
        cp = lambda d: {n: {p: a.copy() for p, a in pd.items()} for n, pd in d.items()}
        return SplitNetwork(self.arch, cp(self.shared), cp(self.branch_a), cp(self.branch_b),
                            self.head_b_spec, self.dtype, _copy.deepcopy(self.seed_lineage))

    def parameter_groups(self):
        groups = []
        for layer in self.arch.shared_layers:
            for pname in ("W", "b"):
                if pname in self.shared.get(layer.name, {}):
                    groups.append(ParamGroup(f"shared.{layer.name}.{pname}",
                                             self.shared[layer.name][pname], False, 1.0))
        branch_specs = list(self.arch.branch_layers)
        for prefix, params, head in (
            ("A", self.branch_a, self.spec.head),
            ("B", self.branch_b, self.head_b_spec),
        ):
            for layer in branch_specs + [head]:
                for pname in ("W", "b"):
                    if pname in params.get(layer.name, {}):
                        groups.append(ParamGroup(f"{prefix}.{layer.name}.{pname}",
                                                 params[layer.name][pname], False, 1.0))
        return groups

    def param_count(self) -> int:
        return sum(g.array.size for g in self.parameter_groups())

    def _forward(self, x):
        x = np.asarray(x, dtype=self.dtype)
        trunk_out, trunk_caches = _run_chain(self.arch.shared_layers, self.shared, x)
        out_a, caches_a = _run_chain(self.arch.branch_layers, self.branch_a, trunk_out)
        out_b, caches_b = _run_chain(self.arch.branch_layers, self.branch_b, trunk_out)
        return trunk_out, trunk_caches, out_a, caches_a, out_b, caches_b

    def forward_caches(self, x):
        _, trunk_caches, _, caches_a, _, caches_b = self._forward(x)
        return trunk_caches + caches_a + caches_b

    def predict_probs(self, x) -> dict:
        _, _, h_a, _, h_b, _ = self._forward(x)
        (_, probs_a), _ = layer_forward(self.spec.head, self.branch_a[self.spec.head.name], h_a)
        (_, probs_b), _ = layer_forward(self.head_b_spec, self.branch_b[self.head_b_spec.name], h_b)
        return {"A": probs_a, "B": probs_b}

    def compute_losses(self, batch) -> dict:
        _, _, h_a, _, h_b, _ = self._forward(batch.inputs)
        out = {}
        for task, h, head, params in (
            ("A", h_a, self.spec.head, self.branch_a),
            ("B", h_b, self.head_b_spec, self.branch_b),
        ):
            labels, mask = _batch_labels(batch, task)
            losses, _, _ = _head_losses(head, params[head.name], h, labels)
            out[task], _ = _task_loss_and_weights(losses, mask, 1.0, self.dtype)
        return out

    def loss_and_grads(self, batch, w_a: float = 1.0, w_b: float = 1.0):
        if np.asarray(batch.labels_a).shape[0] == 0:
            raise ValueError("batch with zero examples")
        _, trunk_caches, h_a, caches_a, h_b, caches_b = self._forward(batch.inputs)
        grads: dict = {}
        task_losses = {}
        trunk_upstreams = []
        for task, h, head, params, caches, weight in (
            ("A", h_a, self.spec.head, self.branch_a, caches_a, w_a),
            ("B", h_b, self.head_b_spec, self.branch_b, caches_b, w_b),
        ):
            labels, mask = _batch_labels(batch, task)
            losses, _, head_cache = _head_losses(head, params[head.name], h, labels)
            mean_loss, wvec = _task_loss_and_weights(losses, mask, weight, self.dtype)
            task_losses[task] = mean_loss
            upstream, head_grads = layer_backward(head, params[head.name], head_cache, wvec)
            for pname, g in head_grads.items():
                grads[f"{task}.{head.name}.{pname}"] = g
            upstream = _walk_back(caches, params, upstream, grads, f"{task}.")
            trunk_upstreams.append(upstream)
        _walk_back(trunk_caches, self.shared, trunk_upstreams[0] + trunk_upstreams[1],
                   grads, "shared.")
        total = w_a * task_losses["A"] + w_b * task_losses["B"]
        return total, task_losses, grads


def build_split(arch: SplitArchitecture, seed: int, classes_b: int | None = None,
                dtype=np.float32) -> SplitNetwork:
    """Instantiate one split depth; shared trunk, then branch A, then branch B."""
    from .layers import output_shape

    base = arch.base
    head_b_spec = base.head if classes_b is None else replace(base.head, classes=classes_b)
    shapes = [base.input_shape] + shapes_through(base)
    rng = np.random.default_rng(seed)
    shared = {}
    for i, layer in enumerate(arch.shared_layers):
        shared[layer.name] = init_params(layer, shapes[i], rng, dtype)
    k = arch.split_index
    branch_a: dict = {}
    branch_b: dict = {}
    for params, head in ((branch_a, base.head), (branch_b, head_b_spec)):
        for i, layer in enumerate(arch.branch_layers):
            params[layer.name] = init_params(layer, shapes[k + i], rng, dtype)
        params[head.name] = init_params(head, shapes[len(base.layers) - 1], rng, dtype)
    return SplitNetwork(arch, shared, branch_a, branch_b, head_b_spec, dtype,
                        {"init_seed": int(seed), "split_index": k})


class StitchedNetwork:
    """Two full single-task networks joined by cross-stitch units.

    The forward pass runs both streams layer by layer and mixes their
    activations at each stitch site; stream A predicts task A, stream B task
    B. Unit matrices are live parameters exposed through parameter_groups.
    """

    def __init__(self, net_a: Network, net_b: Network, units: list[CrossStitchUnit]):
        if net_a.spec.layers[:-1] != net_b.spec.layers[:-1] or \
                net_a.spec.input_shape != net_b.spec.input_shape:
            raise ValueError("stitched streams must share the same non-head topology")
        if net_a.dtype != net_b.dtype:
            raise ValueError("stitched streams must share one dtype")
        non_head = [l.name for l in net_a.spec.layers[:-1]]
        channel_of = {l.name: s[0] for l, s in
                      zip(net_a.spec.layers[:-1], shapes_through(net_a.spec)[:-1])}
        by_site = {}
        for unit in units:
            if unit.site not in non_head:
                raise ValueError(f"unknown stitch site {unit.site!r}")
            if unit.site in by_site:
                raise ValueError(f"duplicate stitch site {unit.site!r}")
            by_site[unit.site] = unit
            if unit.granularity == "per_channel" and unit.n_matrices != channel_of[unit.site]:
                raise ValueError(
                    f"site {unit.site!r}: {unit.n_matrices} matrices for "
                    f"{channel_of[unit.site]} channels"
                )
        self.net_a = net_a
        self.net_b = net_b
        self.units = {name: by_site[name] for name in non_head if name in by_site}
        self.dtype = net_a.dtype
        self.seed_lineage = {"A": dict(net_a.seed_lineage), "B": dict(net_b.seed_lineage)}

    @property
    def tasks(self) -> tuple[str, ...]:
        return ("A", "B")

    def copy(self) -> "StitchedNetwork":
        return StitchedNetwork(self.net_a.copy(), self.net_b.copy(),
                               [u.copy() for u in self.units.values()])

    def parameter_groups(self):
        groups = []
        for prefix, net in (("A", self.net_a), ("B", self.net_b)):
            for g in net.parameter_groups():
                groups.append(ParamGroup(f"{prefix}.{g.name}", g.array, False, 1.0))
        for site, unit in self.units.items():
            groups.append(ParamGroup(f"stitch.{site}", unit.alphas, True, unit.lr_scale))
        return groups

    def param_count(self) -> int:
        return sum(g.array.size for g in self.parameter_groups())

    def alpha_snapshot(self) -> dict:
        return {site: unit.alphas.copy() for site, unit in self.units.items()}

    def _forward(self, x):
        """Interleaved two-stream forward. Returns (h_a, h_b, steps, trace).

        steps is a list of ("layer", spec, cache_a, cache_b) and
        ("unit", unit, x_a, x_b) records in forward order; trace holds the
        post-mix activations (name, act_a, act_b) per non-head layer.
        """
        a = np.asarray(x, dtype=self.dtype)
        b = a
        steps = []
        trace = []
        for spec in self.net_a.spec.layers[:-1]:
            a, cache_a = layer_forward(spec, self.net_a.params.get(spec.name, {}), a)
            b, cache_b = layer_forward(spec, self.net_b.params.get(spec.name, {}), b)
            steps.append(("layer", spec, cache_a, cache_b))
            unit = self.units.get(spec.name)
            if unit is not None:
                steps.append(("unit", unit, a, b))
                a, b = cross_stitch_forward(a, b, unit)
            trace.append((spec.name, a, b))
        return a, b, steps, trace

    def forward_trace(self, x):
        """Post-mix activations of both streams at every non-head layer."""
        _, _, _, trace = self._forward(x)
        return trace

    def forward_caches(self, x):
        _, _, steps, _ = self._forward(x)
        layer_steps = [s for s in steps if s[0] == "layer"]
        return ([(spec, ca) for _, spec, ca, _ in layer_steps]
                + [(spec, cb) for _, spec, _, cb in layer_steps])

    def predict_probs(self, x) -> dict:
        h_a, h_b, _, _ = self._forward(x)
        head_a = self.net_a.spec.head
        head_b = self.net_b.spec.head
        (_, probs_a), _ = layer_forward(head_a, self.net_a.params[head_a.name], h_a)
        (_, probs_b), _ = layer_forward(head_b, self.net_b.params[head_b.name], h_b)
        return {"A": probs_a, "B": probs_b}

    def compute_losses(self, batch) -> dict:
        h_a, h_b, _, _ = self._forward(batch.inputs)
        out = {}
        for task, h, net in (("A", h_a, self.net_a), ("B", h_b, self.net_b)):
            labels, mask = _batch_labels(batch, task)
            head = net.spec.head
            losses, _, _ = _head_losses(head, net.params[head.name], h, labels)
            out[task], _ = _task_loss_and_weights(losses, mask, 1.0, self.dtype)
        return out

    def loss_and_grads(self, batch, w_a: float = 1.0, w_b: float = 1.0):
        if np.asarray(batch.labels_a).shape[0] == 0:
            raise ValueError("batch with zero examples")
        h_a, h_b, steps, _ = self._forward(batch.inputs)
        grads: dict = {}
        task_losses = {}
        upstreams = {}
        for task, h, net, weight in (("A", h_a, self.net_a, w_a), ("B", h_b, self.net_b, w_b)):
            labels, mask = _batch_labels(batch, task)
            head = net.spec.head
            losses, _, head_cache = _head_losses(head, net.params[head.name], h, labels)
            mean_loss, wvec = _task_loss_and_weights(losses, mask, weight, self.dtype)
            task_losses[task] = mean_loss
            upstream, head_grads = layer_backward(head, net.params[head.name], head_cache, wvec)
            for pname, g in head_grads.items():
                grads[f"{task}.{head.name}.{pname}"] = g
            upstreams[task] = upstream
        d_a, d_b = upstreams["A"], upstreams["B"]
        for step in reversed(steps):
            if step[0] == "unit":
                _, unit, x_a, x_b = step
                d_a, d_b, alpha_grads = cross_stitch_backward(x_a, x_b, d_a, d_b, unit)
                grads[f"stitch.{unit.site}"] = alpha_grads
            else:
                _, spec, cache_a, cache_b = step
                d_a, pg_a = layer_backward(spec, self.net_a.params.get(spec.name, {}), cache_a, d_a)
                d_b, pg_b = layer_backward(spec, self.net_b.params.get(spec.name, {}), cache_b, d_b)
                for pname, g in pg_a.items():
                    grads[f"A.{spec.name}.{pname}"] = g
                for pname, g in pg_b.items():
                    grads[f"B.{spec.name}.{pname}"] = g
        total = w_a * task_losses["A"] + w_b * task_losses["B"]
        return total, task_losses, grads


def stitch(net_a: Network, net_b: Network, sites=None, granularity: str = "per_channel",
           alpha_s: float = 0.9, alpha_d: float = 0.1, lr_scale: float = 1.0) -> StitchedNetwork:
    """Join two one-task networks with cross-stitch units at the given sites.

    Both networks are copied, so the inputs stay usable as baselines. Sites
    default to the first network's spec-declared stitch sites.
    """
    sites = tuple(net_a.spec.stitch_sites if sites is None else sites)
    channels = site_channels(net_a.spec)
    shapes = shapes_through(net_a.spec)
    by_name = {l.name: s for l, s in zip(net_a.spec.layers, shapes)}
    pairs = []
    for site in sites:
        if site not in by_name or site == net_a.spec.head.name:
            raise ValueError(f"unknown stitch site {site!r}")
        pairs.append((site, channels.get(site, by_name[site][0])))
    units = init_alphas(alpha_s, alpha_d, granularity, pairs, lr_scale, dtype=net_a.dtype)
    return StitchedNetwork(net_a.copy(), net_b.copy(), units)


def init_networks(strategy: str, spec: NetworkSpec | None = None, seed: int | None = None,
                  checkpoint_a=None, checkpoint_b=None, classes_b: int | None = None,
                  dtype=np.float32):
    """Source the two streams for stitching.

    ``task_init`` loads two one-task checkpoints; ``common_init`` builds both
    networks fresh from one seed so they start bitwise identical (apart from
    head width when the tasks' class counts differ).
    """
    if strategy == "task_init":
        if checkpoint_a is None or checkpoint_b is None:
            raise ValueError("task_init requires two checkpoint paths")
        from .checkpoint import load_checkpoint

        net_a = load_checkpoint(checkpoint_a)
        net_b = load_checkpoint(checkpoint_b)
        for name, net, task in (("A", net_a, "A"), ("B", net_b, "B")):
            if not isinstance(net, Network):
                raise ValueError(f"checkpoint for stream {name} is not a one-task network")
        net_a.task = "A"
        net_b.task = "B"
        return net_a, net_b
    if strategy == "common_init":
        if spec is None or seed is None:
            raise ValueError("common_init requires a spec and a seed")
        net_a = build_one_task(spec, seed, task="A", dtype=dtype)
        spec_b = spec if classes_b is None else spec.with_classes(classes_b)
        net_b = build_one_task(spec_b, seed, task="B", dtype=dtype)
        return net_a, net_b
    raise ValueError(f"unknown init strategy {strategy!r}")
