"""Checkpoint persistence for all model kinds.

Structured JSON: the spec, flat parameter arrays per layer, stitch matrices
per site, and the seed lineage. Saves are canonical, so save -> load -> save
is byte-identical.
"""

from __future__ import annotations

from dataclasses import asdict

import numpy as np

from . import jsonio
from .layers import LayerSpec
from .network import Network, SplitNetwork, StitchedNetwork
from .specs import NetworkSpec, SplitArchitecture
from .units import CrossStitchUnit

CHECKPOINT_FORMAT = "stitchnet-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Missing, malformed, or wrong-kind checkpoint file."""


def _spec_payload(spec: NetworkSpec) -> dict:
    return {
        "layers": [asdict(l) for l in spec.layers],
        "input_shape": list(spec.input_shape),
        "stitch_sites": list(spec.stitch_sites),
    }


def _spec_from(payload: dict) -> NetworkSpec:
    layers = tuple(LayerSpec(**d) for d in payload["layers"])
    return NetworkSpec(layers, tuple(payload["input_shape"]), tuple(payload["stitch_sites"]))


def _params_payload(params: dict) -> dict:
    return {name: {p: jsonio.encode_array(a) for p, a in sorted(d.items())}
            for name, d in params.items()}


def _params_from(payload: dict, dtype) -> dict:
    return {name: {p: jsonio.decode_array(enc).astype(dtype, copy=False)
                   for p, enc in d.items()}
            for name, d in payload.items()}


def _unit_payload(unit: CrossStitchUnit) -> dict:
    return {
        "site": unit.site,
        "granularity": unit.granularity,
        "lr_scale": float(unit.lr_scale),
        "alphas": jsonio.encode_array(unit.alphas),
    }


def _unit_from(payload: dict) -> CrossStitchUnit:
    return CrossStitchUnit(payload["site"], payload["granularity"],
                           jsonio.decode_array(payload["alphas"]), payload["lr_scale"])


def _network_payload(net: Network) -> dict:
    return {
        "spec": _spec_payload(net.spec),
        "task": net.task,
        "dtype": np.dtype(net.dtype).name,
        "params": _params_payload(net.params),
        "seed_lineage": net.seed_lineage,
    }


def _network_from(payload: dict) -> Network:
    dtype = np.dtype(payload["dtype"])
    spec = _spec_from(payload["spec"])
    return Network(spec, _params_from(payload["params"], dtype), payload["task"], dtype,
                   payload.get("seed_lineage", {}))


def save_checkpoint(model, path, extra: dict | None = None) -> None:
    """Write any model kind to a canonical JSON checkpoint."""
    payload: dict = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION}
    if extra:
        payload["meta"] = extra
    if isinstance(model, Network):
        payload["kind"] = "one_task"
        payload["network"] = _network_payload(model)
    elif isinstance(model, SplitNetwork):
        payload["kind"] = "split"
        payload["split"] = {
            "base_spec": _spec_payload(model.arch.base),
            "split_index": model.arch.split_index,
            "classes_b": model.head_b_spec.classes,
            "dtype": np.dtype(model.dtype).name,
            "shared": _params_payload(model.shared),
            "branch_a": _params_payload(model.branch_a),
            "branch_b": _params_payload(model.branch_b),
            "seed_lineage": model.seed_lineage,
        }
    elif isinstance(model, StitchedNetwork):
        payload["kind"] = "stitched"
        payload["stitched"] = {
            "net_a": _network_payload(model.net_a),
            "net_b": _network_payload(model.net_b),
            "units": [_unit_payload(u) for u in model.units.values()],
            "seed_lineage": model.seed_lineage,
        }
    else:
        raise CheckpointError(f"cannot checkpoint object of type {type(model).__name__}")
    jsonio.dump_file(payload, path)


def load_checkpoint(path):
    """Load a checkpoint written by save_checkpoint; returns the model."""
    try:
        payload = jsonio.load_file(path)
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    except (ValueError, OSError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    try:
        if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: not a stitchnet checkpoint")
        kind = payload["kind"]
        if kind == "one_task":
            return _network_from(payload["network"])
        if kind == "split":
            d = payload["split"]
            dtype = np.dtype(d["dtype"])
            base = _spec_from(d["base_spec"])
            arch = SplitArchitecture(base, int(d["split_index"]))
            from dataclasses import replace

            head_b = replace(base.head, classes=int(d["classes_b"]))
            return SplitNetwork(arch, _params_from(d["shared"], dtype),
                                _params_from(d["branch_a"], dtype),
                                _params_from(d["branch_b"], dtype),
                                head_b, dtype, d.get("seed_lineage", {}))
        if kind == "stitched":
            d = payload["stitched"]
            model = StitchedNetwork(_network_from(d["net_a"]), _network_from(d["net_b"]),
                                    [_unit_from(u) for u in d["units"]])
            model.seed_lineage = d.get("seed_lineage", model.seed_lineage)
            return model
        raise CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
