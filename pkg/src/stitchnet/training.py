"""SGD training loop, task-weighted masked losses, metrics, and the ensemble.

Updates follow the classic velocity form v = mu*v - lr*grad; theta += v.
Stitch matrices train at base_lr * alpha_lr_scale * unit.lr_scale, every
other parameter at base_lr. Training is deterministic given (config, dataset,
seed): batches come from a fixed per-epoch shuffle, never sampled with
replacement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DivergenceError(RuntimeError):
    """A non-finite loss or gradient aborted the run."""


@dataclass
class TrainConfig:
    base_lr: float = 0.05
    momentum: float = 0.9
    alpha_lr_scale: float = 100.0
    loss_weight_a: float = 1.0
    loss_weight_b: float = 1.0
    iterations: int = 1000
    batch_size: int = 32
    seed: int = 0
    eval_every: int = 200
    freeze_alphas: bool = False
    # None: stitch matrices get the same momentum as everything else
    alpha_momentum: float | None = None

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.alpha_lr_scale <= 0:
            raise ValueError("alpha_lr_scale must be positive")
        if self.loss_weight_a < 0 or self.loss_weight_b < 0:
            raise ValueError("loss weights must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.batch_size <= 0 or self.eval_every <= 0:
            raise ValueError("batch_size and eval_every must be positive")
        if self.alpha_momentum is not None and not 0.0 <= self.alpha_momentum < 1.0:
            raise ValueError("alpha_momentum must lie in [0, 1)")


@dataclass
class TaskBatch:
    """Shared inputs with two label streams; mask_b False drops that example
    from the task-B loss entirely."""

    inputs: np.ndarray
    labels_a: np.ndarray
    labels_b: np.ndarray
    mask_b: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.inputs).shape[0]
        for name in ("labels_a", "labels_b", "mask_b"):
            if np.asarray(getattr(self, name)).shape[0] != n:
                raise ValueError(f"{name} length does not match the batch size {n}")

    def __len__(self) -> int:
        return np.asarray(self.inputs).shape[0]


@dataclass
class Metrics:
    overall_accuracy: float
    per_class_accuracy: np.ndarray  # nan for classes absent from the split
    mean_per_class_accuracy: float
    loss: float
    class_counts: np.ndarray

    def as_dict(self) -> dict:
        return {
            "overall_accuracy": float(self.overall_accuracy),
            "per_class_accuracy": [None if np.isnan(v) else float(v) for v in self.per_class_accuracy],
            "mean_per_class_accuracy": float(self.mean_per_class_accuracy),
            "loss": float(self.loss),
            "class_counts": [int(c) for c in self.class_counts],
        }


@dataclass
class TrainHistory:
    iterations: list = field(default_factory=list)
    loss_total: list = field(default_factory=list)
    loss_a: list = field(default_factory=list)  # nan when the model lacks the task
    loss_b: list = field(default_factory=list)
    evals: list = field(default_factory=list)  # (iteration, {task: Metrics})
    alpha_snapshots: list = field(default_factory=list)  # (iteration, {site: (m,2,2)})
    diverged: bool = False
    diverged_at: int | None = None

    def final_train_loss(self, tail_fraction: float = 0.1) -> float:
        """Mean total loss over the trailing fraction of iterations."""
        if not self.loss_total:
            return float("nan")
        k = max(1, int(len(self.loss_total) * tail_fraction))
        return float(np.mean(self.loss_total[-k:]))


def compute_loss(model, batch: TaskBatch, w_a: float = 1.0, w_b: float = 1.0):
    """Weighted total loss and unweighted per-task mean losses (forward only)."""
    if len(batch) == 0:
        raise ValueError("batch with zero examples")
    per_task = model.compute_losses(batch)
    total = 0.0
    for task, loss in per_task.items():
        total += (w_a if task == "A" else w_b) * loss
    return total, per_task


def sgd_step(model, grads: dict, cfg: TrainConfig, velocities: dict) -> None:
    """One in-place SGD update over every parameter group of the model."""
    for g in model.parameter_groups():
        if g.alpha and cfg.freeze_alphas:
            continue
        grad = grads[g.name]
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite gradient in parameter group {g.name!r}")
        lr = cfg.base_lr * (cfg.alpha_lr_scale * g.lr_scale if g.alpha else 1.0)
        mu = cfg.momentum
        if g.alpha and cfg.alpha_momentum is not None:
            mu = cfg.alpha_momentum
        arr = g.array
        if mu == 0.0:
            arr -= (lr * grad).astype(arr.dtype, copy=False)
            continue
        v = velocities.get(g.name)
        if v is None:
            v = velocities.setdefault(g.name, np.zeros_like(arr))
        v *= mu
        v -= (lr * grad).astype(v.dtype, copy=False)
        arr += v


def _batches(n: int, batch_size: int, iterations: int, seed: int):
    """Fixed per-epoch shuffles, yielding index arrays until iterations run out."""
    rng = np.random.default_rng(seed)
    done = 0
    while done < iterations:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            if done >= iterations:
                return
            yield perm[start : start + batch_size]
            done += 1


def train(model, dataset, cfg: TrainConfig, eval_split: str = "val"):
    """Run SGD for cfg.iterations batches; returns (model, TrainHistory).

    The history records per-iteration batch losses, metrics on eval_split
    every cfg.eval_every iterations (and at the final iteration), and stitch
    matrix snapshots alongside each evaluation. A non-finite loss or gradient
    stops the run early with history.diverged set.
    """
    x, la, lb, mb = dataset.split_arrays("train")
    if x.shape[0] == 0:
        raise ValueError("empty training split")
    x = np.asarray(x, dtype=model.dtype)
    history = TrainHistory()
    if hasattr(model, "alpha_snapshot"):
        history.alpha_snapshots.append((0, model.alpha_snapshot()))
    velocities: dict = {}
    it = 0
    for idx in _batches(x.shape[0], cfg.batch_size, cfg.iterations, cfg.seed):
        it += 1
        batch = TaskBatch(x[idx], la[idx], lb[idx], mb[idx])
        total, per_task, grads = model.loss_and_grads(
            batch, cfg.loss_weight_a, cfg.loss_weight_b
        )
        history.iterations.append(it)
        history.loss_total.append(float(total))
        history.loss_a.append(float(per_task.get("A", np.nan)))
        history.loss_b.append(float(per_task.get("B", np.nan)))
        if not np.isfinite(total):
            history.diverged = True
            history.diverged_at = it
            break
        try:
            sgd_step(model, grads, cfg, velocities)
        except DivergenceError:
            history.diverged = True
            history.diverged_at = it
            break
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            history.evals.append((it, evaluate(model, dataset, eval_split)))
            if hasattr(model, "alpha_snapshot"):
                history.alpha_snapshots.append((it, model.alpha_snapshot()))
    model.seed_lineage.setdefault("train_seeds", []).append(int(cfg.seed))
    return model, history


def _metrics_from_probs(probs, labels, valid, n_classes) -> Metrics:
    preds = probs.argmax(axis=1)
    labels = np.asarray(labels)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("no examples to evaluate")
    correct = (preds == labels) & valid
    overall = float(correct.sum() / valid.sum())
    per_class = np.full(n_classes, np.nan)
    counts = np.zeros(n_classes, dtype=np.int64)
    for c in range(n_classes):
        in_class = valid & (labels == c)
        counts[c] = int(in_class.sum())
        if counts[c]:
            per_class[c] = float(correct[in_class].sum() / counts[c])
    present = counts > 0
    mean_pc = float(per_class[present].mean())
    # report loss from the predicted distributions; evaluate the log at 64-bit
    # with a tiny floor so a confidently wrong float32 prob of exactly 0 stays finite
    p_true = probs[np.arange(labels.shape[0]), labels].astype(np.float64)
    loss = float(-np.log(np.maximum(p_true[valid], 1e-300)).mean())
    return Metrics(overall, per_class, mean_pc, loss, counts)


def evaluate(model, dataset, split: str = "test") -> dict:
    """Accuracy, per-class accuracy and loss per task on one dataset split.

    Task B is scored on its mask_b=True examples only.
    """
    x, la, lb, mb = dataset.split_arrays(split)
    if x.shape[0] == 0:
        raise ValueError(f"empty evaluation split {split!r}")
    probs = model.predict_probs(np.asarray(x, dtype=model.dtype))
    out = {}
    for task in model.tasks:
        if task == "A":
            out["A"] = _metrics_from_probs(probs["A"], la, np.ones(len(la), dtype=bool),
                                           probs["A"].shape[1])
        else:
            out["B"] = _metrics_from_probs(probs["B"], lb, mb, probs["B"].shape[1])
    return out


def ensemble_eval(net_1, net_2, dataset, split: str = "test") -> Metrics:
    """Average two same-task networks' class probabilities, then score."""
    if net_1.task != net_2.task:
        raise ValueError("ensemble members must predict the same task")
    if net_1.spec.layers != net_2.spec.layers:
        raise ValueError("ensemble members must share one topology")
    x, la, lb, mb = dataset.split_arrays(split)
    if x.shape[0] == 0:
        raise ValueError(f"empty evaluation split {split!r}")
    task = net_1.task
    p1 = net_1.predict_probs(np.asarray(x, dtype=net_1.dtype))[task]
    p2 = net_2.predict_probs(np.asarray(x, dtype=net_2.dtype))[task]
    probs = (p1 + p2) / 2.0
    if task == "A":
        return _metrics_from_probs(probs, la, np.ones(len(la), dtype=bool), probs.shape[1])
    return _metrics_from_probs(probs, lb, mb, probs.shape[1])
