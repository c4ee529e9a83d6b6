"""Deterministic two-task dataset generator with a label-starvation knob.

Each example renders a small glyph: a class-specific subset of radial spokes
drawn from the canvas center, rotated as a whole by one of ``classes_b``
discrete orientations. The glyph class drives label A; the rendered
orientation drives label B. Spoke subsets are chosen so that no glyph maps
onto itself (or onto another class) under any rotation, which makes both
labels recoverable from the pixels alone.

The relatedness knob couples the labels: with probability ``relatedness`` the
orientation is tied to the glyph class (orientation = class mod classes_b),
otherwise it is resampled uniformly. At 1.0 label B is a deterministic
function of the latent shared with label A; at 0.0 the labels are
statistically independent.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np

from . import jsonio

SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


class DataConfigError(ValueError):
    """The generator config cannot be realized (e.g. glyph exceeds canvas)."""


@dataclass(frozen=True)
class DatasetConfig:
    n: int = 2000
    height: int = 16
    width: int = 16
    classes_a: int = 8
    classes_b: int = 8
    noise_level: float = 0.15
    relatedness: float = 0.9
    train_frac: float = 0.7
    val_frac: float = 0.15
    jitter: int = 2
    # within-bin angular wobble as a fraction of the bin width; label B is the
    # bin, the rendered angle wanders inside it
    angle_jitter: float = 0.25

    def __post_init__(self):
        if self.n < 1:
            raise DataConfigError("n must be positive")
        if self.classes_a < 2 or self.classes_b < 2:
            raise DataConfigError("both tasks need at least 2 classes")
        if not 0.0 <= self.relatedness <= 1.0:
            raise DataConfigError("relatedness must lie in [0, 1]")
        if self.noise_level < 0:
            raise DataConfigError("noise_level must be non-negative")
        if not 0.0 < self.train_frac < 1.0 or self.val_frac < 0 or \
                self.train_frac + self.val_frac >= 1.0:
            raise DataConfigError("split fractions must leave room for train/val/test")
        if self.jitter < 0:
            raise DataConfigError("jitter must be non-negative")
        if not 0.0 <= self.angle_jitter <= 0.5:
            raise DataConfigError("angle_jitter must lie in [0, 0.5]")


@dataclass
class TwoTaskDataset:
    """Shared inputs, two label streams, a task-B presence mask, split tags."""

    config: DatasetConfig
    seed: int
    inputs: np.ndarray  # (N, 1, H, W) float32
    labels_a: np.ndarray  # (N,) int64
    labels_b: np.ndarray  # (N,) int64
    mask_b: np.ndarray  # (N,) bool
    split: np.ndarray  # (N,) int8, see SPLIT_CODES
    starve_report: dict | None = None

    def split_arrays(self, name: str):
        code = SPLIT_CODES.get(name)
        if code is None:
            raise ValueError(f"unknown split {name!r}")
        sel = self.split == code
        return self.inputs[sel], self.labels_a[sel], self.labels_b[sel], self.mask_b[sel]

    def copy(self) -> "TwoTaskDataset":
        return TwoTaskDataset(self.config, self.seed, self.inputs.copy(), self.labels_a.copy(),
                              self.labels_b.copy(), self.mask_b.copy(), self.split.copy(),
                              None if self.starve_report is None else dict(self.starve_report))

    def counts_b(self, split: str = "train", masked: bool = True) -> np.ndarray:
        """Per-class task-B label counts (mask-true only unless masked=False)."""
        _, _, lb, mb = self.split_arrays(split)
        sel = mb if masked else np.ones(len(lb), dtype=bool)
        return np.bincount(lb[sel], minlength=self.config.classes_b)

    def counts_a(self, split: str = "train") -> np.ndarray:
        _, la, _, _ = self.split_arrays(split)
        return np.bincount(la, minlength=self.config.classes_a)


SHORT_SPOKE = 0.6  # length scale of a shortened spoke, as a fraction of radius


def _spoke_patterns(n_positions: int, n_classes: int) -> list[tuple]:
    """Deterministic glyph patterns: tuples of (spoke position, length scale).

    Every pattern is rotation-asymmetric (no rotation maps it onto itself) and
    the set is pairwise rotation-inequivalent, so both the glyph class and its
    orientation stay recoverable from pixels. Full-length subsets come first;
    shortened spokes and single-spoke glyphs only appear when the position
    count cannot host enough plain subsets. Raises when even those run out.
    """
    chosen: list[tuple] = []
    seen: set = set()

    def try_add(pattern) -> bool:
        rots = {tuple(sorted(((p + r) % n_positions, s) for p, s in pattern))
                for r in range(n_positions)}
        if len(rots) != n_positions:
            return False  # rotational self-symmetry: orientation would be ambiguous
        canon = min(rots)
        if canon in seen:
            return False
        seen.add(canon)
        chosen.append(tuple(sorted(pattern)))
        return True

    for n_short in range(0, n_positions + 1):
        for size in range(max(2, n_short), n_positions + 1):
            for combo in itertools.combinations(range(n_positions), size):
                for shorts in itertools.combinations(combo, n_short):
                    pattern = tuple((p, SHORT_SPOKE if p in shorts else 1.0) for p in combo)
                    if try_add(pattern) and len(chosen) == n_classes:
                        return chosen
    for single in (((0, 1.0),), ((0, SHORT_SPOKE),)):
        if try_add(single) and len(chosen) == n_classes:
            return chosen
    raise DataConfigError(
        f"cannot pick {n_classes} rotation-distinct glyphs on {n_positions} spoke positions"
    )


def _render_glyph(h: int, w: int, pattern, angle_offset: float, n_positions: int,
                  radius: float, dy: int, dx: int) -> np.ndarray:
    img = np.zeros((h, w), dtype=np.float32)
    cy = (h - 1) / 2.0 + dy
    cx = (w - 1) / 2.0 + dx
    img[int(round(cy)), int(round(cx))] = 1.0
    for k, scale in pattern:
        radii = np.arange(1.0, radius * scale + 0.25, 0.5)
        angle = 2.0 * np.pi * (k + angle_offset) / n_positions
        ys = np.round(cy + radii * np.sin(angle)).astype(int)
        xs = np.round(cx + radii * np.cos(angle)).astype(int)
        img[ys, xs] = 1.0
    return img


def generate(config: DatasetConfig, seed: int) -> TwoTaskDataset:
    """Render a dataset from the config; fully deterministic per seed.

    Task-A classes are stratified (counts within one of N / classes_a) and the
    train/val/test tags are stratified by task-A class as well.
    """
    cfg = config
    radius = min(cfg.height, cfg.width) // 2 - cfg.jitter - 1
    if radius < 2:
        raise DataConfigError(
            f"canvas {cfg.height}x{cfg.width} too small for glyphs with jitter {cfg.jitter}"
        )
    patterns = _spoke_patterns(cfg.classes_b, cfg.classes_a)
    rng = np.random.default_rng(seed)

    reps = -(-cfg.n // cfg.classes_a)  # ceil
    labels_a = np.tile(np.arange(cfg.classes_a), reps)[: cfg.n]
    labels_a = labels_a[rng.permutation(cfg.n)].astype(np.int64)

    coin = rng.random(cfg.n)
    o_rand = rng.integers(0, cfg.classes_b, size=cfg.n)
    labels_b = np.where(coin < cfg.relatedness, labels_a % cfg.classes_b, o_rand).astype(np.int64)

    jit = rng.integers(-cfg.jitter, cfg.jitter + 1, size=(cfg.n, 2))
    wobble = rng.uniform(-cfg.angle_jitter, cfg.angle_jitter, size=cfg.n)
    noise = rng.standard_normal((cfg.n, 1, cfg.height, cfg.width)).astype(np.float32)

    inputs = np.empty((cfg.n, 1, cfg.height, cfg.width), dtype=np.float32)
    for i in range(cfg.n):
        inputs[i, 0] = _render_glyph(cfg.height, cfg.width, patterns[labels_a[i]],
                                     float(labels_b[i]) + float(wobble[i]), cfg.classes_b,
                                     radius, int(jit[i, 0]), int(jit[i, 1]))
    inputs += np.float32(cfg.noise_level) * noise

    split = np.empty(cfg.n, dtype=np.int8)
    for c in range(cfg.classes_a):
        idx = np.flatnonzero(labels_a == c)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(len(idx) * cfg.val_frac)
        n_test = int(len(idx) * (1.0 - cfg.train_frac - cfg.val_frac))
        split[idx[:n_val]] = SPLIT_CODES["val"]
        split[idx[n_val : n_val + n_test]] = SPLIT_CODES["test"]
        split[idx[n_val + n_test :]] = SPLIT_CODES["train"]

    return TwoTaskDataset(cfg, int(seed), inputs, labels_a, labels_b,
                          np.ones(cfg.n, dtype=bool), split)


def starve(dataset: TwoTaskDataset, classes, keep_fraction: float, seed: int) -> TwoTaskDataset:
    """Mask out task-B labels for the given classes on the training split.

    Each listed class keeps a seeded random subset of floor(count *
    keep_fraction) mask-true training examples (at least one, unless the class
    had none). Inputs, task-A labels and the val/test splits are untouched.
    The result carries a per-class label-count report.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    classes = sorted(int(c) for c in classes)
    n_b = dataset.config.classes_b
    if any(c < 0 or c >= n_b for c in classes):
        raise ValueError(f"classes must lie in [0, {n_b})")
    out = dataset.copy()
    rng = np.random.default_rng(seed)
    train_code = SPLIT_CODES["train"]
    warnings = []
    for c in classes:
        idx = np.flatnonzero((out.split == train_code) & out.mask_b & (out.labels_b == c))
        keep = int(np.floor(len(idx) * keep_fraction))
        if len(idx) > 0:
            keep = max(keep, 1)
        else:
            warnings.append(int(c))
        drop = rng.permutation(len(idx))[keep:]
        out.mask_b[idx[drop]] = False
    counts = out.counts_b("train", masked=True)
    out.starve_report = {
        "classes": classes,
        "keep_fraction": float(keep_fraction),
        "seed": int(seed),
        "train_labels_per_class": {str(c): int(n) for c, n in enumerate(counts)},
        "empty_classes": warnings,
    }
    return out


DATASET_FORMAT = "stitchnet-dataset"
DATASET_VERSION = 1


def save_dataset(dataset: TwoTaskDataset, path) -> None:
    payload = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "seed": dataset.seed,
        "config": asdict(dataset.config),
        "starve_report": dataset.starve_report,
        "arrays": {
            "inputs": jsonio.encode_array(dataset.inputs),
            "labels_a": jsonio.encode_array(dataset.labels_a),
            "labels_b": jsonio.encode_array(dataset.labels_b),
            "mask_b": jsonio.encode_array(dataset.mask_b),
            "split": jsonio.encode_array(dataset.split),
        },
    }
    jsonio.dump_file(payload, path)


def load_dataset(path) -> TwoTaskDataset:
    payload = jsonio.load_file(path)
    if payload.get("format") != DATASET_FORMAT or payload.get("version") != DATASET_VERSION:
        raise ValueError(f"{path}: not a stitchnet dataset file")
    arrays = {k: jsonio.decode_array(v) for k, v in payload["arrays"].items()}
    return TwoTaskDataset(DatasetConfig(**payload["config"]), int(payload["seed"]),
                          arrays["inputs"], arrays["labels_a"], arrays["labels_b"],
                          arrays["mask_b"], arrays["split"], payload.get("starve_report"))
