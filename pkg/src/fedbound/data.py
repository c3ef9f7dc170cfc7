"""Procedural image data, client partitioning and backdoor triggers."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import DimensionError


class ConfigError(ValueError):
    """Raised for invalid experiment or operation settings."""


TRIGGERS = ("badnet", "blend", "sig")
DATASET_MAGIC = b"FBDS"


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, g*g), values in [0, 1]
    labels: np.ndarray  # (N,), int
    grid: int
    n_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.grid, self.n_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass
class SyntheticDataset(LabeledDataset):
    brightness: float = 0.1
    noise: float = 0.1


@dataclass
class PoisonSpec:
    trigger: str = "badnet"
    target_class: int = 0
    ratio: float = 0.2
    patch: int = 2
    blend_alpha: float = 0.2
    blend_seed: int = 1234
    sig_amplitude: float = 0.15
    sig_frequency: float = 6.0

    def validate(self, n_classes: int) -> None:
        if self.trigger not in TRIGGERS:
            raise ConfigError(f"unknown trigger {self.trigger!r}; expected one of {TRIGGERS}")
        if not 0 <= self.target_class < n_classes:
            raise ConfigError(f"target_class {self.target_class} outside [0, {n_classes})")
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError(f"ratio {self.ratio} outside [0, 1]")


@dataclass
class Partition:
    assignment: dict[int, np.ndarray]
    mode: str
    beta: float | None = None

    @property
    def n_clients(self) -> int:
        return len(self.assignment)


def class_templates(n_classes: int, grid: int) -> np.ndarray:
    """Noise-free class prototypes: a Gaussian bump plus a stripe pattern.

    Bumps sit on a coarse interior lattice indexed by class; stripe frequency
    and orientation are also class-indexed.
    """
    side = math.ceil(math.sqrt(n_classes))
    coords = np.arange(grid, dtype=np.float64)
    rows, cols = np.meshgrid(coords, coords, indexing="ij")
    lo, hi = 0.2 * (grid - 1), 0.7 * (grid - 1)
    step = (hi - lo) / max(side - 1, 1)
    width = grid / 7.0
    # dark border, like digit or object crops on a black background
    edge = np.minimum(np.minimum(rows, cols), np.minimum(grid - 1 - rows, grid - 1 - cols))
    window = np.clip((edge - 1.0) / 3.0, 0.0, 1.0)
    out = np.empty((n_classes, grid * grid))
    for c in range(n_classes):
        r0 = lo + (c // side) * step
        c0 = lo + (c % side) * step
        bump = np.exp(-((rows - r0) ** 2 + (cols - c0) ** 2) / (2 * width**2))
        freq = 1 + (c % 4)
        axis = rows if (c // 4) % 2 == 0 else cols
        stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * axis / grid + c)
        out[c] = ((0.1 + 0.2 * stripes) * window + 0.55 * bump).ravel()
    return out


def _sample_images(n_classes, per_class, grid, noise, brightness, rng):
    templates = class_templates(n_classes, grid)
    labels = np.repeat(np.arange(n_classes), per_class)
    images = templates[labels] + brightness
    if noise > 0:
        images = images + rng.normal(0.0, noise, size=images.shape)
    return np.clip(images, 0.0, 1.0), labels


def generate_dataset(
    n_classes: int, per_class: int, grid: int, rng: np.random.Generator, noise: float = 0.05
) -> LabeledDataset:
    if n_classes < 2 or per_class < 1:
        raise ConfigError("need n_classes >= 2 and per_class >= 1")
    images, labels = _sample_images(n_classes, per_class, grid, noise, 0.0, rng)
    return LabeledDataset(images, labels, grid, n_classes)


def generate_synthetic(
    n_classes: int,
    per_class: int,
    grid: int,
    rng: np.random.Generator,
    brightness: float = 0.1,
    noise: float = 0.1,
) -> SyntheticDataset:
    """Class-balanced server-side data, shifted in brightness and noise."""
    if n_classes < 2 or per_class < 1:
        raise ConfigError("need n_classes >= 2 and per_class >= 1")
    images, labels = _sample_images(n_classes, per_class, grid, noise, brightness, rng)
    return SyntheticDataset(images, labels, grid, n_classes, brightness=brightness, noise=noise)


def _proportional_counts(n: int, props: np.ndarray) -> np.ndarray:
    """Split ``n`` items by ``props`` with largest-remainder rounding (lowest index wins ties)."""
    quota = props * n
    counts = np.floor(quota).astype(np.int64)
    order = np.argsort(-(quota - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return counts


def partition(
    labels: np.ndarray,
    n_clients: int,
    rng: np.random.Generator,
    mode: str = "iid",
    beta: float = 0.1,
) -> Partition:
    """Split sample indices across clients (IID or per-class Dirichlet).

    ``labels`` may also be a :class:`LabeledDataset`.
    """
    labels = np.asarray(getattr(labels, "labels", labels))
    n = len(labels)
    if n_clients < 1:
        raise ConfigError("n_clients must be >= 1")
    if n_clients > n:
        raise ConfigError(f"cannot give {n_clients} clients at least one of {n} samples")
    if mode == "iid":
        perm = rng.permutation(n)
        parts = np.array_split(perm, n_clients)
        return Partition({i: np.sort(p) for i, p in enumerate(parts)}, "iid")
    if mode != "dirichlet":
        raise ConfigError(f"unknown partition mode {mode!r}")
    if not beta > 0:
        raise ConfigError("Dirichlet beta must be > 0")
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        props = rng.dirichlet(np.full(n_clients, beta))
        counts = _proportional_counts(len(idx), props)
        start = 0
        for client, k in enumerate(counts):
            buckets[client].extend(idx[start : start + k].tolist())
            start += k
    for client in range(n_clients):
        if not buckets[client]:
            donor = max(range(n_clients), key=lambda i: (len(buckets[i]), -i))
            buckets[client].append(buckets[donor].pop())
    return Partition({i: np.sort(np.array(b, dtype=np.int64)) for i, b in enumerate(buckets)}, "dirichlet", beta)


def blend_pattern(grid: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=grid * grid)


def embed_trigger(images: np.ndarray, spec: PoisonSpec, grid: int | None = None) -> np.ndarray:
    """Apply the trigger to one flat image or a batch of them."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 1
    batch = images[None, :] if single else images.copy()
    size = batch.shape[1]
    if grid is None:
        grid = int(round(math.sqrt(size)))
    if grid * grid != size:
        raise DimensionError(f"image of {size} pixels is not a {grid}x{grid} grid")
    if spec.trigger == "badnet":
        k = spec.patch
        if not 1 <= k <= grid:
            raise ConfigError(f"patch size {k} does not fit a {grid}x{grid} image")
        view = batch.reshape(-1, grid, grid)
        view[:, grid - k :, grid - k :] = 1.0
        out = view.reshape(-1, size)
    elif spec.trigger == "blend":
        a = spec.blend_alpha
        out = (1.0 - a) * batch + a * blend_pattern(grid, spec.blend_seed)
    elif spec.trigger == "sig":
        cols = np.tile(np.arange(grid), grid)
        out = batch + spec.sig_amplitude * np.sin(2 * np.pi * spec.sig_frequency * cols / grid)
    else:
        raise ConfigError(f"unknown trigger {spec.trigger!r}")
    out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out


def poison_dataset(
    dataset: LabeledDataset, spec: PoisonSpec, rng: np.random.Generator
) -> tuple[LabeledDataset, np.ndarray]:
    """Trigger and relabel ``floor(ratio * count_c)`` samples of each non-target class."""
    spec.validate(dataset.n_classes)
    images = dataset.images.copy()
    labels = dataset.labels.copy()
    chosen = []
    for c in range(dataset.n_classes):
        if c == spec.target_class:
            continue
        idx = np.flatnonzero(dataset.labels == c)
        k = int(math.floor(spec.ratio * len(idx) + 1e-9))
        if k:
            chosen.append(np.sort(rng.choice(idx, size=k, replace=False)))
    poisoned = np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=np.int64)
    if len(poisoned):
        images[poisoned] = embed_trigger(images[poisoned], spec, dataset.grid)
        labels[poisoned] = spec.target_class
    cls = type(dataset)
    if isinstance(dataset, SyntheticDataset):
        out = cls(images, labels, dataset.grid, dataset.n_classes, dataset.brightness, dataset.noise)
    else:
        out = cls(images, labels, dataset.grid, dataset.n_classes)
    return out, poisoned


def make_asr_testset(clean: LabeledDataset, spec: PoisonSpec) -> LabeledDataset:
    """Triggered copies of every non-target sample, keeping the true labels."""
    keep = np.flatnonzero(clean.labels != spec.target_class)
    images = embed_trigger(clean.images[keep], spec, clean.grid) if len(keep) else clean.images[keep]
    return LabeledDataset(images, clean.labels[keep].copy(), clean.grid, clean.n_classes)


def dump_dataset(path, dataset: LabeledDataset, params: dict | None = None) -> None:
    """Binary dump: little-endian header then float64 pixels and int32 labels.

    Header is ``b"FBDS"`` followed by uint32 ``grid``, ``n_classes``, ``N``.
    A JSON sidecar (``<path>.json``) records the generation parameters.
    """
    path = Path(path)
    header = DATASET_MAGIC + struct.pack("<III", dataset.grid, dataset.n_classes, len(dataset))
    with path.open("wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(dataset.images, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(dataset.labels, dtype="<i4").tobytes())
    sidecar = {"grid": dataset.grid, "n_classes": dataset.n_classes, "n": len(dataset)}
    sidecar.update(params or {})
    path.with_name(path.name + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_dataset(path) -> LabeledDataset:
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    grid, n_classes, n = struct.unpack("<III", raw[4:16])
    pix = grid * grid * n
    images = np.frombuffer(raw, dtype="<f8", count=pix, offset=16).reshape(n, grid * grid)
    labels = np.frombuffer(raw, dtype="<i4", count=n, offset=16 + 8 * pix)
    return LabeledDataset(images.astype(np.float64), labels.astype(np.int64), grid, n_classes)
