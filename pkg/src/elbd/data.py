"""Datasets: IDX ingestion, the bundled MNIST subset, synthetic sets,
255-level discretization and seeded splitting."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .mathcore import Rng, sample_standard_normal

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, dim_x), values in [0, 1] (or integers 0..255 once discretized)
    labels: np.ndarray | None = None
    name: str = ""
    source: str = ""
    image_shape: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 2:
            raise ValueError("images must be a (N, dim_x) array")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.images.shape[0],):
                raise ValueError("one label per image required")
            if self.labels.size and self.labels.min() < 0:
                raise ValueError("labels must be non-negative")

    def __len__(self):
        return self.images.shape[0]

    @property
    def dim_x(self) -> int:
        return self.images.shape[1]

    @property
    def label_count(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1

    def subset(self, idx) -> "Dataset":
        return replace(self, images=self.images[idx],
                       labels=None if self.labels is None else self.labels[idx])


def _read_idx(path, magic):
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise IdxFormatError(f"{path}: truncated header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    n = int(np.prod(dims, dtype=np.int64))
    if len(raw) - head != n:
        raise IdxFormatError(f"{path}: expected {n} data bytes, found {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def load_idx(images_path, labels_path=None) -> Dataset:
    """Parse an IDX image file (and optional label file); pixels scaled by 1/255."""
    imgs = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
        if labels.shape[0] != imgs.shape[0]:
            raise IdxFormatError(f"{imgs.shape[0]} images but {labels.shape[0]} labels")
    n = imgs.shape[0]
    return Dataset(
        images=imgs.reshape(n, -1).astype(np.float64) / 255.0,
        labels=labels,
        name=Path(images_path).name,
        source=str(images_path),
        image_shape=tuple(imgs.shape[1:]),
    )


def write_idx(path, array) -> None:
    """Write a uint8 array as IDX (3-D -> images magic, 1-D -> labels magic)."""
    a = np.asarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES_MAGIC, 1: IDX_LABELS_MAGIC}.get(a.ndim)
    if magic is None:
        raise ValueError("IDX writer supports 1-D labels or 3-D image stacks")
    header = struct.pack(">I", magic) + struct.pack(f">{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + a.tobytes())


def load_mnist_subset(n: int | None = None) -> Dataset:
    """MNIST images in [0, 1] with labels.

    Reads ``train-images-idx3-ubyte``/``train-labels-idx1-ubyte`` from the
    directory in ``$ELBD_MNIST_DIR`` when set; otherwise falls back to the
    5000-image MNIST sample bundled with mlxtend (500 per digit).
    """
    root = os.environ.get("ELBD_MNIST_DIR")
    if root:
        ds = load_idx(Path(root) / "train-images-idx3-ubyte", Path(root) / "train-labels-idx1-ubyte")
        ds.name = "mnist"
    else:
        from mlxtend.data import mnist_data

        x, y = mnist_data()
        ds = Dataset(x / 255.0, y, name="mnist", source="mlxtend:mnist_5k", image_shape=(28, 28))
    if n is not None:
        if n > len(ds):
            raise ValueError(f"requested {n} images, only {len(ds)} available")
        ds = ds.subset(np.arange(n))
    return ds


@dataclass
class SynthSpec:
    n: int = 1000
    side: int = 8
    classes: int = 4
    noise: float = 0.1
    # classification variant: number of label-dependent features (None = generative images)
    informative: int | None = None
    separation: float = 1.0


def synth_gen(spec: SynthSpec, rng: Rng) -> Dataset:
    """Synthetic data standing in for the image corpora.

    Generative variant: each class has a template of a few Gaussian blobs;
    images are template + Gaussian noise, clipped to [0, 1].

    Classification variant (``spec.informative`` set): the first
    ``informative`` features are per-class levels plus noise, the rest
    are uniform on [0, 1] independent of the label. ``meta["informative"]``
    records the informative indices.
    """
    labels = rng.split("labels").generator().integers(0, spec.classes, size=spec.n)
    if spec.informative is None:
        dim = spec.side * spec.side
        yy, xx = np.mgrid[0:spec.side, 0:spec.side] / max(spec.side - 1, 1)
        templates = np.zeros((spec.classes, dim))
        for c in range(spec.classes):
            g = rng.split("blob", c).generator()
            img = np.zeros((spec.side, spec.side))
            for _ in range(3):
                cy, cx = g.random(2)
                width = 0.08 + 0.12 * g.random()
                img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
            templates[c] = np.clip(img, 0.0, 1.0).ravel()
        noise = sample_standard_normal(rng.split("noise"), (spec.n, dim))
        images = np.clip(templates[labels] + spec.noise * noise, 0.0, 1.0)
        return Dataset(images, labels, name="synth", source="synth_gen",
                       image_shape=(spec.side, spec.side))

    dim = spec.side * spec.side
    k = spec.informative
    if not 0 < k <= dim:
        raise ValueError("informative count must be in (0, dim]")
    # each informative feature gets evenly spaced class levels in a random
    # order, so every declared-informative feature separates the classes
    levels = np.linspace(0.15, 0.85, spec.classes)
    order = np.stack([rng.split("centers", j).permutation(spec.classes) for j in range(k)], axis=1)
    centers = 0.5 + spec.separation * (levels[order] - 0.5)
    noise = sample_standard_normal(rng.split("noise"), (spec.n, k))
    informative = np.clip(centers[labels] + spec.noise * noise, 0.0, 1.0)
    irrelevant = rng.split("irrelevant").uniform((spec.n, dim - k))
    images = np.hstack([informative, irrelevant])
    return Dataset(images, labels, name="synth_cls", source="synth_gen",
                   image_shape=(spec.side, spec.side),
                   meta={"informative": list(range(k))})


def discretize_255(d: Dataset) -> Dataset:
    """floor(255 x), with 1.0 -> 255; integer features in [0, 255]."""
    x = d.images
    if np.any(x < 0.0) or np.any(x > 1.0) or not np.all(np.isfinite(x)):
        raise ValueError("discretization expects values in [0, 1]")
    q = np.minimum(np.floor(x * 255.0), 255.0).astype(np.int64)
    return replace(d, images=q, meta={**d.meta, "discretized": True})


def split(d: Dataset, ratio, rng: Rng):
    """Shuffle and split into (train, test).

    ``ratio`` is either a train fraction or an ``(a, b)`` pair meaning a:b.
    """
    if isinstance(ratio, (tuple, list)):
        a, b = ratio
        frac = a / (a + b)
    else:
        frac = float(ratio)
    if not 0.0 < frac < 1.0:
        raise ValueError("train fraction must lie in (0, 1)")
    n = len(d)
    n_train = int(round(n * frac))
    perm = rng.permutation(n)
    return d.subset(np.sort(perm[:n_train])), d.subset(np.sort(perm[n_train:]))
