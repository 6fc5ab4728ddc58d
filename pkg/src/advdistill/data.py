"""Dataset ingestion: IDX files, CIFAR-style binary batches, synthetic blobs.

Every loader returns inputs scaled to [0, 1] regardless of the on-disk
encoding; byte-valued images are divided by 255.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

DATA_SOURCES = ("synth_blobs", "idx", "cifar_binary")

# IDX header: bytes [0x00, 0x00, dtype code, ndim], then ndim big-endian
# uint32 dims, then the payload in row-major order.
_IDX_DTYPES = {
    0x08: np.dtype(np.uint8),
    0x09: np.dtype(np.int8),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.dtype(np.uint8): 0x08, np.dtype(">f8"): 0x0E}

# CIFAR binary record: 1 label byte, then 3072 pixel bytes (three 1024-byte
# channel planes, each a 32x32 row-major image), in that order.
CIFAR_IMAGE_SIDE = 32
CIFAR_RECORD_BYTES = 1 + 3 * CIFAR_IMAGE_SIDE * CIFAR_IMAGE_SIDE
CIFAR_CLASSES = 10


@dataclass
class LabeledBatch:
    """A batch of inputs in [0, 1] with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim < 2 or len(self.inputs) == 0:
            raise ValueError("inputs must be a non-empty batch of shape (n, ...)")
        if self.labels.shape != (len(self.inputs),):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match batch of {len(self.inputs)}"
            )
        lo, hi = float(self.inputs.min()), float(self.inputs.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"inputs must lie in [0, 1], found range [{lo}, {hi}]")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError("labels must be valid class indices")

    @property
    def n(self) -> int:
        return len(self.inputs)

    def subset(self, index) -> "LabeledBatch":
        return LabeledBatch(self.inputs[index], self.labels[index], self.n_classes)


@dataclass(frozen=True)
class DatasetSpec:
    """Where training data comes from and, for synthetic data, how it is drawn.

    For ``synth_blobs``, each class gets a template point placed uniformly in
    [0.5 - template_spread, 0.5 + template_spread]^D with pairwise L-inf
    distance at least ``separation``; samples are the template plus uniform
    jitter of L-inf radius ``noise_uniform`` plus gaussian noise of std
    ``noise_gauss``, clipped to [0, 1].  With gaussian noise off, the gap
    between class supports is therefore ``separation - 2 * noise_uniform``.

    ``fragile_fraction`` > 0 splits the feature positions into a robust and a
    fragile subspace.  On the fragile positions the between-class template
    differences are compressed to +-``fragile_scale``: individually they sit
    within an attacker's per-pixel budget whenever ``fragile_scale`` is on the
    order of the attack radius, yet collectively they are class-predictive on
    clean data, so clean-only training leans on them and inherits their
    vulnerability.  The robust positions keep well-separated class values and
    support attack-resistant decisions; for HxWxC shapes they form a coherent
    patch (one class-specific offset over a contiguous block, with pairwise
    offset distance at least ``separation``) so that pooling architectures can
    read them, while fragile values are i.i.d. per pixel and average away
    under pooling.
    """

    source: str = "synth_blobs"
    # synth_blobs
    n_train: int = 1024
    n_test: int = 256
    classes: int = 3
    shape: tuple = (12, 12, 1)
    separation: float = 0.5
    template_spread: float = 0.3
    noise_uniform: float = 0.0
    noise_gauss: float = 0.15
    fragile_fraction: float = 0.0
    fragile_scale: float = 0.03
    seed: int = 0
    # idx
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    # cifar_binary
    root: str | None = None
    train_files: tuple = (
        "data_batch_1.bin",
        "data_batch_2.bin",
        "data_batch_3.bin",
        "data_batch_4.bin",
        "data_batch_5.bin",
    )
    test_file: str = "test_batch.bin"

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if self.source not in DATA_SOURCES:
            raise ConfigError(f"data.source: unknown source {self.source!r}")


def load_dataset(spec: DatasetSpec) -> tuple[LabeledBatch, LabeledBatch]:
    """Load (train, test) splits for the given spec, inputs in [0, 1]."""
    if spec.source == "synth_blobs":
        return make_blobs(spec)
    if spec.source == "idx":
        return _load_idx_pair(spec)
    if spec.source == "cifar_binary":
        return _load_cifar(spec)
    raise ConfigError(f"data.source: unknown source {spec.source!r}")


# ---------------------------------------------------------------------------
# synthetic blobs


def make_blobs(spec: DatasetSpec) -> tuple[LabeledBatch, LabeledBatch]:
    """Generate (train, test) blob splits, deterministic given spec.seed."""
    if spec.n_train < 1 or spec.n_test < 1:
        raise ConfigError("data.n_train/n_test must be positive")
    if spec.classes < 2:
        raise ConfigError("data.classes must be at least 2")
    rng = np.random.default_rng(spec.seed)
    templates = _place_templates(rng, spec)
    train = _draw_blobs(rng, templates, spec.n_train, spec)
    test = _draw_blobs(rng, templates, spec.n_test, spec)
    return train, test


def blob_templates(spec: DatasetSpec) -> np.ndarray:
    """The class template points a spec would generate (classes, *shape)."""
    return _place_templates(np.random.default_rng(spec.seed), spec)


def _place_templates(rng: np.random.Generator, spec: DatasetSpec) -> np.ndarray:
    lo = 0.5 - spec.template_spread
    hi = 0.5 + spec.template_spread
    if lo < 0.0 or hi > 1.0:
        raise ConfigError("data.template_spread must keep templates inside [0, 1]")
    if not 0.0 <= spec.fragile_fraction < 1.0:
        raise ConfigError("data.fragile_fraction must lie in [0, 1)")
    dim = int(np.prod(spec.shape))
    n_robust = dim - int(round(spec.fragile_fraction * dim))
    fragile = _fragile_positions(rng, spec.shape, n_robust)
    n_fragile = len(fragile)
    coherent_patch = n_fragile > 0 and len(spec.shape) == 3
    for _ in range(500):
        t = rng.uniform(lo, hi, size=(spec.classes,) + spec.shape)
        flat = t.reshape(spec.classes, -1)
        if coherent_patch:
            # one offset per class over the whole robust patch; fragile field i.i.d.
            offsets = rng.uniform(lo - 0.5, hi - 0.5, size=spec.classes)
            robust_cols = np.setdiff1d(np.arange(dim), fragile)
            flat[:, robust_cols] = 0.5 + offsets[:, None]
            robust = offsets[:, None]
        elif n_fragile:
            robust = np.delete(flat, fragile, axis=1)
        else:
            robust = flat
        if n_fragile:
            flat[:, fragile] = 0.5 + rng.uniform(
                -spec.fragile_scale, spec.fragile_scale, size=(spec.classes, n_fragile)
            )
        dists = np.abs(robust[:, None, :] - robust[None, :, :]).max(axis=2)
        np.fill_diagonal(dists, np.inf)
        if dists.min() >= spec.separation:
            return flat.reshape((spec.classes,) + spec.shape)
    raise ConfigError(
        f"could not place {spec.classes} class templates with separation {spec.separation}"
    )


def _fragile_positions(rng: np.random.Generator, shape: tuple, n_robust: int) -> np.ndarray:
    """Flat indices of the fragile positions (everything but the robust set).

    For HxWxC images the robust set is a contiguous square patch at a seeded
    location, so that pooling architectures can actually read it; for flat
    feature vectors it is a seeded random subset.
    """
    dim = int(np.prod(shape))
    if n_robust >= dim:
        return np.zeros(0, dtype=np.int64)
    if len(shape) == 3:
        h, w, c = shape
        side = max(1, int(round(np.sqrt(n_robust / c))))
        side = min(side, h, w)
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        robust = np.zeros(shape, dtype=bool)
        robust[top : top + side, left : left + side, :] = True
        return np.flatnonzero(~robust.reshape(-1))
    return np.sort(rng.permutation(dim)[: dim - n_robust])


def _draw_blobs(rng, templates, n, spec) -> LabeledBatch:
    # balanced labels, shuffled deterministically
    labels = rng.permutation(np.arange(n) % spec.classes)
    x = templates[labels].copy()
    if spec.noise_uniform > 0:
        x += rng.uniform(-spec.noise_uniform, spec.noise_uniform, size=x.shape)
    if spec.noise_gauss > 0:
        x += rng.normal(0.0, spec.noise_gauss, size=x.shape)
    np.clip(x, 0.0, 1.0, out=x)
    return LabeledBatch(x, labels, spec.classes)


# ---------------------------------------------------------------------------
# IDX


def read_idx(path) -> np.ndarray:
    """Parse an IDX file into a numpy array (no rescaling)."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 4:
        raise DataFormatError(
            f"{path}: truncated IDX header at byte offset 0 (need 4 bytes, found {len(data)})"
        )
    if data[0] != 0 or data[1] != 0:
        raise DataFormatError(
            f"{path}: bad IDX magic at byte offset 0: expected 0x0000, found 0x{data[0]:02x}{data[1]:02x}"
        )
    code, ndim = data[2], data[3]
    if code not in _IDX_DTYPES:
        raise DataFormatError(f"{path}: unknown IDX dtype code 0x{code:02x} at byte offset 2")
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise DataFormatError(
            f"{path}: truncated IDX dimension list at byte offset {len(data)} "
            f"(expected {header_end} header bytes)"
        )
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    dtype = _IDX_DTYPES[code]
    count = int(np.prod(dims)) if ndim else 1
    expected = header_end + count * dtype.itemsize
    if len(data) != expected:
        raise DataFormatError(
            f"{path}: IDX payload ends at byte offset {len(data)}, expected {expected} "
            f"for dims {dims} of dtype 0x{code:02x}"
        )
    return np.frombuffer(data, dtype=dtype, count=count, offset=header_end).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write an array as an IDX file (uint8 or float64 payloads)."""
    array = np.asarray(array)
    dtype = np.dtype(np.uint8) if array.dtype == np.uint8 else np.dtype(">f8")
    if dtype not in _IDX_CODES:
        raise ConfigError(f"cannot write dtype {array.dtype} as IDX")
    header = bytes([0, 0, _IDX_CODES[dtype], array.ndim])
    header += struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(array, dtype=dtype).tobytes())


def _idx_to_unit(path, arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    out = arr.astype(np.float64)
    if out.size and (out.min() < 0.0 or out.max() > 1.0):
        raise DataFormatError(f"{path}: float IDX image values must already lie in [0, 1]")
    return out


def _load_idx_split(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images = _idx_to_unit(images_path, read_idx(images_path))
    labels = read_idx(labels_path).astype(np.int64)
    if labels.ndim != 1:
        raise DataFormatError(f"{labels_path}: IDX label file must be one-dimensional")
    if images.ndim == 3:
        images = images[..., None]  # H x W grayscale -> H x W x 1
    if len(images) != len(labels):
        raise DataFormatError(
            f"{images_path}: {len(images)} images but {len(labels)} labels in {labels_path}"
        )
    return images, labels


def _load_idx_pair(spec: DatasetSpec) -> tuple[LabeledBatch, LabeledBatch]:
    for name in ("train_images", "train_labels", "test_images", "test_labels"):
        if getattr(spec, name) is None:
            raise ConfigError(f"data.{name} is required for source=idx")
    xtr, ytr = _load_idx_split(spec.train_images, spec.train_labels)
    xte, yte = _load_idx_split(spec.test_images, spec.test_labels)
    classes = int(max(ytr.max(), yte.max())) + 1
    return LabeledBatch(xtr, ytr, classes), LabeledBatch(xte, yte, classes)


# ---------------------------------------------------------------------------
# CIFAR binary


def read_cifar_file(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse one CIFAR binary batch file into (images HWC in [0,1], labels)."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) == 0 or len(data) % CIFAR_RECORD_BYTES:
        raise DataFormatError(
            f"{path}: file size {len(data)} is not a multiple of {CIFAR_RECORD_BYTES}; "
            f"record boundary broken at byte offset {len(data) - len(data) % CIFAR_RECORD_BYTES}"
        )
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        raise DataFormatError(
            f"{path}: label byte {labels[bad[0]]} out of range at byte offset "
            f"{int(bad[0]) * CIFAR_RECORD_BYTES}"
        )
    side = CIFAR_IMAGE_SIDE
    images = raw[:, 1:].reshape(-1, 3, side, side).transpose(0, 2, 3, 1)
    return images.astype(np.float64) / 255.0, labels


def _load_cifar(spec: DatasetSpec) -> tuple[LabeledBatch, LabeledBatch]:
    if spec.root is None:
        raise ConfigError("data.root is required for source=cifar_binary")
    root = Path(spec.root)
    parts = [read_cifar_file(root / name) for name in spec.train_files]
    xtr = np.concatenate([p[0] for p in parts])
    ytr = np.concatenate([p[1] for p in parts])
    xte, yte = read_cifar_file(root / spec.test_file)
    return LabeledBatch(xtr, ytr, CIFAR_CLASSES), LabeledBatch(xte, yte, CIFAR_CLASSES)
