"""Dataset containers, file loaders/writers, splits, crops, and the
planted-model generator used for global-optimality checks.

All file loaders produce float32 pixel values in [0, 1]. The planted
generator instead emits standard-normal images: its purpose is to create
instances whose best achievable objective is known by construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .patches import ImageShape, extract_patches_batch, plan_patches
from .validation import check_labels

_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801
_AMAT_PIXELS = 784
_CIFAR_RECORD = 3073


@dataclass
class Dataset:
    """Images (n, channels, height, width) with integer labels (n,)."""

    images: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        if self.images.ndim != 4:
            raise ValueError(
                f"images must be (n, channels, height, width), got shape "
                f"{self.images.shape}"
            )
        self.labels = check_labels(self.labels, n=self.images.shape[0])

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> ImageShape:
        _, c, h, w = self.images.shape
        return ImageShape(c, h, w)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], dict(self.meta))


def _read_exact(fh, nbytes: int, path) -> bytes:
    data = fh.read(nbytes)
    if len(data) != nbytes:
        raise DataError(f"{path}: truncated file (wanted {nbytes} more bytes)")
    return data


def load_idx(images_path, labels_path) -> Dataset:
    """Load an image/label pair in the big-endian IDX format.

    Pixel bytes are scaled by 1/255 to float32.
    """
    with open(images_path, "rb") as fh:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, images_path))
        if magic != _IDX_IMAGE_MAGIC:
            raise DataError(
                f"{images_path}: bad magic 0x{magic:08x}, expected "
                f"0x{_IDX_IMAGE_MAGIC:08x} for an image file"
            )
        raw = _read_exact(fh, n * rows * cols, images_path)
        if fh.read(1):
            raise DataError(f"{images_path}: trailing bytes after payload")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols)
    labels = load_idx_labels(labels_path)
    if len(labels) != n:
        raise DataError(
            f"{labels_path}: {len(labels)} labels for {n} images"
        )
    return Dataset(images.astype(np.float32) / 255.0, labels,
                   {"source": str(images_path), "format": "idx"})


def load_idx_labels(path) -> np.ndarray:
    """Load a standalone IDX label file as an int64 vector."""
    with open(path, "rb") as fh:
        magic, n_labels = struct.unpack(">II", _read_exact(fh, 8, path))
        if magic != _IDX_LABEL_MAGIC:
            raise DataError(
                f"{path}: bad magic 0x{magic:08x}, expected "
                f"0x{_IDX_LABEL_MAGIC:08x} for a label file"
            )
        raw = _read_exact(fh, n_labels, path)
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after payload")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def write_idx(images, labels, images_path, labels_path) -> None:
    """Write images/labels as IDX files (uint8 pixels; float input in [0, 1]
    is scaled by 255 and rounded)."""
    X = np.asarray(images)
    if X.ndim == 4:
        if X.shape[1] != 1:
            raise ValueError("IDX images are single-channel")
        X = X[:, 0]
    if X.ndim != 3:
        raise ValueError(f"images must be (n, h, w), got shape {X.shape}")
    if np.issubdtype(X.dtype, np.floating):
        X = np.rint(X * 255.0).astype(np.uint8)
    y = check_labels(labels, n=X.shape[0])
    if y.size and y.max() > 255:
        raise ValueError("IDX labels must fit in a byte")
    n, rows, cols = X.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", _IDX_IMAGE_MAGIC, n, rows, cols))
        fh.write(X.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", _IDX_LABEL_MAGIC, n))
        fh.write(y.astype(np.uint8).tobytes())


def load_amat(path) -> Dataset:
    """Load the whitespace text format: 784 pixels in [0, 1] plus a label
    per line, 28 x 28 row-major."""
    pixels = []
    labels = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != _AMAT_PIXELS + 1:
                raise DataError(
                    f"{path}: line {lineno}: expected {_AMAT_PIXELS + 1} "
                    f"fields, got {len(parts)}"
                )
            try:
                row = np.asarray(parts, dtype=np.float64)
            except ValueError:
                raise DataError(
                    f"{path}: line {lineno}: non-numeric field"
                ) from None
            if row[:_AMAT_PIXELS].min() < 0.0 or row[:_AMAT_PIXELS].max() > 1.0:
                raise DataError(
                    f"{path}: line {lineno}: pixel values outside [0, 1]"
                )
            pixels.append(row[:_AMAT_PIXELS].astype(np.float32))
            labels.append(int(round(row[_AMAT_PIXELS])))
    n = len(pixels)
    images = (np.stack(pixels).reshape(n, 1, 28, 28) if n
              else np.zeros((0, 1, 28, 28), dtype=np.float32))
    return Dataset(images, np.asarray(labels, dtype=np.int64),
                   {"source": str(path), "format": "amat"})


def write_amat(path, images, labels) -> None:
    """Write images/labels in the 784-pixels-plus-label text format."""
    X = np.asarray(images, dtype=np.float32)
    if X.ndim == 4:
        if X.shape[1] != 1:
            raise ValueError("amat images are single-channel")
        X = X[:, 0]
    if X.shape[1:] != (28, 28):
        raise ValueError(f"amat images must be 28 x 28, got {X.shape[1:]}")
    y = check_labels(labels, n=X.shape[0])
    with open(path, "w") as fh:
        for img, label in zip(X, y):
            vals = " ".join(f"{v:.9g}" for v in img.ravel())
            fh.write(f"{vals} {label}\n")


def load_cifar10(paths) -> Dataset:
    """Load one or more CIFAR-10 binary batches (label byte + 3072 pixel
    bytes per record, channel-major)."""
    if isinstance(paths, (str, bytes)) or not hasattr(paths, "__iter__"):
        paths = [paths]
    all_images, all_labels = [], []
    for path in paths:
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) % _CIFAR_RECORD != 0:
            raise DataError(
                f"{path}: length {len(raw)} is not a multiple of "
                f"{_CIFAR_RECORD}"
            )
        n = len(raw) // _CIFAR_RECORD
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(n, _CIFAR_RECORD)
        labels = arr[:, 0].astype(np.int64)
        if labels.size and labels.max() > 9:
            raise DataError(
                f"{path}: label {labels.max()} outside [0, 9]"
            )
        all_images.append(arr[:, 1:].reshape(n, 3, 32, 32))
        all_labels.append(labels)
    images = (np.concatenate(all_images) if all_images
              else np.zeros((0, 3, 32, 32), dtype=np.uint8))
    labels = (np.concatenate(all_labels) if all_labels
              else np.zeros(0, dtype=np.int64))
    return Dataset(images.astype(np.float32) / 255.0, labels,
                   {"source": [str(p) for p in paths], "format": "cifar10"})


def write_cifar10(path, images, labels) -> None:
    """Write a CIFAR-10 binary batch."""
    X = np.asarray(images)
    if X.ndim != 4 or X.shape[1:] != (3, 32, 32):
        raise ValueError(f"images must be (n, 3, 32, 32), got shape {X.shape}")
    if np.issubdtype(X.dtype, np.floating):
        X = np.rint(X * 255.0).astype(np.uint8)
    y = check_labels(labels, n=X.shape[0], d2=10)
    with open(path, "wb") as fh:
        for img, label in zip(X, y):
            fh.write(bytes([int(label)]))
            fh.write(img.astype(np.uint8).tobytes())


def split(dataset: Dataset, fractions, seed: int = 0) -> list[Dataset]:
    """Seeded shuffle followed by contiguous slices of the given fractions.

    Fractions must sum to 1; the realized sizes sum to n exactly with no
    sample duplicated or dropped.
    """
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions):
        raise ValueError("fractions must be nonnegative")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    cuts = [int(round(c * n)) for c in np.cumsum(fractions)]
    cuts[-1] = n
    out = []
    start = 0
    for cut in cuts:
        out.append(dataset.subset(perm[start:cut]))
        start = cut
    return out


@dataclass(frozen=True)
class CropView:
    """A deterministic cropping view over a dataset.

    mode "center" uses the centered window ((h - ch) // 2, (w - cw) // 2)
    for every image; "once" draws one seeded offset per image, the same at
    every epoch; "per_epoch" redraws offsets per epoch from (seed, epoch).
    """

    base: Dataset
    crop_h: int
    crop_w: int
    mode: str
    seed: int = 0

    def __post_init__(self):
        _, _, h, w = self.base.images.shape
        if self.mode not in ("center", "once", "per_epoch"):
            raise ValueError(f"unknown crop mode {self.mode!r}")
        if not (1 <= self.crop_h <= h and 1 <= self.crop_w <= w):
            raise ValueError(
                f"crop {self.crop_h} x {self.crop_w} does not fit in "
                f"{h} x {w} images"
            )

    def offsets(self, epoch: int = 0) -> np.ndarray:
        """(n, 2) array of (row, col) crop origins for the given epoch."""
        n, _, h, w = self.base.images.shape
        if self.mode == "center":
            oy = (h - self.crop_h) // 2
            ox = (w - self.crop_w) // 2
            return np.tile([oy, ox], (n, 1))
        if self.mode == "once":
            rng = np.random.default_rng(self.seed)
        else:
            rng = np.random.default_rng((self.seed, epoch))
        oy = rng.integers(0, h - self.crop_h + 1, size=n)
        ox = rng.integers(0, w - self.crop_w + 1, size=n)
        return np.stack([oy, ox], axis=1)

    def for_epoch(self, epoch: int = 0) -> Dataset:
        offs = self.offsets(epoch)
        n = len(self.base)
        out = np.empty(
            (n, self.base.images.shape[1], self.crop_h, self.crop_w),
            dtype=self.base.images.dtype,
        )
        for i in range(n):
            oy, ox = offs[i]
            out[i] = self.base.images[
                i, :, oy:oy + self.crop_h, ox:ox + self.crop_w]
        meta = dict(self.base.meta)
        meta["crop"] = {"mode": self.mode, "size": [self.crop_h, self.crop_w],
                        "epoch": epoch}
        return Dataset(out, self.base.labels.copy(), meta)


def random_crop(dataset: Dataset, crop_h: int, crop_w: int,
                mode: str = "center", seed: int = 0) -> CropView:
    """Build a CropView over `dataset`; call .for_epoch() to materialize."""
    return CropView(dataset, crop_h, crop_w, mode, seed)


# ---------------------------------------------------------------------------
# Planted instances


@dataclass(frozen=True)
class PlantedSpec:
    """Generator settings for a planted convolutional teacher.

    The teacher has r filters w_j (norm b1) and per-class patch
    coefficients alpha_{l,j} (norm b2); labels are the argmax of its
    scores on standard-normal images, resampling any image whose top two
    scores differ by less than `margin`.
    """

    shape: ImageShape
    patch_side: int
    stride: int = 1
    pad: int = 0
    r: int = 2
    d2: int = 3
    activation: str = "linear"
    b1: float = 1.0
    b2: float = 1.0
    margin: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.activation not in ("linear", "quadratic"):
            raise ValueError(
                f"planted activation must be linear or quadratic, got "
                f"{self.activation!r}"
            )
        if self.r < 1 or self.d2 < 2:
            raise ValueError("planted model needs r >= 1 and d2 >= 2")
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")


class PlantedEvaluator:
    """Evaluates the convex objective at the planted parameter matrix.

    The planted matrix A* has block l equal to sum_j w_j alpha_{l,j}^T,
    shape (d1, P); as a single (d1, d2 * P) matrix its rank is at most r.
    The logistic objective here is computed independently of the training
    code so it can serve as an oracle.
    """

    def __init__(self, A_star: np.ndarray, Zs: np.ndarray,
                 labels: np.ndarray, d2: int):
        self.A_star = A_star
        self.Zs = Zs
        self.labels = labels
        self.d2 = d2

    @property
    def nuclear_norm(self) -> float:
        return float(np.linalg.svd(self.A_star, compute_uv=False).sum())

    def scores(self) -> np.ndarray:
        d1 = self.Zs.shape[2]
        A3 = self.A_star.reshape(d1, self.d2, self.Zs.shape[1])
        return np.einsum("npd,dlp->nl", self.Zs, A3)

    def objective(self) -> float:
        """Summed multiclass logistic loss of the planted matrix."""
        scores = self.scores()
        shift = scores - scores.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shift).sum(axis=1)) + scores.max(axis=1)
        picked = scores[np.arange(len(self.labels)), self.labels]
        return float(np.sum(lse - picked))

    def per_sample_objective(self) -> float:
        return self.objective() / len(self.labels)


def gen_planted(spec: PlantedSpec, n: int):
    """Generate a planted-teacher dataset plus its objective evaluator.

    Returns
    -------
    (dataset, evaluator) : (Dataset, PlantedEvaluator)
        Standard-normal images labeled by the teacher's argmax (with
        margin rejection), and an evaluator exposing the planted matrix,
        its nuclear norm (at most b1 * b2 * r * sqrt(d2) by construction),
        and its convex objective on exactly these samples.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    plan = plan_patches(spec.shape, spec.patch_side, spec.stride, spec.pad)
    d1, P = plan.patch_dim, plan.n_patches
    rng = np.random.default_rng(spec.seed)

    W = rng.normal(size=(spec.r, d1))
    W *= spec.b1 / np.linalg.norm(W, axis=1, keepdims=True)
    alpha = rng.normal(size=(spec.d2, spec.r, P))
    alpha *= spec.b2 / np.linalg.norm(alpha, axis=2, keepdims=True)
    # A*_l = sum_j w_j alpha_{l,j}^T, laid out as (d1, d2 * P)
    A_star = np.einsum("jd,ljp->dlp", W, alpha).reshape(d1, spec.d2 * P)

    c, h, w = spec.shape.channels, spec.shape.height, spec.shape.width
    images = np.empty((n, c, h, w), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    accepted = 0
    for _ in range(1000):
        if accepted >= n:
            break
        batch = rng.normal(size=(max(n - accepted, 16), c, h, w))
        Z = extract_patches_batch(batch, plan)
        hidden = Z @ W.T
        if spec.activation == "quadratic":
            hidden = hidden ** 2
        scores = np.einsum("npj,ljp->nl", hidden, alpha)
        top2 = np.sort(scores, axis=1)[:, -2:]
        ok = np.nonzero(top2[:, 1] - top2[:, 0] >= spec.margin)[0]
        take = ok[:n - accepted]
        images[accepted:accepted + len(take)] = batch[take]
        labels[accepted:accepted + len(take)] = scores[take].argmax(axis=1)
        accepted += len(take)
    if accepted < n:
        raise RuntimeError(
            f"margin rejection accepted only {accepted} of {n} samples; "
            f"lower the margin"
        )
    dataset = Dataset(images, labels, {"format": "planted",
                                       "seed": spec.seed, "r": spec.r})
    Zs = extract_patches_batch(images, plan).astype(np.float64)
    return dataset, PlantedEvaluator(A_star, Zs, labels, spec.d2)
