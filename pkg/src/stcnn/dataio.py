"""Images, IDX files, additive noise and patch matrices.

A 2D "same" convolution of an ``n x h`` image with an ``m x m`` filter is
rewritten as a product ``Y @ u`` where ``Y`` holds one flattened, zero-padded
``m x m`` neighbourhood per output pixel.  Everything downstream (primal
network, arrangements, dual program) consumes that matrix.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .seeding import derive_seed

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


class IdxFormatError(ValueError):
    """Malformed IDX payload; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Image:
    """Real-valued grey image stored row-major as ``pixels[row, col]``.

    ``width`` is the number of columns (n) and ``height`` the number of rows (h).
    """

    pixels: np.ndarray
    digit: int | None = None

    def __post_init__(self):
        px = _frozen(self.pixels)
        if px.ndim != 2:
            raise ValueError(f"image pixels must be 2D, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("image pixels must be finite")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def flat(self) -> np.ndarray:
        return self.pixels.reshape(-1)


@dataclass(frozen=True)
class PatchMatrix:
    """The ``I x patch_dim`` matrix of flattened neighbourhoods.

    ``kernel_side`` is None for hand-built design matrices (the 1D toys).
    ``has_bias`` marks a trailing all-ones column.
    """

    data: np.ndarray
    kernel_side: int | None = None
    image_shape: tuple[int, int] | None = None
    has_bias: bool = False

    def __post_init__(self):
        d = _frozen(self.data)
        if d.ndim != 2 or d.shape[0] < 1 or d.shape[1] < 1:
            raise ValueError(f"patch matrix must be a non-empty 2D array, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("patch matrix entries must be finite")
        expected = None
        if self.kernel_side is not None:
            expected = self.kernel_side**2 + int(self.has_bias)
        if expected is not None and d.shape[1] != expected:
            raise ValueError(
                f"patch_dim {d.shape[1]} inconsistent with kernel side {self.kernel_side}"
            )
        if self.image_shape is not None and d.shape[0] != self.image_shape[0] * self.image_shape[1]:
            raise ValueError("row count must equal the source image pixel count")
        object.__setattr__(self, "data", d)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def patch_dim(self) -> int:
        return self.data.shape[1]

    @classmethod
    def from_columns(cls, *columns, append_bias: bool = False) -> "PatchMatrix":
        cols = [np.asarray(c, dtype=float).reshape(-1) for c in columns]
        if append_bias:
            cols.append(np.ones_like(cols[0]))
        return cls(np.column_stack(cols), has_bias=append_bias)

    def to_csv(self, path) -> None:
        """Write ``i,j,value`` triples, 17 significant digits."""
        with open(path, "w") as fh:
            fh.write("i,j,value\n")
            for i, row in enumerate(self.data):
                for j, v in enumerate(row):
                    fh.write(f"{i},{j},{v:.17g}\n")


@dataclass(frozen=True)
class Dataset:
    """Pairs of (noisy patch matrix, clean label vector)."""

    samples: tuple[tuple[PatchMatrix, np.ndarray], ...]
    noise_sigma: float
    seed: int
    clean: tuple[Image, ...] = field(default=(), repr=False)

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        frozen = []
        for Y, x in self.samples:
            x = _frozen(x).reshape(-1)
            if x.shape[0] != Y.rows:
                raise ValueError(f"label length {x.shape[0]} != patch rows {Y.rows}")
            frozen.append((Y, x))
        object.__setattr__(self, "samples", tuple(frozen))

    def __len__(self) -> int:
        return len(self.samples)


# --------------------------------------------------------------------------
# IDX files

def _open_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _parse_idx(buf: bytes, magic: int, ndim: int) -> tuple[tuple[int, ...], np.ndarray]:
    header = 4 + 4 * ndim
    if len(buf) < 4:
        raise IdxFormatError("file too short for magic number", len(buf))
    (found,) = struct.unpack_from(">I", buf, 0)
    if found != magic:
        raise IdxFormatError(f"bad magic number {found}, expected {magic}", 0)
    if len(buf) < header:
        raise IdxFormatError("truncated dimension header", len(buf))
    dims = struct.unpack_from(">" + "I" * ndim, buf, 4)
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - header < count:
        raise IdxFormatError(
            f"truncated payload: expected {count} bytes, found {len(buf) - header}", len(buf)
        )
    if len(buf) - header > count:
        raise IdxFormatError("trailing bytes after payload", header + count)
    payload = np.frombuffer(buf, dtype=np.uint8, count=count, offset=header)
    return dims, payload.reshape(dims)


def read_idx_images(path) -> np.ndarray:
    """Raw ``(N, rows, cols)`` uint8 array from an IDX image file."""
    return _parse_idx(_open_bytes(path), IMAGE_MAGIC, 3)[1]


def read_idx_labels(path) -> np.ndarray:
    return _parse_idx(_open_bytes(path), LABEL_MAGIC, 1)[1]


def load_mnist_idx(images_path, labels_path=None) -> list[Image]:
    """Load an MNIST-style image file (and optional label file), pixels scaled to [0, 1]."""
    raw = read_idx_images(images_path)
    digits = None
    if labels_path is not None:
        digits = read_idx_labels(labels_path)
        if digits.shape[0] != raw.shape[0]:
            # the count field sits right after the magic number
            raise IdxFormatError(
                f"label count {digits.shape[0]} does not match image count {raw.shape[0]}", 4
            )
    return [
        Image(raw[k] / 255.0, None if digits is None else int(digits[k]))
        for k in range(raw.shape[0])
    ]


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise ValueError("expected a (N, rows, cols) uint8 array")
    head = struct.pack(">IIII", IMAGE_MAGIC, *images.shape)
    Path(path).write_bytes(head + images.tobytes(order="C"))


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.dtype != np.uint8:
        raise ValueError("expected a 1D uint8 array")
    Path(path).write_bytes(struct.pack(">II", LABEL_MAGIC, labels.shape[0]) + labels.tobytes())


# --------------------------------------------------------------------------
# noise, cropping, patches

def add_gaussian_noise(image: Image, sigma: float, seed: int) -> Image:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=image.pixels.shape) if sigma > 0 else 0.0
    return Image(image.pixels + noise, image.digit)


def center_crop(image: Image, side: int) -> Image:
    if side > min(image.height, image.width):
        raise ValueError("crop larger than image")
    r0 = (image.height - side) // 2
    c0 = (image.width - side) // 2
    return Image(image.pixels[r0:r0 + side, c0:c0 + side], image.digit)


def im2col(image: Image, kernel_side: int, append_bias: bool = False) -> PatchMatrix:
    """Zero-padded "same" patch matrix; row ``r * width + c`` is the window centred at (r, c).

    ``Y @ kernel.ravel()`` equals the zero-padded 2D cross-correlation of the
    image with ``kernel`` (the CNN convention, no kernel flip).
    """
    m = kernel_side
    if not isinstance(m, (int, np.integer)) or m < 1 or m % 2 == 0:
        raise ValueError(f"kernel side must be a positive odd integer, got {m!r}")
    p = m // 2
    padded = np.pad(image.pixels, p)
    h, n = image.pixels.shape
    windows = np.lib.stride_tricks.sliding_window_view(padded, (m, m))
    data = windows.reshape(h * n, m * m)
    if append_bias:
        data = np.hstack([data, np.ones((h * n, 1))])
    return PatchMatrix(data, kernel_side=m, image_shape=(h, n), has_bias=append_bias)


# --------------------------------------------------------------------------
# built-in data

def fig1_toy() -> tuple[PatchMatrix, np.ndarray]:
    """1D fitting toy: inputs -2..2 with a ones column, label [1,-1,-1,-1,1]."""
    Y = PatchMatrix.from_columns([-2.0, -1.0, 0.0, 1.0, 2.0], append_bias=True)
    return Y, np.array([1.0, -1.0, -1.0, -1.0, 1.0])


def fig6_toy(append_bias: bool = False) -> tuple[PatchMatrix, np.ndarray]:
    """1D toy with input [-1,2,0,1,2] and target [2,1,2,1,2]."""
    Y = PatchMatrix.from_columns([-1.0, 2.0, 0.0, 1.0, 2.0], append_bias=append_bias)
    return Y, np.array([2.0, 1.0, 2.0, 1.0, 2.0])


TOYS = {"fig1": fig1_toy, "fig6": fig6_toy}


def synthetic_digits(count: int, side: int = 28, seed: int = 0) -> np.ndarray:
    """Stroke images shaped like handwritten digits, as a ``(count, side, side)`` uint8 array.

    Used when no MNIST files are available; the output can be written to IDX
    and read back through :func:`load_mnist_idx`.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side].astype(float)
    out = np.zeros((count, side, side), dtype=np.uint8)
    c = (side - 1) / 2.0
    for k in range(count):
        canvas = np.zeros((side, side))
        for _ in range(rng.integers(2, 5)):
            # quadratic Bezier stroke near the centre
            pts = c + rng.uniform(-0.3, 0.3, size=(3, 2)) * side
            width = rng.uniform(0.06, 0.1) * side
            for t in np.linspace(0.0, 1.0, 24):
                py, px = (1 - t) ** 2 * pts[0] + 2 * (1 - t) * t * pts[1] + t**2 * pts[2]
                d2 = (yy - py) ** 2 + (xx - px) ** 2
                canvas = np.maximum(canvas, np.exp(-d2 / (2 * (width / 2) ** 2)))
        out[k] = np.clip(np.round(canvas * 255), 0, 255).astype(np.uint8)
    return out


def build_dataset(
    clean: Sequence[Image],
    kernel_side: int,
    sigma: float,
    seed: int,
) -> Dataset:
    """Noisy patch matrices paired with clean labels; image k draws noise from ``derive_seed(seed, k)``."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    samples = []
    for k, img in enumerate(clean):
        noisy = add_gaussian_noise(img, sigma, derive_seed(seed, k))
        samples.append((im2col(noisy, kernel_side), img.flat()))
    return Dataset(tuple(samples), float(sigma), int(seed), tuple(clean))
