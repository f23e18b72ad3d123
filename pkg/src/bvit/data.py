"""Dataset readers, patch tokenization, augmentation, config files and checkpoints."""

from __future__ import annotations

import gzip
import io
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]
MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801
CHECKPOINT_MAGIC = b"BVW1"


class FormatError(ValueError):
    """Raised when an on-disk file does not match its declared binary layout."""


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by a run seed and a stream name."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class ImageBatch:
    images: np.ndarray
    labels: np.ndarray
    soft_labels: np.ndarray | None = None
    lam: float | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("image and label counts differ")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "ImageBatch":
        soft = None if self.soft_labels is None else self.soft_labels[idx]
        return ImageBatch(self.images[idx], self.labels[idx], soft)


# ---------------------------------------------------------------- CIFAR-10
def read_cifar_batch(path: str | Path) -> ImageBatch:
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() >= 10:
        raise FormatError(f"{path}: label byte out of range")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return ImageBatch(images, labels)


def load_cifar10(path: str | Path) -> tuple[ImageBatch, ImageBatch]:
    """Read the binary CIFAR-10 distribution (``data_batch_*.bin``, ``test_batch.bin``)."""
    root = Path(path)

    def read(names):
        parts = []
        for name in names:
            f = root / name
            if not f.exists():
                raise FileNotFoundError(f"missing CIFAR-10 file {f}")
            parts.append(read_cifar_batch(f))
        return ImageBatch(
            np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts])
        )

    return read(CIFAR_TRAIN_FILES), read(CIFAR_TEST_FILES)


# ------------------------------------------------------------------- MNIST
def _open_maybe_gz(path: Path) -> bytes:
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def read_idx_pair(image_path: str | Path, label_path: str | Path) -> ImageBatch:
    img = _open_maybe_gz(Path(image_path))
    lab = _open_maybe_gz(Path(label_path))
    if len(img) < 16 or struct.unpack(">I", img[:4])[0] != MNIST_IMAGE_MAGIC:
        raise FormatError(f"{image_path}: bad IDX image magic")
    if len(lab) < 8 or struct.unpack(">I", lab[:4])[0] != MNIST_LABEL_MAGIC:
        raise FormatError(f"{label_path}: bad IDX label magic")
    n, rows, cols = struct.unpack(">III", img[4:16])
    (m,) = struct.unpack(">I", lab[4:8])
    if n != m:
        raise FormatError(f"image count {n} != label count {m}")
    if len(img) != 16 + n * rows * cols or len(lab) != 8 + m:
        raise FormatError("IDX payload length does not match header dimensions")
    images = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    return ImageBatch(images.astype(np.float32) / 255.0, labels)


def load_mnist_idx(path: str | Path) -> tuple[ImageBatch, ImageBatch]:
    root = Path(path)

    def find(stem):
        for cand in (root / stem, root / (stem + ".gz")):
            if cand.exists():
                return cand
        raise FileNotFoundError(f"missing MNIST file {root / stem}")

    train = read_idx_pair(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"))
    test = read_idx_pair(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"))
    return train, test


def write_idx_pair(images_u8: np.ndarray, labels_u8: np.ndarray, image_path, label_path) -> None:
    n, rows, cols = images_u8.shape
    Path(image_path).write_bytes(
        struct.pack(">IIII", MNIST_IMAGE_MAGIC, n, rows, cols) + images_u8.astype(np.uint8).tobytes()
    )
    Path(label_path).write_bytes(struct.pack(">II", MNIST_LABEL_MAGIC, n) + labels_u8.astype(np.uint8).tobytes())


# ------------------------------------------------------------ tokenization
def patchify(images, patch: int):
    """(B, C, H, W) -> (B, N, C*patch*patch).

    Patches are ordered row-major over the grid; each patch vector is flattened
    row-major over (channel, patch-row, patch-col). Works on numpy arrays and on
    autodiff tensors alike.
    """
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch * patch)


def unpatchify(tokens: np.ndarray, patch: int, channels: int, height: int, width: int) -> np.ndarray:
    b = tokens.shape[0]
    gh, gw = height // patch, width // patch
    x = tokens.reshape(b, gh, gw, channels, patch, patch).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(b, channels, height, width)


# ------------------------------------------------------------ augmentation
def one_hot(labels: np.ndarray, classes: int, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(labels), classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def sample_mixup_lambda(alpha: float, rng: np.random.Generator) -> float:
    if alpha <= 0:
        raise ValueError("mixup alpha must be positive")
    return float(rng.beta(alpha, alpha))


def mixup(batch: ImageBatch, alpha: float, rng: np.random.Generator, classes: int, lam: float | None = None) -> ImageBatch:
    """Mix every image with a permuted partner; ``lam`` overrides the Beta draw."""
    if len(batch) < 2:
        raise ValueError("mixup needs a batch of at least two images")
    if lam is None:
        lam = sample_mixup_lambda(alpha, rng)
    perm = rng.permutation(len(batch))
    targets = batch.soft_labels if batch.soft_labels is not None else one_hot(batch.labels, classes)
    images = (lam * batch.images + (1.0 - lam) * batch.images[perm]).astype(batch.images.dtype)
    soft = (lam * targets + (1.0 - lam) * targets[perm]).astype(np.float32)
    return ImageBatch(images, batch.labels, soft, lam=lam)


def random_hflip(images: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    flip = rng.random(images.shape[0]) < p
    out = images.copy()
    out[flip] = out[flip][..., ::-1]
    return out


def iterate_batches(
    data: ImageBatch,
    batch_size: int,
    rng: np.random.Generator | None = None,
    drop_last: bool = False,
) -> Iterator[ImageBatch]:
    n = len(data)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        idx = order[start : start + batch_size]
        if len(idx):
            yield data.subset(idx)


# ------------------------------------------------------------ config files
def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null"):
        return None
    if "," in text:
        return tuple(_parse_value(t.strip()) for t in text.split(",") if t.strip())
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_kv_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"{source}:{lineno}: empty key")
        out[key] = _parse_value(value)
    return out


def read_config(path: str | Path) -> dict:
    path = Path(path)
    return parse_kv_text(path.read_text(), str(path))


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ", ".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_kv_text(values: dict) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in values.items())


# -------------------------------------------------------------- checkpoints
@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] = field(default_factory=dict)


def _write_entries(buf: io.BytesIO, entries: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


def _read_exact(buf: io.BytesIO, n: int) -> bytes:
    chunk = buf.read(n)
    if len(chunk) != n:
        raise FormatError("truncated checkpoint")
    return chunk


def _read_entries(buf: io.BytesIO) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read_exact(buf, 4))
        name = _read_exact(buf, nlen).decode()
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}")
        (ndim,) = struct.unpack("<I", _read_exact(buf, 4))
        shape = struct.unpack(f"<{ndim}I", _read_exact(buf, 4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(_read_exact(buf, 4 * size), dtype="<f4").reshape(shape).copy()
    return out


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Layout: magic, u32 config length, config text, tensor table, EMA tensor table.

    A tensor table is u32 count followed by (u32 name length, utf-8 name,
    u32 ndim, u32 dims..., little-endian float32 payload) entries.
    """
    for table in (ckpt.tensors, ckpt.ema):
        if len(set(table)) != len(table):
            raise FormatError("duplicate tensor names")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    cfg = format_kv_text(ckpt.config).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    _write_entries(buf, ckpt.tensors)
    _write_entries(buf, ckpt.ema)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> Checkpoint:
    buf = io.BytesIO(Path(path).read_bytes())
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a BVW1 checkpoint")
    (clen,) = struct.unpack("<I", _read_exact(buf, 4))
    config = parse_kv_text(_read_exact(buf, clen).decode(), str(path))
    tensors = _read_entries(buf)
    ema = _read_entries(buf)
    if buf.read(1):
        raise FormatError(f"{path}: trailing bytes after checkpoint payload")
    return Checkpoint(config, tensors, ema)
