"""Dataset splits: NPZ archives, preprocessing, synthetic blobs and batch iteration."""
from __future__ import annotations

import logging
import queue
import threading
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import ConfigError, DataError, NpyFormatError
from .npy import parse_npy, serialize_npy

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)
_PREFETCH_DEPTH = 2


class CatalogueEntry(NamedTuple):
    num_classes: int
    channels: int


MEDMNIST: dict[str, CatalogueEntry] = {
    "bloodmnist": CatalogueEntry(8, 3),
    "breastmnist": CatalogueEntry(2, 1),
    "dermamnist": CatalogueEntry(7, 3),
    "octmnist": CatalogueEntry(4, 1),
    "pneumoniamnist": CatalogueEntry(2, 1),
    "tissuemnist": CatalogueEntry(8, 1),
    "organamnist": CatalogueEntry(11, 1),
    "organcmnist": CatalogueEntry(11, 1),
    "organsmnist": CatalogueEntry(11, 1),
}


@dataclass
class DatasetSplit:
    """Images as float32 N×C×H×W with integer labels.

    Loaders yield pixels in [0, 1]; :func:`prepare_split` maps them to [-1, 1].
    """

    images: np.ndarray
    labels: np.ndarray
    name: str
    num_classes: int

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels).reshape(-1).astype(np.int64)
        if self.images.ndim != 4:
            raise DataError(f"{self.name}: images must be N×C×H×W, got shape {self.images.shape}")
        if self.images.shape[0] != self.labels.size:
            raise DataError(
                f"{self.name}: {self.images.shape[0]} images but {self.labels.size} labels"
            )
        if self.num_classes < 2:
            raise DataError(f"{self.name}: need at least two classes, got {self.num_classes}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(
                f"{self.name}: labels outside [0, {self.num_classes}): "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]


def _to_nchw(images: np.ndarray, member: str) -> np.ndarray:
    if images.ndim == 3:
        images = images[:, None]
    elif images.ndim == 4:
        if images.shape[-1] in (1, 3) and images.shape[1] not in (1, 3):
            images = images.transpose(0, 3, 1, 2)
    else:
        raise DataError(f"{member}: expected N×H×W or N×H×W×C images, got shape {images.shape}")
    if images.dtype == np.uint8:
        return np.ascontiguousarray(images).astype(np.float32) / np.float32(255)
    return np.ascontiguousarray(images, dtype=np.float32)


def _read_member(archive: zipfile.ZipFile, name: str, path: Path) -> np.ndarray:
    try:
        info = archive.getinfo(name)
    except KeyError as exc:
        raise DataError(f"{path}: missing member '{name}'") from exc
    if info.compress_type not in (zipfile.ZIP_STORED, zipfile.ZIP_DEFLATED):
        raise DataError(f"{path}: member '{name}' uses unsupported compression method {info.compress_type}")
    try:
        return parse_npy(archive.read(info)).to_array()
    except NpyFormatError as exc:
        raise NpyFormatError(f"{path}:{name}: {exc}") from exc


def load_npz_dataset(path: str | Path, num_classes: int | None = None) -> dict[str, DatasetSplit]:
    """Read ``{split}_images`` / ``{split}_labels`` for train, val and test."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Dataset file not found: {path}")
    try:
        archive = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise DataError(f"{path} is not a ZIP/NPZ archive") from exc

    raw: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    with archive:
        for split in SPLITS:
            images = _to_nchw(_read_member(archive, f"{split}_images.npy", path), f"{split}_images")
            labels = _read_member(archive, f"{split}_labels.npy", path).reshape(-1)
            if images.shape[0] != labels.size:
                raise DataError(
                    f"{path}: {split}_images has {images.shape[0]} entries but {split}_labels has {labels.size}"
                )
            if labels.size and labels.min() < 0:
                raise DataError(f"{path}: negative label in {split}_labels")
            raw[split] = (images, labels.astype(np.int64))

    entry = MEDMNIST.get(path.stem.lower().split("_")[0])
    if num_classes is None:
        if entry is not None:
            num_classes = entry.num_classes
        else:
            largest = max((int(l.max()) for _, l in raw.values() if l.size), default=None)
            if largest is None:
                raise DataError(f"{path}: every split is empty; pass num_classes explicitly")
            num_classes = max(2, largest + 1)
    if entry is not None and entry.num_classes != num_classes:
        logger.warning("%s: Klassenanzahl %d weicht vom Katalog (%d) ab", path.name, num_classes, entry.num_classes)

    splits = {name: DatasetSplit(images, labels, name, num_classes) for name, (images, labels) in raw.items()}
    logger.info(
        "Datensatz %s geladen: %s",
        path.name,
        ", ".join(f"{name}={len(split)}" for name, split in splits.items()),
    )
    return splits


def save_npz_dataset(splits: dict[str, DatasetSplit], path: str | Path, image_dtype: str = "u1") -> Path:
    """Write the three splits as a deflated NPZ archive with fixed member timestamps."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as archive:
        for split in SPLITS:
            data = splits[split]
            images = data.images
            if image_dtype == "u1":
                images = np.round(np.clip(images, 0.0, 1.0) * 255).astype(np.uint8)
            else:
                images = images.astype(np.float32)
            for member, array in ((f"{split}_images.npy", images), (f"{split}_labels.npy", data.labels[:, None])):
                info = zipfile.ZipInfo(member, date_time=_ZIP_DATE)
                info.compress_type = zipfile.ZIP_DEFLATED
                info.external_attr = 0o644 << 16
                archive.writestr(info, serialize_npy(array))
    return path


def resize_bilinear(images: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize the last two axes with half-pixel (align-corners=false) sampling."""
    out_h, out_w = size
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"Resize target must be >= 1, got {size}")
    in_h, in_w = images.shape[-2:]
    if (in_h, in_w) == (out_h, out_w):
        return images

    def axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, None)
        i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (src - i0).astype(images.dtype)

    y0, y1, wy = axis_weights(in_h, out_h)
    x0, x1, wx = axis_weights(in_w, out_w)
    top = images[..., y0, :]
    bottom = images[..., y1, :]
    rows = top * (1 - wy)[:, None] + bottom * wy[:, None]
    out = rows[..., x0] * (1 - wx) + rows[..., x1] * wx
    # convex weights; clip away rounding past the input range
    return np.clip(out, images.min(), images.max())


def normalize(images: np.ndarray) -> np.ndarray:
    """Map [0, 1] pixels to [-1, 1]."""
    return (images - 0.5) / 0.5


def denormalize(images: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize`."""
    return images * 0.5 + 0.5


def resize_split(split: DatasetSplit, size: int) -> DatasetSplit:
    if split.images.shape[-1] == size and split.images.shape[-2] == size:
        return split
    logger.warning(
        "%s: Bilder werden von %dx%d auf %dx%d skaliert",
        split.name, split.images.shape[-2], split.images.shape[-1], size, size,
    )
    return DatasetSplit(resize_bilinear(split.images, (size, size)), split.labels, split.name, split.num_classes)


def prepare_split(split: DatasetSplit, size: int) -> DatasetSplit:
    """Model input for ``split``: resized to ``size`` and normalized to [-1, 1]."""
    resized = resize_split(split, size)
    return DatasetSplit(normalize(resized.images), resized.labels, resized.name, resized.num_classes)


def synth_blobs(
    num_classes: int,
    n_per_class: int,
    height: int,
    width: int,
    seed: int = 0,
    noise: float = 0.05,
    channels: int = 1,
) -> tuple[DatasetSplit, DatasetSplit, DatasetSplit]:
    """Class-conditional Gaussian blobs; each class has its own position and scale.

    Pixels are quantized to multiples of 1/255 so that an 8-bit NPZ export
    reloads bit-identically. Splits are stratified 70/15/15 per class.
    """
    if height < 8 or width < 8:
        raise ConfigError(f"Synthetic images need H, W >= 8, got {height}x{width}")
    if num_classes < 2 or n_per_class < 3:
        raise ConfigError("Synthetic data needs >= 2 classes and >= 3 samples per class")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    radius = 0.3 * min(height, width)

    images, labels = [], []
    for c in range(num_classes):
        angle = 2 * np.pi * c / num_classes
        cy = (height - 1) / 2 + radius * np.sin(angle)
        cx = (width - 1) / 2 + radius * np.cos(angle)
        scale = min(height, width) * (0.08 + 0.04 * (c % 3))
        jitter = rng.normal(0.0, 0.5, size=(n_per_class, 2))
        dy = yy[None] - (cy + jitter[:, 0, None, None])
        dx = xx[None] - (cx + jitter[:, 1, None, None])
        blob = np.exp(-(dy**2 + dx**2) / (2 * scale**2))
        sample = blob[:, None] + noise * rng.normal(size=(n_per_class, channels, height, width))
        images.append(sample)
        labels.append(np.full(n_per_class, c, dtype=np.int64))

    pixels = np.round(np.clip(np.concatenate(images), 0.0, 1.0) * 255).astype(np.uint8)
    all_images = pixels.astype(np.float32) / np.float32(255)
    all_labels = np.concatenate(labels)

    n_train = int(round(0.70 * n_per_class))
    n_val = max(1, int(round(0.15 * n_per_class)))
    parts: dict[str, list[np.ndarray]] = {name: [] for name in SPLITS}
    for c in range(num_classes):
        idx = np.flatnonzero(all_labels == c)[rng.permutation(n_per_class)]
        parts["train"].append(idx[:n_train])
        parts["val"].append(idx[n_train:n_train + n_val])
        parts["test"].append(idx[n_train + n_val:])

    splits = []
    for name in SPLITS:
        idx = np.concatenate(parts[name])
        if idx.size == 0:
            raise ConfigError(f"n_per_class={n_per_class} leaves the {name} split empty")
        idx = idx[rng.permutation(idx.size)]
        splits.append(DatasetSplit(all_images[idx], all_labels[idx], name, num_classes))
    return splits[0], splits[1], splits[2]


def _batches(split: DatasetSplit, batch_size: int, order: np.ndarray) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    for start in range(0, order.size, batch_size):
        idx = order[start:start + batch_size]
        yield split.images[idx], split.labels[idx]


def iterate_batches(
    split: DatasetSplit,
    batch_size: int,
    order: np.ndarray | None = None,
    prefetch: bool = False,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels) batches; with ``prefetch`` one worker stays a batch ahead."""
    if len(split) == 0:
        raise DataError(f"Split '{split.name}' is empty")
    order = np.arange(len(split)) if order is None else order
    if not prefetch:
        yield from _batches(split, batch_size, order)
        return

    handoff: queue.Queue = queue.Queue(maxsize=_PREFETCH_DEPTH)
    done = object()
    stop = threading.Event()

    def put(item: object) -> bool:
        while not stop.is_set():
            try:
                handoff.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def produce() -> None:
        try:
            for batch in _batches(split, batch_size, order):
                if not put(batch):
                    return
            put(done)
        except Exception as exc:  # pragma: no cover - forwarded to the consumer
            put(exc)

    worker = threading.Thread(target=produce, name="medkan-prefetch", daemon=True)
    worker.start()
    try:
        while True:
            item = handoff.get()
            if item is done:
                break
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()
        worker.join(timeout=1.0)


__all__ = [
    "MEDMNIST",
    "SPLITS",
    "CatalogueEntry",
    "DatasetSplit",
    "denormalize",
    "iterate_batches",
    "load_npz_dataset",
    "normalize",
    "prepare_split",
    "resize_bilinear",
    "resize_split",
    "save_npz_dataset",
    "synth_blobs",
]
