"""Dataset ingestion and image export.

Supported ingestion formats, selected by a JSON manifest:

* ``idx``: an IDX image/label file pair (big-endian headers, u8 pixels),
  samples in file order.
* ``image_dir``: one subdirectory per class under a root, files loaded in
  lexicographic path order.
* ``csv_manifest``: a CSV with ``path,class_name`` columns, rows taken in
  lexicographic path order.

Manifests may cap the number of images per class ("caps"), taking the first
N in the deterministic order; this is how imbalanced training sets are
carved out of a balanced corpus.

Exports: perturbations as min-max-scaled 8-bit images, adversarial images as
clipped pixel-domain 8-bit images; PGM (P5) or PNG by file extension.
"""

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .datasets import Dataset
from .serialize import FileFormatError

IDX_UBYTE = 0x08


# --------------------------------------------------------------------- IDX

def read_idx(path):
    """Read an IDX file of unsigned bytes into a numpy array."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 4:
        raise FileFormatError(f"{path}: IDX header incomplete", len(data))
    zero0, zero1, dtype, ndim = data[0], data[1], data[2], data[3]
    if zero0 != 0 or zero1 != 0:
        raise FileFormatError(f"{path}: bad IDX magic {data[:4]!r}", 0)
    if dtype != IDX_UBYTE:
        raise FileFormatError(f"{path}: unsupported IDX dtype {dtype:#04x} "
                              "(only unsigned byte)", 2)
    if len(data) < 4 + 4 * ndim:
        raise FileFormatError(f"{path}: truncated IDX dimension list", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    offset = 4 + 4 * ndim
    count = int(np.prod(dims)) if dims else 0
    if len(data) - offset != count:
        raise FileFormatError(
            f"{path}: expected {count} data bytes for shape {dims}, "
            f"found {len(data) - offset}", offset)
    return np.frombuffer(data, dtype=np.uint8, offset=offset).reshape(dims).copy()


def write_idx(path, array):
    """Write a uint8 array as an IDX file (big-endian header)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, IDX_UBYTE, array.ndim]))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


# --------------------------------------------------------------- manifests

@dataclass
class DatasetManifest:
    """Where a dataset lives and how raw labels map to class names.

    `classes` is an ordered list of (raw_key, class_name) pairs; the class
    index is the position in this list. Raw keys are integer label values for
    IDX sources and directory/class-name strings otherwise.
    """

    format: str                      # idx | image_dir | csv_manifest
    classes: list
    images: Path = None              # idx
    labels: Path = None              # idx
    root: Path = None                # image_dir
    csv: Path = None                 # csv_manifest
    caps: dict = field(default_factory=dict)
    split: str = "train"

    def __post_init__(self):
        if self.format not in ("idx", "image_dir", "csv_manifest"):
            raise ValueError(f"unknown dataset format {self.format!r}")
        names = [name for _, name in self.classes]
        if len(set(names)) != len(names):
            raise ValueError(f"class names must be unique, got {names}")
        for name in self.caps:
            if name not in names:
                raise ValueError(f"cap references unknown class {name!r}")

    @property
    def class_names(self):
        return [name for _, name in self.classes]


def load_manifest(path):
    """Read a manifest JSON file; relative paths resolve against its folder."""
    path = Path(path)
    with open(path) as fh:
        raw = json.load(fh)
    base = path.parent

    def resolve(key):
        return (base / raw[key]).resolve() if key in raw else None

    classes = [(key, str(name)) for key, name in raw["classes"]]
    return DatasetManifest(
        format=raw["format"],
        classes=classes,
        images=resolve("images"),
        labels=resolve("labels"),
        root=resolve("root"),
        csv=resolve("csv"),
        caps=dict(raw.get("caps", {})),
        split=raw.get("split", "train"),
    )


def write_manifest(path, manifest):
    path = Path(path)
    base = path.parent

    def rel(p):
        return str(Path(p).resolve().relative_to(base.resolve())) if p else None

    raw = {"format": manifest.format,
           "classes": [[key, name] for key, name in manifest.classes],
           "split": manifest.split}
    for key, value in (("images", manifest.images), ("labels", manifest.labels),
                       ("root", manifest.root), ("csv", manifest.csv)):
        if value is not None:
            raw[key] = rel(value)
    if manifest.caps:
        raw["caps"] = manifest.caps
    with open(path, "w") as fh:
        json.dump(raw, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_image_file(path):
    try:
        with PILImage.open(path) as img:
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB" if img.mode in ("RGBA", "P") else "L")
            arr = np.asarray(img, dtype=float)
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise FileFormatError(f"{path}: unreadable image: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def _apply_caps(images, labels, manifest):
    if not manifest.caps:
        return images, labels
    limits = {i: manifest.caps.get(name, None)
              for i, name in enumerate(manifest.class_names)}
    keep = []
    seen = {i: 0 for i in limits}
    for j, lab in enumerate(labels):
        cap = limits[int(lab)]
        if cap is None or seen[int(lab)] < cap:
            keep.append(j)
            seen[int(lab)] += 1
    keep = np.asarray(keep, dtype=np.intp)
    return images[keep], labels[keep]


def load_dataset(manifest):
    """Materialize a Dataset from a manifest; ordering is deterministic."""
    if manifest.format == "idx":
        images, labels = _load_idx_pair(manifest)
    elif manifest.format == "image_dir":
        images, labels = _load_image_dir(manifest)
    else:
        images, labels = _load_csv(manifest)
    images, labels = _apply_caps(images, labels, manifest)
    return Dataset(images, labels, manifest.class_names, manifest.split)


def _load_idx_pair(manifest):
    raw_images = read_idx(manifest.images)
    raw_labels = read_idx(manifest.labels)
    if raw_labels.ndim != 1:
        raise FileFormatError(f"{manifest.labels}: label file must be rank 1, "
                              f"got shape {raw_labels.shape}")
    if raw_images.ndim == 3:
        raw_images = raw_images[:, :, :, None]
    if raw_images.ndim != 4:
        raise FileFormatError(f"{manifest.images}: image file must be rank 3 "
                              f"or 4, got shape {raw_images.shape}")
    if len(raw_images) != len(raw_labels):
        raise FileFormatError(f"{manifest.images}: {len(raw_images)} images "
                              f"but {len(raw_labels)} labels")
    index = {int(key): i for i, (key, _) in enumerate(manifest.classes)}
    keep = np.asarray([j for j, lab in enumerate(raw_labels) if int(lab) in index],
                      dtype=np.intp)
    labels = np.asarray([index[int(raw_labels[j])] for j in keep], dtype=np.intp)
    return raw_images[keep].astype(float), labels


def _load_image_dir(manifest):
    root = Path(manifest.root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    index = {str(key): i for i, (key, _) in enumerate(manifest.classes)}
    entries = []
    for sub in sorted(root.iterdir()):
        if not sub.is_dir() or sub.name not in index:
            continue
        for f in sorted(sub.iterdir()):
            if f.is_file():
                entries.append((f"{sub.name}/{f.name}", index[sub.name], f))
    return _stack_entries(entries)


def _load_csv(manifest):
    path = Path(manifest.csv)
    index = {str(key): i for i, (key, _) in enumerate(manifest.classes)}
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or \
                {"path", "class_name"} - set(reader.fieldnames):
            raise FileFormatError(f"{path}: CSV needs path,class_name columns")
        for row in reader:
            if row["class_name"] not in index:
                raise FileFormatError(
                    f"{path}: unknown class name {row['class_name']!r} "
                    f"for {row['path']}")
            entries.append((row["path"], index[row["class_name"]],
                            path.parent / row["path"]))
    entries.sort(key=lambda e: e[0])
    return _stack_entries(entries)


def _stack_entries(entries):
    images, labels = [], []
    shape = None
    for rel, label, file_path in entries:
        arr = _load_image_file(file_path)
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise FileFormatError(f"{file_path}: image shape {arr.shape} "
                                  f"differs from first image {shape}")
        images.append(arr)
        labels.append(label)
    if not images:
        return np.zeros((0, 1, 1, 1)), np.zeros(0, dtype=np.intp)
    return np.stack(images), np.asarray(labels, dtype=np.intp)


# ----------------------------------------------------------------- exports

def _write_gray_or_rgb(arr_u8, path):
    path = Path(path)
    if arr_u8.ndim == 3 and arr_u8.shape[2] == 1:
        arr_u8 = arr_u8[:, :, 0]
    if path.suffix.lower() == ".pgm":
        if arr_u8.ndim != 2:
            raise ValueError("PGM export supports single-channel images only")
        h, w = arr_u8.shape
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(arr_u8.tobytes())
    else:
        PILImage.fromarray(arr_u8).save(path)


def export_perturbation_image(pert, path):
    """Write a perturbation as an 8-bit image, min-max scaled per channel.

    A constant channel has no range and maps to mid-gray 128.
    """
    tensor = np.asarray(getattr(pert, "tensor", pert), dtype=float)
    if tensor.ndim == 2:
        tensor = tensor[:, :, None]
    lo = tensor.min(axis=(0, 1), keepdims=True)
    hi = tensor.max(axis=(0, 1), keepdims=True)
    span = hi - lo
    scaled = np.where(span > 0, (tensor - lo) / np.where(span > 0, span, 1.0), 0.5)
    _write_gray_or_rgb(np.round(scaled * 255.0).astype(np.uint8), path)


def apply_and_export(image, pert, path, pixel_domain=(0.0, 255.0)):
    """Write clip(image + perturbation) in the native pixel domain."""
    image = np.asarray(image, dtype=float)
    tensor = np.asarray(getattr(pert, "tensor", pert), dtype=float)
    if tensor.shape != image.shape:
        raise ValueError(f"perturbation shape {tensor.shape} does not match "
                         f"image shape {image.shape}")
    lo, hi = pixel_domain
    adv = np.clip(image + tensor, lo, hi)
    scaled = (adv - lo) / (hi - lo) * 255.0
    arr = np.round(scaled).astype(np.uint8)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    _write_gray_or_rgb(arr, path)
    return adv
