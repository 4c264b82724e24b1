"""Datasets: CSV and IDX ingestion, synthetic generators, stratified splits, batching."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple
from urllib.parse import parse_qsl

import numpy as np

from .modelcore import SeededRng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SYNTHETIC_KINDS = ("gaussian_blobs", "ring_classes", "noisy_blobs")


class DatasetError(ValueError):
    pass


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.features.shape[0]
        if self.labels.shape != (n,):
            raise DatasetError(f"{self.name}: {n} samples but {self.labels.shape[0]} labels")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DatasetError(f"{self.name}: labels must lie in [0, {self.class_count})")
        if n < self.class_count:
            raise DatasetError(f"{self.name}: N={n} is smaller than C={self.class_count}")

    def __len__(self):
        return self.features.shape[0]

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        return tuple(self.features.shape[1:])

    @property
    def is_image(self) -> bool:
        return self.features.ndim >= 3

    def subset(self, idx, name: Optional[str] = None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        ds = LabeledDataset.__new__(LabeledDataset)
        ds.features = self.features[idx]
        ds.labels = self.labels[idx]
        ds.class_count = self.class_count
        ds.name = name or self.name
        return ds


# ---------------------------------------------------------------- CSV


def load_csv(path, class_count: Optional[int] = None) -> LabeledDataset:
    """Header row required, trailing column named ``label``; other cells numeric."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if not header or header[-1] != "label":
            raise DatasetError(f"{path}: last header column must be named 'label', got {header[-1:]!r}")
        width = len(header)
        feats, labels = [], []
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DatasetError(f"{path}: row {rowno} has {len(row)} cells, expected {width}")
            try:
                values = [float(c) for c in row[:-1]]
                label = float(row[-1])
            except ValueError:
                raise DatasetError(f"{path}: row {rowno} has a non-numeric cell") from None
            if label != int(label) or label < 0:
                raise DatasetError(f"{path}: row {rowno} label {row[-1]!r} is not a nonnegative integer")
            if class_count is not None and label >= class_count:
                raise DatasetError(f"{path}: row {rowno} label {int(label)} >= declared C={class_count}")
            feats.append(values)
            labels.append(int(label))
    if not labels:
        raise DatasetError(f"{path}: no data rows")
    c = class_count if class_count is not None else 1 + max(labels)
    return LabeledDataset(np.array(feats, dtype=np.float64).reshape(len(labels), width - 1),
                          np.array(labels), c, name=path.stem)


def write_csv(dataset: LabeledDataset, path) -> None:
    flat = dataset.features.reshape(len(dataset), -1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(flat.shape[1])] + ["label"])
        for row, label in zip(flat, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


# ---------------------------------------------------------------- IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx(images_path, labels_path, name: Optional[str] = None) -> LabeledDataset:
    """MNIST-format files; pixels scaled to [0, 1]."""
    img = _read_bytes(images_path)
    lab = _read_bytes(labels_path)
    if len(img) < 16 or struct.unpack(">I", img[:4])[0] != IDX_IMAGES_MAGIC:
        raise DatasetError(f"{images_path}: bad IDX image magic (expected 0x00000803)")
    if len(lab) < 8 or struct.unpack(">I", lab[:4])[0] != IDX_LABELS_MAGIC:
        raise DatasetError(f"{labels_path}: bad IDX label magic (expected 0x00000801)")
    n, rows, cols = struct.unpack(">III", img[4:16])
    (m,) = struct.unpack(">I", lab[4:8])
    if n != m:
        raise DatasetError(f"IDX count mismatch: {n} images vs {m} labels")
    if len(img) != 16 + n * rows * cols or len(lab) != 8 + m:
        raise DatasetError("IDX payload length does not match header dimensions")
    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(n, rows, cols)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    c = int(labels.max()) + 1 if n else 0
    return LabeledDataset(pixels.astype(np.float64) / 255.0, labels, c,
                          name=name or Path(images_path).name.split(".")[0])


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images)
    if images.ndim != 3:
        raise DatasetError("IDX images must be [N, rows, cols]")
    pixels = np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape) + pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------- synthetic


def make_synthetic(kind: str, C: int, dims: int, n_per_class: int, difficulty: float = 1.0,
                   seed: int = 0, label_noise_rate: float = 0.0, image_side: int = 0) -> LabeledDataset:
    """Deterministic synthetic classification data.

    gaussian_blobs: unit-variance Gaussians around means ``difficulty * 3 * u_c``
    where ``u_c`` are random unit directions.  ring_classes: class ``c`` lives on
    a noisy shell of radius ``1 + c * difficulty``.  noisy_blobs: gaussian_blobs
    with each label replaced by a uniformly random *other* class with
    probability ``label_noise_rate``.  With ``image_side > 0`` each sample is
    reshaped to [image_side, image_side] (requires dims == image_side**2).
    """
    if kind not in SYNTHETIC_KINDS:
        raise DatasetError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
    if n_per_class < 2:
        raise DatasetError("n_per_class must be >= 2")
    if C < 2 or dims < 1:
        raise DatasetError("need C >= 2 and dims >= 1")
    if not 0.0 <= label_noise_rate <= 1.0:
        raise DatasetError("label_noise_rate must lie in [0, 1]")
    if image_side and image_side * image_side != dims:
        raise DatasetError("image_side**2 must equal dims")
    rng = SeededRng(seed, ("synthetic",))
    labels = np.repeat(np.arange(C), n_per_class)
    if kind == "ring_classes":
        directions = rng.child("points").normal(size=(C * n_per_class, dims))
        directions /= np.maximum(np.linalg.norm(directions, axis=1, keepdims=True), 1e-12)
        radii = 1.0 + labels * difficulty
        noise = rng.child("noise").normal(scale=0.15, size=(C * n_per_class, 1))
        x = directions * (radii[:, None] + noise)
    else:
        means = rng.child("means").normal(size=(C, dims))
        means /= np.maximum(np.linalg.norm(means, axis=1, keepdims=True), 1e-12)
        means *= 3.0 * difficulty
        x = means[labels] + rng.child("points").normal(size=(C * n_per_class, dims))
    if kind == "noisy_blobs" and label_noise_rate > 0:
        noise_rng = rng.child("label_noise")
        flip = noise_rng.random(labels.shape[0]) < label_noise_rate
        offsets = noise_rng.integers(1, C, size=labels.shape[0])
        labels = np.where(flip, (labels + offsets) % C, labels)
    if image_side:
        x = x.reshape(-1, image_side, image_side)
    name = f"{kind}-C{C}-d{dims}-s{seed}"
    return LabeledDataset(x, labels, C, name=name)


def parse_dataset_uri(uri: str) -> LabeledDataset:
    """``synthetic:KIND?C=..&dims=..&n=..&seed=..&difficulty=..&noise=..&image=..``,
    ``csv:PATH``, ``idx:IMAGES,LABELS`` or a bare ``*.csv`` path."""
    if uri.startswith("synthetic:"):
        body = uri[len("synthetic:"):]
        kind, _, query = body.partition("?")
        known = {"C": int, "dims": int, "n": int, "seed": int, "difficulty": float,
                 "noise": float, "image": int}
        args = {}
        for key, value in parse_qsl(query, strict_parsing=bool(query)):
            if key not in known:
                raise DatasetError(f"unknown synthetic parameter {key!r} in {uri!r}")
            args[key] = known[key](value)
        ds = make_synthetic(kind, C=args.get("C", 3), dims=args.get("dims", 2),
                            n_per_class=args.get("n", 100), difficulty=args.get("difficulty", 1.0),
                            seed=args.get("seed", 0), label_noise_rate=args.get("noise", 0.0),
                            image_side=args.get("image", 0))
        ds.name = uri
        return ds
    if uri.startswith("csv:"):
        return load_csv(uri[4:])
    if uri.startswith("idx:"):
        images, _, labels = uri[4:].partition(",")
        if not labels:
            raise DatasetError("idx URI must be idx:IMAGES_PATH,LABELS_PATH")
        return load_idx(images, labels)
    if uri.endswith(".csv"):
        return load_csv(uri)
    raise DatasetError(f"unrecognized dataset URI {uri!r}")


# ---------------------------------------------------------------- splits and batches


def stratified_split(dataset: LabeledDataset, train_fraction: float = 0.8,
                     seed: int = 0) -> Tuple[LabeledDataset, LabeledDataset]:
    """Per class, round(train_fraction * n_c) samples go to train, the rest to val."""
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError("train_fraction must lie in (0, 1)")
    rng = SeededRng(seed, ("split",))
    train_idx, val_idx = [], []
    for c in range(dataset.class_count):
        members = np.flatnonzero(dataset.labels == c)
        members = members[rng.permutation(members.shape[0])]
        k = int(np.floor(train_fraction * members.shape[0] + 0.5))
        if members.shape[0] >= 2:
            k = min(max(k, 1), members.shape[0] - 1)
        train_idx.append(members[:k])
        val_idx.append(members[k:])
    tr = np.sort(np.concatenate(train_idx))
    va = np.sort(np.concatenate(val_idx))
    return dataset.subset(tr, dataset.name + ":train"), dataset.subset(va, dataset.name + ":val")


def batches(n: int, batch_size: int, shuffle_seed: int, epoch_index: int) -> List[np.ndarray]:
    """Index slices of a permutation that depends only on (shuffle_seed, epoch_index)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = SeededRng(shuffle_seed, ("batches", epoch_index)).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]
