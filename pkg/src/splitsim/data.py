"""Dataset ingestion, partitioning, sharding and batch streams.

Images are cached on disk as uint8 NHWC tensors in the documented binary
layout (one directory per dataset: manifest.json with checksums, shapes
and class names, plus images.bin / labels.bin). Batches are delivered as
float32 NCHW tensors normalized to [0, 1].

The private dataset D and the server's auxiliary dataset D' are disjoint
index sets over one cache; at ratio 1.0 they are equal-sized stratified
halves, smaller ratios subsample D' stratified, and class removal drops
classes from D' only.

The built-in `synthetic-tiny` dataset (deterministic class-keyed texture
gratings, 10 classes, 16x16) lets every property test run with zero
downloads.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, IngestionError
from .rng import derive_seed, stream
from .tensorfile import load_array, save_array

CACHE_ENV = "SPLITSIM_CACHE"

# name -> (image shape HWC, class count)
REGISTRY = {
    "cifar10": ((32, 32, 3), 10),
    "cifar100": ((32, 32, 3), 100),
    "tiny-imagenet": ((64, 64, 3), 200),
    "stl10": ((96, 96, 3), 10),
    "synthetic-tiny": ((16, 16, 3), 10),
}

SYNTHETIC_DEFAULT_SIZE = 4096


def cache_root(cache_dir=None) -> Path:
    if cache_dir is not None:
        return Path(cache_dir)
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "splitsim"))


@dataclass
class DatasetHandle:
    name: str
    images: np.ndarray  # uint8 NHWC
    labels: np.ndarray  # int64
    class_names: list[str]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class DataSubset:
    """An index set over a dataset handle."""

    handle: DatasetHandle
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def labels(self) -> np.ndarray:
        return self.handle.labels[self.indices]

    def tensors(self, positions: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
        idx = self.indices[positions]
        imgs = self.handle.images[idx].astype(np.float32) / 255.0
        x = torch.from_numpy(imgs).permute(0, 3, 1, 2).contiguous()
        y = torch.from_numpy(self.handle.labels[idx].astype(np.int64))
        return x, y


@dataclass(frozen=True)
class PartitionPlan:
    ratio: float = 1.0
    removed_classes: tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError(f"auxiliary ratio must be in (0, 1], got {self.ratio}")


def synthetic_tiny(n: int = SYNTHETIC_DEFAULT_SIZE, seed: int = 0) -> DatasetHandle:
    """Deterministic texture dataset with a non-trivial decision boundary.

    A class fixes the nominal grating orientation and frequency band, but
    both are jittered per example so neighbouring classes overlap and the
    classification loss stays in a realistic range rather than collapsing.
    Phase, per-channel amplitudes, a luminance ramp, a brightness offset
    and pixel noise vary per example, so reconstruction has genuinely
    example-specific content to recover.
    """
    shape, num_classes = REGISTRY["synthetic-tiny"]
    h, w, _ = shape
    gen = stream(seed, f"synthetic:{n}")
    labels = np.arange(n, dtype=np.int64) % num_classes
    perm = torch.randperm(n, generator=gen).numpy()
    labels = labels[perm]
    lab = torch.tensor(labels, dtype=torch.float32)

    u = torch.linspace(0, 1, w).view(1, 1, w).expand(n, h, w)
    v = torch.linspace(0, 1, h).view(1, h, 1).expand(n, h, w)
    theta = (lab + 0.7 * (torch.rand(n, generator=gen) - 0.5)) * (math.pi / num_classes)
    freq = 2.0 + (lab % 3) + 0.8 * (torch.rand(n, generator=gen) - 0.5)
    phase = torch.rand(n, generator=gen) * 2 * math.pi
    coord = u * torch.cos(theta).view(n, 1, 1) + v * torch.sin(theta).view(n, 1, 1)
    grating = torch.sin(2 * math.pi * freq.view(n, 1, 1) * coord + phase.view(n, 1, 1))

    amp = 0.3 + 0.7 * torch.rand(n, 3, generator=gen)
    psi = torch.rand(n, generator=gen) * 2 * math.pi
    ramp_strength = 0.5 * torch.rand(n, generator=gen)
    ramp = (
        (u - 0.5) * torch.cos(psi).view(n, 1, 1)
        + (v - 0.5) * torch.sin(psi).view(n, 1, 1)
    ) * ramp_strength.view(n, 1, 1)
    offset = 0.2 * (torch.rand(n, generator=gen) - 0.5)
    noise = 0.02 * torch.randn(3, n, h, w, generator=gen)

    img = (
        0.5 + offset.view(1, n, 1, 1)
        + 0.3 * amp.T.reshape(3, n, 1, 1) * grating.unsqueeze(0)
        + 0.25 * ramp.unsqueeze(0)
        + noise
    )
    img = img.clamp(0.0, 1.0).permute(1, 2, 3, 0)  # NHWC
    images = (img * 255.0).round().to(torch.uint8).numpy()
    class_names = [f"texture-{i}" for i in range(num_classes)]
    return DatasetHandle("synthetic-tiny", images, labels, class_names)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_cache(name: str, images: np.ndarray, labels: np.ndarray,
                class_names: list[str], cache_dir=None) -> Path:
    root = cache_root(cache_dir) / name
    root.mkdir(parents=True, exist_ok=True)
    save_array(root / "images.bin", images.astype(np.uint8))
    save_array(root / "labels.bin", labels.astype(np.int64))
    manifest = {
        "name": name,
        "shape": list(images.shape[1:]),
        "count": int(len(labels)),
        "classes": class_names,
        "checksums": {
            "images.bin": _sha256(root / "images.bin"),
            "labels.bin": _sha256(root / "labels.bin"),
        },
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return root


def load_dataset(name: str, cache_dir=None,
                 synthetic_size: int = SYNTHETIC_DEFAULT_SIZE,
                 synthetic_seed: int = 0) -> DatasetHandle:
    if name not in REGISTRY:
        raise ConfigError(f"unknown dataset {name!r}; expected one of {sorted(REGISTRY)}")
    if name == "synthetic-tiny":
        return synthetic_tiny(synthetic_size, synthetic_seed)
    root = cache_root(cache_dir) / name
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise IngestionError(
            f"dataset {name!r} not found under {root}. Download the official "
            f"archive and convert it with: splitsim import-data {name} "
            f"<source_dir> [--cache <dir>] (or set ${CACHE_ENV})."
        )
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    for fname, expect in manifest["checksums"].items():
        actual = _sha256(root / fname)
        if actual != expect:
            raise IngestionError(f"checksum mismatch for {root / fname}")
    images = load_array(root / "images.bin")
    labels = load_array(root / "labels.bin")
    if list(images.shape[1:]) != manifest["shape"] or len(labels) != manifest["count"]:
        raise IngestionError(f"manifest/payload mismatch under {root}")
    return DatasetHandle(name, images, labels, manifest["classes"])


def partition_indices(labels: np.ndarray, num_classes: int,
                      plan: PartitionPlan) -> tuple[np.ndarray, np.ndarray]:
    """Stratified disjoint (private, auxiliary) index sets."""
    for c in plan.removed_classes:
        if not 0 <= c < num_classes:
            raise ConfigError(f"removed class {c} not in label set")
    gen = np.random.default_rng(derive_seed(plan.seed, "partition"))
    private, aux = [], []
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        gen.shuffle(idx)
        half = (len(idx) + 1) // 2
        private.append(idx[:half])
        rest = idx[half:]
        if c in plan.removed_classes:
            continue
        keep = round(len(rest) * plan.ratio)
        aux.append(rest[:keep])
    d = np.sort(np.concatenate(private))
    d_aux = np.sort(np.concatenate(aux)) if aux else np.empty(0, dtype=np.int64)
    assert len(np.intersect1d(d, d_aux)) == 0, "partition produced overlap"
    return d, d_aux


def load_and_partition(
    name: str,
    plan: PartitionPlan,
    cache_dir=None,
    private_cap: int | None = None,
    aux_cap: int | None = None,
    synthetic_size: int = SYNTHETIC_DEFAULT_SIZE,
) -> tuple[DataSubset, DataSubset]:
    """Load a dataset and split it into disjoint private/auxiliary subsets.

    Optional caps subsample each side stratified (used by the desk-scale
    preset to bound runtime); caps never break disjointness.
    """
    handle = load_dataset(name, cache_dir, synthetic_size, plan.seed)
    d_idx, aux_idx = partition_indices(handle.labels, handle.num_classes, plan)
    gen = np.random.default_rng(derive_seed(plan.seed, "partition-cap"))
    d_idx = _stratified_cap(handle.labels, d_idx, private_cap, gen)
    aux_idx = _stratified_cap(handle.labels, aux_idx, aux_cap, gen)
    return DataSubset(handle, d_idx), DataSubset(handle, aux_idx)


def _stratified_cap(labels, indices, cap, gen) -> np.ndarray:
    if cap is None or cap >= len(indices):
        return indices
    sub_labels = labels[indices]
    classes = np.unique(sub_labels)
    per_class = cap / len(indices)
    kept = []
    for c in classes:
        idx = indices[sub_labels == c]
        gen.shuffle(idx)
        kept.append(idx[: max(1, round(len(idx) * per_class))])
    out = np.sort(np.concatenate(kept))
    return out[:cap] if len(out) > cap else out


def heterogeneous_split(subset: DataSubset, k: int) -> list[DataSubset]:
    """Class-disjoint shards whose union is the input subset."""
    classes = np.unique(subset.labels)
    if k < 1:
        raise ConfigError("client count must be >= 1")
    if k > len(classes):
        raise ConfigError(f"cannot split {len(classes)} classes among {k} clients")
    shards = []
    chunks = np.array_split(classes, k)
    for chunk in chunks:
        mask = np.isin(subset.labels, chunk)
        shards.append(DataSubset(subset.handle, subset.indices[mask]))
    return shards


def batch_stream(subset: DataSubset, batch_size: int, generator: torch.Generator,
                 mode: str = "epoch"):
    """Infinite iterator of (x, y) batches.

    "epoch" reshuffles and walks the subset without replacement (the tail
    batch of an epoch may be short); "iid" draws uniformly with
    replacement, which is how auxiliary batches are sampled.
    """
    if len(subset) == 0:
        raise ConfigError("empty data shard")
    if batch_size > len(subset):
        raise ConfigError(
            f"batch size {batch_size} exceeds dataset size {len(subset)}"
        )
    if mode not in ("epoch", "iid"):
        raise ConfigError(f"unknown stream mode {mode!r}")

    def gen_batches():
        while True:
            if mode == "epoch":
                order = torch.randperm(len(subset), generator=generator).numpy()
                for start in range(0, len(order), batch_size):
                    yield subset.tensors(order[start:start + batch_size])
            else:
                pos = torch.randint(
                    len(subset), (batch_size,), generator=generator
                ).numpy()
                yield subset.tensors(pos)

    return gen_batches()


class AuxiliarySampler:
    """Uniform and label-aligned sampling over the auxiliary subset."""

    def __init__(self, subset: DataSubset, generator: torch.Generator):
        if len(subset) == 0:
            raise ConfigError("auxiliary dataset is empty")
        self.subset = subset
        self.generator = generator
        self._by_class: dict[int, np.ndarray] = {}
        labels = subset.labels
        for c in np.unique(labels):
            self._by_class[int(c)] = np.flatnonzero(labels == c)

    def batch(self, batch_size: int) -> tuple[torch.Tensor, torch.Tensor]:
        pos = torch.randint(
            len(self.subset), (batch_size,), generator=self.generator
        ).numpy()
        return self.subset.tensors(pos)

    def label_aligned(self, wanted: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """One auxiliary example per wanted label; classes missing from the
        auxiliary set fall back to uniform sampling for that example."""
        positions = np.empty(len(wanted), dtype=np.int64)
        for i, y in enumerate(wanted.tolist()):
            pool = self._by_class.get(int(y))
            if pool is None:
                positions[i] = int(torch.randint(
                    len(self.subset), (1,), generator=self.generator
                ).item())
            else:
                j = int(torch.randint(len(pool), (1,), generator=self.generator).item())
                positions[i] = pool[j]
        return self.subset.tensors(positions)


# ---------------------------------------------------------------------------
# Importers from the datasets' official distribution formats.

def _unpickle(path: Path) -> dict:
    with open(path, "rb") as fh:
        return pickle.load(fh, encoding="bytes")


def import_cifar10(source_dir, cache_dir=None) -> Path:
    src = Path(source_dir)
    base = src / "cifar-10-batches-py" if (src / "cifar-10-batches-py").exists() else src
    files = [base / f"data_batch_{i}" for i in range(1, 6)] + [base / "test_batch"]
    missing = [f for f in files if not f.exists()]
    if missing:
        raise IngestionError(
            f"missing CIFAR-10 batch files under {base}: {missing[0].name}..."
        )
    imgs, labels = [], []
    for f in files:
        d = _unpickle(f)
        imgs.append(d[b"data"].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
        labels.extend(d[b"labels"])
    meta = base / "batches.meta"
    names = [n.decode() for n in _unpickle(meta)[b"label_names"]] if meta.exists() \
        else [str(i) for i in range(10)]
    return write_cache("cifar10", np.concatenate(imgs),
                       np.asarray(labels, dtype=np.int64), names, cache_dir)


def import_cifar100(source_dir, cache_dir=None) -> Path:
    src = Path(source_dir)
    base = src / "cifar-100-python" if (src / "cifar-100-python").exists() else src
    files = [base / "train", base / "test"]
    if not all(f.exists() for f in files):
        raise IngestionError(f"missing CIFAR-100 train/test files under {base}")
    imgs, labels = [], []
    for f in files:
        d = _unpickle(f)
        imgs.append(d[b"data"].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
        labels.extend(d[b"fine_labels"])
    meta = base / "meta"
    names = [n.decode() for n in _unpickle(meta)[b"fine_label_names"]] if meta.exists() \
        else [str(i) for i in range(100)]
    return write_cache("cifar100", np.concatenate(imgs),
                       np.asarray(labels, dtype=np.int64), names, cache_dir)


def import_stl10(source_dir, cache_dir=None) -> Path:
    src = Path(source_dir)
    base = src / "stl10_binary" if (src / "stl10_binary").exists() else src
    parts = []
    labels = []
    for stem in ("train", "test"):
        xf, yf = base / f"{stem}_X.bin", base / f"{stem}_y.bin"
        if not xf.exists() or not yf.exists():
            raise IngestionError(f"missing STL-10 binaries under {base}")
        x = np.fromfile(xf, dtype=np.uint8).reshape(-1, 3, 96, 96)
        parts.append(x.transpose(0, 3, 2, 1))  # column-major -> HWC
        labels.append(np.fromfile(yf, dtype=np.uint8).astype(np.int64) - 1)
    names_file = base / "class_names.txt"
    names = names_file.read_text().split() if names_file.exists() \
        else [str(i) for i in range(10)]
    return write_cache("stl10", np.concatenate(parts),
                       np.concatenate(labels), names, cache_dir)


def import_tiny_imagenet(source_dir, cache_dir=None) -> Path:
    from PIL import Image

    src = Path(source_dir)
    base = src / "tiny-imagenet-200" if (src / "tiny-imagenet-200").exists() else src
    train = base / "train"
    if not train.exists():
        raise IngestionError(f"missing Tiny ImageNet train directory under {base}")
    wnids = sorted(p.name for p in train.iterdir() if p.is_dir())
    class_of = {w: i for i, w in enumerate(wnids)}
    imgs, labels = [], []

    def add(path, label):
        with Image.open(path) as im:
            imgs.append(np.asarray(im.convert("RGB"), dtype=np.uint8))
        labels.append(label)

    for wnid in wnids:
        img_dir = train / wnid / "images"
        for p in sorted(img_dir.iterdir()):
            add(p, class_of[wnid])
    val_ann = base / "val" / "val_annotations.txt"
    if val_ann.exists():
        for line in val_ann.read_text().splitlines():
            fields = line.split("\t")
            if len(fields) >= 2 and fields[1] in class_of:
                add(base / "val" / "images" / fields[0], class_of[fields[1]])
    return write_cache("tiny-imagenet", np.stack(imgs),
                       np.asarray(labels, dtype=np.int64), wnids, cache_dir)


IMPORTERS = {
    "cifar10": import_cifar10,
    "cifar100": import_cifar100,
    "stl10": import_stl10,
    "tiny-imagenet": import_tiny_imagenet,
}
