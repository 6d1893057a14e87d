"""Datasets, federated client partitioning and input perturbations."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError, LabelAccessError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # [N, d]
    labels: np.ndarray  # [N] int
    n_classes: int
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise InvalidInputError("features must be [N, d] with one label per row")

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, idx: np.ndarray) -> Dataset:
        return Dataset(self.features[idx], self.labels[idx], self.n_classes, self.image_shape)


def generate_blobs(n_classes: int, per_class: int, dim: int, spread: float, seed: int,
                   separation: float = 3.0) -> Dataset:
    """Isotropic Gaussian clusters around the vertices of a scaled regular simplex.

    Vertex c is ``separation * (e_c - centroid)`` embedded in the first C
    coordinates, so all means are pairwise ``separation * sqrt(2)`` apart.
    Requires ``dim >= n_classes``; the remaining coordinates are pure noise.
    """
    if n_classes < 2 or per_class < 1 or dim < 2 or not spread > 0:
        raise InvalidInputError("need C >= 2, n >= 1, d >= 2, spread > 0")
    if dim < n_classes:
        raise InvalidInputError(f"simplex means need dim >= n_classes ({dim} < {n_classes})")
    rng = np.random.default_rng(seed)
    eye = np.eye(n_classes)
    means = np.zeros((n_classes, dim))
    means[:, :n_classes] = separation * (eye - eye.mean(axis=0))
    labels = np.repeat(np.arange(n_classes), per_class)
    features = means[labels] + spread * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return Dataset(features[order], labels[order].astype(np.int64), n_classes)


def _read_idx(path: Path, expected_magic: int, what: str) -> tuple[tuple[int, ...], bytes]:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise FormatError(f"{path}: truncated {what} file")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: expected {what} magic 0x{expected_magic:08x}, got 0x{magic:08x}")
    n_dims = magic & 0xFF
    header = 4 + 4 * n_dims
    if len(blob) < header:
        raise FormatError(f"{path}: truncated {what} header")
    dims = struct.unpack(f">{n_dims}I", blob[4:header])
    body = blob[header:]
    if len(body) != int(np.prod(dims)):
        raise FormatError(f"{path}: truncated {what} body ({len(body)} of {int(np.prod(dims))} bytes)")
    return dims, body


def load_idx(images_path: str | Path, labels_path: str | Path, standardize: bool = False,
             n_classes: int | None = None) -> Dataset:
    img_dims, img_body = _read_idx(Path(images_path), IDX_IMAGE_MAGIC, "image")
    lab_dims, lab_body = _read_idx(Path(labels_path), IDX_LABEL_MAGIC, "label")
    if img_dims[0] != lab_dims[0]:
        raise FormatError(f"count mismatch: {img_dims[0]} images vs {lab_dims[0]} labels")
    n, h, w = img_dims
    features = np.frombuffer(img_body, dtype=np.uint8).reshape(n, h * w).astype(np.float64) / 255.0
    if standardize:
        std = features.std(axis=0)
        features = (features - features.mean(axis=0)) / np.where(std > 0, std, 1.0)
    labels = np.frombuffer(lab_body, dtype=np.uint8).astype(np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if n else 0
    return Dataset(features, labels, n_classes, (h, w))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: str | Path, labels_path: str | Path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABEL_MAGIC, labels.size) + labels.tobytes())


def export_csv(dataset: Dataset, path: str | Path) -> None:
    d = dataset.features.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{j}" for j in range(d)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


@dataclass(frozen=True)
class ClientDataset:
    """A client's local data.

    Unlabeled clients keep their ground truth only for offline analysis; the
    `targets` property refuses to hand it out, so training code cannot read it.
    """

    client_id: int
    kind: str  # "labeled" | "unlabeled"
    features: np.ndarray
    _targets: np.ndarray = field(repr=False)
    n_classes: int = 0
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        if self.kind not in ("labeled", "unlabeled"):
            raise InvalidInputError(f"unknown client kind {self.kind!r}")
        if self.features.shape[0] < 1:
            raise InvalidInputError(f"client {self.client_id} has no samples")
        self.features.setflags(write=False)

    @property
    def labeled(self) -> bool:
        return self.kind == "labeled"

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def targets(self) -> np.ndarray:
        if not self.labeled:
            raise LabelAccessError(f"client {self.client_id} is unlabeled")
        return self._targets

    def hidden_targets_for_evaluation(self) -> np.ndarray:
        return self._targets

    def with_hidden_targets(self, targets: np.ndarray) -> ClientDataset:
        return ClientDataset(self.client_id, self.kind, self.features, np.asarray(targets),
                             self.n_classes, self.image_shape)


@dataclass(frozen=True)
class FederationSplit:
    labeled: list[ClientDataset]
    unlabeled: list[ClientDataset]
    validation: Dataset
    test: Dataset
    train: Dataset

    @property
    def clients(self) -> list[ClientDataset]:
        return [*self.labeled, *self.unlabeled]


def split_indices(n: int, seed: int, fractions=(0.7, 0.1, 0.2)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shuffled train/val/test index split; val and test are rounded, train takes the rest."""
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    n_train = n - n_val - n_test
    return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]


def partition(dataset: Dataset, n_clients: int, n_labeled: int, seed: int,
              n_unlabeled: int | None = None) -> FederationSplit:
    """IID shards of the 70% training portion; the first `n_labeled` shards are labeled.

    `n_unlabeled` (default: the rest) restricts how many of the remaining
    shards join as unlabeled clients; leftover shards stay unused.
    """
    if not 1 <= n_labeled <= n_clients:
        raise InvalidInputError(f"need 1 <= labeled ({n_labeled}) <= clients ({n_clients})")
    if n_unlabeled is None:
        n_unlabeled = n_clients - n_labeled
    if not 0 <= n_unlabeled <= n_clients - n_labeled:
        raise InvalidInputError(f"unlabeled count {n_unlabeled} out of range for {n_clients} clients")
    rng = np.random.default_rng(seed)
    tr, va, te = split_indices(len(dataset), int(rng.integers(2**63)))
    if n_clients > tr.size:
        raise InvalidInputError(f"{n_clients} clients exceed {tr.size} training samples")
    train = dataset.subset(tr)
    shards = np.array_split(rng.permutation(tr.size), n_clients)
    clients = []
    for cid, shard in enumerate(shards[: n_labeled + n_unlabeled]):
        kind = "labeled" if cid < n_labeled else "unlabeled"
        clients.append(ClientDataset(cid, kind, train.features[shard].copy(), train.labels[shard].copy(),
                                     dataset.n_classes, dataset.image_shape))
    return FederationSplit(clients[:n_labeled], clients[n_labeled:], dataset.subset(va), dataset.subset(te), train)


# --- perturbations ------------------------------------------------------------

IMAGE_TRANSFORMS = ("rot90", "rot180", "rot270", "translate", "flip")


def image_transform_choice(seed: int) -> tuple[str, int, int]:
    """(transform name, dy, dx) drawn from the seed; shifts are in [-2, 2]."""
    rng = np.random.default_rng(seed)
    name = IMAGE_TRANSFORMS[int(rng.integers(len(IMAGE_TRANSFORMS)))]
    dy, dx = (int(v) for v in rng.integers(-2, 3, size=2))
    return name, dy, dx


def apply_image_transform(image: np.ndarray, name: str, dy: int = 0, dx: int = 0) -> np.ndarray:
    if name == "flip":
        return image[:, ::-1].copy()
    if name.startswith("rot"):
        k = int(name[3:]) // 90
        if image.shape[0] != image.shape[1] and k % 2:
            k = 2  # quarter turns only fit square images
        return np.rot90(image, k).copy()
    if name == "translate":
        out = np.zeros_like(image)
        h, w = image.shape
        src = image[max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)]
        out[max(0, dy) : max(0, dy) + src.shape[0], max(0, dx) : max(0, dx) + src.shape[1]] = src
        return out
    raise InvalidInputError(f"unknown image transform {name!r}")


def perturb(features: np.ndarray, seed: int, sigma: float = 0.1,
            image_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Random input perturbation, a pure function of (features, seed).

    Vectors get additive N(0, sigma^2) noise; images (when `image_shape` is
    given) get one seeded rotation/translation/flip.
    """
    x = np.asarray(features, dtype=np.float64)
    if image_shape is not None:
        name, dy, dx = image_transform_choice(seed)
        return apply_image_transform(x.reshape(image_shape), name, dy, dx).ravel()
    if sigma == 0:
        return x.copy()
    return x + sigma * np.random.default_rng(seed).standard_normal(x.shape)


def perturb_batch(batch: np.ndarray, seed: int, sigma: float = 0.1,
                  image_shape: tuple[int, int] | None = None) -> np.ndarray:
    if image_shape is None:
        # One draw for the whole batch; rows are still independent noise.
        return perturb(batch, seed, sigma)
    seeds = np.random.SeedSequence(seed).generate_state(batch.shape[0])
    return np.stack([perturb(row, int(s), sigma, image_shape) for row, s in zip(batch, seeds)])
