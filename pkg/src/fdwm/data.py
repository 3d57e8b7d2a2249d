"""Datasets, splits and the trigger-set partition plan.

Images are ``(n, h, w, d)`` float32 arrays in [0, 1] (channel-last).  Every
sample carries a stable integer id assigned at ingestion so subset
disjointness can be checked by id.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_RECORD = 3073
CIFAR_CLASSES = 10
SPLIT_FRACTIONS = (0.75, 0.05)  # train, validation; remainder is test
# synthetic generator
GRATING_AMP = (0.25, 0.6)  # in units of a unit-norm Fourier basis
GRATING_PHASE = np.pi / 4
BACKGROUND_STD = 0.08
TEXTURE_STD = 0.12
TEXTURE_BAND = 0.8  # texture lives at radius >= 0.8 * min(h, w) / 2
NOISE_STD = 0.004


class IngestionError(ValueError):
    pass


class CorruptRecordError(IngestionError):
    pass


@dataclass(frozen=True)
class Samples:
    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, index) -> "Samples":
        index = np.asarray(index, dtype=np.int64)
        return Samples(self.images[index], self.labels[index], self.ids[index])

    def relabel(self, label: int) -> "Samples":
        return Samples(self.images, np.full(len(self), label, dtype=np.int64), self.ids)

    @staticmethod
    def concat(*parts: "Samples") -> "Samples":
        parts = [p for p in parts if p is not None]
        return Samples(np.concatenate([p.images for p in parts]),
                       np.concatenate([p.labels for p in parts]),
                       np.concatenate([p.ids for p in parts]))

    @staticmethod
    def empty(shape) -> "Samples":
        return Samples(np.zeros((0, *shape), np.float32), np.zeros(0, np.int64),
                       np.zeros(0, np.int64))


@dataclass(frozen=True)
class DatasetBundle:
    D1: Samples  # training
    D2: Samples  # validation
    E: Samples   # test
    class_count: int

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.D1.images.shape[1:])

    def check(self) -> None:
        ids = [set(s.ids.tolist()) for s in (self.D1, self.D2, self.E)]
        if ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2]:
            raise ValueError("D1, D2 and E must be pairwise disjoint")
        for s in (self.D1, self.D2, self.E):
            if len(s) and s.labels.max() >= self.class_count:
                raise ValueError("label outside class range")


@dataclass(frozen=True)
class PartitionPlan:
    """Index sets (positions within D1, D2, E) for the trigger-set split."""

    A1: np.ndarray
    A2: np.ndarray
    U: np.ndarray
    V: np.ndarray
    q_t: int
    seed: int


def split_bundle(images, labels, ids, class_count: int, seed: int,
                 fractions=SPLIT_FRACTIONS) -> DatasetBundle:
    """Unstratified seeded split; fractional sizes round down, remainder to E."""
    n = len(labels)
    order = np.random.default_rng(seed).permutation(n)
    n1 = int(np.floor(fractions[0] * n))
    n2 = int(np.floor(fractions[1] * n))
    parts = np.split(order, [n1, n1 + n2])
    mk = [Samples(images[p], labels[p], ids[p]) for p in parts]
    return DatasetBundle(mk[0], mk[1], mk[2], class_count)


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = path.read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        good = len(raw) - len(raw) % CIFAR_RECORD
        raise IngestionError(f"{path}: truncated record at byte offset {good} "
                             f"(file size {len(raw)})")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        raise CorruptRecordError(f"{path}: label byte {labels[bad[0]]} >= 10 in record "
                                 f"{bad[0]} (byte offset {bad[0] * CIFAR_RECORD})")
    # planar R, G, B, each row-major 32x32 -> (n, 32, 32, 3)
    pix = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return pix.astype(np.float32) / np.float32(255.0), labels


def load_cifar10(path, seed: int = 0) -> DatasetBundle:
    """Read CIFAR-10 binary batches (``data_batch_*.bin``, ``test_batch.bin``)."""
    path = Path(path)
    if path.is_file():
        files = [path]
    else:
        if not path.is_dir():
            raise IngestionError(f"{path}: no such file or directory")
        files = sorted(path.glob("data_batch_*.bin")) + sorted(path.glob("test_batch.bin"))
        if not files:
            files = sorted(path.glob("*.bin"))
    if not files:
        raise IngestionError(f"{path}: no CIFAR-10 .bin batches found")
    imgs, labs = zip(*(_read_cifar_file(f) for f in files))
    images = np.concatenate(imgs)
    labels = np.concatenate(labs)
    ids = np.arange(len(labels), dtype=np.int64)
    return split_bundle(images, labels, ids, CIFAR_CLASSES, seed)


def _band_texture(rng, h, w, r_lo, r_hi, std, count):
    """``count`` random-phase textures on the ring ``r_lo <= r < r_hi``, each
    rescaled to pixel standard deviation ``std``.
    """
    fy = np.fft.fftfreq(h) * h
    fx = np.fft.fftfreq(w) * w
    r = np.hypot(fy[:, None], fx[None, :])
    band = (r >= r_lo) & (r < r_hi)
    coef = (rng.standard_normal((count, h, w)) + 1j * rng.standard_normal((count, h, w))) * band
    tex = np.fft.ifft2(coef, axes=(1, 2)).real
    tex /= tex.reshape(count, -1).std(axis=1)[:, None, None]
    return tex * std


def grating_radii(class_count: int, h: int, w: int) -> np.ndarray:
    """Vertical frequencies of the class gratings (class 0 has none)."""
    limit = TEXTURE_BAND * min(h, w) / 2
    for step in (2, 1):
        radii = 2 + step * np.arange(class_count - 1)
        if radii[-1] < limit:
            return radii
    raise ValueError(f"too many classes ({class_count}) for a {h}x{w} grid")


def gen_synthetic(seed: int, class_count: int = 3, per_class: int = 600, h: int = 32,
                  w: int = 32, d: int = 1, split_seed: int | None = None) -> DatasetBundle:
    """Seeded grating dataset.

    Class 0 carries no grating; class ``k >= 1`` adds horizontal stripes at
    vertical frequency ``grating_radii(...)[k - 1]`` with a fixed phase and a
    random amplitude.  Every image also gets a smooth background, a
    class-independent high-frequency texture and a little pixel noise.
    """
    if class_count < 2:
        raise ValueError("class_count must be >= 2")
    if per_class < 20:
        raise ValueError("per_class must be >= 20")
    if min(h, w) < 16 or d not in (1, 3):
        raise ValueError("need h, w >= 16 and d in {1, 3}")
    radii = grating_radii(class_count, h, w)
    rng = np.random.default_rng(seed)
    n = class_count * per_class
    labels = np.repeat(np.arange(class_count), per_class)
    rows = np.arange(h)[:, None] * np.ones((1, w))
    unit = np.sqrt(2.0 / (h * w))  # pixel amplitude of a unit-norm cosine
    images = np.zeros((n, h, w, d))
    for k in range(1, class_count):
        sl = slice(k * per_class, (k + 1) * per_class)
        amp = rng.uniform(*GRATING_AMP, size=(per_class, 1, 1, 1)) * unit
        stripe = np.cos(2 * np.pi * radii[k - 1] * rows / h + GRATING_PHASE)
        images[sl] = amp * stripe[None, :, :, None]
    r_max = min(h, w) / 2
    for ch in range(d):
        images[..., ch] += _band_texture(rng, h, w, 0.0, 1.6, BACKGROUND_STD, n)
        images[..., ch] += _band_texture(rng, h, w, TEXTURE_BAND * r_max, np.inf,
                                         TEXTURE_STD, n)
    images += 0.5 + rng.normal(0.0, NOISE_STD, size=images.shape)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    perm = rng.permutation(n)
    images, labels = images[perm], labels[perm].astype(np.int64)
    ids = np.arange(n, dtype=np.int64)
    return split_bundle(images, labels, ids, class_count,
                        seed if split_seed is None else split_seed)


def make_partition(bundle: DatasetBundle, q_t: int, seed: int) -> PartitionPlan:
    """Draw A1 in D1, A2 in D2 and V in E uniformly without replacement; U = E minus V."""
    n1, n2, ne = len(bundle.D1), len(bundle.D2), len(bundle.E)
    if q_t < 0 or q_t > min(n1, n2, ne // 2):
        raise ValueError(f"q_t={q_t} exceeds min(|D1|={n1}, |D2|={n2}, |E|/2={ne // 2})")
    rng = np.random.default_rng(seed)
    A1 = np.sort(rng.choice(n1, size=q_t, replace=False))
    A2 = np.sort(rng.choice(n2, size=q_t, replace=False))
    V = np.sort(rng.choice(ne, size=q_t, replace=False))
    U = np.setdiff1d(np.arange(ne), V)
    return PartitionPlan(A1, A2, U, V, q_t, seed)
