"""Keyed trigger-sample generation and the baseline trigger generators.

Every trigger in a set carries the *same* perturbation: one coefficient per
(canonical masked position, channel), expanded deterministically from a
secret seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .spectral import fourier_basis, perturb
from .tensorio import load_tensor, save_tensor

NEW_CLASS = "new_class"
RANDOM_FIXED = "random_fixed"


@dataclass(frozen=True)
class PerturbationKey:
    seed: int
    lo: float = -1.0
    hi: float = 1.0
    per_channel: bool = True

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError("key intensity range needs lo <= hi")

    def fingerprint(self) -> str:
        """Short public hash of the key; safe to write into manifests."""
        text = f"{self.seed}|{self.lo!r}|{self.hi!r}|{int(self.per_channel)}"
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def scaled(self, alpha: float) -> "PerturbationKey":
        return PerturbationKey(self.seed, self.lo * alpha, self.hi * alpha, self.per_channel)


@dataclass(frozen=True)
class TriggerSet:
    images: np.ndarray            # (n, h, w, d), clipped to [0, 1]
    labels: np.ndarray            # assigned labels
    source_ids: np.ndarray
    key_fingerprint: str = ""
    mask_id: str = ""
    raw: np.ndarray | None = field(default=None, repr=False)  # pre-clipping

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def ids(self) -> np.ndarray:
        return self.source_ids

    def with_labels(self, labels) -> "TriggerSet":
        return TriggerSet(self.images, np.asarray(labels, dtype=np.int64), self.source_ids,
                          self.key_fingerprint, self.mask_id, self.raw)

    def with_images(self, images) -> "TriggerSet":
        return TriggerSet(np.asarray(images), self.labels, self.source_ids,
                          self.key_fingerprint, self.mask_id, None)


def _mask_positions(mask) -> list[tuple[int, int]]:
    if hasattr(mask, "positions"):
        return mask.positions
    from .clustering import ClusteringMap
    return ClusteringMap(np.asarray(mask, dtype=np.uint8)).positions


def mask_id(mask) -> str:
    arr = np.asarray(mask.mask if hasattr(mask, "mask") else mask, dtype=np.uint8)
    return hashlib.sha256(arr.tobytes() + str(arr.shape).encode()).hexdigest()[:16]


def derive_lambdas(key: PerturbationKey, mask, channels: int):
    """One coefficient per (canonical masked position, channel), uniform in [lo, hi].

    Each value depends only on (key, position, channel), never on iteration
    order.  With ``per_channel=False`` all channels of a position share one.
    """
    positions = _mask_positions(mask)
    if not positions:
        raise ValueError("clustering map is empty; nothing to embed")
    out = []
    for i, j in positions:
        for k in range(channels):
            ch = k if key.per_channel else 0
            ss = np.random.SeedSequence(entropy=key.seed, spawn_key=(i, j, ch))
            lam = float(np.random.default_rng(ss).uniform(key.lo, key.hi))
            out.append(((i, j), k, lam))
    return out


def generate_key(mask, channels: int, seed: int, lo: float = -1.0, hi: float = 1.0,
                 per_channel: bool = True, min_strength: float = 0.0,
                 max_tries: int = 100_000) -> PerturbationKey:
    """First key in a seeded candidate stream whose masked coefficients all
    satisfy ``|lambda| >= min_strength``.

    With ``min_strength = 0`` this is simply ``PerturbationKey(seed, ...)``.
    """
    if min_strength > max(abs(lo), abs(hi)):
        raise ValueError("min_strength exceeds the intensity range")
    if min_strength <= 0:
        return PerturbationKey(seed, lo, hi, per_channel)
    # chance that one candidate passes, per independently drawn coefficient
    span = hi - lo
    p_one = (max(hi - min_strength, 0.0) + max(-min_strength - lo, 0.0)) / span if span else 1.0
    draws = len(_mask_positions(mask)) * (channels if per_channel else 1)
    if draws * np.log(max(p_one, 1e-300)) + np.log(max_tries) < np.log(1e-3):
        raise ValueError(f"a key with |lambda| >= {min_strength} at all {draws} masked "
                         f"coefficients is practically unreachable; lower min_strength")
    stream = np.random.default_rng(seed)
    for _ in range(max_tries):
        key = PerturbationKey(int(stream.integers(2**62)), lo, hi, per_channel)
        if all(abs(lam) >= min_strength for _, _, lam in derive_lambdas(key, mask, channels)):
            return key
    raise ValueError(f"no key with |lambda| >= {min_strength} in {max_tries} candidates")


def trigger_pattern(key: PerturbationKey, mask, shape) -> np.ndarray:
    """Spatial-domain perturbation shared by all triggers, ``(h, w, d)``."""
    h, w, d = shape
    delta = np.zeros((h, w, d))
    for (i, j), k, lam in derive_lambdas(key, mask, d):
        delta[:, :, k] += lam * fourier_basis(i, j, h, w).spatial
    return delta


def gen_triggers(sources, mask, key: PerturbationKey, source_ids=None,
                 label: int = -1) -> TriggerSet:
    """Perturb every source with the identical keyed Fourier perturbation."""
    src = np.asarray(sources.images if hasattr(sources, "images") else sources,
                     dtype=np.float64)
    if source_ids is None and hasattr(sources, "ids"):
        source_ids = sources.ids
    if src.ndim == 3:
        src = src[None]
    if len(src) == 0:
        raise ValueError("no source images")
    mask_arr = np.asarray(mask.mask if hasattr(mask, "mask") else mask)
    if mask_arr.shape != src.shape[1:3]:
        raise ValueError(f"mask shape {mask_arr.shape} does not match images {src.shape[1:3]}")
    entries = derive_lambdas(key, mask, src.shape[3])
    raw = np.stack([perturb(x, entries, clip=False) for x in src])
    images = np.clip(raw, 0.0, 1.0)
    ids = np.arange(len(src)) if source_ids is None else np.asarray(source_ids)
    return TriggerSet(images, np.full(len(src), label, dtype=np.int64), ids,
                      key.fingerprint(), mask_id(mask), raw)


def assign_labels(triggers: TriggerSet, strategy: str, class_count: int,
                  seed: int = 0, source_labels=None, forbidden=()) -> TriggerSet:
    """``new_class`` -> label c for all; ``random_fixed`` -> one shared label in
    {0..c-1} outside ``forbidden`` and different from the most common source label.
    """
    if strategy == NEW_CLASS:
        return triggers.with_labels(np.full(len(triggers), class_count))
    if strategy != RANDOM_FIXED:
        raise ValueError(f"unknown label strategy {strategy!r}")
    label = random_fixed_label(class_count, seed, source_labels, forbidden)
    return triggers.with_labels(np.full(len(triggers), label))


def random_fixed_label(class_count: int, seed: int, source_labels=None, forbidden=()) -> int:
    if class_count < 2:
        raise ValueError("random_fixed labels need at least 2 classes")
    banned = {int(f) for f in forbidden}
    if source_labels is not None and len(source_labels):
        counts = np.bincount(np.asarray(source_labels), minlength=class_count)
        banned.add(int(np.argmax(counts)))
    allowed = np.array([k for k in range(class_count) if k not in banned])
    if allowed.size == 0:
        raise ValueError("every label is forbidden")
    return int(np.random.default_rng(seed).choice(allowed))


# --------------------------------------------------------------------------
# baselines

URS, LBT, NBT = "URS", "LBT", "NBT"


def default_logo(d: int = 1) -> np.ndarray:
    return np.ones((8, 8, d))


def baseline_triggers(kind: str, sources=None, params: dict | None = None,
                      seed: int = 0) -> TriggerSet:
    """Unrelated samples (URS), pasted logo (LBT) or additive Gaussian noise (NBT)."""
    params = dict(params or {})
    kind = kind.upper()
    if kind == URS:
        pool = params.get("pool")
        if pool is None:
            raise ValueError("URS needs params['pool'] of out-of-distribution images")
        pool = np.asarray(pool.images if hasattr(pool, "images") else pool)
        return TriggerSet(pool.copy(), np.full(len(pool), -1), np.arange(len(pool)))
    if sources is None:
        raise ValueError(f"{kind} needs source images")
    src = np.asarray(sources.images if hasattr(sources, "images") else sources,
                     dtype=np.float64)
    ids = np.asarray(getattr(sources, "ids", np.arange(len(src))))
    if kind == LBT:
        logo = params.get("logo")
        if logo is None:
            logo = default_logo(src.shape[3])
        logo = np.asarray(logo, dtype=np.float64)
        if logo.ndim == 2:
            logo = logo[:, :, None]
        lh, lw = logo.shape[:2]
        h, w = src.shape[1:3]
        top, left = params.get("position", (h - lh, w - lw))
        if top < 0 or left < 0 or top + lh > h or left + lw > w:
            raise ValueError("logo does not fit at the requested position")
        out = src.copy()
        out[:, top:top + lh, left:left + lw, :] = logo
        return TriggerSet(out, np.full(len(src), -1), ids)
    if kind == NBT:
        if "variance" not in params:
            raise ValueError("NBT needs params['variance']")
        var = float(params["variance"])
        if var < 0:
            raise ValueError("variance must be non-negative")
        noise = np.random.default_rng(seed).normal(0.0, np.sqrt(var), size=src.shape)
        raw = src + noise
        return TriggerSet(np.clip(raw, 0.0, 1.0), np.full(len(src), -1), ids, raw=raw)
    raise ValueError(f"unknown baseline trigger kind {kind!r}")


# --------------------------------------------------------------------------
# persistence: <base>.fdwm holds the images, <base>.txt the provenance


def save_trigger_set(base, triggers: TriggerSet, mask_file: str = "") -> list:
    base = Path(base)
    img, txt = base.with_suffix(".fdwm"), base.with_suffix(".txt")
    save_tensor(img, np.asarray(triggers.images, dtype=np.float32))
    labels = np.unique(triggers.labels)
    lines = [
        f"count={len(triggers)}",
        f"label={int(labels[0]) if labels.size == 1 else -1}",
        f"labels={','.join(str(int(v)) for v in triggers.labels)}",
        f"source_ids={','.join(str(int(v)) for v in triggers.source_ids)}",
        f"mask_file={mask_file}",
        f"mask_id={triggers.mask_id}",
        f"key_fingerprint={triggers.key_fingerprint}",
    ]
    txt.write_text("\n".join(lines) + "\n")
    return [img, txt]


def load_trigger_set(base) -> TriggerSet:
    base = Path(base)
    if base.suffix in {".fdwm", ".txt"}:
        base = base.with_suffix("")
    meta = {}
    for line in base.with_suffix(".txt").read_text().splitlines():
        k, _, v = line.partition("=")
        meta[k] = v
    images = load_tensor(base.with_suffix(".fdwm"))

    def ints(text):
        return np.array([int(v) for v in text.split(",") if v], dtype=np.int64)

    labels, ids = ints(meta.get("labels", "")), ints(meta.get("source_ids", ""))
    if len(labels) != len(images) or len(ids) != len(images):
        raise ValueError(f"{base}: trigger manifest does not match {len(images)} images")
    return TriggerSet(images, labels, ids, meta.get("key_fingerprint", ""),
                      meta.get("mask_id", ""))
