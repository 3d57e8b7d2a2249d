"""Model attacks (fine-tuning, pruning) and image attacks (JPEG, flip, low-pass)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import Samples

IMAGE_ATTACKS = ("jpeg", "hflip", "lowpass")
MODEL_ATTACKS = ("finetune", "prune")
_KEYS = {
    "jpeg": {"qf"},
    "hflip": set(),
    "lowpass": {"B", "clip"},
    "prune": {"rate"},
    "finetune": {"epochs", "fraction", "lr"},
}


@dataclass(frozen=True)
class AttackDescriptor:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _KEYS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        extra = set(self.params) - _KEYS[self.kind] - {"seed"}
        if extra:
            raise ValueError(f"{self.kind}: unknown parameter(s) {sorted(extra)}")
        p = self.params
        if self.kind == "jpeg" and not 1 <= p.get("qf", 75) <= 100:
            raise ValueError("jpeg qf must lie in [1, 100]")
        if self.kind == "prune" and not 0.0 <= p.get("rate", 0.0) <= 1.0:
            raise ValueError("prune rate must lie in [0, 1]")
        if self.kind == "lowpass" and p.get("B", 0) < 0:
            raise ValueError("lowpass B must be >= 0")
        if self.kind == "finetune" and not 0.0 < p.get("fraction", 0.5) <= 1.0:
            raise ValueError("finetune fraction must lie in (0, 1]")

    @classmethod
    def parse(cls, text: str) -> "AttackDescriptor":
        """``"jpeg:qf=60"``, ``"prune:rate=0.3"``, ``"lowpass:B=12"``, ``"hflip"``..."""
        kind, _, rest = text.strip().partition(":")
        params = {}
        for item in filter(None, (s.strip() for s in rest.split(","))):
            key, eq, value = item.partition("=")
            if not eq:
                raise ValueError(f"bad attack parameter {item!r} in {text!r}")
            params[key.strip()] = _number(value.strip())
        seed = int(params.pop("seed", 0))
        return cls(kind.strip(), params, seed)

    def __str__(self) -> str:
        items = [f"{k}={v}" for k, v in sorted(self.params.items())]
        if self.seed:
            items.append(f"seed={self.seed}")
        return self.kind + (":" + ",".join(items) if items else "")


def _number(value: str):
    try:
        return int(value)
    except ValueError:
        pass
    if value.lower() in {"true", "false"}:
        return value.lower() == "true"
    return float(value)


# --------------------------------------------------------------------------
# model attacks


def finetune(model: nn.Classifier, val_samples, fraction: float = 0.5, epochs: int = 10,
             cfg: nn.TrainConfig | None = None, seed: int = 0) -> nn.Classifier:
    """Continue SGD on a seeded ``fraction`` of clean validation samples."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    n = len(val_samples.labels)
    k = int(np.floor(fraction * n))
    if k == 0:
        raise ValueError("fine-tuning selection is empty")
    pick = np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
    subset = Samples(np.asarray(val_samples.images)[pick], np.asarray(val_samples.labels)[pick],
                     np.asarray(getattr(val_samples, "ids", np.arange(n)))[pick])
    base = cfg or nn.TrainConfig()
    run = nn.TrainConfig(lr=base.lr, momentum=base.momentum, batch_size=base.batch_size,
                         epochs=epochs, seed=seed)
    tuned, _ = nn.train(model, subset, None, run)
    return tuned


def prune_l1(model: nn.Classifier, rate: float) -> nn.Classifier:
    """Zero exactly ``floor(rate * N)`` weights of smallest magnitude, globally.

    Biases are exempt.  Ties fall to the earlier tensor, then the lower flat index.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    out = model.copy()
    which = out.weight_indices()
    flat = np.concatenate([np.abs(out.params[i]).ravel() for i in which])
    k = int(np.floor(rate * flat.size))
    drop = np.zeros(flat.size, dtype=bool)
    drop[np.argsort(flat, kind="stable")[:k]] = True
    start = 0
    for i in which:
        p = out.params[i]
        p[drop[start:start + p.size].reshape(p.shape)] = 0
        start += p.size
    return out


# --------------------------------------------------------------------------
# image attacks: images are (h, w, d) or batches (n, h, w, d) in [0, 1]

LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
])
CHROMA_TABLE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
])


def _dct_matrix(n: int = 8) -> np.ndarray:
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * x + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


_DCT = _dct_matrix()


def quant_tables(qf: int) -> tuple[np.ndarray, np.ndarray]:
    """Luminance and chrominance tables scaled by the IJG quality formula."""
    if not 1 <= qf <= 100:
        raise ValueError("qf must lie in [1, 100]")
    scale = 5000 // qf if qf < 50 else 200 - 2 * qf

    def scaled(t):
        return np.clip((t * scale + 50) // 100, 1, 255)

    return scaled(LUMA_TABLE), scaled(CHROMA_TABLE)


def _rgb_to_ycc(x):
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    return np.stack([y, cb, cr], axis=-1)


def _ycc_to_rgb(x):
    y, cb, cr = x[..., 0], x[..., 1] - 128.0, x[..., 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=-1)


def _code_plane(plane, table):
    """Block DCT, quantize, dequantize, inverse DCT on one 0..255 plane."""
    h, w = plane.shape
    ph, pw = -h % 8, -w % 8
    p = np.pad(plane - 128.0, ((0, ph), (0, pw)), mode="edge")
    blocks = p.reshape(p.shape[0] // 8, 8, p.shape[1] // 8, 8).transpose(0, 2, 1, 3)
    coef = _DCT @ blocks @ _DCT.T
    coef = np.round(coef / table) * table
    rec = _DCT.T @ coef @ _DCT
    rec = rec.transpose(0, 2, 1, 3).reshape(p.shape)
    return rec[:h, :w] + 128.0


def _batched(fn):
    def wrapper(images, *args, **kwargs):
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            return fn(x, *args, **kwargs)
        if x.ndim != 4:
            raise ValueError("expected an (h, w, d) image or an (n, h, w, d) batch")
        return np.stack([fn(im, *args, **kwargs) for im in x]) if len(x) else x.copy()
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_batched
def jpeg(image, qf: int) -> np.ndarray:
    """Single-pass JPEG-equivalent codec: 8-bit samples, no chroma subsampling."""
    d = image.shape[2]
    if d not in (1, 3):
        raise ValueError("jpeg needs 1 or 3 channels")
    luma, chroma = quant_tables(int(qf))
    x = np.round(np.clip(image, 0.0, 1.0) * 255.0)
    if d == 3:
        ycc = _rgb_to_ycc(x)
        rec = np.stack([_code_plane(ycc[..., k], luma if k == 0 else chroma)
                        for k in range(3)], axis=-1)
        rec = _ycc_to_rgb(rec)
    else:
        rec = _code_plane(x[..., 0], luma)[..., None]
    return np.clip(np.round(rec), 0, 255) / 255.0


@_batched
def hflip(image) -> np.ndarray:
    return image[:, ::-1, :].copy()


def lowpass_mask(h: int, w: int, B: int) -> np.ndarray:
    """Centered-spectrum keep-mask for bandwidth ``B``.

    The square is ``[c - B//2, c + ceil(B/2))`` on each axis.  A coefficient is
    kept only when its point-symmetric partner is kept too, so the filtered
    image stays real and the filter is a projection.
    """
    if not 0 <= B <= min(h, w):
        raise ValueError(f"B must lie in [0, {min(h, w)}]")

    def axis(n):
        c = n // 2
        idx = np.arange(n)
        inside = (idx >= c - B // 2) & (idx < c + (B + 1) // 2)
        partner = (-(idx - c)) % n
        partner = (partner + c) % n
        return inside & inside[partner]

    return axis(h)[:, None] & axis(w)[None, :]


@_batched
def lowpass(image, B: int, clip: bool = True) -> np.ndarray:
    """Zero the centered spectrum outside the width-``B`` center square, per channel."""
    h, w, d = image.shape
    keep = lowpass_mask(h, w, int(B))
    spec = np.fft.fftshift(np.fft.fft2(image, axes=(0, 1)), axes=(0, 1))
    spec *= keep[:, :, None]
    out = np.fft.ifft2(np.fft.ifftshift(spec, axes=(0, 1)), axes=(0, 1)).real
    return np.clip(out, 0.0, 1.0) if clip else out


def apply_image_attack(images, desc: AttackDescriptor) -> np.ndarray:
    p = desc.params
    if desc.kind == "jpeg":
        return jpeg(images, int(p.get("qf", 75)))
    if desc.kind == "hflip":
        return hflip(images)
    if desc.kind == "lowpass":
        if "B" not in p:
            raise ValueError("lowpass needs B")
        return lowpass(images, int(p["B"]), bool(p.get("clip", True)))
    raise ValueError(f"{desc.kind} is not an image attack")


def apply_model_attack(model: nn.Classifier, desc: AttackDescriptor, val_samples=None,
                       cfg: nn.TrainConfig | None = None) -> nn.Classifier:
    p = desc.params
    if desc.kind == "prune":
        return prune_l1(model, float(p.get("rate", 0.0)))
    if desc.kind == "finetune":
        if val_samples is None:
            raise ValueError("finetune needs validation samples")
        base = cfg or nn.TrainConfig()
        if "lr" in p:
            base = nn.TrainConfig(float(p["lr"]), base.momentum, base.batch_size,
                                  base.epochs, base.seed)
        return finetune(model, val_samples, float(p.get("fraction", 0.5)),
                        int(p.get("epochs", 10)), base, desc.seed)
    raise ValueError(f"{desc.kind} is not a model attack")


def augment_uda(train_set, attack: AttackDescriptor) -> Samples:
    """Append attacked copies of the normal training samples, labels unchanged."""
    if attack.kind not in IMAGE_ATTACKS:
        raise ValueError(f"UDA needs an image attack, got {attack.kind!r}")
    images = np.asarray(train_set.images)
    extra = apply_image_attack(images, attack).astype(images.dtype)
    ids = np.asarray(getattr(train_set, "ids", np.arange(len(images))))
    return Samples(np.concatenate([images, extra]),
                   np.concatenate([train_set.labels, train_set.labels]),
                   np.concatenate([ids, ids]))
