"""Small numpy classifiers with hand-written backprop and SGD + momentum.

Images come in as ``(n, h, w, d)``; convolutions run internally on
``(n, d, h, w)``.  Parameters are float32 by default so checkpoints
round-trip bit-exactly through the float32 tensor format.
"""

from __future__ import annotations

import copy
import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensorio import read_tensor, write_tensor

log = logging.getLogger(__name__)

TINYCNN = "conv:8:3,relu,maxpool:2,conv:16:3,relu,maxpool:2,flatten,dense"
MLP = "flatten,dense:64,relu,dense"
ARCHITECTURES = {"tinycnn": TINYCNN, "mlp": MLP}

CKPT_MAGIC = b"FDWM-CKPT"
CKPT_VERSION = 1


class DescriptorError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


# --------------------------------------------------------------------------
# architecture


@dataclass(frozen=True)
class Layer:
    kind: str
    args: tuple[int, ...] = ()


@dataclass(frozen=True)
class Architecture:
    input_shape: tuple[int, int, int]  # h, w, d
    layers: tuple[Layer, ...]

    @classmethod
    def parse(cls, text: str, input_shape=None) -> "Architecture":
        """Parse ``"in=32x32x1|conv:8:3,relu,..."`` or a bare layer list."""
        text = ARCHITECTURES.get(text, text)
        if "|" in text:
            head, text = text.split("|", 1)
            if not head.startswith("in="):
                raise DescriptorError(f"bad input header {head!r}")
            input_shape = tuple(int(v) for v in head[3:].split("x"))
        if input_shape is None or len(input_shape) != 3:
            raise DescriptorError("input shape (h, w, d) required")
        layers = []
        for tok in text.split(","):
            tok = tok.strip()
            if not tok:
                continue
            name, *args = tok.split(":")
            if name not in {"conv", "dense", "relu", "tanh", "maxpool", "flatten"}:
                raise DescriptorError(f"unknown layer {name!r}")
            try:
                layers.append(Layer(name, tuple(int(a) for a in args)))
            except ValueError:
                raise DescriptorError(f"non-integer argument in {tok!r}") from None
        return cls(tuple(int(v) for v in input_shape), tuple(layers))

    def describe(self) -> str:
        h, w, d = self.input_shape
        body = ",".join(":".join([l.kind, *map(str, l.args)]) for l in self.layers)
        return f"in={h}x{w}x{d}|{body}"

    def param_shapes(self, class_count: int) -> list[tuple[int, ...]]:
        """Walk the layer list, checking shapes; returns weight/bias shapes in order."""
        h, w, d = self.input_shape
        c, flat = d, None
        shapes = []
        dense_layers = [i for i, l in enumerate(self.layers) if l.kind == "dense"]
        if not dense_layers or dense_layers[-1] != max(
                i for i, l in enumerate(self.layers) if l.kind not in {"relu", "tanh"}):
            raise DescriptorError("architecture must end with a dense layer")
        for idx, layer in enumerate(self.layers):
            if layer.kind == "conv":
                if flat is not None:
                    raise DescriptorError("conv after flatten")
                if len(layer.args) != 2 or layer.args[1] % 2 == 0:
                    raise DescriptorError("conv takes filters:odd_kernel")
                f, k = layer.args
                shapes += [(f, c, k, k), (f,)]
                c = f
            elif layer.kind == "maxpool":
                (p,) = layer.args or (2,)
                if p != 2 or h % 2 or w % 2:
                    raise DescriptorError(f"maxpool:2 needs even spatial dims, got {h}x{w}")
                h, w = h // 2, w // 2
            elif layer.kind == "flatten":
                flat = c * h * w
            elif layer.kind == "dense":
                if flat is None:
                    raise DescriptorError("dense before flatten")
                last = idx == dense_layers[-1]
                if last:
                    if layer.args and layer.args[0] != class_count:
                        raise DescriptorError("final dense width must equal class_count")
                    units = class_count
                else:
                    if len(layer.args) != 1:
                        raise DescriptorError("hidden dense needs a width")
                    units = layer.args[0]
                shapes += [(flat, units), (units,)]
                flat = units
        return shapes


# --------------------------------------------------------------------------
# layer kernels


def _conv_forward(x, W, b):
    n, c, H, Wd = x.shape
    f, _, k, _ = W.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # n c H W k k
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * H * Wd, c * k * k)
    out = cols @ W.reshape(f, -1).T + b
    return out.reshape(n, H, Wd, f).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, cols, x_shape, W):
    n, c, H, Wd = x_shape
    f, _, k, _ = W.shape
    p = k // 2
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dW = (d2.T @ cols).reshape(W.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ W.reshape(f, -1)).reshape(n, H, Wd, c, k, k)
    dxp = np.zeros((n, c, H + 2 * p, Wd + 2 * p), dtype=dout.dtype)
    for a in range(k):
        for bb in range(k):
            dxp[:, :, a:a + H, bb:bb + Wd] += dcols[:, :, :, :, a, bb].transpose(0, 3, 1, 2)
    return dxp[:, :, p:p + H, p:p + Wd], dW, db


def _pool_forward(x):
    n, c, H, W = x.shape
    win = x.reshape(n, c, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, H // 2, W // 2, 4)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout, idx, x_shape):
    n, c, H, W = x_shape
    dwin = np.zeros(dout.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dwin = dwin.reshape(n, c, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dwin.reshape(n, c, H, W)


def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses and d(sum of losses)/d(scores)."""
    z = scores - scores.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(len(labels))
    losses = logsum - z[rows, labels]
    grad = softmax(scores)
    grad[rows, labels] -= 1.0
    return losses, grad


# --------------------------------------------------------------------------
# model


@dataclass
class Classifier:
    arch: Architecture
    class_count: int
    params: list[np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.arch.input_shape

    def copy(self) -> "Classifier":
        return Classifier(self.arch, self.class_count,
                          [p.copy() for p in self.params], copy.deepcopy(self.meta))

    def astype(self, dtype) -> "Classifier":
        out = self.copy()
        out.params = [p.astype(dtype) for p in out.params]
        return out

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def weight_indices(self) -> list[int]:
        """Indices into ``params`` of weight (non-bias) tensors."""
        return [i for i, p in enumerate(self.params) if p.ndim > 1]

    def _prepare(self, images) -> np.ndarray:
        x = np.asarray(images)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match "
                             f"architecture {self.input_shape}")
        return x.astype(self.params[0].dtype, copy=False).transpose(0, 3, 1, 2)

    def _forward(self, x, keep_cache: bool):
        cache = []
        pi = 0
        for layer in self.arch.layers:
            if layer.kind == "conv":
                W, b = self.params[pi], self.params[pi + 1]
                pi += 2
                shape = x.shape
                x, cols = _conv_forward(x, W, b)
                cache.append(("conv", cols, shape) if keep_cache else None)
            elif layer.kind == "dense":
                W, b = self.params[pi], self.params[pi + 1]
                pi += 2
                cache.append(("dense", x) if keep_cache else None)
                x = x @ W + b
            elif layer.kind == "relu":
                cache.append(("relu", x) if keep_cache else None)
                x = np.maximum(x, 0)
            elif layer.kind == "tanh":
                x = np.tanh(x)
                cache.append(("tanh", x) if keep_cache else None)
            elif layer.kind == "maxpool":
                shape = x.shape
                x, idx = _pool_forward(x)
                cache.append(("maxpool", idx, shape) if keep_cache else None)
            elif layer.kind == "flatten":
                cache.append(("flatten", x.shape) if keep_cache else None)
                x = x.reshape(len(x), -1)
        return x, cache

    def forward(self, images, batch_size: int = 512) -> np.ndarray:
        """Class scores (logits), shape ``(n, class_count)``."""
        x = self._prepare(images)
        outs = [self._forward(x[s:s + batch_size], False)[0]
                for s in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0, self.class_count))

    def predict(self, images) -> np.ndarray:
        # np.argmax returns the lowest index on ties
        return np.argmax(self.forward(images), axis=-1)

    def loss_and_grads(self, images, labels):
        """Mean cross-entropy over the batch and its parameter gradients."""
        x = self._prepare(images)
        labels = np.asarray(labels)
        scores, cache = self._forward(x, True)
        losses, dscores = cross_entropy(scores, labels)
        grads = self._backward(dscores / len(labels), cache)
        return float(losses.mean()), grads

    def _backward(self, dout, cache):
        grads = [None] * len(self.params)
        pi = len(self.params)
        for layer, entry in zip(reversed(self.arch.layers), reversed(cache)):
            kind = entry[0]
            if kind == "dense":
                pi -= 2
                x = entry[1]
                grads[pi] = x.T @ dout
                grads[pi + 1] = dout.sum(axis=0)
                dout = dout @ self.params[pi].T
            elif kind == "conv":
                pi -= 2
                dout, grads[pi], grads[pi + 1] = _conv_backward(
                    dout, entry[1], entry[2], self.params[pi])
            elif kind == "relu":
                dout = dout * (entry[1] > 0)
            elif kind == "tanh":
                dout = dout * (1.0 - entry[1] ** 2)
            elif kind == "maxpool":
                dout = _pool_backward(dout, entry[1], entry[2])
            elif kind == "flatten":
                dout = dout.reshape(entry[1])
        return grads

    def _kink_signature(self, images) -> list[np.ndarray]:
        """Per-sample ReLU sign masks and max-pool winners."""
        x = self._prepare(images)
        _, cache = self._forward(x, True)
        sig = []
        for entry in cache:
            if entry[0] == "relu":
                sig.append((entry[1] > 0).reshape(len(x), -1))
            elif entry[0] == "maxpool":
                sig.append(entry[1].reshape(len(x), -1))
        return sig


def init(arch, class_count: int, seed: int, dtype=np.float32,
         input_shape=None) -> Classifier:
    """Fan-in scaled uniform weights (He-uniform), zero biases."""
    if not isinstance(arch, Architecture):
        arch = Architecture.parse(arch, input_shape)
    if class_count < 1:
        raise DescriptorError("class_count must be positive")
    rng = np.random.default_rng(seed)
    params = []
    for shape in arch.param_shapes(class_count):
        if len(shape) == 1:
            params.append(np.zeros(shape, dtype=dtype))
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            limit = np.sqrt(6.0 / fan_in)
            params.append(rng.uniform(-limit, limit, size=shape).astype(dtype))
    return Classifier(arch, class_count, params, {"seed": seed, "epochs": 0})


def forward(model: Classifier, image) -> np.ndarray:
    """Scores for a single image or a batch."""
    scores = model.forward(image)
    return scores[0] if np.asarray(image).ndim == 3 else scores


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def sgd_momentum_step(params, grads, velocity, lr, momentum) -> None:
    """In place: ``v <- mu*v - lr*g``; ``theta <- theta + v``."""
    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        v -= lr * g.astype(v.dtype, copy=False)
        p += v


def train(model: Classifier, train_set, val_set=None, cfg: TrainConfig = TrainConfig()):
    """Return ``(trained_copy, history)``; the input model is left untouched.

    ``train_set``/``val_set`` are anything with ``images`` and ``labels``.
    """
    images = np.asarray(train_set.images)
    labels = np.asarray(train_set.labels)
    if len(labels) and labels.max() >= model.class_count:
        raise ValueError(f"label {labels.max()} >= class_count {model.class_count}")
    out = model.copy()
    velocity = [np.zeros_like(p) for p in out.params]
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(labels))
        total, seen = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grads = out.loss_and_grads(images[idx], labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {s // cfg.batch_size} "
                    f"(lr={cfg.lr}, momentum={cfg.momentum})")
            sgd_momentum_step(out.params, grads, velocity, cfg.lr, cfg.momentum)
            total += loss * len(idx)
            seen += len(idx)
        row = {"epoch": epoch + 1, "train_loss": total / max(seen, 1)}
        if val_set is not None and len(val_set.labels):
            row["val_acc"] = evaluate(out, val_set)
        history.append(row)
        log.debug("epoch %d %s", epoch + 1, row)
    out.meta["epochs"] = out.meta.get("epochs", 0) + cfg.epochs
    return out, history


def evaluate(model, samples) -> float:
    labels = np.asarray(samples.labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty set")
    return float(np.mean(model.predict(samples.images) == labels))


# --------------------------------------------------------------------------
# gradient check


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped_kinks: int


def grad_check(model: Classifier, images, labels, step: float = 1e-4,
               floor: float = 1e-7, param_indices=None) -> GradCheckResult:
    """Central-difference check of per-sample gradients in float64.

    A (sample, parameter) pair is skipped when the +step or -step evaluation
    flips any ReLU sign or max-pool winner relative to the unperturbed net.
    """
    m = model.astype(np.float64)
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    labels = np.atleast_1d(np.asarray(labels))
    n = len(labels)
    analytic = []
    for s in range(n):
        _, g = m.loss_and_grads(images[s:s + 1], labels[s:s + 1])
        analytic.append(g)
    base_sig = m._kink_signature(images)

    def per_sample_losses():
        return cross_entropy(m.forward(images), labels)[0]

    def changed():
        sig = m._kink_signature(images)
        flag = np.zeros(n, dtype=bool)
        for a, b in zip(sig, base_sig):
            flag |= np.any(a != b, axis=1)
        return flag

    worst, checked, skipped = 0.0, 0, 0
    indices = range(len(m.params)) if param_indices is None else param_indices
    for pi in indices:
        p = m.params[pi]
        flat = p.reshape(-1)
        for fi in range(flat.size):
            old = flat[fi]
            flat[fi] = old + step
            lp, kp = per_sample_losses(), changed()
            flat[fi] = old - step
            lm, km = per_sample_losses(), changed()
            flat[fi] = old
            numeric = (lp - lm) / (2 * step)
            ok = ~(kp | km)
            skipped += int(np.sum(~ok))
            for s in np.flatnonzero(ok):
                a = analytic[s][pi].reshape(-1)[fi]
                err = abs(a - numeric[s]) / max(abs(a) + abs(numeric[s]), floor)
                worst = max(worst, err)
                checked += 1
    return GradCheckResult(worst, checked, skipped)


# --------------------------------------------------------------------------
# checkpoints


def write_checkpoint(fh, model: Classifier) -> None:
    desc = model.arch.describe().encode("utf-8")
    fh.write(CKPT_MAGIC)
    fh.write(struct.pack("<H", CKPT_VERSION))
    fh.write(struct.pack("<I", len(desc)))
    fh.write(desc)
    fh.write(struct.pack("<II", model.class_count, len(model.params)))
    for p in model.params:
        write_tensor(fh, p)


def read_checkpoint(fh) -> Classifier:
    if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise ValueError("not an FDWM checkpoint")
    (version,) = struct.unpack("<H", fh.read(2))
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (dlen,) = struct.unpack("<I", fh.read(4))
    arch = Architecture.parse(fh.read(dlen).decode("utf-8"))
    class_count, count = struct.unpack("<II", fh.read(8))
    params = [read_tensor(fh) for _ in range(count)]
    expected = arch.param_shapes(class_count)
    if [p.shape for p in params] != [tuple(s) for s in expected]:
        raise DescriptorError("checkpoint tensors do not match descriptor")
    return Classifier(arch, class_count, params)


def save_checkpoint(path, model: Classifier) -> None:
    with open(path, "wb") as fh:
        write_checkpoint(fh, model)


def load_checkpoint(path) -> Classifier:
    with open(Path(path), "rb") as fh:
        return read_checkpoint(fh)


def checkpoint_bytes(model: Classifier) -> bytes:
    buf = io.BytesIO()
    write_checkpoint(buf, model)
    return buf.getvalue()
