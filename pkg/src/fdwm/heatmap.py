"""Fourier heat maps of a classifier and their thresholded sensitivity maps."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .spectral import canonical_positions, perturb_batch, sym_index
from .tensorio import save_tensor


@dataclass(frozen=True)
class FourierHeatMap:
    t: np.ndarray  # (h, w) top-1 error per centered frequency position
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.t.shape


@dataclass(frozen=True)
class SensitivityMap:
    s: np.ndarray  # (h, w) uint8
    rho: float


def _position_rng(seed: int, pos: tuple[int, int]) -> np.random.Generator:
    # keyed by (seed, position) so the sweep is schedule independent
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=pos))


def compute_heatmap(model, eval_set, samples_per_freq: int = 256,
                    lam_range=(-1.0, 1.0), seed: int = 0, threads: int = 1,
                    positions=None) -> FourierHeatMap:
    """Error rate of ``model`` under single-frequency Fourier basis noise.

    One sample draw (seeded) is shared by every position; the coefficient is
    redrawn uniformly from ``lam_range`` per (sample, channel) at each
    position.  Each symmetric pair is evaluated once and mirrored.
    """
    images = np.asarray(eval_set.images, dtype=np.float64)
    labels = np.asarray(eval_set.labels)
    if len(labels) == 0:
        raise ValueError("eval_set is empty")
    lo, hi = float(lam_range[0]), float(lam_range[1])
    if lo > hi:
        raise ValueError("lam_range must satisfy lo <= hi")
    n = len(labels)
    if samples_per_freq == n:
        pick = np.arange(n)
    else:
        draw = np.random.default_rng(seed)
        pick = np.sort(draw.choice(n, size=samples_per_freq, replace=samples_per_freq > n))
    x, y = images[pick], labels[pick]
    _, h, w, d = x.shape
    todo = canonical_positions(h, w) if positions is None else list(positions)

    def one(pos):
        lams = _position_rng(seed, pos).uniform(lo, hi, size=(len(y), d))
        pert = perturb_batch(x, pos, lams)
        return float(np.mean(model.predict(pert) != y))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            errors = list(pool.map(one, todo))
    else:
        errors = [one(p) for p in todo]

    t = np.full((h, w), np.nan)
    for (i, j), err in zip(todo, errors):
        t[i, j] = err
        t[sym_index(i, j, h, w)] = err
    meta = {
        "samples_per_freq": samples_per_freq,
        "lam_lo": lo,
        "lam_hi": hi,
        "seed": seed,
        "eval_size": n,
        "lambda_policy": "resampled per (sample, channel)",
        "error_metric": "top-1",
    }
    return FourierHeatMap(t, meta)


def sensitivity_map(heatmap: FourierHeatMap, rho: float) -> SensitivityMap:
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    return SensitivityMap((heatmap.t >= rho).astype(np.uint8), float(rho))


def to_pgm_bytes(t: np.ndarray) -> bytes:
    """8-bit P5 rendering of values in [0, 1]; rounds half up."""
    vals = np.floor(np.clip(t, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = vals.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + vals.tobytes()


def export_heatmap(heatmap: FourierHeatMap, path) -> list[Path]:
    """Write ``<path>.fdwm``, ``<path>.pgm`` and a ``<path>.meta`` key=value sidecar."""
    base = Path(path)
    if base.suffix in {".fdwm", ".pgm"}:
        base = base.with_suffix("")
    out = [base.with_suffix(".fdwm"), base.with_suffix(".pgm"), base.with_suffix(".meta")]
    save_tensor(out[0], heatmap.t)
    out[1].write_bytes(to_pgm_bytes(heatmap.t))
    out[2].write_text("".join(f"{k}={v}\n" for k, v in sorted(heatmap.meta.items())))
    return out


def load_heatmap(path) -> FourierHeatMap:
    from .tensorio import load_tensor

    base = Path(path)
    if base.suffix in {".fdwm", ".pgm", ".meta"}:
        base = base.with_suffix("")
    t = load_tensor(base.with_suffix(".fdwm")).astype(np.float64)
    meta = {}
    side = base.with_suffix(".meta")
    if side.exists():
        for line in side.read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k] = v
    return FourierHeatMap(t, meta)
