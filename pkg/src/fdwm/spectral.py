"""2D DFT on centered spectra, Fourier basis matrices and basis-noise perturbation.

Conventions
-----------
* Forward transform is unnormalized (DC equals the pixel sum); the inverse
  carries the ``1/(h*w)`` factor.
* Spectra are stored centered: the zero frequency sits at ``(h//2, w//2)``.
* Images are ``(h, w, d)`` arrays, channel-last, values in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class Spectrum:
    coef: np.ndarray  # complex (h, w), centered

    @property
    def shape(self) -> tuple[int, int]:
        return self.coef.shape


@dataclass(frozen=True)
class FourierBasis:
    position: tuple[int, int]
    spatial: np.ndarray


def dft2(channel) -> Spectrum:
    x = np.asarray(channel, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2D channel, got shape {x.shape}")
    return Spectrum(np.fft.fftshift(np.fft.fft2(x)))


def idft2(spectrum) -> tuple[np.ndarray, float]:
    """Return ``(real_part, max_abs_imaginary_residue)``."""
    coef = spectrum.coef if isinstance(spectrum, Spectrum) else np.asarray(spectrum)
    z = np.fft.ifft2(np.fft.ifftshift(coef))
    residue = float(np.max(np.abs(z.imag))) if z.size else 0.0
    return z.real.copy(), residue


def center(h: int, w: int) -> tuple[int, int]:
    return h // 2, w // 2


def sym_index(i: int, j: int, h: int, w: int) -> tuple[int, int]:
    """Centered position whose frequency is the negation of ``(i, j)``'s."""
    if not (0 <= i < h and 0 <= j < w):
        raise ValueError(f"position {(i, j)} outside {h}x{w}")
    ci, cj = center(h, w)
    u = (i - ci) % h
    v = (j - cj) % w
    return ((-u) % h + ci) % h, ((-v) % w + cj) % w


def is_canonical(i: int, j: int, h: int, w: int) -> bool:
    """True for the member of a symmetric pair with the smaller flat index."""
    si, sj = sym_index(i, j, h, w)
    return i * w + j <= si * w + sj


def canonical_positions(h: int, w: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(h) for j in range(w) if is_canonical(i, j, h, w)]


@lru_cache(maxsize=4096)
def _basis_cached(i: int, j: int, h: int, w: int) -> np.ndarray:
    si, sj = sym_index(i, j, h, w)
    z = np.zeros((h, w), dtype=np.complex128)
    z[i, j] = 1.0
    z[si, sj] = 1.0
    spatial = np.fft.ifft2(np.fft.ifftshift(z)).real
    spatial /= np.linalg.norm(spatial)
    spatial.setflags(write=False)
    return spatial


def fourier_basis(i: int, j: int, h: int, w: int) -> FourierBasis:
    """Unit-norm real cosine supported on ``(i, j)`` and its symmetric partner.

    Both spectral coefficients are equal and real positive; a self-symmetric
    position gets a single real coefficient.
    """
    if not (0 <= i < h and 0 <= j < w):
        raise ValueError(f"position {(i, j)} outside {h}x{w}")
    # one cache entry per pair
    si, sj = sym_index(i, j, h, w)
    key = min((i, j), (si, sj))
    return FourierBasis((i, j), _basis_cached(*key, h, w))


def _check_entries(entries, h: int, w: int, d: int) -> list[tuple[tuple[int, int], int, float]]:
    seen = set()
    out = []
    for pos, k, lam in entries:
        i, j = int(pos[0]), int(pos[1])
        if not (0 <= i < h and 0 <= j < w):
            raise ValueError(f"position {(i, j)} outside {h}x{w}")
        if not 0 <= k < d:
            raise ValueError(f"channel {k} outside [0, {d})")
        canon = min((i, j), sym_index(i, j, h, w))
        if (canon, k) in seen:
            raise ValueError(f"duplicate entry for position {canon}, channel {k}")
        seen.add((canon, k))
        out.append(((i, j), int(k), float(lam)))
    return out


def perturb(image, entries: Iterable[tuple[Sequence[int], int, float]],
            clip: bool = True, return_residue: bool = False):
    """Add Fourier basis noise ``lam * F(e)`` in the frequency domain, per channel.

    ``entries`` holds ``((i, j), channel, lam)`` triples; at most one per
    symmetric pair and channel.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, d = img.shape
    # zero coefficients are validated but skipped so the result stays exact
    checked = [e for e in _check_entries(entries, h, w, d) if e[2] != 0.0]
    if not checked:
        out = img.copy()
        return (out, 0.0) if return_residue else out

    delta = np.zeros((h, w, d), dtype=np.complex128)
    for (i, j), k, lam in checked:
        delta[:, :, k] += lam * np.fft.fftshift(np.fft.fft2(fourier_basis(i, j, h, w).spatial))
    z = np.fft.fft2(img, axes=(0, 1)) + np.fft.ifftshift(delta, axes=(0, 1))
    back = np.fft.ifft2(z, axes=(0, 1))
    residue = float(np.max(np.abs(back.imag)))
    out = back.real
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return (out, residue) if return_residue else out


def perturb_batch(images: np.ndarray, position: tuple[int, int], lams: np.ndarray,
                  clip: bool = True) -> np.ndarray:
    """Perturb a stack ``(n, h, w, d)`` at one position with per-(sample, channel)
    coefficients ``lams`` of shape ``(n, d)``.
    """
    n, h, w, d = images.shape
    spec_e = np.fft.fft2(fourier_basis(position[0], position[1], h, w).spatial)
    z = np.fft.fft2(images, axes=(1, 2))
    z += lams[:, None, None, :] * spec_e[None, :, :, None]
    out = np.fft.ifft2(z, axes=(1, 2)).real
    if clip:
        np.clip(out, 0.0, 1.0, out=out)
    return out
