#!/usr/bin/env python3
"""
Spectral Tools - radix-2 FFT, spectral masks and the filter operator G_Phi

The filter attenuates the high-frequency part of a real vector:

    G_Phi(v) = F^-1( Phi * F(v) )

Frequencies are ranked by magnitude m(k) = min(k, d - k), so every mask is
Hermitian-symmetric and filtered real vectors stay real.

Usage:
    from src.tools.spectral import build_mask, apply_filter

    mask = build_mask(d=1024, lam=0.5, rho=0.5)
    smoothed = apply_filter(noisy_gradient, mask)

Conventions:
    - forward transform unnormalized, inverse carries 1/d
    - lengths must be powers of two; apply_filter zero-pads shorter vectors
      to the mask length and truncates the result
"""

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator

import numpy as np
import numpy.typing as npt

ParamVector = npt.NDArray[np.float64]
Spectrum = npt.NDArray[np.complex128]

# Relative imaginary residue tolerated after an inverse transform
RESIDUE_TOLERANCE = 1e-9


class SizingError(ValueError):
    """Transform length is not a power of two."""


class MaskValidationError(ValueError):
    """Mask parameters out of range."""


class LengthMismatchError(ValueError):
    """Vector and mask lengths are incompatible."""


class ImaginaryResidueError(ArithmeticError):
    """Inverse transform left a non-negligible imaginary part (non-Hermitian spectrum)."""


# ============================================================================
# Transform counters
# ============================================================================

@dataclass
class TransformCounter:
    """Counts forward / inverse FFT invocations inside a count_transforms() block."""
    forward: int = 0
    inverse: int = 0

    @property
    def total(self) -> int:
        return self.forward + self.inverse


_active_counters: list[TransformCounter] = []
_counter_lock = threading.Lock()


def _record(kind: str) -> None:
    if not _active_counters:
        return
    with _counter_lock:
        for counter in _active_counters:
            setattr(counter, kind, getattr(counter, kind) + 1)


@contextmanager
def count_transforms() -> Iterator[TransformCounter]:
    """
    Count FFT invocations made while the block is active.

    Example:
        with count_transforms() as counter:
            apply_filter(v, mask)
        assert counter.total == 2
    """
    counter = TransformCounter()
    with _counter_lock:
        _active_counters.append(counter)
    try:
        yield counter
    finally:
        with _counter_lock:
            _active_counters.remove(counter)


# ============================================================================
# Sizing helpers
# ============================================================================

def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def next_power_of_two(n: int) -> int:
    if n < 1:
        raise SizingError(f"Length must be positive, got {n}")
    return 1 << (n - 1).bit_length()


def pad_to_power_of_two(v: npt.ArrayLike) -> ParamVector:
    """Zero-pad the last axis to the next power of two."""
    arr = np.asarray(v, dtype=np.float64)
    n = arr.shape[-1]
    target = next_power_of_two(n)
    if target == n:
        return arr
    pad = [(0, 0)] * (arr.ndim - 1) + [(0, target - n)]
    return np.pad(arr, pad)


def pivot_index(d: int, lam: float) -> int:
    """k0 = floor(lambda * d)"""
    return math.floor(lam * d)


def _require_power_of_two(n: int) -> None:
    if not is_power_of_two(n):
        raise SizingError(
            f"Radix-2 transform needs a power-of-two length, got {n} "
            f"(pad to {next_power_of_two(max(n, 1))})"
        )


# ============================================================================
# Radix-2 FFT
# ============================================================================

@lru_cache(maxsize=64)
def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    rev.setflags(write=False)
    return rev


@lru_cache(maxsize=256)
def _twiddles(m: int, sign: int) -> np.ndarray:
    w = np.exp(sign * 2j * np.pi * np.arange(m // 2) / m)
    w.setflags(write=False)
    return w


def _fft_radix2(a: np.ndarray, sign: int) -> np.ndarray:
    """
    Iterative decimation-in-time FFT along the last axis.

    Each stage works on blocks of size m: the top half gets u + w*v and the
    bottom half u - w*v.
    """
    n = a.shape[-1]
    lead = a.shape[:-1]
    out = np.array(a[..., _bit_reversal(n)], dtype=np.complex128)
    m = 2
    while m <= n:
        half = m // 2
        blocks = out.reshape(*lead, n // m, m)
        u = blocks[..., :half].copy()
        v = blocks[..., half:] * _twiddles(m, sign)
        blocks[..., :half] = u + v
        blocks[..., half:] = u - v
        m *= 2
    return out


def dft_forward(v: npt.ArrayLike) -> Spectrum:
    """
    Forward DFT: s_k = sum_n v_n exp(-2 pi i k n / d).

    Accepts a single vector or a stack of vectors (transform along the last axis).
    """
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 0 or arr.shape[-1] == 0:
        raise SizingError("Cannot transform an empty vector")
    _require_power_of_two(arr.shape[-1])
    if not np.all(np.isfinite(arr)):
        raise ValueError("Input contains NaN or Inf")
    _record("forward")
    return _fft_radix2(arr, -1)


def inverse_residue(s: npt.ArrayLike) -> float:
    """Relative imaginary residue max|Im z| / max|z| of the inverse transform of s."""
    spec = np.asarray(s, dtype=np.complex128)
    _require_power_of_two(spec.shape[-1])
    z = _fft_radix2(spec, +1) / spec.shape[-1]
    scale = float(np.max(np.abs(z))) if z.size else 0.0
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(z.imag))) / scale


def dft_inverse(s: npt.ArrayLike) -> ParamVector:
    """
    Inverse DFT: z_n = (1/d) sum_k s_k exp(2 pi i k n / d), returned as reals.

    Raises:
        ImaginaryResidueError: the imaginary part exceeds RESIDUE_TOLERANCE
            relative to the output magnitude (spectrum was not Hermitian).
    """
    spec = np.asarray(s, dtype=np.complex128)
    if spec.ndim == 0 or spec.shape[-1] == 0:
        raise SizingError("Cannot transform an empty spectrum")
    d = spec.shape[-1]
    _require_power_of_two(d)
    _record("inverse")
    z = _fft_radix2(spec, +1) / d

    scale = float(np.max(np.abs(z)))
    if scale > 0.0:
        residue = float(np.max(np.abs(z.imag))) / scale
        if residue > RESIDUE_TOLERANCE:
            raise ImaginaryResidueError(
                f"Imaginary residue {residue:.3e} exceeds {RESIDUE_TOLERANCE:.0e}; "
                "spectrum is not conjugate-symmetric (asymmetric mask?)"
            )
    return np.ascontiguousarray(z.real)


def naive_dft(v: npt.ArrayLike) -> Spectrum:
    """O(d^2) direct evaluation of the DFT sum. Any length d >= 1."""
    arr = np.asarray(v, dtype=np.float64)
    d = arr.shape[-1]
    k = np.arange(d)
    # reduce k*n mod d before scaling to keep the phase argument small
    phase = np.outer(k, k) % d
    basis = np.exp(-2j * np.pi * phase / d)
    return arr @ basis.T


# ============================================================================
# Spectral masks
# ============================================================================

@dataclass(frozen=True)
class SpectralMask:
    """
    Hermitian-symmetric attenuation profile Phi.

    Step mask (alpha = 0): k0 bins equal 1, the rest equal 1 - rho.
    Smooth mask (alpha > 0): attenuated bins get 1 - rho * exp(-alpha * r),
    where r is the rank of the bin's frequency magnitude above the pivot.
    """
    phi: np.ndarray = field(repr=False)
    k0: int
    rho: float
    alpha: float
    lam: float

    @property
    def d(self) -> int:
        return int(self.phi.shape[0])

    @property
    def is_identity(self) -> bool:
        return bool(np.all(self.phi == 1.0))

    @property
    def is_step(self) -> bool:
        return self.alpha == 0.0

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "k0": self.k0,
            "rho": self.rho,
            "alpha": self.alpha,
            "lambda": self.lam,
            "preserved_bins": int(np.count_nonzero(self.phi == 1.0)),
        }


def frequency_magnitude(d: int) -> np.ndarray:
    """m(k) = min(k, d - k)"""
    k = np.arange(d)
    return np.minimum(k, d - k)


def _preserved_bins(d: int, k0: int) -> np.ndarray:
    """
    Boolean selector of the k0 unattenuated bins, closed under k <-> d-k.

    DC comes first, then conjugate pairs by increasing magnitude. An even k0
    cannot be made of DC plus whole pairs, so the self-conjugate Nyquist bin
    fills the last slot: it is kept ahead of lower pairs despite having the
    largest min(k, d - k).
    """
    keep = np.zeros(d, dtype=bool)
    if k0 <= 0:
        return keep
    keep[0] = True
    remaining = k0 - 1
    if remaining % 2 == 1:
        keep[d // 2] = True
        remaining -= 1
    for k in range(1, remaining // 2 + 1):
        keep[k] = True
        keep[d - k] = True
    return keep


def build_mask(d: int, lam: float, rho: float, alpha: float = 0.0) -> SpectralMask:
    """
    Build the high-frequency shaping mask Phi.

    Args:
        d: Transform length (power of two)
        lam: Pivot fraction, k0 = floor(lam * d)
        rho: Attenuation ratio in (0, 1)
        alpha: Decay rate (0 gives the step mask)

    Returns:
        SpectralMask with exactly k0 bins equal to 1 when alpha = 0
    """
    _require_power_of_two(d)
    if not 0.0 < lam < 1.0:
        raise MaskValidationError(f"lambda must lie in (0, 1), got {lam}")
    if not 0.0 < rho < 1.0:
        raise MaskValidationError(f"rho must lie in (0, 1), got {rho}")
    if not (alpha >= 0.0 and math.isfinite(alpha)):
        raise MaskValidationError(f"alpha must be a finite value >= 0, got {alpha}")

    k0 = pivot_index(d, lam)
    keep = _preserved_bins(d, k0)
    phi = np.ones(d, dtype=np.float64)

    if alpha == 0.0:
        phi[~keep] = 1.0 - rho
    else:
        magnitude = frequency_magnitude(d)
        attenuated_classes = np.unique(magnitude[~keep])
        excess = np.searchsorted(attenuated_classes, magnitude[~keep])
        phi[~keep] = 1.0 - rho * np.exp(-alpha * excess)

    phi.setflags(write=False)
    return SpectralMask(phi=phi, k0=k0, rho=float(rho), alpha=float(alpha), lam=float(lam))


def identity_mask(d: int) -> SpectralMask:
    """Phi = 1 everywhere; apply_filter returns its input unchanged."""
    _require_power_of_two(d)
    phi = np.ones(d, dtype=np.float64)
    phi.setflags(write=False)
    return SpectralMask(phi=phi, k0=d, rho=0.0, alpha=0.0, lam=1.0)


def apply_filter(v: npt.ArrayLike, m: SpectralMask) -> ParamVector:
    """
    G_Phi(v) = F^-1(Phi * F(v)).

    v may be shorter than the mask when the mask was built at
    next_power_of_two(len(v)); it is zero-padded and the output truncated.
    A stack of vectors (2-D array) is filtered row by row in one pass.
    """
    arr = np.asarray(v, dtype=np.float64)
    n = arr.shape[-1]
    if n != m.d and not (n < m.d and next_power_of_two(n) == m.d):
        raise LengthMismatchError(f"Vector length {n} does not fit mask length {m.d}")
    if m.is_identity:
        return arr.copy()

    padded = arr if n == m.d else pad_to_power_of_two(arr)
    filtered = dft_inverse(dft_forward(padded) * m.phi)
    return filtered[..., :n]


def operator_eigenvalues(m: SpectralMask) -> np.ndarray:
    """
    Eigenvalues of A = F^-1 Phi F, in descending order.

    For a step mask: 1 (multiplicity k0) and 1 - rho (multiplicity d - k0).
    """
    return np.sort(np.asarray(m.phi))[::-1].copy()


def mask_energy_fraction(m: SpectralMask) -> float:
    """Mean of phi_k^2; the fraction of isotropic noise energy that survives shaping."""
    return float(np.mean(np.square(m.phi)))


def shaped_noise_covariance_diagonal(m: SpectralMask, sigma_w: float) -> np.ndarray:
    """Per-bin variance E|F(shaped w)_k|^2 = sigma_w^2 * d * phi_k^2."""
    return sigma_w**2 * m.d * np.square(m.phi)
