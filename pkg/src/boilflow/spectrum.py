"""Anisotropic Von Karman spectral model and empirical spatial PSD estimation.

Spectral arrays are stored FFT-shifted so the zero-frequency bin sits at the
lattice center, with integer index ``k`` running over ``[-n//2, n - n//2 - 1]``
along each axis. Axis 0 carries ``k0`` (the y / row frequency) and axis 1
carries ``k1`` (the x / column frequency).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ScreenSequence


@dataclass(frozen=True)
class VonKarmanModel:
    """Von Karman PSD parameters: outer scale ``L0`` (m), coherence length
    ``r0`` (m), and anisotropy ``gamma0`` (unitless, 1 = isotropic)."""

    L0: float
    r0: float
    gamma0: float = 1.0

    def __post_init__(self):
        if not (self.L0 > 0 and self.r0 > 0 and self.gamma0 > 0):
            raise ValueError("VonKarmanModel requires L0 > 0, r0 > 0, gamma0 > 0")


@dataclass(frozen=True)
class SpectralGrid:
    """Discrete 2D frequency lattice for an ``n x n`` screen of pitch ``delta``.

    ``delta_f = 1 / (n * delta)`` is the frequency spacing in cycles/m and
    ``kmax`` the number of edge bins cut from each end of each axis when
    forming the valid index set.
    """

    n: int
    delta_f: float
    kmax: int = 2

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("grid side must be >= 2")
        if not self.delta_f > 0:
            raise ValueError("delta_f must be positive")
        if self.kmax < 0:
            raise ValueError("kmax must be >= 0")
        if 2 * self.kmax + 1 >= self.n:
            raise ValueError(f"kmax={self.kmax} exhausts an n={self.n} lattice")

    @classmethod
    def for_screen(cls, n: int, delta: float, kmax: int = 2) -> "SpectralGrid":
        return cls(n, 1.0 / (n * delta), kmax)

    @property
    def k_axis(self) -> np.ndarray:
        """Integer frequency indices along one axis, FFT-shifted order."""
        return np.arange(self.n) - self.n // 2

    @property
    def f_axis(self) -> np.ndarray:
        return self.k_axis * self.delta_f

    def mesh(self):
        """(fy, fx) meshes in cycles/m, aligned with array axes (0, 1)."""
        f = self.f_axis
        fy, fx = np.meshgrid(f, f, indexing="ij")
        return fy, fx


def q_phi(fx, fy, L0: float, gamma0: float):
    """Unit-scale anisotropic Von Karman spectrum
    ``0.023 / (fx^2 + gamma0 * fy^2 + L0^-2)^(11/6)``.

    ``fx``/``fy`` are in cycles per meter and broadcast together. Strictly
    positive and finite for any frequency since the denominator is bounded
    below by ``L0^-2``.
    """
    if not (L0 > 0 and gamma0 > 0):
        raise ValueError("q_phi requires L0 > 0 and gamma0 > 0")
    fx = np.asarray(fx, dtype=np.float64)
    fy = np.asarray(fy, dtype=np.float64)
    denom = fx**2 + gamma0 * fy**2 + L0**-2
    return 0.023 / denom ** (11.0 / 6.0)


def v_phi(fx, fy, model: VonKarmanModel):
    """Anisotropic Von Karman PSD ``r0^(-5/3) * q_phi``."""
    return model.r0 ** (-5.0 / 3.0) * q_phi(fx, fy, model.L0, model.gamma0)


def model_psd(grid: SpectralGrid, model: VonKarmanModel) -> np.ndarray:
    """``v_phi`` sampled on the grid's shifted lattice, shape (n, n)."""
    fy, fx = grid.mesh()
    return v_phi(fx, fy, model)


def valid_index_set(grid: SpectralGrid) -> np.ndarray:
    """Boolean mask (shifted layout) of the index set used by the estimators.

    Keeps indices whose components are both nonzero and outside the ``kmax``
    smallest and largest frequency bins of each axis. Raises if empty.
    """
    k = grid.k_axis
    ax = (k != 0) & (k >= k[0] + grid.kmax) & (k <= k[-1] - grid.kmax)
    mask = ax[:, None] & ax[None, :]
    if not mask.any():
        raise ValueError("valid index set is empty for this grid")
    return mask


def estimate_spatial_psd(seq: ScreenSequence, window: str = "hamming") -> np.ndarray:
    """Average 2D Hamming-windowed periodogram of the frames.

    Each frame is windowed and FFT'd; periodograms are normalized by the
    window's mean-square value and by the lattice so that a process with true
    PSD ``V`` yields an estimate converging to ``V`` (a unit-variance white
    sequence gives a flat level ``delta**2``). Output is real, nonnegative and
    FFT-shifted.
    """
    n_t, m, n = seq.frames.shape
    if m != n:
        raise ValueError(f"frames must be square (pre-crop to an aperture square), got {m}x{n}")
    if not seq.mask.all():
        raise ValueError("frames must be fully valid; crop to an all-valid square first")
    if window != "hamming":
        raise ValueError("only the Hamming window is supported")
    w1 = np.hamming(n)
    w2 = np.outer(w1, w1)
    scale = seq.delta**2 / np.sum(w2**2)
    acc = np.zeros((n, n), dtype=np.float64)
    block = 256
    for i in range(0, n_t, block):
        spec = np.fft.fft2(seq.frames[i : i + block] * w2, axes=(-2, -1))
        acc += scale * np.sum(spec.real**2 + spec.imag**2, axis=0)
    return np.fft.fftshift(acc / n_t)


def psd_to_csv(path, grid: SpectralGrid, psd: np.ndarray) -> None:
    """Write a shifted-layout PSD as CSV rows ``k0, k1, f_x, f_y, value``."""
    if psd.shape != (grid.n, grid.n):
        raise ValueError("psd shape does not match grid")
    k = grid.k_axis
    k0, k1 = np.meshgrid(k, k, indexing="ij")
    rows = np.column_stack(
        [
            k0.ravel(),
            k1.ravel(),
            (k1 * grid.delta_f).ravel(),
            (k0 * grid.delta_f).ravel(),
            psd.ravel(),
        ]
    )
    np.savetxt(path, rows, delimiter=",", header="k0,k1,f_x,f_y,value", comments="", fmt="%.10g")
