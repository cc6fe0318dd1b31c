"""Screen sequences, aperture masks, tip/tilt/piston removal, normalization.

Conventions used throughout the package:

* A phase screen is a 2D real array indexed ``[row, col]`` where rows run
  along y and columns along x.
* A sequence stacks screens as ``frames[n, row, col]`` with ``n`` the time
  index at sampling rate ``fs``.
* Invalid (out-of-aperture) pixels carry quiet NaN and are excluded from
  every statistic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DegenerateInputError(ValueError):
    """Input has no information for the requested operation (e.g. zero variance)."""


@dataclass(frozen=True)
class ApertureSquare:
    """All-valid square region of a mask: ``origin`` is the (row, col) of the
    top-left pixel, ``side`` the edge length in pixels."""

    origin: tuple[int, int]
    side: int

    def rows(self):
        return slice(self.origin[0], self.origin[0] + self.side)

    def cols(self):
        return slice(self.origin[1], self.origin[1] + self.side)


@dataclass(frozen=True)
class TtpBasis:
    """Orthonormal piston/tip/tilt modes restricted to a pixel mask.

    ``modes`` has shape (3, M, N) and is zero at invalid pixels; the modes are
    orthonormal under the plain (masked) inner product ``sum(a * b)``.
    """

    modes: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        g = np.einsum("imn,jmn->ij", self.modes, self.modes)
        if not np.allclose(g, np.eye(3), atol=1e-10):
            raise ValueError("TTP modes are not orthonormal under the masked inner product")


@dataclass
class ScreenSequence:
    """Time-ordered stack of real phase screens on a common aperture.

    Parameters
    ----------
    frames : ndarray, shape (N_T, M, N)
        Phase values in radians; NaN marks invalid pixels.
    delta : float
        Pixel pitch in meters per pixel.
    fs : float
        Temporal sampling rate in Hz.
    mask : ndarray of bool, shape (M, N), optional
        Validity map. If omitted it is derived from the NaN pattern of the
        frames, which must be identical across frames.
    """

    frames: np.ndarray
    delta: float
    fs: float
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be 3D (N_T, M, N), got shape {self.frames.shape}")
        n_t, m, n = self.frames.shape
        if n_t < 1 or m < 2 or n < 2:
            raise ValueError(f"need N_T >= 1 and M, N >= 2, got {self.frames.shape}")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not self.fs > 0:
            raise ValueError("fs must be positive")
        invalid = np.isnan(self.frames)
        invalid_any = invalid.any(axis=0)
        invalid_all = invalid.all(axis=0)
        if not np.array_equal(invalid_any, invalid_all):
            raise ValueError("NaN pattern differs between frames; all frames must share one mask")
        if self.mask is None:
            self.mask = ~invalid_any
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != (m, n):
                raise ValueError("mask shape does not match frames")
            if invalid_any[self.mask].any() or (~invalid_all[~self.mask]).any():
                raise ValueError("NaN pattern of frames does not match the given mask")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1:]


def crop(seq: ScreenSequence, square: ApertureSquare) -> ScreenSequence:
    """Restrict a sequence to an aperture square (copies the data)."""
    frames = seq.frames[:, square.rows(), square.cols()].copy()
    return ScreenSequence(frames, seq.delta, seq.fs)


def ttp_basis(mask: np.ndarray) -> TtpBasis:
    """Build the orthonormal piston/tip/tilt basis for a mask.

    Gram-Schmidt on {1, x - x_bar, y - y_bar} over valid pixels, so the
    projection in :func:`ttp_remove` reduces to three inner products.
    """
    mask = np.asarray(mask, dtype=bool)
    m, n = mask.shape
    if mask.sum() < 4:
        raise DegenerateInputError("mask needs >= 4 valid pixels for a plane fit")
    yy, xx = np.mgrid[0:m, 0:n].astype(np.float64)
    raw = [np.ones((m, n)), xx, yy]
    modes = []
    for r in raw:
        v = np.where(mask, r, 0.0)
        for q in modes:
            v = v - np.sum(v * q) * q
        norm = np.sqrt(np.sum(v * v))
        if norm < 1e-12:
            raise DegenerateInputError("mask geometry is degenerate (collinear valid pixels)")
        modes.append(v / norm)
    return TtpBasis(np.stack(modes), mask)


def ttp_remove(screen: np.ndarray, basis: TtpBasis) -> np.ndarray:
    """Remove the least-squares piston/tip/tilt fit from a screen.

    The result is orthogonal to all three modes over valid pixels; invalid
    pixels stay NaN.
    """
    screen = np.asarray(screen, dtype=np.float64)
    if screen.shape != basis.mask.shape:
        raise ValueError(f"screen shape {screen.shape} does not match basis {basis.mask.shape}")
    filled = np.where(basis.mask, screen, 0.0)
    coef = np.einsum("kmn,mn->k", basis.modes, filled)
    out = screen - np.einsum("k,kmn->mn", coef, basis.modes)
    return np.where(basis.mask, out, np.nan)


def ttp_remove_frames(frames: np.ndarray, basis: TtpBasis) -> np.ndarray:
    """Vectorized :func:`ttp_remove` over a (N_T, M, N) stack."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[1:] != basis.mask.shape:
        raise ValueError("frame shape does not match basis")
    filled = np.where(basis.mask, frames, 0.0)
    coef = np.einsum("nmk,jmk->nj", filled, basis.modes)
    out = frames - np.einsum("nj,jmk->nmk", coef, basis.modes)
    out[:, ~basis.mask] = np.nan
    return out


def normalize_frame(screen: np.ndarray) -> np.ndarray:
    """Subtract the mean and divide by the population standard deviation over
    valid pixels. Raises :class:`DegenerateInputError` on zero variance."""
    screen = np.asarray(screen, dtype=np.float64)
    valid = ~np.isnan(screen)
    if valid.sum() < 2:
        raise DegenerateInputError("need >= 2 valid pixels to normalize")
    vals = screen[valid]
    mu = vals.mean()
    sd = vals.std()
    if sd == 0.0 or not np.isfinite(sd):
        raise DegenerateInputError("zero-variance frame cannot be normalized")
    return (screen - mu) / sd


def normalize_frames(frames: np.ndarray) -> np.ndarray:
    """Vectorized per-frame :func:`normalize_frame` over a (N_T, M, N) stack."""
    frames = np.asarray(frames, dtype=np.float64)
    mu = np.nanmean(frames, axis=(1, 2), keepdims=True)
    sd = np.nanstd(frames, axis=(1, 2), keepdims=True)
    if not np.all(sd > 0):
        raise DegenerateInputError("zero-variance frame cannot be normalized")
    return (frames - mu) / sd


def largest_inscribed_square(mask: np.ndarray) -> ApertureSquare:
    """Largest all-valid square of a mask, ties broken by smallest (row, col)
    origin. Exact dynamic program, O(M*N)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError("mask must be 2D")
    if not mask.any():
        raise DegenerateInputError("mask has no valid pixels")
    m, n = mask.shape
    # side[i, j] = edge of the largest all-valid square with bottom-right (i, j)
    side = np.zeros((m, n), dtype=np.int64)
    side[0, :] = mask[0, :]
    side[:, 0] = mask[:, 0]
    for i in range(1, m):
        row = side[i]
        above = side[i - 1]
        for j in range(1, n):
            if mask[i, j]:
                row[j] = 1 + min(above[j], row[j - 1], above[j - 1])
    best = int(side.max())
    # any square of edge `best` has bottom-right where side >= best; choose the
    # lexicographically smallest origin among them
    rows, cols = np.nonzero(side >= best)
    origins = np.stack([rows - best + 1, cols - best + 1], axis=1)
    k = np.lexsort((origins[:, 1], origins[:, 0]))[0]
    return ApertureSquare((int(origins[k, 0]), int(origins[k, 1])), best)
