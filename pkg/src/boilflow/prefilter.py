"""FIR notch and band-stop pre-filters applied per pixel along time.

Both designs subtract a normalized, modulated kernel from a unit impulse:
``taps = delta - (1 - sqrt(r)) * k`` with ``k`` scaled so its in-phase
response at the target frequency is 1, which pins ``|H(f0)| = sqrt(r)``
(power reduction by ``r``). Tap indices are centered on zero so the filters
are exactly linear phase.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.signal

from .core import ScreenSequence


@dataclass(frozen=True)
class FirFilter:
    """Impulse response plus its design parameters.

    ``design`` keys: kind ("notch" | "bandstop"), f0 (Hz), fr (Hz or None),
    r (power reduction in (0, 1)), N_W (odd tap count), fs (Hz).
    """

    taps: np.ndarray
    design: dict

    def __post_init__(self):
        n_w = self.design["N_W"]
        if n_w % 2 != 1:
            raise ValueError("N_W must be odd")
        if len(self.taps) != n_w:
            raise ValueError("taps length must equal N_W")
        r = self.design["r"]
        if not 0 < r < 1:
            raise ValueError("r must lie in (0, 1)")
        fs = self.design["fs"]
        f0 = self.design["f0"]
        fr = self.design["fr"]
        if not 0 < f0 < fs / 2:
            raise ValueError("need 0 < f0 < fs/2")
        if fr is not None and not 0 <= f0 + fr < fs / 2:
            raise ValueError("band edge f0 + fr must stay below fs/2")

    @property
    def group_delay(self) -> int:
        return (len(self.taps) - 1) // 2


def _centered_index(n_w: int) -> np.ndarray:
    half = (n_w - 1) // 2
    return np.arange(n_w) - half


def _normalize_at(kernel: np.ndarray, f0: float, fs: float, n: np.ndarray) -> np.ndarray:
    denom = np.sum(kernel * np.cos(2 * np.pi * f0 * n / fs))
    if abs(denom) < 1e-12:
        raise ValueError("kernel has no response at f0; cannot normalize")
    return kernel / denom


def _delta_minus(kernel: np.ndarray, r: float) -> np.ndarray:
    taps = -(1.0 - np.sqrt(r)) * kernel
    taps[(len(kernel) - 1) // 2] += 1.0
    return taps


def design_notch(f0: float, r: float, n_w: int, fs: float) -> FirFilter:
    """Notch at ``f0`` from a cosine-modulated Hamming window."""
    n = _centered_index(n_w)
    h = np.hamming(n_w)  # 0.54 - 0.46 cos(2 pi k / (N_W - 1))
    g = _normalize_at(h * np.cos(2 * np.pi * f0 * n / fs), f0, fs, n)
    filt = FirFilter(
        _delta_minus(g, r),
        {"kind": "notch", "f0": float(f0), "fr": None, "r": float(r), "N_W": int(n_w), "fs": float(fs)},
    )
    return filt


def design_bandstop(
    r: float,
    n_w: int,
    fs: float,
    f1: float | None = None,
    f2: float | None = None,
    f0: float | None = None,
    fr: float | None = None,
) -> FirFilter:
    """Band stop over ``(f1, f2)`` from a cosine-modulated windowed sinc.

    Accepts either the band edges ``(f1, f2)`` or the center/half-width pair
    ``(f0, fr)``.
    """
    if f0 is None or fr is None:
        if f1 is None or f2 is None:
            raise ValueError("give either (f1, f2) or (f0, fr)")
        if not 0 < f1 < f2 < fs / 2:
            raise ValueError("need 0 < f1 < f2 < fs/2")
        f0 = 0.5 * (f1 + f2)
        fr = 0.5 * (f2 - f1)
    if fr <= 0:
        raise ValueError("band half-width fr must be positive")
    n = _centered_index(n_w)
    x = 2 * np.pi * fr * n / fs
    sinc = np.ones(n_w)
    nz = x != 0
    sinc[nz] = np.sin(x[nz]) / x[nz]
    g = 2 * (fr / fs) * sinc
    b = np.hamming(n_w) * g * np.cos(2 * np.pi * f0 * n / fs)
    b = _normalize_at(b, f0, fs, n)
    return FirFilter(
        _delta_minus(b, r),
        {"kind": "bandstop", "f0": float(f0), "fr": float(fr), "r": float(r), "N_W": int(n_w), "fs": float(fs)},
    )


def frequency_response(filt: FirFilter, freqs) -> np.ndarray:
    """Complex response ``H(f) = sum taps_n exp(-2 pi j f n / fs)`` over the
    centered tap indices (zero phase for these symmetric designs)."""
    freqs = np.atleast_1d(np.asarray(freqs, dtype=np.float64))
    n = _centered_index(len(filt.taps))
    phase = np.exp(-2j * np.pi * np.outer(freqs, n) / filt.design["fs"])
    return phase @ filt.taps


def apply_fir(seq: ScreenSequence, filters: list[FirFilter]) -> ScreenSequence:
    """Convolve every pixel's time series with each filter in order.

    Valid-region convolution only: the output loses ``N_W - 1`` frames per
    filter and, because the taps are symmetric, stays time-aligned with the
    input trimmed by the group delay at both ends. The mask is preserved.
    """
    frames = seq.frames
    total = sum(len(f.taps) - 1 for f in filters)
    if seq.n_frames <= total:
        raise ValueError(
            f"sequence of {seq.n_frames} frames is too short for filters dropping {total} frames"
        )
    for f in filters:
        if f.design["fs"] != seq.fs:
            raise ValueError("filter design rate does not match the sequence")
        frames = scipy.signal.oaconvolve(frames, f.taps[:, None, None], mode="valid", axes=0)
    return ScreenSequence(np.ascontiguousarray(frames), seq.delta, seq.fs)


def filters_from_json(blocks: list[dict], fs: float) -> list[FirFilter]:
    """Build a filter chain from design blocks with keys mirroring the design
    tables: ``type`` ("notch" | "bandstop"), ``N_W``, ``f0``, ``fr``, ``r``."""
    out = []
    for blk in blocks:
        kind = blk["type"].replace("-", "").lower()
        if kind == "notch":
            out.append(design_notch(blk["f0"], blk["r"], blk["N_W"], fs))
        elif kind == "bandstop":
            out.append(design_bandstop(blk["r"], blk["N_W"], fs, f0=blk["f0"], fr=blk["fr"]))
        else:
            raise ValueError(f"unknown filter type {blk['type']!r}")
    return out
