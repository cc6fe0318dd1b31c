"""Quality metrics: temporal power spectra, 2D structure functions, NRMSE,
and Strouhal-scaled pre-multiplied spectra."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.signal

from .core import DegenerateInputError, ScreenSequence, normalize_frames


@dataclass(frozen=True)
class TemporalSpectrum:
    """One-sided Welch spectrum averaged over aperture pixels.

    ``power`` is a spectral density (units of signal^2 per Hz, i.e. energy per
    second for phase in radians); ``kind`` tags plain phase spectra vs spectra
    of the x finite difference (deflection angle).
    """

    freqs: np.ndarray
    power: np.ndarray
    kind: str = "phase"

    def __post_init__(self):
        if np.any(np.diff(self.freqs) <= 0):
            raise ValueError("freqs must be strictly increasing")
        if np.any(self.power < 0):
            raise ValueError("power must be nonnegative")


@dataclass(frozen=True)
class StructureFunction2D:
    """Structure function on the integer-pixel separation lattice.

    ``values[iy, ix]`` is the estimate at separation
    ``(ry, rx) = (iy - (M-1), ix - (N-1))`` pixels; ``counts`` holds the
    per-separation contributing spatial pair count (zero where no pair
    exists, value NaN there).
    """

    values: np.ndarray
    counts: np.ndarray

    @property
    def ry_axis(self) -> np.ndarray:
        m = (self.values.shape[0] + 1) // 2
        return np.arange(-(m - 1), m)

    @property
    def rx_axis(self) -> np.ndarray:
        n = (self.values.shape[1] + 1) // 2
        return np.arange(-(n - 1), n)

    def value_at(self, ry: int, rx: int) -> float:
        iy = ry + (self.values.shape[0] - 1) // 2
        ix = rx + (self.values.shape[1] - 1) // 2
        if not (0 <= iy < self.values.shape[0] and 0 <= ix < self.values.shape[1]):
            raise IndexError(f"separation ({ry}, {rx}) outside lattice")
        if self.counts[iy, ix] == 0:
            raise DegenerateInputError(f"no contributing pairs at separation ({ry}, {rx})")
        return float(self.values[iy, ix])


def default_nperseg(n_samples: int) -> int:
    return min(1024, n_samples // 8)


def temporal_psd(pixel_series: np.ndarray, fs: float, nperseg: int | None = None) -> TemporalSpectrum:
    """Welch spectrum of per-pixel time series, averaged over valid pixels.

    Hamming-windowed segments with 50% overlap and window-power normalization;
    one-sided density scaled by 1/fs so a unit-variance white series sits at
    2/fs away from the band edges.
    """
    x = np.asarray(pixel_series, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    x = x.reshape(x.shape[0], -1)
    if nperseg is None:
        nperseg = default_nperseg(x.shape[0])
    if nperseg < 2 or x.shape[0] < nperseg:
        raise ValueError(f"series of length {x.shape[0]} is shorter than one segment ({nperseg})")
    valid = ~np.isnan(x).any(axis=0)
    if not valid.any():
        raise DegenerateInputError("no valid pixel series")
    freqs, pxx = scipy.signal.welch(
        x[:, valid],
        fs=fs,
        window="hamming",
        nperseg=nperseg,
        noverlap=nperseg // 2,
        detrend=False,
        scaling="density",
        axis=0,
    )
    return TemporalSpectrum(freqs, pxx.mean(axis=1))


def phase_tps(seq: ScreenSequence, nperseg: int | None = None) -> TemporalSpectrum:
    """Temporal power spectrum of the phase screens themselves."""
    n_t = seq.n_frames
    return temporal_psd(seq.frames.reshape(n_t, -1), seq.fs, nperseg)


def flow_tps(seq: ScreenSequence, fs: float | None = None, nperseg: int | None = None) -> TemporalSpectrum:
    """Temporal power spectrum of the x finite difference (deflection angle).

    Forward difference over one pixel divided by the pitch, dropping the last
    column; pixels whose difference involves a masked neighbor are excluded.
    """
    if seq.frames.shape[2] < 2:
        raise ValueError("need at least 2 columns for an x finite difference")
    theta = (seq.frames[:, :, 1:] - seq.frames[:, :, :-1]) / seq.delta
    spec = temporal_psd(theta.reshape(seq.n_frames, -1), seq.fs if fs is None else fs, nperseg)
    return TemporalSpectrum(spec.freqs, spec.power, kind="flow")


def structure_function_2d(seq_norm: ScreenSequence) -> StructureFunction2D:
    """Quasi-homogeneous 2D structure function of normalized screens.

    ``D(r) = 2 (1 - mean correlation over all ordered pixel pairs separated by
    +-r)``, the correlation time-averaged over frames. Computed with padded
    FFT autocorrelations, which is algebraically the pair sum; the output is
    explicitly symmetrized so ``D(r) == D(-r)`` bin for bin.
    """
    if seq_norm.n_frames < 2:
        raise ValueError("need >= 2 frames to time-average the correlation")
    n_t, m, n = seq_norm.frames.shape
    pm, pn = 2 * m, 2 * n
    filled = np.where(seq_norm.mask, seq_norm.frames, 0.0)
    acc = np.zeros((pm, pn // 2 + 1), dtype=np.float64)
    block = 512
    for i in range(0, n_t, block):
        spec = np.fft.rfft2(filled[i : i + block], s=(pm, pn))
        acc += np.sum(spec.real**2 + spec.imag**2, axis=0)
    corr = np.fft.irfft2(acc, s=(pm, pn))
    mspec = np.fft.rfft2(seq_norm.mask.astype(np.float64), s=(pm, pn))
    counts = np.rint(np.fft.irfft2(mspec.real**2 + mspec.imag**2, s=(pm, pn))).astype(np.int64)

    # fold the cyclic lag arrays onto the signed separation lattice
    corr = np.fft.fftshift(corr)[1:, 1:]
    counts = np.fft.fftshift(counts)[1:, 1:]
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = corr / (n_t * counts)
    d = 2.0 * (1.0 - rho)
    d = 0.5 * (d + d[::-1, ::-1])  # exact +-r symmetry
    counts = counts + counts[::-1, ::-1]
    d[counts == 0] = np.nan
    d[m - 1, n - 1] = 0.0  # r = 0 is exactly zero for population-normalized frames
    return StructureFunction2D(d, counts)


def kolmogorov_slope_check(sf: StructureFunction2D, fit_range: tuple[float, float]) -> float:
    """Log-log slope of the azimuthally averaged structure function.

    Lattice points are grouped by exact separation radius (distinct values of
    ``rx^2 + ry^2``); groups are count-weighted means. Least-squares fit of
    ``log D`` against ``log ||r||`` over radii inside ``fit_range``.
    """
    r_lo, r_hi = fit_range
    ry = sf.ry_axis[:, None]
    rx = sf.rx_axis[None, :]
    r2 = ry * ry + rx * rx
    ok = (sf.counts > 0) & np.isfinite(sf.values) & (r2 > 0)
    ok &= (r2 >= r_lo**2) & (r2 <= r_hi**2)
    if not ok.any():
        raise ValueError("no lattice points in fit range")
    groups = np.unique(r2[ok])
    if groups.size < 3:
        raise ValueError(f"need >= 3 distinct radii in range, found {groups.size}")
    radii = np.sqrt(groups.astype(np.float64))
    means = np.empty(groups.size)
    for i, g in enumerate(groups):
        sel = ok & (r2 == g)
        w = sf.counts[sel].astype(np.float64)
        means[i] = np.sum(w * sf.values[sel]) / np.sum(w)
    if np.any(means <= 0):
        raise DegenerateInputError("nonpositive structure function values in fit range")
    slope = np.polyfit(np.log(radii), np.log(means), 1)[0]
    return float(slope)


def nrmse(y, y_data) -> float:
    """Root-mean-square error normalized by the 5th-to-95th percentile range
    of the reference, with linear percentile interpolation."""
    y = np.asarray(y, dtype=np.float64).ravel()
    y_data = np.asarray(y_data, dtype=np.float64).ravel()
    if y.shape != y_data.shape:
        raise ValueError(f"length mismatch: {y.size} vs {y_data.size}")
    if y.size < 2:
        raise ValueError("need at least 2 samples")
    p5, p95 = np.percentile(y_data, [5.0, 95.0])
    if not p95 > p5:
        raise DegenerateInputError("degenerate percentile range in reference data")
    return float(np.sqrt(np.mean((y - y_data) ** 2)) / (p95 - p5))


def convective_velocity(v_x: float, delta: float, fs: float) -> float:
    """Convective speed in m/s from a pixel-per-step flow estimate."""
    return v_x * delta * fs


def strouhal_premultiplied(tps: TemporalSpectrum, delta_star: float, u_c: float):
    """Strouhal-number axis ``St = f delta* / U_c`` and the pre-multiplied
    spectrum ``St * S(f)``."""
    if not (delta_star > 0 and u_c > 0):
        raise ValueError("delta_star and u_c must be positive")
    st = tps.freqs * delta_star / u_c
    return st, st * tps.power


def sequence_errors(reference: ScreenSequence, candidate: ScreenSequence) -> dict:
    """Flow-TPS, phase-TPS and structure-function NRMSE between two sequences.

    Both inputs are cropped to their largest inscribed squares (sides must
    match, as must pitch and rate) and TTP-removed, spectra share a common
    Welch segment length, and the structure-function error is taken on
    ``sqrt(D)`` to weight small and large separations evenly. Returns the
    three errors plus the underlying spectra and structure functions.
    """
    from .core import largest_inscribed_square, crop, ttp_basis, ttp_remove_frames

    if reference.delta != candidate.delta or reference.fs != candidate.fs:
        raise ValueError("sequences have mismatched pitch or sampling rate")
    crops = []
    for seq in (reference, candidate):
        sq = largest_inscribed_square(seq.mask)
        c = crop(seq, sq)
        basis = ttp_basis(np.ones((sq.side, sq.side), dtype=bool))
        crops.append(ScreenSequence(ttp_remove_frames(c.frames, basis), seq.delta, seq.fs))
    ref, cand = crops
    if ref.shape != cand.shape:
        raise ValueError(f"aperture squares differ: {ref.shape} vs {cand.shape}")
    nperseg = min(default_nperseg(ref.n_frames), default_nperseg(cand.n_frames))
    out = {}
    spectra = {}
    for name, fn in (("phase_tps", phase_tps), ("flow_tps", flow_tps)):
        s_ref = fn(ref, nperseg=nperseg)
        s_cand = fn(cand, nperseg=nperseg)
        out[f"{name}_nrmse"] = nrmse(s_cand.power, s_ref.power)
        spectra[f"{name}_reference"] = s_ref
        spectra[f"{name}_candidate"] = s_cand
    sf_ref = structure_function_2d(
        ScreenSequence(normalize_frames(ref.frames), ref.delta, ref.fs)
    )
    sf_cand = structure_function_2d(
        ScreenSequence(normalize_frames(cand.frames), cand.delta, cand.fs)
    )
    sel = (sf_ref.counts > 0) & (sf_cand.counts > 0)
    out["structure_function_nrmse"] = nrmse(
        np.sqrt(np.clip(sf_cand.values[sel], 0, None)),
        np.sqrt(np.clip(sf_ref.values[sel], 0, None)),
    )
    spectra["sf_reference"] = sf_ref
    spectra["sf_candidate"] = sf_cand
    return out | {"artifacts": spectra}


def tps_to_csv(path, tps: TemporalSpectrum) -> None:
    rows = np.column_stack([tps.freqs, tps.power])
    np.savetxt(path, rows, delimiter=",", header="f_hz,power", comments="", fmt="%.10g")


def sf_to_csv(path, sf: StructureFunction2D) -> None:
    ry, rx = np.meshgrid(sf.ry_axis, sf.rx_axis, indexing="ij")
    keep = sf.counts.ravel() > 0
    rows = np.column_stack(
        [rx.ravel()[keep], ry.ravel()[keep], sf.values.ravel()[keep], sf.counts.ravel()[keep]]
    )
    np.savetxt(path, rows, delimiter=",", header="rx_px,ry_px,value,count", comments="", fmt="%.10g")


def strouhal_to_csv(path, st: np.ndarray, st_s: np.ndarray) -> None:
    np.savetxt(
        path,
        np.column_stack([st, st_s]),
        delimiter=",",
        header="st,st_times_s",
        comments="",
        fmt="%.10g",
    )
