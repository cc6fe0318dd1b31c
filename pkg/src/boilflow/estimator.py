"""Estimate boiling-flow parameters (L0, r0, gamma0, v, alpha) from screen data.

The full pipeline (:func:`estimate_all`) mirrors the analysis order used on
measured apertures: crop to the largest inscribed square, remove
piston/tip/tilt, set the outer scale from the aperture extent, invert the
spatial PSD for r0 (optionally fitting the anisotropy gamma0 against the 2D
structure function), then estimate the flow velocity from gated
cross-correlations and the flow coefficient by least squares in Fourier space.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, asdict
from functools import lru_cache

import numpy as np

from .core import (
    ApertureSquare,
    ScreenSequence,
    crop,
    largest_inscribed_square,
    normalize_frames,
    ttp_basis,
    ttp_remove_frames,
)
from .generator import _flow_multiplier
from .metrics import StructureFunction2D, structure_function_2d
from .spectrum import (
    SpectralGrid,
    VonKarmanModel,
    estimate_spatial_psd,
    q_phi,
    v_phi,
    valid_index_set,
)

SNR_BOUND_COEFF = 15.0 * np.sqrt(2.0)
MIN_OVERLAP_FRACTION = 0.25


class EstimationError(RuntimeError):
    """Estimation failed at a labeled pipeline stage."""

    def __init__(self, stage: str, message: str, diagnostics: dict | None = None):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class LagResult:
    """Diagnostics for one cross-correlation time lag."""

    T: int
    v_hat: tuple[float, float]
    peak_corr: float
    snr_bound: float
    snr_ok: bool
    eq10_ok: bool = True

    @property
    def retained(self) -> bool:
        return self.snr_ok and self.eq10_ok


@dataclass(frozen=True)
class VelocityEstimate:
    v_hat: tuple[float, float]
    per_lag: tuple[LagResult, ...]
    t_max_used: int


@dataclass(frozen=True)
class Gamma0Result:
    gamma0_hat: float
    r0_hat: float
    objective: float
    evaluations: tuple[tuple[float, float], ...]  # (log10 gamma0, mse) pairs
    bracket_expanded: int = 0


@dataclass
class EstimationReport:
    """Estimates plus per-stage diagnostics; serialized field names are stable."""

    L0_hat: float
    r0_hat: float
    gamma0_hat: float
    v_hat: tuple[float, float]
    alpha_hat: float
    kmax: int
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["v_hat"] = list(d["v_hat"])
        return d


def snr_bound(n_t: int, t: int) -> float:
    """Minimum usable peak correlation for lag ``t`` out of ``n_t`` frames:
    at this level the correlation estimate's SNR is at least 10 with 5-sigma
    confidence."""
    if not 1 <= t <= n_t - 1:
        raise ValueError("lag must satisfy 1 <= T <= N_T - 1")
    return SNR_BOUND_COEFF / np.sqrt(n_t - t)


def estimate_L0(seq: ScreenSequence, square: ApertureSquare, extent: str = "inscribed") -> float:
    """Outer-scale estimate from the aperture extent in meters.

    ``extent="inscribed"`` returns ``square.side * delta``; ``extent="full"``
    uses the full valid-data width ``max(M, N) * delta``, which is the
    convention behind published measured-data tables.
    """
    if extent == "inscribed":
        return square.side * seq.delta
    if extent == "full":
        return max(seq.frames.shape[1], seq.frames.shape[2]) * seq.delta
    raise ValueError(f"unknown extent {extent!r}")


def estimate_r0_map(psd_meas: np.ndarray, grid: SpectralGrid, L0: float, gamma0: float) -> np.ndarray:
    """Per-bin coherence-length map ``(Q_phi / V_meas)^(3/5)`` on the valid
    index set (NaN elsewhere). Raises on nonpositive measured PSD inside it."""
    if psd_meas.shape != (grid.n, grid.n):
        raise ValueError("psd shape does not match grid")
    sel = valid_index_set(grid)
    if np.any(psd_meas[sel] <= 0):
        raise EstimationError("r0", "measured PSD has nonpositive values inside the index set")
    fy, fx = grid.mesh()
    out = np.full(psd_meas.shape, np.nan)
    out[sel] = (q_phi(fx[sel], fy[sel], L0, gamma0) / psd_meas[sel]) ** 0.6
    return out


def estimate_r0(r0_map: np.ndarray, average: str = "mean") -> float:
    """Average the coherence-length map over the valid index set."""
    vals = r0_map[np.isfinite(r0_map)]
    if vals.size == 0:
        raise EstimationError("r0", "empty index set")
    if average == "mean":
        return float(vals.mean())
    if average == "median":
        return float(np.median(vals))
    raise ValueError(f"unknown average {average!r}")


@lru_cache(maxsize=8)
def _separation_bins(side: int):
    """Flat bin index of the (i1, i2) pixel-pair separation lattice."""
    ii = np.arange(side)
    d = ii[:, None] - ii[None, :] + side - 1  # values in [0, 2*side-2]
    width = 2 * side - 1
    dy = d[:, None, :, None]
    dx = d[None, :, None, :]
    idx = (dy * width + dx).reshape(side * side, side * side)
    return np.ascontiguousarray(idx.ravel()), width


def model_structure_function(
    side: int, delta: float, model: VonKarmanModel, oversample: int = 4
) -> np.ndarray:
    """Normalized 2D structure function the model implies for a TTP-removed
    ``side x side`` crop, computed without Monte Carlo noise.

    This is the expectation of the same quasi-homogeneous estimator the data
    side uses, so the two are directly comparable: the spectrum is sampled on
    the oversampled generation lattice, inverse-transformed to the spatial
    covariance, conjugated with the TTP projection, scaled to unit average
    pixel variance, and pair-averaged as ``2 (1 - mean correlation)`` onto the
    separation lattice (shape ``(2*side-1, 2*side-1)``).
    """
    n_big = oversample * side
    delta_f = 1.0 / (n_big * delta)
    k = np.fft.fftfreq(n_big) * n_big
    f = k * delta_f
    fy, fx = np.meshgrid(f, f, indexing="ij")
    p = delta_f**2 * v_phi(fx, fy, model)
    p[0, 0] = 0.0  # generation zeroes the DC bin
    cov = np.fft.ifft2(p).real * (n_big * n_big)

    ii = np.arange(side)
    dd = (ii[:, None] - ii[None, :]) % n_big
    c = cov[dd[:, None, :, None], dd[None, :, None, :]].reshape(side * side, side * side)

    u = _crop_basis(side).modes.reshape(3, -1).T  # (P, 3) orthonormal TTP modes
    a = u.T @ c  # (3, P)
    auu = a @ u  # (3, 3)
    c -= u @ a
    c -= a.T @ u.T
    c += u @ auu @ u.T
    c /= np.mean(np.diag(c))

    idx, width = _separation_bins(side)
    sums = np.bincount(idx, weights=c.ravel(), minlength=width * width)
    counts = np.bincount(idx, minlength=width * width)
    d = 2.0 * (1.0 - sums / counts).reshape(width, width)
    d[side - 1, side - 1] = 0.0
    return d


@lru_cache(maxsize=8)
def _crop_basis(side: int):
    return ttp_basis(np.ones((side, side), dtype=bool))


def _golden_min(f, lo: float, hi: float, tol: float):
    """Golden-section minimum of ``f`` on [lo, hi] to absolute tolerance
    ``tol``; returns (x_min, f_min, [(x, f(x)), ...])."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    evals = []

    def ev(x):
        y = f(x)
        evals.append((x, y))
        return y

    a, b = lo, hi
    fa, fb = ev(a), ev(b)
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = ev(c), ev(d)
    while b - a > tol:
        if fc < fd:
            b, fb = d, fd
            d, fd = c, fc
            c = b - invphi * (b - a)
            fc = ev(c)
        else:
            a, fa = c, fc
            c, fc = d, fd
            d = a + invphi * (b - a)
            fd = ev(d)
    pts = [(a, fa), (c, fc), (d, fd), (b, fb)]
    x, y = min(pts, key=lambda p: p[1])
    return x, y, evals


def estimate_gamma0(
    seq: ScreenSequence,
    grid: SpectralGrid,
    L0: float,
    oversample: int = 4,
    log10_bracket: tuple[float, float] = (-2.0, 2.0),
    tol: float = 1e-3,
    average: str = "mean",
) -> Gamma0Result:
    """Fit the anisotropy parameter by matching 2D structure functions.

    ``seq`` must already be cropped square and TTP-removed. For each candidate
    gamma0 the coherence length is re-estimated from the PSD, the model
    structure function is computed deterministically, and gamma0 minimizes the
    mean-squared error against the data's structure function. The search is
    golden-section over log10(gamma0) on ``log10_bracket``, expanding a
    bracket end (with a diagnostic flag) if the minimum lands on it.
    """
    side = seq.frames.shape[1]
    psd = estimate_spatial_psd(seq)
    data_sf = structure_function_2d(
        ScreenSequence(normalize_frames(seq.frames), seq.delta, seq.fs)
    )
    sel = data_sf.counts > 0

    cache: dict[float, tuple[float, float]] = {}

    def objective(log_g: float) -> float:
        g = 10.0**log_g
        r0 = estimate_r0(estimate_r0_map(psd, grid, L0, g), average=average)
        model_d = model_structure_function(side, seq.delta, VonKarmanModel(L0, r0, g), oversample)
        mse = float(np.mean((model_d[sel] - data_sf.values[sel]) ** 2))
        cache[log_g] = (r0, mse)
        return mse

    lo, hi = log10_bracket
    expanded = 0
    while True:
        x, y, evals = _golden_min(objective, lo, hi, tol)
        at_lo = x - lo < 2 * tol
        at_hi = hi - x < 2 * tol
        if not (at_lo or at_hi) or expanded >= 2:
            break
        if at_lo:
            lo -= 2.0
        else:
            hi += 2.0
        expanded += 1

    interior = [fy for (fx, fy) in evals if lo + tol < fx < hi - tol]
    if interior and evals[0][1] < min(interior) and evals[1][1] < min(interior):
        warnings.warn("gamma0 objective is lower at both bracket ends than inside; "
                      "the landscape may not be unimodal", stacklevel=2)

    r0_hat = cache[x][0]
    return Gamma0Result(10.0**x, r0_hat, y, tuple(sorted(evals)), expanded)


def _gather_offset(arr: np.ndarray, oy: int, ox: int) -> np.ndarray:
    """``out[..., y, x] = arr[..., y + oy, x + ox]`` with zero fill outside."""
    m, n = arr.shape[-2:]
    out = np.zeros_like(arr)
    ys = slice(max(0, -oy), min(m, m - oy))
    xs = slice(max(0, -ox), min(n, n - ox))
    if ys.start < ys.stop and xs.start < xs.stop:
        out[..., ys, xs] = arr[..., ys.start + oy : ys.stop + oy, xs.start + ox : xs.stop + ox]
    return out


def _bilinear_shift(frames: np.ndarray, mask: np.ndarray, shift: tuple[float, float]):
    """Sample ``frames`` at positions displaced by ``-shift``, i.e. return
    ``frame(i - shift)``, with bilinear interpolation.

    Returns (values, valid) where ``valid`` marks output pixels whose source
    neighbors are all inside the aperture.
    """
    sy, sx = shift
    oy = int(np.floor(-sy))
    ox = int(np.floor(-sx))
    fy = float(-sy - oy)
    fx = float(-sx - ox)
    filled = np.where(mask, frames, 0.0)
    maskf = mask.astype(np.float64)

    vals = (1 - fy) * (1 - fx) * _gather_offset(filled, oy, ox)
    cover = (1 - fy) * (1 - fx) * _gather_offset(maskf, oy, ox)
    if fy > 0:
        vals += fy * (1 - fx) * _gather_offset(filled, oy + 1, ox)
        cover += fy * (1 - fx) * _gather_offset(maskf, oy + 1, ox)
    if fx > 0:
        vals += (1 - fy) * fx * _gather_offset(filled, oy, ox + 1)
        cover += (1 - fy) * fx * _gather_offset(maskf, oy, ox + 1)
    if fy > 0 and fx > 0:
        vals += fy * fx * _gather_offset(filled, oy + 1, ox + 1)
        cover += fy * fx * _gather_offset(maskf, oy + 1, ox + 1)
    valid = cover > 1.0 - 1e-12  # every contributing neighbor valid and inside
    return vals, valid


def cross_correlation(seq_norm: ScreenSequence, v: tuple[float, float], T: int) -> float:
    """Average masked correlation between frames ``n`` and frames ``n - T``
    shifted by ``T v`` (bilinear interpolation for fractional shifts), with
    overlap-count normalization.

    Raises if the shift leaves less than 25% of the aperture overlapping.
    """
    n_t = seq_norm.n_frames
    if not 1 <= T <= n_t - 1:
        raise ValueError("lag must satisfy 1 <= T <= N_T - 1")
    shift = (T * v[1], T * v[0])  # (row, col) displacement from (vx, vy)
    shifted, valid = _bilinear_shift(seq_norm.frames[: n_t - T], seq_norm.mask, shift)
    valid = valid & seq_norm.mask
    count = int(valid.sum())
    if count < MIN_OVERLAP_FRACTION * seq_norm.mask.sum():
        raise ValueError(
            f"shift {shift} overlaps only {count} pixels "
            f"(< 25% of the {int(seq_norm.mask.sum())}-pixel aperture)"
        )
    later = np.where(seq_norm.mask, seq_norm.frames[T:], 0.0)
    prod = shifted * valid * later
    return float(prod.sum(axis=(1, 2)).mean() / count)


def _lag_counts(mask: np.ndarray, pm: int, pn: int) -> np.ndarray:
    spec = np.fft.rfft2(mask.astype(np.float64), s=(pm, pn))
    return np.rint(np.fft.irfft2(spec.real**2 + spec.imag**2, s=(pm, pn))).astype(np.int64)


def estimate_velocity(
    seq_norm: ScreenSequence,
    max_lag: int | None = None,
    average: str = "mean",
) -> VelocityEstimate:
    """Flow-velocity estimate from gated per-lag correlation peaks.

    Per lag ``T``: an integer-shift search of the overlap-normalized
    cross-correlation over shifts up to ``side - 1`` per axis (and at least
    25% aperture overlap), followed by 3-point parabolic sub-pixel refinement
    per axis; ``v_hat(T)`` is the refined peak divided by ``T``. Lags are
    retained when ``T`` respects the aperture-crossing cap
    ``floor((side-1)/max ||v_hat||)`` and the peak correlation meets the SNR
    bound ``15 sqrt(2) / sqrt(N_T - T)``; the final estimate averages the
    retained lags.
    """
    n_t, m, n = seq_norm.frames.shape
    if n_t < 3:
        raise EstimationError("velocity", f"need at least 3 frames, got {n_t}")
    side = min(m, n)
    pm, pn = 2 * m, 2 * n
    filled = np.where(seq_norm.mask, seq_norm.frames, 0.0)

    spectra = np.empty((n_t, pm, pn // 2 + 1), dtype=np.complex64)
    block = 256
    for i in range(0, n_t, block):
        spectra[i : i + block] = np.fft.rfft2(filled[i : i + block], s=(pm, pn))

    counts = np.fft.fftshift(_lag_counts(seq_norm.mask, pm, pn))[1:, 1:]
    sy_ax = np.arange(-(m - 1), m)
    sx_ax = np.arange(-(n - 1), n)
    admissible = (
        (counts >= MIN_OVERLAP_FRACTION * seq_norm.mask.sum())
        & (np.abs(sy_ax)[:, None] <= side - 1)
        & (np.abs(sx_ax)[None, :] <= side - 1)
    )
    if not admissible.any():
        raise EstimationError("velocity", "no admissible shifts for this aperture")

    def lag_surface(t: int) -> np.ndarray:
        acc = np.zeros((pm, pn // 2 + 1), dtype=np.complex128)
        for i in range(t, n_t, block):
            a = spectra[i - t : min(i + block, n_t) - t]
            b = spectra[i : i + block]
            acc += (np.conj(a) * b).sum(axis=0)
        corr = np.fft.irfft2(acc, s=(pm, pn)) / (n_t - t)
        surf = np.fft.fftshift(corr)[1:, 1:]
        with np.errstate(invalid="ignore", divide="ignore"):
            surf = surf / counts
        return np.where(admissible, surf, -np.inf)

    def refine(surf: np.ndarray, iy: int, ix: int) -> tuple[float, float]:
        def axis_offset(vm, v0, vp):
            if not (np.isfinite(vm) and np.isfinite(vp)):
                return 0.0
            denom = vm - 2.0 * v0 + vp
            if denom >= 0:
                return 0.0  # no downward curvature, keep the integer peak
            off = 0.5 * (vm - vp) / denom
            return float(np.clip(off, -0.5, 0.5))

        dy = 0.0 if iy in (0, surf.shape[0] - 1) else axis_offset(
            surf[iy - 1, ix], surf[iy, ix], surf[iy + 1, ix]
        )
        dx = 0.0 if ix in (0, surf.shape[1] - 1) else axis_offset(
            surf[iy, ix - 1], surf[iy, ix], surf[iy, ix + 1]
        )
        return dy, dx

    hard_cap = n_t - 1 if max_lag is None else min(max_lag, n_t - 1)
    lags: list[LagResult] = []
    v_mag_max = 0.0
    running_cap = hard_cap
    consecutive_failures = 0
    t = 1
    while t <= running_cap:
        surf = lag_surface(t)
        iy, ix = np.unravel_index(np.argmax(surf), surf.shape)
        peak = float(surf[iy, ix])
        dy, dx = refine(surf, iy, ix)
        v_t = (float(sx_ax[ix] + dx) / t, float(sy_ax[iy] + dy) / t)
        bound = float(snr_bound(n_t, t))
        ok = bool(peak >= bound)
        lags.append(LagResult(t, v_t, peak, bound, ok))
        v_mag_max = max(v_mag_max, float(np.hypot(*v_t)))
        if v_mag_max > 0:
            running_cap = min(running_cap, int((side - 1) / v_mag_max))
        consecutive_failures = 0 if ok else consecutive_failures + 1
        if consecutive_failures >= 2:
            break
        t += 1

    eq10_cap = int((side - 1) / v_mag_max) if v_mag_max > 0 else n_t - 1
    lags = [
        LagResult(r.T, r.v_hat, r.peak_corr, r.snr_bound, r.snr_ok, r.T <= eq10_cap)
        for r in lags
    ]
    retained = [r for r in lags if r.retained]
    if not retained:
        raise EstimationError(
            "velocity",
            "no lag passes both the SNR bound and the aperture-crossing cap",
            {"per_lag": [asdict(r) for r in lags]},
        )
    vs = np.array([r.v_hat for r in retained])
    if average == "mean":
        v_hat = vs.mean(axis=0)
    elif average == "median":
        v_hat = np.median(vs, axis=0)
    else:
        raise ValueError(f"unknown average {average!r}")
    return VelocityEstimate(
        (float(v_hat[0]), float(v_hat[1])), tuple(lags), max(r.T for r in retained)
    )


def estimate_alpha(
    seq: ScreenSequence, v_hat: tuple[float, float], grid: SpectralGrid
) -> tuple[float, dict]:
    """Least-squares flow coefficient in Fourier space.

    Builds the one-step flow prediction from each frame (translate by
    ``v_hat``, remove TTP in the image domain, re-enforce conjugate symmetry)
    and projects the actual next frame onto it over the valid index set:
    ``alpha = sum Re<phi_n, F_n> / sum ||F_n||^2``. The raw value is clamped
    to [0, 1]; diagnostics carry the raw value and a clamp flag.
    """
    n_t, m, n = seq.frames.shape
    if m != n or m != grid.n:
        raise ValueError("sequence must be square and match the spectral grid")
    if n_t < 2:
        raise EstimationError("alpha", "need at least 2 frames")
    if not seq.mask.all():
        raise ValueError("sequence must be fully valid; crop to the aperture square first")
    mult = _flow_multiplier(n, float(v_hat[0]), float(v_hat[1]))
    basis = _crop_basis(n)
    sel = np.fft.ifftshift(valid_index_set(grid))
    num = 0.0
    den = 0.0
    block = 256
    for i in range(1, n_t, block):
        hi = min(i + block, n_t)
        prev = np.fft.fft2(seq.frames[i - 1 : hi - 1], axes=(-2, -1))
        cur = np.fft.fft2(seq.frames[i:hi], axes=(-2, -1))
        pred = np.fft.ifft2(mult * prev, axes=(-2, -1)).real
        pred = ttp_remove_frames(pred, basis)
        pred_f = np.fft.fft2(pred, axes=(-2, -1))
        num += float(np.sum((np.conj(pred_f[:, sel]) * cur[:, sel]).real))
        den += float(np.sum(pred_f[:, sel].real ** 2 + pred_f[:, sel].imag ** 2))
    if den == 0.0:
        raise EstimationError("alpha", "flow prediction has zero energy on the index set")
    raw = num / den
    clamped = min(1.0, max(0.0, raw))
    return clamped, {"raw": raw, "clamped": clamped != raw}


def estimate_all(
    seq: ScreenSequence,
    anisotropic: bool = False,
    kmax: int = 2,
    aperture_extent: str = "full",
    max_lag: int | None = None,
    average: str = "mean",
    oversample: int = 4,
) -> EstimationReport:
    """Run the full estimation pipeline and collect diagnostics.

    Stages: inscribed-square crop, TTP removal, outer scale from the aperture
    extent, (gamma0, r0) from the spatial PSD (gamma0 fixed to 1 unless
    ``anisotropic``), velocity from normalized frames, then alpha.
    """
    diagnostics: dict = {}
    try:
        square = largest_inscribed_square(seq.mask)
    except Exception as e:  # noqa: BLE001
        raise EstimationError("aperture", str(e)) from e
    cropped = crop(seq, square)
    basis = _crop_basis(square.side)
    work = ScreenSequence(ttp_remove_frames(cropped.frames, basis), seq.delta, seq.fs)
    diagnostics["aperture"] = {
        "origin": list(square.origin),
        "side": square.side,
        "extent": aperture_extent,
        "L0_inscribed": estimate_L0(seq, square, "inscribed"),
        "L0_full": estimate_L0(seq, square, "full"),
    }
    L0 = estimate_L0(seq, square, aperture_extent)
    grid = SpectralGrid.for_screen(square.side, seq.delta, kmax)

    try:
        if anisotropic:
            fit = estimate_gamma0(work, grid, L0, oversample=oversample, average=average)
            gamma0_hat, r0_hat = fit.gamma0_hat, fit.r0_hat
            diagnostics["gamma0"] = {
                "objective": fit.objective,
                "n_evaluations": len(fit.evaluations),
                "bracket_expanded": fit.bracket_expanded,
                "evaluations": [list(e) for e in fit.evaluations],
            }
        else:
            gamma0_hat = 1.0
            psd = estimate_spatial_psd(work)
            r0_hat = estimate_r0(estimate_r0_map(psd, grid, L0, gamma0_hat), average=average)
    except EstimationError:
        raise
    except Exception as e:  # noqa: BLE001
        raise EstimationError("r0", str(e)) from e

    seq_norm = ScreenSequence(normalize_frames(work.frames), seq.delta, seq.fs)
    vel = estimate_velocity(seq_norm, max_lag=max_lag, average=average)
    diagnostics["velocity"] = {
        "t_max_used": vel.t_max_used,
        "per_lag": [asdict(r) | {"retained": r.retained} for r in vel.per_lag],
    }

    alpha_hat, alpha_diag = estimate_alpha(work, vel.v_hat, grid)
    diagnostics["alpha"] = alpha_diag

    return EstimationReport(
        L0_hat=L0,
        r0_hat=r0_hat,
        gamma0_hat=gamma0_hat,
        v_hat=vel.v_hat,
        alpha_hat=alpha_hat,
        kmax=kmax,
        diagnostics=diagnostics,
    )
