"""Boiling-flow recursion: synthesize phase screen sequences in Fourier space.

Each step draws a fresh "boiling" screen with the Von Karman spectrum and
combines it with a convected ("flow") copy of the previous screen through the
energy-preserving weights ``sqrt(1 - alpha^2)`` and ``alpha``. Screens are
generated on an oversampled lattice (same pixel pitch, ``oversample`` times
the extent) to push the circular-FFT wrap correlation away from the output
window; each output frame is the first ``n_out x n_out`` block of the inverse
transform with piston/tip/tilt removed.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft

from .core import ScreenSequence, ttp_basis, ttp_remove_frames
from .spectrum import SpectralGrid, VonKarmanModel, v_phi

_MAX_OUTPUT_BYTES = 8 << 30  # refuse absurd frame_count x grid_size requests


@dataclass(frozen=True)
class BoilingFlowParams:
    """Full parameter set of the recursion.

    ``v`` is the flow velocity in output-grid pixels per time step (the
    oversampled lattice shares the pixel pitch, so the shift per step is the
    same number of pixels there). ``delta`` is meters/pixel and ``fs`` the
    frame rate in Hz; both are carried into the output sequence.
    """

    model: VonKarmanModel
    v: tuple[float, float]
    alpha: float
    n_out: int
    delta: float
    fs: float
    oversample: int = 4

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.n_out < 2:
            raise ValueError("n_out must be >= 2")
        if self.oversample < 1:
            raise ValueError("oversample must be >= 1")
        if not (self.delta > 0 and self.fs > 0):
            raise ValueError("delta and fs must be positive")
        object.__setattr__(self, "v", (float(self.v[0]), float(self.v[1])))

    @property
    def n_grid(self) -> int:
        return self.oversample * self.n_out

    def spectral_grid(self, kmax: int = 2) -> SpectralGrid:
        """Grid of the oversampled generation lattice."""
        return SpectralGrid.for_screen(self.n_grid, self.delta, kmax)


@dataclass(frozen=True)
class GeneratorState:
    """Recursion state: Fourier-domain screen (FFT index order), the root seed
    whose per-step children drive the noise, and the step index."""

    phi_tilde: np.ndarray
    seed: int
    step: int


def _step_rng(seed: int, step: int) -> np.random.Generator:
    # one child stream per step: frame i is reproducible on its own
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(step,))))


def _hermitize(c: np.ndarray) -> np.ndarray:
    """Average ``c`` with its reflected conjugate so the inverse transform is
    exactly real; self-conjugate bins become their real parts."""
    mirror = np.roll(c[::-1, ::-1], (1, 1), axis=(0, 1))
    return 0.5 * (c + np.conj(mirror))


@lru_cache(maxsize=16)
def _boiling_amplitude(n: int, delta_f: float, L0: float, r0: float, gamma0: float) -> np.ndarray:
    """``Delta_f * sqrt(V_phi)`` on the FFT-order lattice, DC zeroed."""
    k = np.fft.fftfreq(n) * n
    f = k * delta_f
    fy, fx = np.meshgrid(f, f, indexing="ij")
    amp = delta_f * np.sqrt(v_phi(fx, fy, VonKarmanModel(L0, r0, gamma0)))
    amp[0, 0] = 0.0
    amp.flags.writeable = False
    return amp


@lru_cache(maxsize=16)
def _flow_multiplier(n: int, vx: float, vy: float) -> np.ndarray:
    """Per-bin phase factor translating a screen by ``(vx, vy)`` pixels."""
    k = np.fft.fftfreq(n) * n
    ky, kx = np.meshgrid(k, k, indexing="ij")
    mult = np.exp(-2j * np.pi * (vx * kx + vy * ky) / n)
    mult.flags.writeable = False
    return mult


def _raw_boiling(amp: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal((*amp.shape, 2))
    return amp * (noise[..., 0] + 1j * noise[..., 1])


def boiling_step(grid: SpectralGrid, model: VonKarmanModel, rng: np.random.Generator) -> np.ndarray:
    """Draw one boiling screen in Fourier space (FFT index order).

    Returns ``Delta_f * sqrt(V_phi(k Delta_f))`` times complex white noise of
    unit variance per component, conjugate-symmetrized by Hermitian-pair
    averaging (self-conjugate bins end up real with their variance preserved)
    and with the zero-frequency bin set to 0.
    """
    amp = _boiling_amplitude(grid.n, grid.delta_f, model.L0, model.r0, model.gamma0)
    return _hermitize(_raw_boiling(amp, rng))


def flow_step(phi_tilde: np.ndarray, v: tuple[float, float], n_grid: int) -> np.ndarray:
    """Translate a Fourier-domain screen by ``v`` pixels: multiply each bin by
    ``exp(-j v . 2 pi k / n_grid)``. Exact circular shift for integer ``v``;
    per-bin magnitude is preserved."""
    if phi_tilde.shape != (n_grid, n_grid):
        raise ValueError(f"phi_tilde must be {n_grid}x{n_grid}, got {phi_tilde.shape}")
    return phi_tilde * _flow_multiplier(n_grid, float(v[0]), float(v[1]))


def _advance(phi_prev: np.ndarray, raw: np.ndarray, alpha: float, mult: np.ndarray) -> np.ndarray:
    # Hermitian-pair averaging commutes with the linear combination, so one
    # pass both symmetrizes the fresh draw and repairs the Nyquist row/column
    # that a fractional-pixel flow multiplier leaves unpaired.
    z = np.sqrt(1.0 - alpha**2) * raw
    z += alpha * (mult * phi_prev)
    return _hermitize(z)


def initial_state(params: BoilingFlowParams, seed: int) -> GeneratorState:
    """State at step 0: a pure boiling draw."""
    grid = params.spectral_grid()
    phi0 = boiling_step(grid, params.model, _step_rng(seed, 0))
    return GeneratorState(phi0, int(seed), 0)


def boiling_flow_step(state: GeneratorState, params: BoilingFlowParams) -> GeneratorState:
    """Advance the recursion one step:
    ``phi_n = sqrt(1 - alpha^2) B_n + alpha Flow(phi_{n-1})``.

    The boiling draw is taken even for ``alpha == 1`` so equal-seed runs with
    different ``alpha`` share their noise stream.
    """
    n = params.n_grid
    if state.phi_tilde.shape != (n, n):
        raise ValueError("state does not match params grid size")
    m = params.model
    amp = _boiling_amplitude(n, params.spectral_grid().delta_f, m.L0, m.r0, m.gamma0)
    raw = _raw_boiling(amp, _step_rng(state.seed, state.step + 1))
    mult = _flow_multiplier(n, *params.v)
    phi = _advance(state.phi_tilde, raw, params.alpha, mult)
    return GeneratorState(phi, state.seed, state.step + 1)


@lru_cache(maxsize=8)
def _output_basis(n_out: int):
    return ttp_basis(np.ones((n_out, n_out), dtype=bool))


def generate_sequence(
    params: BoilingFlowParams, n_frames: int, seed: int, block: int = 64
) -> ScreenSequence:
    """Run the recursion for ``n_frames`` steps and return the output sequence.

    Per frame: inverse FFT of the state, real part, crop to the first
    ``n_out x n_out`` indices, remove piston/tip/tilt. Deterministic given
    ``seed`` (per-step noise streams are derived from it by index).
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    n_out = params.n_out
    if n_frames * n_out * n_out * 8 > _MAX_OUTPUT_BYTES:
        raise ValueError(
            f"refusing to allocate {n_frames} frames of {n_out}x{n_out}: "
            f"over the {_MAX_OUTPUT_BYTES >> 30} GiB output guard"
        )
    n = params.n_grid
    m = params.model
    grid = params.spectral_grid()
    amp = _boiling_amplitude(n, grid.delta_f, m.L0, m.r0, m.gamma0)
    mult = _flow_multiplier(n, *params.v)
    basis = _output_basis(n_out)

    frames = np.empty((n_frames, n_out, n_out), dtype=np.float64)
    states = np.empty((min(block, n_frames), n, n), dtype=np.complex128)
    phi = None
    filled = 0
    lo = 0
    for i in range(n_frames):
        raw = _raw_boiling(amp, _step_rng(seed, i))
        if i == 0:
            phi = _hermitize(raw)
        else:
            phi = _advance(phi, raw, params.alpha, mult)
        states[filled] = phi
        filled += 1
        if filled == states.shape[0] or i == n_frames - 1:
            screens = scipy.fft.ifft2(states[:filled], axes=(-2, -1), workers=-1)
            crops = screens.real[:, :n_out, :n_out] * (n * n)
            frames[lo : lo + filled] = ttp_remove_frames(crops, basis)
            lo += filled
            filled = 0
    return ScreenSequence(frames, params.delta, params.fs)
