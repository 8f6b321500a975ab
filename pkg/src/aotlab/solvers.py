"""Spectral solvers for periodic 2-D model problems on power-of-two grids.

Three families: heat (exact spectral integration), diffusion-reaction with
FitzHugh-Nagumo kinetics (exact diffusion, explicit Euler reaction), and
incompressible Navier-Stokes in vorticity form (pseudo-spectral, 2/3
dealiasing, Crank-Nicolson diffusion with Adams-Bashforth 2 advection).

All solvers return time-major arrays: frame s holds the solution at
t = (s+1) * dt, so ``steps`` frames span the horizon dt * steps.  The
initial condition is not included in the output.

These routines generate training data; they are plain numpy (np.fft) and
never touch the autodiff tape.
"""

from __future__ import annotations

import warnings

import numpy as np

from .errors import NumericOverflowError, ShapeError

BLOWUP_LIMIT = 1e6


def _check_grid(ic: np.ndarray, ndim: int) -> None:
    if ic.ndim != ndim:
        raise ShapeError(f"initial condition must be {ndim}-D, got shape {ic.shape}")
    h, w = ic.shape[0], ic.shape[1]
    for n in (h, w):
        if n < 1 or n & (n - 1):
            raise ShapeError(f"grid extents must be powers of two, got ({h}, {w})")


def _k_squared(h: int, w: int) -> np.ndarray:
    ky = 2 * np.pi * np.fft.fftfreq(h, d=1.0 / h)
    kx = 2 * np.pi * np.fft.fftfreq(w, d=1.0 / w)
    return (ky ** 2)[:, None] + (kx ** 2)[None, :]


def _check_blowup(field: np.ndarray, step: int, family: str) -> None:
    if not np.all(np.isfinite(field)) or np.abs(field).max() > BLOWUP_LIMIT:
        raise NumericOverflowError(
            f"{family} solve blew up at step {step}", where=f"step {step}")


def solve_heat(ic: np.ndarray, nu: float, dt: float, steps: int) -> np.ndarray:
    """Heat equation u_t = nu * Laplace(u); exact per-step spectral decay."""
    ic = np.asarray(ic, dtype=np.float64)
    _check_grid(ic, 2)
    if nu <= 0:
        raise ValueError(f"viscosity must be positive, got {nu}")
    decay = np.exp(-nu * _k_squared(*ic.shape) * dt)
    out = np.empty((steps,) + ic.shape)
    uh = np.fft.fft2(ic)
    for s in range(steps):
        uh = uh * decay
        out[s] = np.fft.ifft2(uh).real
    return out


def solve_dr(ic: np.ndarray, d: tuple = (1e-3, 5e-3), k: float = 5e-3,
             scale: float = 1.0, dt: float = 1e-2, steps: int = 39) -> np.ndarray:
    """Two-species diffusion-reaction with FitzHugh-Nagumo kinetics.

    u_t = d_u Laplace(u) + scale * (u - u^3 - k - v)
    v_t = d_v Laplace(v) + scale * (u - v)

    Each step integrates diffusion exactly in Fourier space, then applies
    one explicit Euler step of the reaction; ``scale=0`` reduces the system
    to independent heat equations.
    """
    ic = np.asarray(ic, dtype=np.float64)
    _check_grid(ic, 3)
    if ic.shape[2] != 2:
        raise ShapeError(f"diffusion-reaction needs 2 channels, got {ic.shape[2]}")
    du, dv = d
    if du < 0 or dv < 0:
        raise ValueError(f"diffusivities must be nonnegative, got {d}")
    k2 = _k_squared(ic.shape[0], ic.shape[1])
    decay_u = np.exp(-du * k2 * dt)
    decay_v = np.exp(-dv * k2 * dt)
    u, v = ic[..., 0].copy(), ic[..., 1].copy()
    out = np.empty((steps,) + ic.shape)
    for s in range(steps):
        u = np.fft.ifft2(np.fft.fft2(u) * decay_u).real
        v = np.fft.ifft2(np.fft.fft2(v) * decay_v).real
        ru = u - u ** 3 - k - v
        rv = u - v
        u = u + dt * scale * ru
        v = v + dt * scale * rv
        _check_blowup(u, s, "diffusion-reaction")
        out[s, ..., 0] = u
        out[s, ..., 1] = v
    return out


def fno_forcing(h: int, w: int) -> np.ndarray:
    """The fixed forcing 0.1 (sin(2 pi (x+y)) + cos(2 pi (x+y)))."""
    y = np.arange(h) / h
    x = np.arange(w) / w
    s = y[:, None] + x[None, :]
    return 0.1 * (np.sin(2 * np.pi * s) + np.cos(2 * np.pi * s))


def _dealias_mask(h: int, w: int) -> np.ndarray:
    fy = np.abs(np.fft.fftfreq(h, d=1.0 / h))
    fx = np.abs(np.fft.fftfreq(w, d=1.0 / w))
    return ((fy[:, None] <= h / 3.0) & (fx[None, :] <= w / 3.0)).astype(float)


def solve_ns_vorticity(ic: np.ndarray, nu: float, forcing: np.ndarray | None,
                       dt: float, steps: int) -> np.ndarray:
    """Incompressible 2-D Navier-Stokes in vorticity form.

    w_t + u . grad(w) = nu Laplace(w) + f, with u recovered from the
    streamfunction psi_hat = w_hat / |k|^2 (zero DC).  Advection uses
    Adams-Bashforth 2 (explicit Euler on the first step) with 2/3
    dealiasing; diffusion uses Crank-Nicolson.  The advection spectrum's
    DC entry is zeroed each step (it is analytically zero), so the mean
    vorticity is conserved exactly under zero-mean forcing.
    """
    ic = np.asarray(ic, dtype=np.float64)
    _check_grid(ic, 2)
    if nu < 0:
        raise ValueError(f"viscosity must be nonnegative, got {nu}")
    h, w = ic.shape
    mean = ic.mean()
    if abs(mean) > 1e-12:
        warnings.warn("vorticity IC has nonzero mean; projecting to zero mean")
        ic = ic - mean

    ky = 2 * np.pi * np.fft.fftfreq(h, d=1.0 / h)[:, None]
    kx = 2 * np.pi * np.fft.fftfreq(w, d=1.0 / w)[None, :]
    k2 = ky ** 2 + kx ** 2
    inv_k2 = np.where(k2 == 0, 1.0, k2)
    dealias = _dealias_mask(h, w)
    f_hat = 0.0 if forcing is None else np.fft.fft2(np.asarray(forcing, dtype=np.float64))

    def advection_hat(w_hat):
        psi_hat = w_hat / inv_k2
        psi_hat = np.where(k2 == 0, 0.0, psi_hat)
        u = np.fft.ifft2(1j * ky * psi_hat).real
        v = np.fft.ifft2(-1j * kx * psi_hat).real
        wx = np.fft.ifft2(1j * kx * w_hat).real
        wy = np.fft.ifft2(1j * ky * w_hat).real
        n_hat = np.fft.fft2(u * wx + v * wy) * dealias
        n_hat[0, 0] = 0.0
        return n_hat

    cn_minus = 1.0 - 0.5 * nu * dt * k2
    cn_plus = 1.0 + 0.5 * nu * dt * k2
    w_hat = np.fft.fft2(ic)
    out = np.empty((steps, h, w))
    n_prev = None
    for s in range(steps):
        n_curr = advection_hat(w_hat)
        if n_prev is None:
            n_eff = n_curr
        else:
            n_eff = 1.5 * n_curr - 0.5 * n_prev
        w_hat = (cn_minus * w_hat + dt * (-n_eff + f_hat)) / cn_plus
        n_prev = n_curr
        frame = np.fft.ifft2(w_hat).real
        _check_blowup(frame, s, "navier-stokes")
        out[s] = frame
    return out


# ---------------------------------------------------------------------
# initial condition samplers
# ---------------------------------------------------------------------

def grf_ic(h: int, w: int, rng: np.random.Generator, alpha: float = 2.5,
           tau: float = 7.0) -> np.ndarray:
    """Gaussian random field: spectrally filtered white noise, standardized
    to zero mean and unit standard deviation."""
    fy = np.fft.fftfreq(h, d=1.0 / h)[:, None]
    fx = np.fft.fftfreq(w, d=1.0 / w)[None, :]
    spectrum = (fy ** 2 + fx ** 2 + tau ** 2) ** (-alpha)
    noise = rng.standard_normal((h, w))
    field = np.fft.ifft2(np.fft.fft2(noise) * spectrum).real
    field = field - field.mean()
    return field / field.std()


def dr_ic(h: int, w: int, rng: np.random.Generator, k: float = 5e-3) -> np.ndarray:
    """Uniform noise around the FitzHugh-Nagumo fixed point u* = v* = -k^(1/3)."""
    fixed = -np.cbrt(k)
    return fixed + rng.uniform(-0.5, 0.5, size=(h, w, 2))
