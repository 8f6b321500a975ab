"""In-house FFT against a naive O(n^2) DFT oracle, plus identities."""

import numpy as np
import pytest

from aotlab import fft
from aotlab.autodiff import Tape, Tensor
from aotlab import autodiff as ad
from aotlab.errors import ShapeError

from test_tensor import fd_grad


# ---------------------------------------------------------------------
# oracle: direct summation DFT, no shared code with the implementation
# ---------------------------------------------------------------------

def dft1_oracle(x):
    n = x.shape[-1]
    j = np.arange(n)
    w = np.exp(-2j * np.pi * np.outer(j, j) / n)
    return x @ w.T


def dft2_oracle(x):
    h, w = x.shape[-2], x.shape[-1]
    out = dft1_oracle(x)
    out = dft1_oracle(out.swapaxes(-1, -2)).swapaxes(-1, -2)
    assert out.shape[-2:] == (h, w)
    return out


def test_bit_reversal_small():
    np.testing.assert_array_equal(fft.bit_reversal_permutation(1), [0])
    np.testing.assert_array_equal(fft.bit_reversal_permutation(2), [0, 1])
    np.testing.assert_array_equal(fft.bit_reversal_permutation(4), [0, 2, 1, 3])
    np.testing.assert_array_equal(fft.bit_reversal_permutation(8), [0, 4, 2, 6, 1, 5, 3, 7])


def test_bit_reversal_is_involution():
    for n in (16, 64, 256):
        rev = fft.bit_reversal_permutation(n)
        np.testing.assert_array_equal(rev[rev], np.arange(n))


@pytest.mark.parametrize("n", [1, 2, 4, 8, 16, 32])
def test_fft1_matches_dft_oracle(n):
    rng = np.random.default_rng(n)
    x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    np.testing.assert_allclose(fft.fft1_array(x), dft1_oracle(x), atol=1e-11)


@pytest.mark.parametrize("h,w", [(1, 1), (2, 4), (4, 4), (8, 8), (16, 16), (8, 16)])
def test_fft2_matches_dft_oracle(h, w):
    rng = np.random.default_rng(h * 100 + w)
    x = rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))
    np.testing.assert_allclose(fft.fft2_array(x), dft2_oracle(x), atol=1e-10)


def test_fft2_vectorizes_over_leading_axes():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 2, 8, 8)) + 1j * rng.standard_normal((3, 2, 8, 8))
    batched = fft.fft2_array(x)
    for i in range(3):
        for j in range(2):
            np.testing.assert_allclose(batched[i, j], fft.fft2_array(x[i, j]), atol=1e-12)


@pytest.mark.parametrize("h,w", [(4, 4), (16, 16), (64, 64), (32, 64)])
def test_round_trip(h, w):
    rng = np.random.default_rng(h + w)
    x = rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))
    np.testing.assert_allclose(fft.ifft2_array(fft.fft2_array(x)), x, atol=1e-10)
    np.testing.assert_allclose(fft.fft2_array(fft.ifft2_array(x)), x, atol=1e-10)


@pytest.mark.parametrize("h,w", [(8, 8), (32, 32), (64, 64)])
def test_parseval(h, w):
    rng = np.random.default_rng(h * w)
    x = rng.standard_normal((h, w))
    xh = fft.fft2_array(x)
    energy_space = np.sum(np.abs(x) ** 2)
    energy_freq = np.sum(np.abs(xh) ** 2) / (h * w)
    assert abs(energy_space - energy_freq) <= 1e-10 * energy_space


def test_real_input_conjugate_symmetry():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((8, 8))
    xh = fft.fft2_array(x)
    # X[-k] = conj(X[k]) for real input
    flipped = xh[np.ix_((-np.arange(8)) % 8, (-np.arange(8)) % 8)]
    np.testing.assert_allclose(flipped, np.conj(xh), atol=1e-11)


def test_non_power_of_two_rejected():
    with pytest.raises(ShapeError):
        fft.fft1_array(np.zeros(12))
    with pytest.raises(ShapeError):
        fft.fft2_array(np.zeros((6, 8)))
    with pytest.raises(ShapeError):
        fft.fft2_array(np.zeros((8, 10)))
    with pytest.raises(ShapeError):
        fft.fft1_array(np.zeros(0))


def test_shift_theorem():
    """Circular shift in space multiplies the spectrum by a phase."""
    rng = np.random.default_rng(21)
    x = rng.standard_normal((16, 16))
    for dy, dx in [(1, 0), (0, 3), (5, 7)]:
        shifted = np.roll(np.roll(x, dy, axis=0), dx, axis=1)
        k = np.arange(16)
        phase = np.exp(-2j * np.pi * (np.add.outer(k * dy, k * dx)) / 16)
        np.testing.assert_allclose(
            fft.fft2_array(shifted), fft.fft2_array(x) * phase, atol=1e-10
        )


# ---------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------

def test_fft2_adjoint_identity():
    """<F x, y> == <x, F^H y> with F^H realized by the backward rule."""
    rng = np.random.default_rng(31)
    x = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
    y = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
    lhs = np.vdot(y, fft.fft2_array(x))
    rhs = np.vdot(fft.ifft2_array(y) * 64, x)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_fft2_gradient_fd(seed):
    rng = np.random.default_rng(40 + seed)
    wr = rng.standard_normal((8, 8))
    wi = rng.standard_normal((8, 8))
    x0 = rng.standard_normal((8, 8))

    def loss_np(v):
        zh = fft.fft2_array(v.astype(complex))
        return float(np.sum(zh.real * wr) + np.sum(zh.imag * wi))

    t = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        zh = fft.fft2(ad.make_complex(t, t * 0.0))
        loss = ad.tsum(ad.real(zh) * Tensor(wr)) + ad.tsum(ad.imag(zh) * Tensor(wi))
        tape.backward(loss)
    num = fd_grad(loss_np, x0.copy())
    np.testing.assert_allclose(t.grad, num, rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize("seed", range(5))
def test_ifft2_gradient_fd(seed):
    rng = np.random.default_rng(60 + seed)
    w = rng.standard_normal((8, 8))
    x0 = rng.standard_normal((8, 8))

    def loss_np(v):
        return float(np.sum(fft.ifft2_array(fft.fft2_array(v.astype(complex))).real * w))

    t = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        z = fft.ifft2(fft.fft2(ad.make_complex(t, t * 0.0)))
        tape.backward(ad.tsum(ad.real(z) * Tensor(w)))
    num = fd_grad(loss_np, x0.copy())
    np.testing.assert_allclose(t.grad, num, rtol=1e-6, atol=1e-7)


def test_float32_input_stays_single_precision():
    x = np.random.default_rng(0).standard_normal((8, 8)).astype(np.float32)
    assert fft.fft2_array(x).dtype == np.complex64
    assert fft.fft2_array(x.astype(np.float64)).dtype == np.complex128
