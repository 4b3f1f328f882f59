"""
Parallel-beam Radon transform, kernel-filtered backprojection, and the
FBP-based augmentation built on top of them.

The reconstruction kernel family is parametrized in the frequency domain as

    W(nu) = nu * (1 + a * nu**b),   nu in [0, 1],

where ``nu`` is the frequency normalized to the detector Nyquist rate.
``a = 0`` is the pure ramp filter (the smoothest member); larger ``a`` boosts
high frequencies and yields sharper, noisier reconstructions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "KernelSpec",
    "Sinogram",
    "radon",
    "kernel_response",
    "reconstruct",
    "fbp_augment",
]

# Forward-projection discretization: every pixel is treated as a point mass
# splatted onto the detector with a narrow Gaussian footprint.  The footprint
# is wide enough that the splat quadrature error is far below 1e-6 even at
# lattice-aligned angles (a linear tent kernel is ~1e-2 wrong at 45 degrees),
# and the per-point weight normalization keeps mass conservation exact.
_SPLAT_SIGMA = 1.0
_SPLAT_HALFWIDTH = 8


@dataclass(frozen=True)
class KernelSpec:
    """Reconstruction-kernel parameters.

    Attributes
    ----------
    a : float
        Dimensionless sharpness amplitude, ``a >= 0``.  ``a = 0`` selects the
        pure ramp filter.
    b : float
        Dimensionless sharpness exponent, required positive when ``a > 0``.
    """

    a: float = 0.0
    b: float = 1.0

    def __post_init__(self) -> None:
        if self.a < 0:
            raise ValueError(f"kernel amplitude a must be >= 0, got {self.a}")
        if self.a > 0 and self.b <= 0:
            raise ValueError(f"kernel exponent b must be > 0 when a > 0, got {self.b}")


@dataclass
class Sinogram:
    """Stack of parallel-beam projections.

    Attributes
    ----------
    data : np.ndarray
        Line integrals, shape (n_angles, n_detectors), attenuation x length.
    angles : np.ndarray
        Strictly increasing projection angles in [0, pi).
    detector_spacing : float
        Physical spacing between detector bins (same unit as pixel spacing).
    """

    data: np.ndarray
    angles: np.ndarray
    detector_spacing: float = 1.0

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        self.angles = np.asarray(self.angles, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("sinogram data must be 2D (n_angles, n_detectors)")
        if self.angles.ndim != 1 or self.angles.shape[0] != self.data.shape[0]:
            raise ValueError("angles must be 1D with one entry per projection")
        if self.angles.size < 1:
            raise ValueError("need at least one projection angle")
        if np.any(self.angles < 0) or np.any(self.angles >= np.pi):
            raise ValueError("angles must lie in [0, pi)")
        if self.angles.size > 1 and np.any(np.diff(self.angles) <= 0):
            raise ValueError("angles must be strictly increasing")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("sinogram data contains non-finite values")
        if self.detector_spacing <= 0:
            raise ValueError("detector_spacing must be positive")


def detector_count(n: int) -> int:
    """Number of detector bins covering the diagonal of an n x n image."""
    return int(np.ceil(np.sqrt(2.0) * n))


def _pixel_coords(n: int, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    half = (n - 1) / 2.0
    base = (np.arange(n) - half) * spacing
    xx, yy = np.meshgrid(base, base, indexing="xy")
    return xx.ravel(), yy.ravel()


def radon(image: np.ndarray, n_angles: int, spacing: float = 1.0) -> Sinogram:
    """Discrete Radon transform of a square image.

    Projects the image onto ``n_angles`` parallel-beam detector arrays at
    evenly spaced angles ``k * pi / n_angles``.  Each pixel contributes its
    value times the pixel area, distributed over nearby detector bins with a
    normalized Gaussian footprint, so the transform is exactly linear and
    conserves total mass per angle.

    Parameters
    ----------
    image : np.ndarray
        Square 2D array of finite values.
    n_angles : int
        Number of projection angles, >= 1.
    spacing : float
        Pixel size; the detector spacing equals it.

    Returns
    -------
    Sinogram
        Projections of shape (n_angles, ceil(sqrt(2) * n)).

    Raises
    ------
    ValueError
        If the image is not square 2D, contains non-finite values, or
        ``n_angles < 1``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError(f"image must be square 2D, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    if n_angles < 1:
        raise ValueError("n_angles must be >= 1")
    if spacing <= 0:
        raise ValueError("spacing must be positive")

    n = image.shape[0]
    n_det = detector_count(n)
    angles = np.arange(n_angles) * np.pi / n_angles
    xs, ys = _pixel_coords(n, spacing)
    # Pixel mass divided by detector spacing: line-integral units on the
    # detector grid (sum over bins * detector_spacing == sum(image) * area).
    vals = image.ravel() * spacing
    det_half = (n_det - 1) / 2.0
    offsets = np.arange(-_SPLAT_HALFWIDTH, _SPLAT_HALFWIDTH + 1)
    pad = _SPLAT_HALFWIDTH
    sino = np.empty((n_angles, n_det))
    for i, theta in enumerate(angles):
        s = (xs * np.cos(theta) + ys * np.sin(theta)) / spacing + det_half
        nearest = np.rint(s).astype(np.int64)
        dist = s[:, None] - (nearest[:, None] + offsets[None, :])
        w = np.exp(-0.5 * (dist / _SPLAT_SIGMA) ** 2)
        w /= w.sum(axis=1, keepdims=True)
        idx = nearest[:, None] + offsets[None, :] + pad
        acc = np.bincount(
            idx.ravel(),
            weights=(vals[:, None] * w).ravel(),
            minlength=n_det + 2 * pad + 1,
        )
        sino[i] = acc[pad : pad + n_det]
    return Sinogram(sino, angles, detector_spacing=spacing)


def kernel_response(spec: KernelSpec, freqs: np.ndarray) -> np.ndarray:
    """Frequency response ``W(nu) = nu * (1 + a * nu**b)`` of a kernel.

    Parameters
    ----------
    spec : KernelSpec
        Kernel parameters (a, b).
    freqs : np.ndarray
        Frequencies normalized to [0, 1] (1 = detector Nyquist).

    Returns
    -------
    np.ndarray
        Non-negative filter weights, zero at ``nu = 0``.

    Raises
    ------
    ValueError
        If any frequency lies outside [0, 1].
    """
    nu = np.asarray(freqs, dtype=np.float64)
    if np.any(nu < 0) or np.any(nu > 1):
        raise ValueError("normalized frequencies must lie in [0, 1]")
    return nu * (1.0 + spec.a * nu**spec.b)


def _pow2_at_least(m: int) -> int:
    p = 1
    while p < m:
        p *= 2
    return p


def reconstruct(sino: Sinogram, spec: KernelSpec, grid_size: int | None = None) -> np.ndarray:
    """Filtered backprojection with the parametric kernel family.

    Each projection is filtered in the frequency domain (zero-padded FFT to
    suppress circular wraparound) with ``kernel_response`` scaled to physical
    frequency units, then backprojected onto the image grid with linear
    interpolation along the detector axis.

    Parameters
    ----------
    sino : Sinogram
        Projections to reconstruct from.
    spec : KernelSpec
        Reconstruction kernel.
    grid_size : int, optional
        Output grid side length ``n``.  Defaults to the largest ``n``
        consistent with the detector count.

    Returns
    -------
    np.ndarray
        Reconstructed n x n image.

    Raises
    ------
    ValueError
        If ``grid_size`` is inconsistent with the sinogram's detector count.
    """
    n_angles, n_det = sino.data.shape
    if grid_size is None:
        grid_size = int(np.floor(n_det / np.sqrt(2.0)))
        while detector_count(grid_size) > n_det:
            grid_size -= 1
    if detector_count(grid_size) != n_det:
        raise ValueError(
            f"detector count {n_det} does not match an image diagonal of "
            f"grid size {grid_size} (expected {detector_count(grid_size)})"
        )
    spacing = sino.detector_spacing
    npad = _pow2_at_least(2 * n_det)
    freqs = np.fft.rfftfreq(npad, d=spacing)
    f_nyq = 0.5 / spacing
    weights = kernel_response(spec, freqs / f_nyq) * f_nyq
    filtered = np.fft.irfft(
        np.fft.rfft(sino.data, n=npad, axis=1) * weights[None, :], n=npad, axis=1
    )[:, :n_det]

    xs, ys = _pixel_coords(grid_size, spacing)
    det_half = (n_det - 1) / 2.0
    det_idx = np.arange(n_det)
    out = np.zeros(grid_size * grid_size)
    for i, theta in enumerate(sino.angles):
        s = (xs * np.cos(theta) + ys * np.sin(theta)) / spacing + det_half
        out += np.interp(s, det_idx, filtered[i], left=0.0, right=0.0)
    out *= np.pi / n_angles
    return out.reshape(grid_size, grid_size)


def fbp_augment(
    image: np.ndarray,
    a_range: tuple[float, float],
    b_range: tuple[float, float],
    prob: float,
    rng: np.random.Generator,
    n_angles: int = 60,
    spacing: float = 1.0,
) -> np.ndarray:
    """Re-reconstruct an image through a randomly sampled kernel.

    With probability ``prob`` the image is passed through
    ``reconstruct(radon(image), KernelSpec(a, b))`` with ``a`` and ``b``
    sampled uniformly from the given ranges; otherwise it is returned
    unchanged.  Non-square inputs are zero-padded to a square grid for the
    projection step and cropped back afterwards.

    Parameters
    ----------
    image : np.ndarray
        Preprocessed 2D image (finite values).
    a_range, b_range : tuple of float
        Inclusive sampling ranges for the kernel parameters.
    prob : float
        Augmentation probability in [0, 1].
    rng : np.random.Generator
        Source of randomness; the call is deterministic given its state.
    n_angles : int
        Projection count for the internal Radon transform (60 keeps the
        augmentation fast; 180 matches dataset-synthesis fidelity).
    spacing : float
        Pixel size.

    Returns
    -------
    np.ndarray
        Augmented (or untouched) image, same shape as the input.
    """
    if len(a_range) != 2 or len(b_range) != 2 or a_range[0] > a_range[1] or b_range[0] > b_range[1]:
        raise ValueError("a_range and b_range must be non-empty (lo, hi) intervals")
    if not 0.0 <= prob <= 1.0:
        raise ValueError("prob must lie in [0, 1]")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("image must be 2D")
    if rng.random() >= prob:
        return image.copy()
    a = rng.uniform(a_range[0], a_range[1])
    b = rng.uniform(b_range[0], b_range[1])
    h, w = image.shape
    n = max(h, w)
    if h != w:
        padded = np.zeros((n, n))
        r0, c0 = (n - h) // 2, (n - w) // 2
        padded[r0 : r0 + h, c0 : c0 + w] = image
    else:
        padded = image
        r0 = c0 = 0
    sino = radon(padded, n_angles, spacing=spacing)
    rec = reconstruct(sino, KernelSpec(a=a, b=b), grid_size=n)
    return rec[r0 : r0 + h, c0 : c0 + w]
