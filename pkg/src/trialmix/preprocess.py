"""Time-series and volume preprocessing.

Pipeline order is mask -> smooth -> trial alignment -> high-pass ->
mean-centering. The high-pass removes slow drift by projecting out
low-order cosine basis functions; trial alignment resamples each epoch
onto a common post-stimulus grid with a Fourier phase shift.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .types import Dataset, Dims

__all__ = [
    "PreprocConfig",
    "mean_center",
    "center_columns",
    "dct_basis",
    "dct_highpass",
    "trial_time_shift",
    "shift_offsets_from_stimulus",
    "gaussian_smooth_3d",
    "apply_mask",
    "preprocess_dataset",
]

FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))


@dataclass(frozen=True)
class PreprocConfig:
    """Switches and constants for the preprocessing pipeline."""

    smooth_fwhm: float = 0.0
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    align_trials: bool = True
    highpass_cutoff: float | None = 128.0
    center: bool = True

    def __post_init__(self) -> None:
        if self.smooth_fwhm < 0.0:
            raise ValueError("smooth_fwhm must be nonnegative")
        if any(v <= 0.0 for v in self.voxel_size):
            raise ValueError("voxel_size entries must be positive")
        if self.highpass_cutoff is not None and self.highpass_cutoff <= 0.0:
            raise ValueError("highpass_cutoff must be positive")


def mean_center(series: np.ndarray) -> np.ndarray:
    """Subtract the temporal mean (last axis)."""
    series = np.asarray(series, dtype=np.float64)
    return series - series.mean(axis=-1, keepdims=True)


def center_columns(design: np.ndarray) -> np.ndarray:
    """Subtract column means of a design matrix."""
    design = np.asarray(design, dtype=np.float64)
    if design.size == 0:
        return design.copy()
    return design - design.mean(axis=0, keepdims=True)


def dct_basis(n: int, n_funcs: int) -> np.ndarray:
    """Cosine drift basis, shape (n, n_funcs), order k = 1..n_funcs.

    Column k-1 samples cos(pi * k * (2t + 1) / (2n)). The constant (k = 0)
    function is excluded; remove means separately.
    """
    if n_funcs >= n:
        raise ValueError(f"cannot remove {n_funcs} basis functions from {n} samples")
    t = np.arange(n, dtype=np.float64)
    k = np.arange(1, n_funcs + 1, dtype=np.float64)
    return np.cos(np.pi * np.outer(2.0 * t + 1.0, k) / (2.0 * n))


def _n_drift_funcs(n: int, tr: float, cutoff: float) -> int:
    if cutoff <= 2.0 * tr:
        raise ValueError(
            f"high-pass cutoff {cutoff} s must exceed twice the sampling "
            f"interval ({2.0 * tr} s)"
        )
    return int(np.floor(2.0 * n * tr / cutoff))


def dct_highpass(series: np.ndarray, tr: float, cutoff: float) -> np.ndarray:
    """Remove slow drift below the cutoff period (seconds).

    Projects out the cosine basis functions with period longer than
    ``cutoff``; the number removed is floor(2 * n * tr / cutoff). Works on
    a single series or a (batch, n) array. The projection is idempotent
    and leaves constant series untouched.
    """
    series = np.asarray(series, dtype=np.float64)
    n = series.shape[-1]
    n_funcs = _n_drift_funcs(n, tr, cutoff)
    if n_funcs == 0:
        return series.copy()
    basis = dct_basis(n, n_funcs)
    # basis columns are exactly orthogonal with squared norm n/2
    coef = series @ basis * (2.0 / n)
    return series - coef @ basis.T


def trial_time_shift(series: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Resample each epoch at t - shift via a Fourier phase shift.

    ``series`` has length n_epochs * n_times (epoch-major; batch leading
    axes allowed); ``shifts`` gives one fractional offset per epoch in
    sampling-interval units. Frequency f of an epoch's DFT is multiplied
    by exp(-2i*pi*f*shift/n_times). For even-length epochs the Nyquist
    bin has no real-valued pure-phase image and is scaled by
    cos(pi*shift), which attenuates that component; fractional shifts are
    exactly invertible for odd epoch lengths.
    """
    series = np.asarray(series, dtype=np.float64)
    shifts = np.asarray(shifts, dtype=np.float64)
    if shifts.ndim != 1:
        raise ValueError("shifts must be a vector with one entry per epoch")
    if not np.all(np.isfinite(shifts)):
        raise ValueError("shifts must be finite")
    n_epochs = shifts.shape[0]
    n = series.shape[-1]
    if n % n_epochs != 0:
        raise ValueError(
            f"series length {n} is not a multiple of {n_epochs} epochs"
        )
    n_times = n // n_epochs
    shaped = series.reshape(series.shape[:-1] + (n_epochs, n_times))
    spec = np.fft.rfft(shaped, axis=-1)
    freqs = np.arange(spec.shape[-1], dtype=np.float64)
    phase = np.exp(-2j * np.pi * np.einsum("f,e->ef", freqs, shifts) / n_times)
    if n_times % 2 == 0:
        # mirror-symmetric treatment of the Nyquist bin keeps output real
        phase[:, -1] = np.cos(np.pi * shifts)
    spec = spec * phase
    out = np.fft.irfft(spec, n=n_times, axis=-1)
    return out.reshape(series.shape)


def shift_offsets_from_stimulus(stimulus_times: np.ndarray, tr: float) -> np.ndarray:
    """Per-epoch alignment shifts derived from stimulus onsets modulo TR.

    A stimulus arriving a fraction u of a TR after a grid point delays the
    response by u on the sampling grid; resampling at t - (-u) realigns
    it, so the returned shifts are -u wrapped to (-1/2, 1/2].
    """
    frac = np.mod(np.asarray(stimulus_times, dtype=np.float64) / tr, 1.0)
    frac = np.where(frac > 0.5, frac - 1.0, frac)
    return -frac


def _axis_kernel(sigma: float) -> np.ndarray:
    if sigma <= 0.0:
        return np.array([1.0])
    radius = int(np.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kern = np.exp(-0.5 * (x / sigma) ** 2)
    return kern / kern.sum()


def gaussian_smooth_3d(
    volume: np.ndarray,
    fwhm: float,
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0),
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """Separable Gaussian smoothing with mask-aware renormalization.

    The kernel along each axis is a sampled Gaussian with sigma =
    fwhm / (2 sqrt(2 ln 2)) / voxel_size, truncated at 4 sigma and
    normalized to sum 1. At every voxel the weighted average is
    renormalized over in-volume, in-mask support: masked voxels
    contribute to neither the numerator nor the normalizer. Voxels
    outside the mask are returned as 0.
    """
    volume = np.asarray(volume, dtype=np.float64)
    if volume.ndim != 3:
        raise ValueError("volume must be 3-D")
    if fwhm < 0.0:
        raise ValueError("fwhm must be nonnegative")
    if fwhm == 0.0:
        out = volume.copy()
        if mask is not None:
            out[~mask] = 0.0
        return out
    if mask is None:
        support = np.ones(volume.shape, dtype=np.float64)
        data = volume
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != volume.shape:
            raise ValueError("mask shape must match volume shape")
        support = mask.astype(np.float64)
        data = np.where(mask, volume, 0.0)
    num = data
    den = support
    for axis in range(3):
        sigma = fwhm * FWHM_TO_SIGMA / voxel_size[axis]
        kern = _axis_kernel(sigma)
        num = ndimage.correlate1d(num, kern, axis=axis, mode="constant", cval=0.0)
        den = ndimage.correlate1d(den, kern, axis=axis, mode="constant", cval=0.0)
    out = np.zeros_like(volume)
    inside = den > 0.0
    if mask is not None:
        inside &= mask
    out[inside] = num[inside] / den[inside]
    return out


def apply_mask(
    volumes: np.ndarray,
    mask: np.ndarray,
    tr: float,
    stimulus_times: np.ndarray,
    design: np.ndarray | None = None,
) -> Dataset:
    """Extract masked voxel series from a (X, Y, Z, N) volume stack.

    Voxels appear in C-scan order of their coordinates. ``design``
    defaults to an empty (N, 0) matrix.
    """
    volumes = np.asarray(volumes, dtype=np.float64)
    if volumes.ndim != 4:
        raise ValueError("volumes must be 4-D (x, y, z, time)")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != volumes.shape[:3]:
        raise ValueError("mask shape must match the volume grid")
    n_total = volumes.shape[3]
    stimulus_times = np.asarray(stimulus_times, dtype=np.float64)
    n_epochs = stimulus_times.shape[0]
    if n_total % n_epochs != 0:
        raise ValueError(
            f"{n_total} samples do not divide into {n_epochs} epochs"
        )
    coords = np.argwhere(mask)
    if coords.shape[0] == 0:
        raise ValueError("mask selects no voxels")
    series = volumes[mask]
    if design is None:
        design = np.zeros((n_total, 0))
    design = np.asarray(design, dtype=np.float64)
    dims = Dims(
        n_times=n_total // n_epochs,
        n_epochs=n_epochs,
        n_voxels=coords.shape[0],
        n_covariates=design.shape[1],
    )
    return Dataset(
        dims=dims,
        series=np.ascontiguousarray(series),
        design=design,
        coords=np.ascontiguousarray(coords),
        stimulus_times=stimulus_times,
        tr=float(tr),
        mask_shape=tuple(int(s) for s in mask.shape),
    )


def _smooth_dataset(ds: Dataset, cfg: PreprocConfig) -> np.ndarray:
    if ds.mask_shape is None:
        raise ValueError("smoothing requires mask_shape on the dataset")
    shape = ds.mask_shape
    mask = np.zeros(shape, dtype=bool)
    idx = tuple(ds.coords.T)
    mask[idx] = True
    out = np.empty_like(ds.series)
    vol = np.zeros(shape, dtype=np.float64)
    for n in range(ds.dims.n_images):
        vol[idx] = ds.series[:, n]
        sm = gaussian_smooth_3d(vol, cfg.smooth_fwhm, cfg.voxel_size, mask)
        out[:, n] = sm[idx]
    return out


def preprocess_dataset(ds: Dataset, cfg: PreprocConfig) -> Dataset:
    """Run the enabled pipeline steps and return a new dataset.

    Applies, in order: Gaussian smoothing (when smooth_fwhm > 0), trial
    alignment from the stimulus times, high-pass filtering of both the
    series and the design (when a cutoff is set), and mean-centering of
    both.
    """
    series = ds.series
    design = ds.design
    if cfg.smooth_fwhm > 0.0:
        series = _smooth_dataset(
            Dataset(
                dims=ds.dims,
                series=series,
                design=design,
                coords=ds.coords,
                stimulus_times=ds.stimulus_times,
                tr=ds.tr,
                mask_shape=ds.mask_shape,
            ),
            cfg,
        )
    if cfg.align_trials:
        shifts = shift_offsets_from_stimulus(ds.stimulus_times, ds.tr)
        series = trial_time_shift(series, shifts)
    if cfg.highpass_cutoff is not None:
        series = dct_highpass(series, ds.tr, cfg.highpass_cutoff)
        if design.shape[1] > 0:
            design = dct_highpass(design.T, ds.tr, cfg.highpass_cutoff).T
    if cfg.center:
        series = mean_center(series)
        design = center_columns(design)
    return replace(ds, series=series, design=design)
