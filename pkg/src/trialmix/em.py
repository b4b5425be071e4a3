"""Two-component mixture model and its EM estimator.

Voxel response vectors are epoch-major. A responding voxel is
    y = amplitude * (1_E (x) hrf) + design @ coeffs + u,
    u ~ N(0, between_cov (x) within_cov),
a non-responding voxel is
    y = design @ coeffs + e,   e ~ N(0, noise_var * I).

The E-step computes posterior responding probabilities; the M-step runs
one coordinate-ascent sweep of conditional maximizers (generalized EM),
so the observed-data log-likelihood never decreases. Identification:
hrf has unit norm with its dominant entry positive, and when both
covariance factors are free the between factor is rescaled to trace
n_epochs with the scale absorbed into the within factor.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from . import kernels
from .linalg import inv_spd, kron_logdet, kron_quad_form, regularize_spd
from .types import (
    Dataset,
    DegenerateDataError,
    FitResult,
    Hrf,
    MixtureParams,
    validate_params,
)

__all__ = [
    "EmConfig",
    "ModelStructure",
    "canonical_hrf",
    "log_density_active",
    "log_density_inactive",
    "estep",
    "observed_loglik",
    "q_function",
    "update_p",
    "update_beta",
    "update_b",
    "update_h",
    "update_within_cov",
    "update_between_cov",
    "update_covariances",
    "update_sigma2",
    "residual_matrices",
    "fit_all_active",
    "init_fit",
    "em_fit",
]

LOG_2PI = float(np.log(2.0 * np.pi))
EXP_CUTOFF = 700.0
MASS_EPS = 1e-12


@dataclass(frozen=True)
class EmConfig:
    """Tuning constants for the EM engine."""

    tol: float = 1e-4
    max_iter: int = 500
    m_sweeps: int = 1
    flipflop_sweeps: int = 2
    init_alpha: float = 1e-3
    init_max_iter: int = 50
    resp_clamp: float = 1e-12
    noise_floor: float = 1e-12

    def __post_init__(self) -> None:
        if self.tol <= 0.0 or self.max_iter < 1:
            raise ValueError("tol must be positive and max_iter at least 1")
        if self.m_sweeps < 1 or self.flipflop_sweeps < 1:
            raise ValueError("sweep counts must be at least 1")
        if not (0.0 < self.init_alpha < 1.0):
            raise ValueError("init_alpha must lie in (0, 1)")


@dataclass(frozen=True)
class ModelStructure:
    """Which parameter blocks a fit estimates.

    spherical replaces the Kronecker covariance with noise_var * I for
    all-active fits; free_within / free_between freeze a Kronecker
    factor at identity when False; mixture False fixes every voxel as
    responding (no E-step).
    """

    mixture: bool = True
    estimate_hrf: bool = True
    free_within: bool = True
    free_between: bool = True
    spherical: bool = False

    @property
    def rescale_trace(self) -> bool:
        return self.free_within and self.free_between and not self.spherical


def hrf_shape_raw(times: np.ndarray) -> np.ndarray:
    """Unnormalized difference-of-gammas response at given times.

    gamma(shape 6, scale 1) minus one sixth of gamma(shape 16, scale 1),
    evaluated at ``times`` seconds after stimulus onset. Peaks near 5 s
    with an undershoot after 10 s. Zero at nonpositive times.
    """
    times = np.asarray(times, dtype=np.float64)
    if not np.all(np.isfinite(times)):
        raise ValueError("times must be finite")

    def gamma_pdf(t: np.ndarray, shape: float) -> np.ndarray:
        out = np.zeros_like(t)
        pos = t > 0.0
        out[pos] = np.exp(
            (shape - 1.0) * np.log(t[pos]) - t[pos] - gammaln(shape)
        )
        return out

    return gamma_pdf(times, 6.0) - gamma_pdf(times, 16.0) / 6.0


def canonical_hrf(times: np.ndarray) -> Hrf:
    """Unit-norm difference-of-gammas shape sampled at given times."""
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or times.size < 2:
        raise ValueError("times must be a vector with at least two entries")
    if np.any(times < 0.0):
        raise ValueError("times must be nonnegative")
    return Hrf.from_raw(hrf_shape_raw(times))


def _epoch_design(dataset: Dataset) -> np.ndarray:
    d = dataset.dims
    return dataset.design.reshape(d.n_epochs, d.n_times, d.n_covariates)


def _residuals_active(
    dataset: Dataset,
    amplitude: np.ndarray,
    coeffs: np.ndarray,
    hrf_values: np.ndarray,
) -> np.ndarray:
    """(n_voxels, n_epochs, n_times) residuals of the responding model."""
    d = dataset.dims
    fitted = dataset.design @ coeffs.T
    resid = dataset.series - fitted.T
    resid = resid.reshape(d.n_voxels, d.n_epochs, d.n_times)
    return resid - amplitude[:, None, None] * hrf_values[None, None, :]


def _residuals_inactive(dataset: Dataset, coeffs: np.ndarray) -> np.ndarray:
    fitted = dataset.design @ coeffs.T
    return dataset.series - fitted.T


def residual_matrices(dataset: Dataset, params: MixtureParams) -> np.ndarray:
    """Responding-model residuals, shape (n_voxels, n_epochs, n_times)."""
    return _residuals_active(
        dataset, params.amplitude, params.coeffs, params.hrf.values
    )


# module-level indirection so tests can swap in a dense-covariance oracle
_active_quads = kernels.quad_forms_kron


def _log_densities(
    dataset: Dataset, params: MixtureParams
) -> tuple[np.ndarray, np.ndarray]:
    """Per-voxel log densities under each component."""
    d = dataset.dims
    n = d.n_images
    resid_a = residual_matrices(dataset, params)
    w_within = inv_spd(params.within_cov)
    w_between = inv_spd(params.between_cov)
    quad_a = _active_quads(resid_a, w_within, w_between)
    logdet = kron_logdet(params.between_cov, params.within_cov)
    log_f1 = -0.5 * (n * LOG_2PI + logdet + quad_a)
    resid_i = _residuals_inactive(dataset, params.coeffs)
    ssq = np.einsum("vn,vn->v", resid_i, resid_i)
    log_f2 = -0.5 * (
        n * (LOG_2PI + np.log(params.noise_var)) + ssq / params.noise_var
    )
    return log_f1, log_f2


def log_density_active(y: np.ndarray, design: np.ndarray, params: MixtureParams, voxel: int) -> float:
    """Log density of one voxel's series under the responding component."""
    d_t = params.within_cov.shape[0]
    d_e = params.between_cov.shape[0]
    n = d_t * d_e
    mu = np.tile(params.hrf.values, d_e)
    resid = y - params.amplitude[voxel] * mu - design @ params.coeffs[voxel]
    resid_te = resid.reshape(d_e, d_t).T
    quad = kron_quad_form(params.between_cov, params.within_cov, resid_te)
    logdet = kron_logdet(params.between_cov, params.within_cov)
    return float(-0.5 * (n * LOG_2PI + logdet + quad))


def log_density_inactive(y: np.ndarray, design: np.ndarray, params: MixtureParams, voxel: int) -> float:
    """Log density of one voxel's series under the non-responding component."""
    resid = y - design @ params.coeffs[voxel]
    n = y.shape[0]
    return float(
        -0.5
        * (
            n * (LOG_2PI + np.log(params.noise_var))
            + resid @ resid / params.noise_var
        )
    )


def estep(dataset: Dataset, params: MixtureParams) -> np.ndarray:
    """Posterior probability that each voxel responds.

    Computed in log space as 1 / (1 + exp(c)) with
    c = log(1 - p) - log(p) + log f2 - log f1; c beyond +-700 saturates
    to exactly 0 or 1. Degenerate priors (p equal to 0 or 1) short-circuit.
    """
    p = params.active_prob
    n_vox = dataset.dims.n_voxels
    if p <= 0.0:
        return np.zeros(n_vox)
    if p >= 1.0:
        return np.ones(n_vox)
    log_f1, log_f2 = _log_densities(dataset, params)
    c = np.log1p(-p) - np.log(p) + log_f2 - log_f1
    resp = np.empty(n_vox)
    hi = c > EXP_CUTOFF
    lo = c < -EXP_CUTOFF
    mid = ~(hi | lo)
    resp[hi] = 0.0
    resp[lo] = 1.0
    resp[mid] = 1.0 / (1.0 + np.exp(c[mid]))
    return resp


def observed_loglik(dataset: Dataset, params: MixtureParams) -> float:
    """Observed-data log-likelihood of the mixture."""
    p = params.active_prob
    log_f1, log_f2 = _log_densities(dataset, params)
    if p <= 0.0:
        return float(np.sum(log_f2))
    if p >= 1.0:
        return float(np.sum(log_f1))
    return float(np.sum(np.logaddexp(np.log(p) + log_f1, np.log1p(-p) + log_f2)))


def q_function(dataset: Dataset, resp: np.ndarray, params: MixtureParams) -> float:
    """Expected complete-data log-likelihood given responsibilities."""
    p = params.active_prob
    log_f1, log_f2 = _log_densities(dataset, params)
    active = np.where(resp > 0.0, resp * (np.log(p) if p > 0.0 else -np.inf), 0.0)
    active = active + resp * log_f1
    off = 1.0 - resp
    inactive = np.where(
        off > 0.0, off * (np.log1p(-p) if p < 1.0 else -np.inf), 0.0
    )
    inactive = inactive + off * log_f2
    return float(np.sum(active) + np.sum(inactive))


def update_p(resp: np.ndarray) -> float:
    """Mixing-proportion update: the mean responsibility."""
    return float(np.mean(resp))


def _update_beta_all(
    dataset: Dataset,
    coeffs: np.ndarray,
    hrf_values: np.ndarray,
    w_within: np.ndarray,
    w_between: np.ndarray,
) -> np.ndarray:
    d = dataset.dims
    diff = _residuals_inactive(dataset, coeffs).reshape(
        d.n_voxels, d.n_epochs, d.n_times
    )
    wt_h = w_within @ hrf_values
    row_wb = w_between.sum(axis=1)
    denom = float(row_wb.sum() * (hrf_values @ wt_h))
    if denom <= 0.0:
        raise DegenerateDataError("amplitude update: nonpositive normalizer")
    numer = np.einsum("j,t,vjt->v", row_wb, wt_h, diff)
    return numer / denom


def update_beta(
    y: np.ndarray,
    design: np.ndarray,
    coeffs_i: np.ndarray,
    hrf_values: np.ndarray,
    within_cov: np.ndarray,
    between_cov: np.ndarray,
) -> float:
    """Generalized-least-squares amplitude for one voxel given its coeffs."""
    n_t = within_cov.shape[0]
    n_e = between_cov.shape[0]
    diff = (y - design @ coeffs_i).reshape(n_e, n_t)
    w_within = inv_spd(within_cov)
    w_between = inv_spd(between_cov)
    wt_h = w_within @ hrf_values
    row_wb = w_between.sum(axis=1)
    denom = float(row_wb.sum() * (hrf_values @ wt_h))
    if denom <= 0.0:
        raise DegenerateDataError("amplitude update: nonpositive normalizer")
    return float(np.einsum("j,t,jt->", row_wb, wt_h, diff) / denom)


def _update_b_all(
    dataset: Dataset,
    resp: np.ndarray,
    amplitude: np.ndarray,
    hrf_values: np.ndarray,
    w_within: np.ndarray,
    w_between: np.ndarray,
    noise_var: float,
) -> np.ndarray:
    d = dataset.dims
    if d.n_covariates == 0:
        return np.zeros((d.n_voxels, 0))
    x_ep = _epoch_design(dataset)
    gram_active = np.einsum(
        "jk,jta,ts,ksb->ab", w_between, x_ep, w_within, x_ep, optimize=True
    )
    gram_inactive = dataset.design.T @ dataset.design / noise_var
    series_ep = dataset.epoch_view()
    mean_active = series_ep - amplitude[:, None, None] * hrf_values[None, None, :]
    rhs_active = np.einsum(
        "jk,jta,ts,vks->va", w_between, x_ep, w_within, mean_active, optimize=True
    )
    rhs_inactive = dataset.series @ dataset.design / noise_var
    lhs = (
        resp[:, None, None] * gram_active[None, :, :]
        + (1.0 - resp)[:, None, None] * gram_inactive[None, :, :]
    )
    rhs = resp[:, None] * rhs_active + (1.0 - resp)[:, None] * rhs_inactive
    return np.linalg.solve(lhs, rhs[:, :, None])[:, :, 0]


def update_b(
    y: np.ndarray,
    design: np.ndarray,
    beta_i: float,
    p_i: float,
    hrf_values: np.ndarray,
    within_cov: np.ndarray,
    between_cov: np.ndarray,
    noise_var: float,
) -> np.ndarray:
    """Covariate-coefficient update for one voxel.

    Solves the stationarity system mixing both components with weight
    p_i: (p_i X' S1i X + (1-p_i) X' X / s2) b =
    p_i X' S1i (y - beta mu) + (1-p_i) X' y / s2, where S1i is the
    inverse Kronecker covariance.
    """
    q = design.shape[1]
    if q == 0:
        return np.zeros(0)
    n_t = within_cov.shape[0]
    n_e = between_cov.shape[0]
    w_within = inv_spd(within_cov)
    w_between = inv_spd(between_cov)
    x_ep = design.reshape(n_e, n_t, q)
    gram_active = np.einsum(
        "jk,jta,ts,ksb->ab", w_between, x_ep, w_within, x_ep, optimize=True
    )
    gram_inactive = design.T @ design / noise_var
    mean_active = (
        y.reshape(n_e, n_t) - beta_i * hrf_values[None, :]
    )
    rhs_active = np.einsum(
        "jk,jta,ts,ks->a", w_between, x_ep, w_within, mean_active, optimize=True
    )
    rhs_inactive = design.T @ y / noise_var
    lhs = p_i * gram_active + (1.0 - p_i) * gram_inactive
    rhs = p_i * rhs_active + (1.0 - p_i) * rhs_inactive
    return np.linalg.solve(lhs, rhs)


def _update_h_raw(
    dataset: Dataset,
    resp: np.ndarray,
    amplitude: np.ndarray,
    coeffs: np.ndarray,
    w_between: np.ndarray,
) -> np.ndarray | None:
    """Stationarity solution for the shape, before renormalization.

    Returns None when the weighted amplitude mass is too small to
    identify a shape.
    """
    d = dataset.dims
    diff = _residuals_inactive(dataset, coeffs).reshape(
        d.n_voxels, d.n_epochs, d.n_times
    )
    row_wb = w_between.sum(axis=1)
    denom = float(np.sum(resp * amplitude**2) * row_wb.sum())
    if not np.isfinite(denom) or denom <= MASS_EPS:
        return None
    numer = np.einsum("v,j,vjt->t", resp * amplitude, row_wb, diff)
    return numer / denom


def update_h(
    dataset: Dataset, resp: np.ndarray, params: MixtureParams
) -> tuple[Hrf, np.ndarray]:
    """Shape update with unit-norm and sign renormalization.

    Returns the new shape and the amplitudes rescaled so that
    amplitude * shape is unchanged by the renormalization. When the
    weighted amplitude mass is degenerate the previous shape is kept and
    a warning is emitted.
    """
    w_between = inv_spd(params.between_cov)
    raw = _update_h_raw(dataset, resp, params.amplitude, params.coeffs, w_between)
    if raw is None or float(np.linalg.norm(raw)) == 0.0:
        warnings.warn(
            "shape update skipped: weighted amplitude mass is degenerate",
            RuntimeWarning,
            stacklevel=2,
        )
        return params.hrf, params.amplitude
    norm = float(np.linalg.norm(raw))
    hrf = Hrf.from_raw(raw)
    amplitude = params.amplitude * norm
    if hrf.flipped:
        amplitude = -amplitude
    return hrf, amplitude


def update_within_cov(
    resid: np.ndarray, resp: np.ndarray, between_cov: np.ndarray
) -> np.ndarray:
    """Conditional maximizer of the within-epoch factor.

    resid is (n_voxels, n_epochs, n_times). Raises when the total
    responding mass is zero; rank-deficient scatters are ridged with a
    warning.
    """
    mass = float(np.sum(resp))
    if mass <= 0.0:
        raise DegenerateDataError("within-cov update: no responding mass")
    n_epochs = resid.shape[1]
    w_between = inv_spd(between_cov)
    scatter = kernels.scatter_within(resid, w_between, np.asarray(resp, dtype=np.float64))
    return regularize_spd(scatter / (n_epochs * mass), "within-cov update")


def update_between_cov(
    resid: np.ndarray, resp: np.ndarray, within_cov: np.ndarray
) -> np.ndarray:
    """Conditional maximizer of the between-epoch factor."""
    mass = float(np.sum(resp))
    if mass <= 0.0:
        raise DegenerateDataError("between-cov update: no responding mass")
    n_times = resid.shape[2]
    w_within = inv_spd(within_cov)
    scatter = kernels.scatter_between(resid, w_within, np.asarray(resp, dtype=np.float64))
    return regularize_spd(scatter / (n_times * mass), "between-cov update")


def update_covariances(
    resid: np.ndarray,
    resp: np.ndarray,
    within_cov: np.ndarray,
    between_cov: np.ndarray,
    sweeps: int = 2,
    free_within: bool = True,
    free_between: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Flip-flop update of the covariance factors.

    Each sweep maximizes the within factor given the between factor and
    then the between factor given the new within factor. The trace
    rescale that fixes the factor-scale ambiguity is applied by the
    caller (it only applies when both factors are free).
    """
    within = within_cov
    between = between_cov
    for _ in range(sweeps):
        if free_within:
            within = update_within_cov(resid, resp, between)
        if free_between:
            between = update_between_cov(resid, resp, within)
    return within, between


def update_sigma2(dataset: Dataset, resp: np.ndarray, coeffs: np.ndarray) -> float:
    """Noise-variance update from the non-responding side."""
    off = 1.0 - np.asarray(resp, dtype=np.float64)
    mass = float(np.sum(off))
    if mass <= 0.0:
        raise DegenerateDataError("noise update: no non-responding mass")
    resid = _residuals_inactive(dataset, coeffs)
    ssq = np.einsum("vn,vn->v", resid, resid)
    return float(np.sum(off * ssq) / (dataset.dims.n_images * mass))


def _rescale_trace(
    within: np.ndarray, between: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    n_epochs = between.shape[0]
    scale = float(np.trace(between)) / n_epochs
    if scale <= 0.0:
        raise DegenerateDataError("between-cov trace is not positive")
    return within * scale, between / scale


def _global_vector(params: MixtureParams) -> np.ndarray:
    return params.global_vector()


def _mstep(
    dataset: Dataset,
    resp: np.ndarray,
    params: MixtureParams,
    config: EmConfig,
    structure: ModelStructure,
) -> MixtureParams:
    d = dataset.dims
    p = update_p(resp) if structure.mixture else 1.0
    w_within = inv_spd(params.within_cov)
    w_between = inv_spd(params.between_cov)
    amplitude = _update_beta_all(
        dataset, params.coeffs, params.hrf.values, w_within, w_between
    )
    coeffs = _update_b_all(
        dataset,
        resp,
        amplitude,
        params.hrf.values,
        w_within,
        w_between,
        params.noise_var,
    )
    hrf = params.hrf
    if structure.estimate_hrf:
        interim = params.with_updates(amplitude=amplitude, coeffs=coeffs)
        hrf, amplitude = update_h(dataset, resp, interim)
    within = params.within_cov
    between = params.between_cov
    noise_var = params.noise_var
    resid = _residuals_active(dataset, amplitude, coeffs, hrf.values)
    if structure.spherical:
        ssq = float(np.einsum("vjt,vjt->", resid, resid))
        var = max(ssq / (d.n_voxels * d.n_images), config.noise_floor)
        within = var * np.eye(d.n_times)
        between = np.eye(d.n_epochs)
        noise_var = var
    else:
        mass = float(np.sum(resp))
        if mass > max(MASS_EPS * d.n_voxels, MASS_EPS):
            within, between = update_covariances(
                resid,
                resp,
                within,
                between,
                sweeps=config.flipflop_sweeps,
                free_within=structure.free_within,
                free_between=structure.free_between,
            )
            if structure.rescale_trace:
                within, between = _rescale_trace(within, between)
        else:
            warnings.warn(
                "covariance update skipped: responding mass is negligible",
                RuntimeWarning,
                stacklevel=2,
            )
        if structure.mixture:
            off_mass = float(np.sum(1.0 - resp))
            if off_mass > max(MASS_EPS * d.n_voxels, MASS_EPS):
                noise_var = max(
                    update_sigma2(dataset, resp, coeffs), config.noise_floor
                )
            else:
                warnings.warn(
                    "noise update skipped: non-responding mass is negligible",
                    RuntimeWarning,
                    stacklevel=2,
                )
    return MixtureParams(
        active_prob=p,
        amplitude=amplitude,
        coeffs=coeffs,
        hrf=hrf,
        within_cov=within,
        between_cov=between,
        noise_var=noise_var,
    )


def _iterate(
    dataset: Dataset,
    params: MixtureParams,
    config: EmConfig,
    structure: ModelStructure,
    max_iter: int,
    diagnostics=None,
) -> FitResult:
    trace = [observed_loglik(dataset, params)]
    converged = False
    iterations = 0
    n_vox = dataset.dims.n_voxels
    resp = np.ones(n_vox)
    for it in range(1, max_iter + 1):
        resp = estep(dataset, params) if structure.mixture else np.ones(n_vox)
        old_vec = _global_vector(params)
        new_params = params
        for _ in range(config.m_sweeps):
            new_params = _mstep(dataset, resp, new_params, config, structure)
        params = new_params
        if __debug__:
            validate_params(
                params, dataset.dims, trace_convention=structure.rescale_trace
            )
        trace.append(observed_loglik(dataset, params))
        iterations = it
        delta = float(
            np.linalg.norm(_global_vector(params) - old_vec)
            / max(1.0, np.linalg.norm(old_vec))
        )
        if diagnostics is not None:
            diagnostics.write(
                json.dumps(
                    {
                        "iteration": it,
                        "loglik": trace[-1],
                        "param_change": delta,
                        "mix_prob": params.active_prob,
                    }
                )
                + "\n"
            )
        if delta < config.tol:
            converged = True
            break
    if structure.mixture:
        resp = estep(dataset, params)
    return FitResult(
        params=params,
        resp=resp,
        loglik_trace=np.asarray(trace),
        iterations=iterations,
        converged=converged,
    )


def _initial_params(dataset: Dataset, structure: ModelStructure) -> MixtureParams:
    d = dataset.dims
    # mid-interval post-stimulus convention; the EM refines the shape
    times = dataset.tr * (np.arange(d.n_times) + 0.5)
    hrf = canonical_hrf(times)
    noise = float(np.var(dataset.series)) if dataset.series.size else 1.0
    noise = max(noise, 1e-8)
    return MixtureParams(
        active_prob=1.0,
        amplitude=np.zeros(d.n_voxels),
        coeffs=np.zeros((d.n_voxels, d.n_covariates)),
        hrf=hrf,
        within_cov=np.eye(d.n_times),
        between_cov=np.eye(d.n_epochs),
        noise_var=noise,
    )


def fit_all_active(
    dataset: Dataset,
    config: EmConfig = EmConfig(),
    structure: ModelStructure = ModelStructure(mixture=False),
    max_iter: int | None = None,
    diagnostics=None,
) -> FitResult:
    """Fit the responding model to every voxel (no mixture)."""
    if structure.mixture:
        raise ValueError("fit_all_active requires a non-mixture structure")
    dataset.validate()
    params = _initial_params(dataset, structure)
    limit = config.max_iter if max_iter is None else max_iter
    return _iterate(dataset, params, config, structure, limit, diagnostics)


def init_fit(
    dataset: Dataset,
    config: EmConfig = EmConfig(),
    structure: ModelStructure = ModelStructure(),
) -> MixtureParams:
    """Initialization for the mixture EM.

    Fits the all-responding reduced model, classifies voxels with the
    pre-whitened amplitude t-test at config.init_alpha (uncorrected),
    and seeds the mixture parameters from the two groups. Falls back to
    the top percentile by t-statistic if nothing passes the screen.
    """
    from .inference import t_statistics_all, t_sf, whiten

    dataset.validate()
    d = dataset.dims
    reduced_structure = ModelStructure(
        mixture=False,
        estimate_hrf=structure.estimate_hrf,
        free_within=structure.free_within,
        free_between=structure.free_between,
        spherical=structure.spherical,
    )
    reduced = fit_all_active(
        dataset, config, reduced_structure, max_iter=config.init_max_iter
    )
    params = reduced.params
    y_w, mu_w, x_w = whiten(dataset, params)
    t_stats, df = t_statistics_all(y_w, mu_w, x_w)
    pvals = t_sf(t_stats, df)
    active = pvals < config.init_alpha
    if not np.any(active):
        n_top = max(1, int(np.ceil(0.01 * d.n_voxels)))
        order = np.argsort(t_stats)[::-1]
        active = np.zeros(d.n_voxels, dtype=bool)
        active[order[:n_top]] = True
        warnings.warn(
            "initial screen found no responding voxels; seeding from the "
            f"top {n_top} t-statistics",
            RuntimeWarning,
            stacklevel=2,
        )
    p0 = float(np.clip(np.mean(active), 0.01, 0.99))
    resid = residual_matrices(dataset, params)
    within = params.within_cov
    between = params.between_cov
    if not structure.spherical:
        ind = active.astype(np.float64)
        within, between = update_covariances(
            resid,
            ind,
            within,
            between,
            sweeps=2,
            free_within=structure.free_within,
            free_between=structure.free_between,
        )
        if structure.rescale_trace:
            within, between = _rescale_trace(within, between)
    if np.all(active):
        warnings.warn(
            "no voxels classified non-responding; seeding noise variance "
            "from the pooled residuals",
            RuntimeWarning,
            stacklevel=2,
        )
        resid_i = _residuals_inactive(dataset, params.coeffs)
        noise = float(np.mean(resid_i**2))
    else:
        noise = update_sigma2(dataset, active.astype(np.float64), params.coeffs)
    noise = max(noise, config.noise_floor)
    return MixtureParams(
        active_prob=p0,
        amplitude=params.amplitude,
        coeffs=params.coeffs,
        hrf=params.hrf,
        within_cov=within,
        between_cov=between,
        noise_var=noise,
    )


def em_fit(
    dataset: Dataset,
    config: EmConfig = EmConfig(),
    structure: ModelStructure = ModelStructure(),
    init_params: MixtureParams | None = None,
    diagnostics=None,
) -> FitResult:
    """Fit the mixture by generalized EM.

    Convergence is declared when the relative Euclidean change of the
    global parameters (mixing proportion, shape, covariance factors,
    noise variance) drops below config.tol. ``diagnostics``, when given,
    receives one JSON line per iteration.
    """
    if not structure.mixture:
        return fit_all_active(dataset, config, structure, diagnostics=diagnostics)
    dataset.validate()
    if init_params is None:
        init_params = init_fit(dataset, config, structure)
    if __debug__:
        validate_params(
            init_params, dataset.dims, trace_convention=structure.rescale_trace
        )
    result = _iterate(
        dataset, init_params, config, structure, config.max_iter, diagnostics
    )
    if __debug__:
        result.validate()
    return result
