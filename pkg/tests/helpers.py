"""Shared builders for random but valid model objects.

Every helper takes an explicit numpy Generator so tests stay
reproducible. Dimensions default small enough that dense oracles
stay cheap.
"""
import numpy as np

from trialmix.em import (
    canonical_hrf,
    q_function,
    residual_matrices,
    update_b,
    update_beta,
    update_covariances,
    update_h,
    update_sigma2,
)
from trialmix.types import Dataset, Dims, Hrf, MixtureParams


def rand_spd(rng, n, scale=1.0):
    """Random well-conditioned SPD matrix."""
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T / n + 0.5 * np.eye(n))


def make_dims(n_times=4, n_epochs=3, n_voxels=6, n_covariates=2):
    return Dims(
        n_times=n_times,
        n_epochs=n_epochs,
        n_voxels=n_voxels,
        n_covariates=n_covariates,
    )


def cube_coords(n_voxels):
    """First n_voxels lattice points of a cube grid, C-scan order."""
    side = 1
    while side**3 < n_voxels:
        side += 1
    grid = np.stack(
        np.meshgrid(*([np.arange(side)] * 3), indexing="ij"), axis=-1
    )
    return np.ascontiguousarray(grid.reshape(-1, 3)[:n_voxels])


def make_dataset(dims, rng, tr=2.0):
    """Random valid dataset: white series, centered design, cube coords."""
    n = dims.n_images
    series = rng.standard_normal((dims.n_voxels, n))
    design = rng.standard_normal((n, dims.n_covariates))
    if dims.n_covariates:
        design = design - design.mean(axis=0, keepdims=True)
    stimulus_times = tr * dims.n_times * np.arange(dims.n_epochs, dtype=np.float64)
    return Dataset(
        dims=dims,
        series=series,
        design=design,
        coords=cube_coords(dims.n_voxels),
        stimulus_times=stimulus_times,
        tr=tr,
    )


def make_params(dims, rng, active_prob=0.4, rescaled=True):
    """Random valid mixture parameters at the given dimensions."""
    hrf = canonical_hrf(2.0 * (np.arange(dims.n_times) + 0.5))
    within = rand_spd(rng, dims.n_times)
    between = rand_spd(rng, dims.n_epochs)
    if rescaled:
        scale = float(np.trace(between)) / dims.n_epochs
        within = within * scale
        between = between / scale
    return MixtureParams(
        active_prob=active_prob,
        amplitude=rng.standard_normal(dims.n_voxels),
        coeffs=rng.standard_normal((dims.n_voxels, dims.n_covariates)),
        hrf=hrf,
        within_cov=within,
        between_cov=between,
        noise_var=float(rng.uniform(0.5, 2.0)),
    )


def central_diff(fun, x, step=1e-6):
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros(x.size)
    for i in range(x.size):
        up = x.copy()
        dn = x.copy()
        up[i] += step
        dn[i] -= step
        grad[i] = (fun(up) - fun(dn)) / (2.0 * step)
    return grad


def pack_sym(mat):
    """Lower triangle of a symmetric matrix as a flat vector."""
    return mat[np.tril_indices(mat.shape[0])]


def unpack_sym(vec, n):
    """Inverse of pack_sym; off-diagonal entries land in both halves."""
    out = np.zeros((n, n))
    idx = np.tril_indices(n)
    out[idx] = vec
    return out + out.T - np.diag(np.diag(out))


def mstep_stationarity_gaps(dataset, resp, params, step=1e-6, cov_sweeps=100):
    """Max finite-difference gradient of Q after each conditional update.

    Each update is applied to `params` in the sweep order and the
    gradient of the expected complete-data log-likelihood is probed in
    that update's own block, holding everything it conditioned on
    fixed. Symmetric matrices are probed along the packed-triangle
    directions (an off-diagonal coordinate moves both mirror entries).
    Returns a dict keyed by update name.
    """
    d = dataset.dims
    gaps = {}

    amp = np.array(
        [
            update_beta(
                dataset.series[i],
                dataset.design,
                params.coeffs[i],
                params.hrf.values,
                params.within_cov,
                params.between_cov,
            )
            for i in range(d.n_voxels)
        ]
    )
    p_amp = params.with_updates(amplitude=amp)
    gaps["update_beta"] = np.max(
        np.abs(
            central_diff(
                lambda a: q_function(dataset, resp, p_amp.with_updates(amplitude=a)),
                amp,
                step,
            )
        )
    )

    if d.n_covariates:
        coeffs = np.stack(
            [
                update_b(
                    dataset.series[i],
                    dataset.design,
                    float(amp[i]),
                    float(resp[i]),
                    params.hrf.values,
                    params.within_cov,
                    params.between_cov,
                    params.noise_var,
                )
                for i in range(d.n_voxels)
            ]
        )
        p_b = p_amp.with_updates(coeffs=coeffs)
        gaps["update_b"] = np.max(
            np.abs(
                central_diff(
                    lambda c: q_function(
                        dataset,
                        resp,
                        p_b.with_updates(coeffs=c.reshape(d.n_voxels, d.n_covariates)),
                    ),
                    coeffs.ravel(),
                    step,
                )
            )
        )
    else:
        coeffs = np.zeros((d.n_voxels, 0))
        p_b = p_amp
        gaps["update_b"] = 0.0

    hrf, amp2 = update_h(dataset, resp, p_b)
    p_h = p_b.with_updates(hrf=hrf, amplitude=amp2)
    gaps["update_h"] = np.max(
        np.abs(
            central_diff(
                lambda v: q_function(
                    dataset, resp, p_h.with_updates(hrf=Hrf(values=v))
                ),
                hrf.values,
                step,
            )
        )
    )

    # sweep the factor pair to its joint fixed point; cov_sweeps caps one
    # round, and rounds repeat until the pair stops moving (tiny 2x2
    # instances can need several hundred alternations)
    resid = residual_matrices(dataset, p_h)
    within = params.within_cov
    between = params.between_cov
    for _ in range(50):
        new_w, new_b = update_covariances(
            resid, resp, within, between, sweeps=cov_sweeps
        )
        delta = max(
            np.max(np.abs(new_w - within)) / max(1.0, np.max(np.abs(new_w))),
            np.max(np.abs(new_b - between)) / max(1.0, np.max(np.abs(new_b))),
        )
        within, between = new_w, new_b
        if delta < 1e-13:
            break
    p_cov = p_h.with_updates(within_cov=within, between_cov=between)
    grad_w = central_diff(
        lambda v: q_function(
            dataset,
            resp,
            p_cov.with_updates(within_cov=unpack_sym(v, d.n_times)),
        ),
        pack_sym(within),
        step,
    )
    grad_b = central_diff(
        lambda v: q_function(
            dataset,
            resp,
            p_cov.with_updates(between_cov=unpack_sym(v, d.n_epochs)),
        ),
        pack_sym(between),
        step,
    )
    gaps["update_covariances"] = max(
        np.max(np.abs(grad_w)), np.max(np.abs(grad_b))
    )

    noise = update_sigma2(dataset, resp, coeffs)
    p_s = p_cov.with_updates(noise_var=noise)
    gaps["update_sigma2"] = np.max(
        np.abs(
            central_diff(
                lambda v: q_function(
                    dataset, resp, p_s.with_updates(noise_var=float(v[0]))
                ),
                np.array([noise]),
                step,
            )
        )
    )
    return gaps
