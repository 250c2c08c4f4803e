"""Post-training assessment: hidden-state accuracy up to the affine gauge
freedom of the reconstruction, recovered-equation pattern and coefficient
comparison, wave-phase errors, and forecast horizon.

The hidden channel is only identified up to an affine map (any a*h + b with
the coefficients rewritten accordingly gives the same visible dynamics), so
every comparison first solves for the best a, b by least squares and then
transforms the learned coefficient table into the truth's variables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datagen, library

PATTERN_THRESHOLD = 1e-3


def relative_error(pred, truth):
    """RMS deviation over the full range of the truth."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    rng = float(truth.max() - truth.min())
    if rng == 0.0:
        raise ValueError("truth signal has zero range")
    return float(np.sqrt(np.mean((pred - truth) ** 2)) / rng)


@dataclass
class Alignment:
    a: np.ndarray          # per hidden channel
    b: np.ndarray
    rel_error: np.ndarray  # of a*estimate + b against the truth


def affine_align(estimate, truth):
    """Least-squares a, b per trailing channel so a*estimate + b ~ truth."""
    est = np.asarray(estimate, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {tru.shape}")
    if est.ndim == 1:
        est, tru = est[:, None], tru[:, None]
    nch = est.shape[-1]
    a = np.empty(nch)
    b = np.empty(nch)
    err = np.empty(nch)
    for c in range(nch):
        e = est[..., c].reshape(-1)
        t = tru[..., c].reshape(-1)
        A = np.stack([e, np.ones_like(e)], axis=1)
        (a[c], b[c]), *_ = np.linalg.lstsq(A, t, rcond=None)
        err[c] = relative_error(a[c] * e + b[c], t)
    return Alignment(a=a, b=b, rel_error=err)


# ---------------------------------------------------------------------------
# coefficient tables in a common gauge
# ---------------------------------------------------------------------------

def _state_affine(dataset, align):
    """Per-component (alpha, gamma) of the physical -> training-variable map
    x_train = (x_phys - gamma) / alpha, visible channels from the stored
    normalization, hidden channels from the alignment (h = (w - b) / a)."""
    alpha = np.concatenate([np.asarray(dataset.norm.std, float), align.a])
    gamma = np.concatenate([np.asarray(dataset.norm.mean, float), align.b])
    return alpha, gamma


def learned_normalized_table(model, dataset, align):
    """Learned coefficients rewritten in the truth's normalized variables
    (unit-variance channels), still in model time units. This is the scale
    on which the sparsity pattern is judged."""
    table = library.model_table(model)
    if model.kind == "complex":
        return table     # phase gauge does not mix terms
    nvis = len(dataset.norm.std)
    hid = dataset.hidden_truth.reshape(dataset.hidden_truth.shape[0], -1)
    h_mean, h_std = hid.mean(axis=0), hid.std(axis=0)
    # learned hidden channel h relates to the truth's normalized hidden
    # t_n = (w - mean)/std via h = alpha*t_n + gamma
    alpha = np.concatenate([np.ones(nvis), h_std / align.a])
    gamma = np.concatenate([np.zeros(nvis), (h_mean - align.b) / align.a])
    row_scale = {eq: (1.0 if eq < nvis else 1.0 / alpha[eq])
                 for eq in table}
    return library.affine_substitute(table, alpha=alpha, gamma=gamma,
                                     row_scale=row_scale)


def truth_normalized_table(dataset, s_t=10.0, s_x=None):
    """Generating equations rewritten in the same normalized variables and
    model time units as the learned table."""
    phys = datagen.true_coefficient_table(dataset.preset)
    dt = dataset.norm.dt
    if dataset.preset.kind == "nlse":
        std = float(dataset.norm.std[0])
        out = {}
        for key, c in phys[0].items():
            c = c * s_t * dt
            if key[0] == "wave_deriv":
                c = c   # s_x = 1 for the wave library
            elif key[0] == "wave_nonlin":
                c = c * std ** key[1]
            out[key] = c
        return {0: out}
    hid = dataset.hidden_truth.reshape(dataset.hidden_truth.shape[0], -1)
    alpha = np.concatenate([np.asarray(dataset.norm.std, float),
                            hid.std(axis=0)])
    gamma = np.concatenate([np.asarray(dataset.norm.mean, float),
                            hid.mean(axis=0)])
    normed = library.affine_substitute(
        phys, alpha=alpha, gamma=gamma,
        row_scale={j: 1.0 / alpha[j] for j in phys})
    sx = s_x if s_x is not None else (
        np.sqrt(10.0) if dataset.preset.kind == "pde" else 1.0)
    out = {}
    for eq, row in normed.items():
        out[eq] = {}
        for key, c in row.items():
            order = sum(key[2]) if key[0] == "deriv" else 0
            out[eq][key] = c * s_t * dt * sx ** order
    return out


def prune_table(table, threshold=PATTERN_THRESHOLD):
    return {eq: {k: c for k, c in row.items() if abs(c) >= threshold}
            for eq, row in table.items()}


def pattern_of(table, threshold=PATTERN_THRESHOLD):
    return {(eq, k) for eq, row in table.items()
            for k, c in row.items() if abs(c) >= threshold}


def learned_physical_table(model, dataset, align):
    """Learned equations in the original data units and the truth's hidden
    variable."""
    if model.kind == "complex":
        return library.physical_coefficients(model, dataset.norm)
    alpha, gamma = _state_affine(dataset, align)
    norm = datagen.NormalizationRecord(mean=gamma, std=alpha,
                                       deriv_std={}, dt=dataset.norm.dt,
                                       spacing=dataset.norm.spacing)
    return library.physical_coefficients(model, norm)


def compare_equations(model, dataset, align, threshold=PATTERN_THRESHOLD):
    """Sparsity-pattern verdict plus per-coefficient relative errors.

    The learned table is moved into the truth's normalized variables, entries
    below `threshold` are discarded, and the surviving pattern is compared
    against the generating equations; coefficients are then compared in
    physical units over the union of the two patterns.
    """
    found_n = learned_normalized_table(model, dataset, align)
    truth_n = truth_normalized_table(dataset, s_t=model.s_t, s_x=model.s_x)
    found_pat = pattern_of(found_n, threshold)
    truth_pat = pattern_of(truth_n, threshold)
    found_phys = learned_physical_table(model, dataset, align)
    truth_phys = datagen.true_coefficient_table(dataset.preset)
    errors = {}
    for eq, key in sorted(found_pat | truth_pat):
        t = truth_phys.get(eq, {}).get(key, 0.0)
        f = found_phys.get(eq, {}).get(key, 0.0)
        errors[(eq, key)] = (abs(f - t) / abs(t)) if t != 0.0 else abs(f)
    return {
        "pattern_match": found_pat == truth_pat,
        "missing": sorted(truth_pat - found_pat),
        "spurious": sorted(found_pat - truth_pat),
        "coefficient_errors": errors,
        "found_physical": found_phys,
        "truth_physical": truth_phys,
    }


# ---------------------------------------------------------------------------
# wave phase diagnostics
# ---------------------------------------------------------------------------

def wrap_angle(x):
    return np.angle(np.exp(1j * np.asarray(x)))


def phase_errors(phase_est, phase_truth, dx):
    """Errors of a reconstructed wave phase up to the global-phase gauge.

    Returns (phase_rel_error, gradient_rel_error): the gauge-fixed wrapped
    phase residual and the periodic spatial phase gradient residual, both
    RMS over range-of-truth.
    """
    est = np.asarray(phase_est, float)
    tru = np.asarray(phase_truth, float)
    if est.shape != tru.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {tru.shape}")
    # global phase offset: circular mean of the pointwise mismatch
    offset = np.angle(np.mean(np.exp(1j * (est - tru))))
    resid = wrap_angle(est - tru - offset)
    tru_unwrapped = np.unwrap(tru, axis=-1)
    rng = float(tru_unwrapped.max() - tru_unwrapped.min())
    phase_err = float(np.sqrt(np.mean(resid ** 2)) / rng)

    def grad(phi):
        d = wrap_angle(np.roll(phi, -1, axis=-1) - np.roll(phi, 1, axis=-1))
        return d / (2 * dx)

    ge, gt = grad(est), grad(tru)
    grad_err = float(np.sqrt(np.mean((ge - gt) ** 2))
                     / (gt.max() - gt.min()))
    return phase_err, grad_err


# ---------------------------------------------------------------------------
# forecasting
# ---------------------------------------------------------------------------

def prediction_horizon(model, dataset, align, hidden_estimate, start=0,
                       threshold=0.1, max_time=None, substeps=10):
    """Forecast with the learned equations from a reconstructed state and
    report how long the visible trajectory stays within `threshold` of the
    truth (RMS amplitude units). Returns the horizon in Lyapunov times when
    the preset defines one, otherwise in plain time units."""
    if dataset.preset.kind != "ode":
        raise ValueError("prediction horizon is defined for the ODE systems")
    table = learned_physical_table(model, dataset, align)
    rhs = datagen.table_rhs(table, model.state_dim)
    vis_idx = dataset.preset.visible
    truth_vis = dataset.visible_raw[start:]
    n_steps = truth_vis.shape[0] - 1
    if max_time is not None:
        n_steps = min(n_steps, int(max_time / dataset.norm.dt))
    x = np.empty(model.state_dim)
    x[vis_idx] = dataset.visible_raw[start]
    hid = align.a * np.atleast_1d(hidden_estimate) + align.b
    hidden_idx = [j for j in range(model.state_dim) if j not in vis_idx]
    x[hidden_idx] = hid
    scale = np.sqrt(np.mean((truth_vis - truth_vis.mean(axis=0)) ** 2))
    horizon_steps = 0
    sub_dt = dataset.norm.dt / substeps
    for k in range(1, n_steps + 1):
        for _ in range(substeps):
            x = datagen.rk4_step(rhs, x, sub_dt)
        if not np.all(np.isfinite(x)):
            break
        dev = np.sqrt(np.mean((x[vis_idx] - truth_vis[k]) ** 2))
        if dev > threshold * scale:
            break
        horizon_steps = k
    horizon = horizon_steps * dataset.norm.dt
    tau = dataset.preset.lyapunov_time
    return horizon / tau if tau else horizon


def evaluate_run(dataset, model, encoder, threshold=PATTERN_THRESHOLD):
    """Reconstruct the hidden state on the valid interior, align it with the
    truth, and compare the learned equations; returns a result dict with the
    alignment, the comparison, and the reconstructed state."""
    from .train import Problem
    prob = Problem(dataset, model, encoder, order=1, alphas=(1.0,))
    state = prob.reconstruct().data
    lo, hi = prob.lo, prob.hi
    out = {"lo": lo, "hi": hi, "state": state}
    if model.kind == "complex":
        phase_est = np.arctan2(state[..., 1], state[..., 0])
        phase_truth = dataset.hidden_truth[lo:hi, ..., 0]
        pe, ge = phase_errors(phase_est, phase_truth,
                              dx=dataset.preset.spacing[0])
        align = Alignment(a=np.ones(1), b=np.zeros(1),
                          rel_error=np.array([pe]))
        out["phase_error"] = pe
        out["phase_gradient_error"] = ge
        out["hidden_estimate"] = phase_est
    else:
        nvis = dataset.visible.shape[-1]
        est = state[..., nvis:]
        truth = dataset.hidden_truth[lo:hi]
        align = affine_align(est.reshape(-1), truth.reshape(-1))
        out["hidden_estimate"] = est
    out["align"] = align
    out["comparison"] = compare_equations(model, dataset, align, threshold)
    return out


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------

def _key_name(key, ncomp):
    return library.basis_name(key, ncomp)


def report(model, dataset, align, comparison, extra=None):
    """JSON-serializable summary of one recovery run."""
    ncomp = model.state_dim
    doc = {
        "preset": dataset.preset.name,
        "seed": dataset.seed,
        "active_terms": model.active_terms(),
        "hidden": {
            "a": align.a.tolist(), "b": align.b.tolist(),
            "rel_error": align.rel_error.tolist(),
        },
        "pattern_match": comparison["pattern_match"],
        "missing": [[eq, _key_name(k, ncomp)]
                    for eq, k in comparison["missing"]],
        "spurious": [[eq, _key_name(k, ncomp)]
                     for eq, k in comparison["spurious"]],
        "equations": {},
        "coefficient_errors": {},
    }
    for eq, row in comparison["found_physical"].items():
        doc["equations"][str(eq)] = {
            _key_name(k, ncomp): c for k, c in row.items()
            if abs(c) > 0.0}
    for (eq, k), e in comparison["coefficient_errors"].items():
        doc["coefficient_errors"][f"{eq}:{_key_name(k, ncomp)}"] = e
    if extra:
        doc.update(extra)
    return doc


def write_report(doc, path):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=False))
