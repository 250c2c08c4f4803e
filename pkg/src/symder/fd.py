"""Finite-difference estimators.

Second-order-accurate central differences in time (loss targets) and periodic
central stencils in space (used by the PDE term libraries). Time derivatives
drop boundary samples rather than falling back to one-sided estimates; the
valid index range is returned alongside the values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

# central stencil weights for derivative order p, accuracy order 2
CENTRAL_STENCILS = {
    1: np.array([-0.5, 0.0, 0.5]),
    2: np.array([1.0, -2.0, 1.0]),
    3: np.array([-0.5, 1.0, 0.0, -1.0, 0.5]),
    4: np.array([1.0, -4.0, 6.0, -4.0, 1.0]),
}


@dataclass(frozen=True)
class StencilSpec:
    order: int          # derivative order p
    axis: int
    spacing: float
    accuracy: int = 2

    def __post_init__(self):
        if self.order not in CENTRAL_STENCILS:
            raise ValueError(f"unsupported derivative order {self.order}")
        if self.accuracy != 2:
            raise ValueError("only second-order central stencils implemented")


def stencil_weights(p, spacing):
    return CENTRAL_STENCILS[p] / spacing ** p


def time_derivative(series, p, dt):
    """Central p-th time derivative along axis 0.

    Returns (deriv, valid) where `deriv` has the same leading extent as
    `series` with boundary samples excluded, and `valid` is the slice of
    input indices the estimates correspond to.
    """
    series = np.asarray(series)
    if p not in CENTRAL_STENCILS:
        raise ValueError(f"unsupported derivative order {p}")
    w = stencil_weights(p, dt)
    half = len(w) // 2
    n = series.shape[0]
    if n < len(w):
        raise ValueError(f"series length {n} too short for order-{p} stencil")
    nout = n - 2 * half
    out = np.zeros((nout,) + series.shape[1:])
    for k, wk in enumerate(w):
        if wk != 0.0:
            out += wk * series[k:k + nout]
    return out, slice(half, n - half)


def time_derivative_tensor(series, p, dt):
    """Tape-aware version of :func:`time_derivative` for Tensor inputs."""
    w = stencil_weights(p, dt)
    half = len(w) // 2
    n = series.shape[0]
    if n < len(w):
        raise ValueError(f"series length {n} too short for order-{p} stencil")
    nout = n - 2 * half
    out = None
    for k, wk in enumerate(w):
        if wk == 0.0:
            continue
        term = T.mul(series[k:k + nout], wk)
        out = term if out is None else T.add(out, term)
    return out, slice(half, n - half)


def spatial_stencil(field, spec: StencilSpec):
    """Periodic central stencil along one axis; works on ndarray or Tensor."""
    w = stencil_weights(spec.order, spec.spacing)
    half = len(w) // 2
    if isinstance(field, T.Tensor):
        out = None
        for k, wk in enumerate(w):
            if wk == 0.0:
                continue
            term = T.mul(T.roll(field, half - k, axis=spec.axis), wk)
            out = term if out is None else T.add(out, term)
        return out
    field = np.asarray(field)
    out = np.zeros_like(field)
    for k, wk in enumerate(w):
        if wk != 0.0:
            out += wk * np.roll(field, half - k, axis=spec.axis)
    return out
