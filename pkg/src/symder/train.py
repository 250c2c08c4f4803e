"""Joint full-batch training of the symbolic coefficients and the hidden-state
encoder.

The loss compares d^p/dt^p of the visible projection computed two ways:
symbolically (jet propagation through the candidate model, in model time
units) and numerically (central finite differences of the normalized visible
data). Each order is rescaled by the precomputed std of its finite-difference
derivative so the per-order residuals start at O(1).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from . import fd, jets, encoders

DIVERGENCE_LIMIT = 1e6


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 1000
    lr: float = 1e-3
    optimizer: str = "adabelief"     # adabelief | adam
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = None               # default 1e-16 adabelief, 1e-8 adam
    order: int = 2
    alphas: tuple = (1.0, 1.0)      # loss weight per derivative order
    beta_phase: float = 0.0         # wave-system phase regularizer weight
    sparsify_every: int = 0         # 0 disables thresholding
    theta_threshold: float = 1e-3
    divergence_limit: float = DIVERGENCE_LIMIT
    chunk_time: int = 0             # 0 = single full-batch pass per step
    batch_time: int = 0             # >0: one random window of this many
                                    # samples per step instead of full batch
    lr_final: float = None          # cosine decay target; None = constant lr
    seed: int = 0


class GradientOptimizer:
    """Adam, and the variant that tracks the variance of (g - m) instead of
    g (beliefs about the gradient rather than its magnitude)."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=None,
                 variant="adabelief"):
        if variant not in ("adabelief", "adam"):
            raise ValueError(f"unknown optimizer variant {variant!r}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = beta1, beta2
        self.eps = eps if eps is not None else \
            (1e-16 if variant == "adabelief" else 1e-8)
        self.variant = variant
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.s = [np.zeros(p.shape) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            if self.variant == "adabelief":
                d = g - self.m[i]
                self.s[i] = self.beta2 * self.s[i] + (1 - self.beta2) * d * d \
                    + self.eps
            else:
                self.s[i] = self.beta2 * self.s[i] + (1 - self.beta2) * g * g
            mhat = self.m[i] / bc1
            shat = self.s[i] / bc2
            p.data = p.data - self.lr * mhat / (np.sqrt(shat) + self.eps)


class Problem:
    """Binds one dataset to a candidate model and encoder; precomputes the
    finite-difference targets and the shared valid time interior."""

    def __init__(self, dataset, model, encoder, order=2, alphas=(1.0, 1.0),
                 beta_phase=0.0):
        if len(alphas) < order:
            raise ValueError(f"need {order} loss weights, got {len(alphas)}")
        self.dataset = dataset
        self.model = model
        self.encoder = encoder
        self.order = order
        self.alphas = tuple(alphas)[:order]
        self.beta_phase = beta_phase

        vis = dataset.visible
        dt = dataset.norm.dt
        n_time = vis.shape[0]
        r = encoder.radius
        margin = max(len(fd.CENTRAL_STENCILS[p]) // 2
                     for p in range(1, order + 1))
        lo = max(r, margin)
        hi = n_time - max(r, margin)
        if hi - lo < 1:
            raise ValueError("series too short for the requested derivatives")
        self.lo, self.hi = lo, hi

        # constant targets: FD_p(normalized visible) / sigma_p on [lo, hi)
        self.targets = {}
        self.deriv_scale = {}
        for p in range(1, order + 1):
            d, valid = fd.time_derivative(vis, p, dt)
            sigma = np.asarray(dataset.norm.deriv_std[p])
            self.targets[p] = d[lo - valid.start:hi - valid.start] / sigma
            # symbolic derivatives come out in model time units
            self.deriv_scale[p] = 1.0 / ((model.s_t * dt) ** p * sigma)

        self.vis_t = T.Tensor(vis)
        self.vis_trim = T.Tensor(vis[lo:hi])
        if model.kind == "complex":
            self.agg_kind = "modulus_phase"
            self.projection = jets.Projection("modulus")
        else:
            self.agg_kind = "concat"
            self.projection = jets.Projection(
                "subset", list(range(vis.shape[-1])))

    def reconstruct(self, lo=None, hi=None):
        """Full state estimate on the valid interior window [lo, hi)
        (defaults to all of it). The encoder only sees the samples its
        receptive field needs, so windows tile the series exactly."""
        lo = self.lo if lo is None else lo
        hi = self.hi if hi is None else hi
        r = self.encoder.radius
        if self.encoder.receptive_field == 1:
            hidden = self.encoder(self.vis_t)[lo:hi]
        else:
            hidden = self.encoder(self.vis_t[lo - r:hi + r])
        vis = self.vis_t[lo:hi]
        return encoders.aggregate(self.agg_kind, vis, hidden)

    def compute_loss(self, lo=None, hi=None):
        lo = self.lo if lo is None else lo
        hi = self.hi if hi is None else hi
        state = self.reconstruct(lo, hi)
        jet = jets.propagate(state, self.model, self.order)
        sym = jets.visible_derivatives(jet, self.projection, self.order)
        total = None
        parts = {}
        for p in range(1, self.order + 1):
            target = self.targets[p][lo - self.lo:hi - self.lo]
            resid = T.sub(T.mul(sym[p - 1], self.deriv_scale[p]), target)
            lp = T.tmean(T.square(resid))
            parts[f"loss_p{p}"] = lp.item()
            term = T.mul(lp, self.alphas[p - 1])
            total = term if total is None else T.add(total, term)
        if self.beta_phase and self.model.kind == "complex":
            reg = encoders.phase_regularizer(state, self.model,
                                             self.beta_phase,
                                             self.dataset.norm.dt)
            parts["reg"] = reg.item()
            total = T.add(total, reg)
        else:
            parts["reg"] = 0.0
        return total, parts

    def chunks(self, chunk_time):
        """Tile [lo, hi) into windows of at most chunk_time samples, each
        with its weight in the equally-weighted full-batch average."""
        if not chunk_time or chunk_time >= self.hi - self.lo:
            return [(self.lo, self.hi, 1.0)]
        out = []
        span = self.hi - self.lo
        for a in range(self.lo, self.hi, chunk_time):
            b = min(a + chunk_time, self.hi)
            out.append((a, b, (b - a) / span))
        return out


def default_model(preset, seed=0, init_scale=None):
    """Library preset for a system kind with small seeded random starting
    coefficients (symmetry breaking; zeros also train, just slower)."""
    from . import library
    if preset.kind == "ode":
        model = library.ode_library()
    elif preset.kind == "pde":
        model = library.pde_library(dx=preset.spacing[0],
                                    dy=preset.spacing[1])
    elif preset.kind == "nlse":
        model = library.nlse_library(dx=preset.spacing[0])
    else:
        raise ValueError(f"unknown system kind {preset.kind!r}")
    if init_scale is None:
        # high-order stencils amplify by 1/dx^order, so the wave library
        # needs a much smaller starting point to keep the first loss finite
        init_scale = 1e-4 if preset.kind == "nlse" else 0.1
    rng = np.random.default_rng(seed)
    model.theta[...] = rng.uniform(-init_scale, init_scale, model.theta.shape)
    model.theta[~model.mask] = 0.0
    model.sync()
    return model


def default_encoder(dataset, width=None, seed=0):
    preset = dataset.preset
    n_vis = dataset.visible.shape[-1]
    if preset.kind == "ode":
        spec = encoders.ode_encoder_spec(n_visible=n_vis,
                                         width=width or 128)
    elif preset.kind == "pde":
        spec = encoders.pde_encoder_spec(n_visible=n_vis, width=width or 64)
    elif preset.kind == "nlse":
        spec = encoders.phase_embedding_spec(dataset.visible.shape[:-1])
    else:
        raise ValueError(f"unknown system kind {preset.kind!r}")
    return encoders.Encoder(spec, seed=seed)


def fit(problem, config, out_dir=None, log=None):
    """Run the training loop; returns the per-step history (list of dicts).
    Writes history.csv, model.json and encoder.ckpt under out_dir if given."""
    model, encoder = problem.model, problem.encoder
    params = [model.theta_t] + [p for _, p in encoder.parameters()]
    opt = GradientOptimizer(params, lr=config.lr, beta1=config.beta1,
                            beta2=config.beta2, eps=config.eps,
                            variant=config.optimizer)
    history = []
    chunks = problem.chunks(config.chunk_time)
    span = problem.hi - problem.lo
    batch = min(config.batch_time, span) if config.batch_time else 0
    rng = np.random.default_rng(config.seed)
    for step in range(config.steps):
        if config.lr_final is not None and config.steps > 1:
            frac = step / (config.steps - 1)
            opt.lr = config.lr_final + (config.lr - config.lr_final) * \
                0.5 * (1 + np.cos(np.pi * frac))
        opt.zero_grad()
        val = 0.0
        parts = {}
        if batch:
            # stochastic variant: score one random contiguous window per
            # step; cheaper than full batch and the noise helps the joint
            # coefficient/encoder problem escape dense near-minima
            a = problem.lo + int(rng.integers(0, span - batch + 1))
            step_chunks = [(a, a + batch, 1.0)]
        else:
            step_chunks = chunks
        # gradient accumulation over time windows: identical totals to one
        # full-batch pass, but the tape never holds more than one window
        for lo, hi, w in step_chunks:
            total, cparts = problem.compute_loss(lo, hi)
            val += w * float(total.data)
            for k, v in cparts.items():
                parts[k] = parts.get(k, 0.0) + w * v
            T.backward(total if w == 1.0 else T.mul(total, w))
        if not np.isfinite(val) or val > config.divergence_limit:
            raise TrainingDiverged(
                f"loss {val:.3g} at step {step} "
                f"(limit {config.divergence_limit:g})")
        opt.step()
        # keep the master coefficient array in sync with the tape leaf
        model.theta_t.data[~model.mask] = 0.0
        model.theta[...] = model.theta_t.data
        if (config.sparsify_every
                and (step + 1) % config.sparsify_every == 0):
            model.sparsify(config.theta_threshold)
        row = {"step": step, "total_loss": val,
               "loss_p1": parts.get("loss_p1", 0.0),
               "loss_p2": parts.get("loss_p2", 0.0),
               "reg": parts["reg"],
               "n_active_terms": model.active_terms()}
        history.append(row)
        if log is not None and (step % max(1, config.steps // 20) == 0
                                or step == config.steps - 1):
            log(f"step {step:6d}  loss {val:.6g}  "
                f"active {row['n_active_terms']}")
    if out_dir is not None:
        save_run(Path(out_dir), problem, config, history)
    return history


HISTORY_FIELDS = ["step", "total_loss", "loss_p1", "loss_p2", "reg",
                  "n_active_terms"]


def save_run(out_dir, problem, config, history):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "history.csv", "w", newline="") as f:
        wtr = csv.DictWriter(f, fieldnames=HISTORY_FIELDS)
        wtr.writeheader()
        wtr.writerows(history)
    cfg = asdict(config)
    cfg["alphas"] = list(cfg["alphas"])
    (out_dir / "model.json").write_text(problem.model.to_json())
    import json
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=1))
    encoders.save_checkpoint(problem.encoder, out_dir / "encoder.ckpt")


def load_history(path):
    with open(path, newline="") as f:
        rows = []
        for row in csv.DictReader(f):
            rows.append({k: (int(v) if k in ("step", "n_active_terms")
                             else float(v)) for k, v in row.items()})
    return rows
