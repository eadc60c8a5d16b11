"""Rehearsal loss from worst-case parameter perturbation.

The model's future self is approximated by theta + delta with delta inside
an L2 ball of radius epsilon over the flattened trainable set. Starting
from a Gaussian draw rescaled to epsilon/2, projected gradient ascent
pushes delta toward the largest output change on the current batch, and
the resulting squared deviation (averaged over tokens) is the rehearsal
penalty added to the reconstruction objective. Gradients of the composite
loss treat the final delta as a constant (first-order treatment).

Advisor states and random feature maps are never perturbed: delta spans
exactly the gradient-trained parameter record.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .advisor import AdvisorState
from .model import ModelConfig, ModelParams, blocks_tape, embed_tape, init_params, make_leaves

log = logging.getLogger("cloudad.rpp")


@dataclass
class PerturbationConfig:
    epsilon: float = 0.1       # L2 ball radius over the trainable vector
    ascent_steps: int = 1
    step_size: float = 0.5     # fraction of epsilon per ascent step
    lambda_rpp: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.ascent_steps < 0:
            raise ValueError("ascent_steps must be >= 0")
        if not 0 < self.step_size <= 1:
            raise ValueError("step_size must lie in (0, 1]")

    @property
    def active(self) -> bool:
        return self.epsilon > 0 and self.lambda_rpp != 0


def sample_perturbation(params: ModelParams, epsilon: float, seed: int) -> dict[str, np.ndarray]:
    """I.i.d. Gaussian over every trainable entry, rescaled to |delta| = epsilon/2.

    The draw direction is independent of epsilon (scale applied last), so a
    fixed seed probes the same direction across ball radii.
    """
    dt = params.config.np_dtype
    if epsilon == 0:
        return {k: np.zeros_like(v) for k, v in params.arrays.items()}
    rng = np.random.default_rng(seed)
    raw = {k: rng.standard_normal(v.shape) for k, v in params.arrays.items()}
    norm = np.sqrt(sum(float((a * a).sum()) for a in raw.values()))
    scale = (epsilon / 2.0) / norm
    return {k: (a * scale).astype(dt) for k, a in raw.items()}


def delta_norm(delta: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((a.astype(np.float64) ** 2).sum()) for a in delta.values())))


def _project(delta: dict[str, np.ndarray], epsilon: float) -> dict[str, np.ndarray]:
    norm = delta_norm(delta)
    if norm <= epsilon or norm == 0.0:
        return delta
    scale = epsilon / norm
    return {k: a * scale for k, a in delta.items()}


def _deviation_loss_tape(h_ref: ad.Tensor | np.ndarray, h_new: ad.Tensor) -> ad.Tensor:
    """|h_ref - h_new|^2 summed over the token width, averaged over tokens."""
    ref = h_ref if isinstance(h_ref, ad.Tensor) else ad.Tensor(h_ref)
    diff = ad.sub(ref, h_new)
    return ad.meanax(ad.sumax(ad.mul(diff, diff), axis=-1), axis=None)


def _blocks_value(params: ModelParams, arrays: dict[str, np.ndarray], tokens: np.ndarray) -> np.ndarray:
    leaves = {k: ad.Tensor(v) for k, v in arrays.items()}
    out, _ = blocks_tape(ad.Tensor(tokens), leaves, params)
    return out.data


def _deviation_value(params, arrays, tokens, h_ref) -> float:
    out = _blocks_value(params, arrays, tokens)
    diff = h_ref - out
    return float((diff * diff).sum(axis=-1).mean())


def _ascend(
    params: ModelParams,
    tokens: np.ndarray,
    h_ref: np.ndarray,
    delta: dict[str, np.ndarray],
    config: PerturbationConfig,
) -> tuple[dict[str, np.ndarray], float]:
    """Projected gradient ascent on the deviation loss; monotone per step.

    Each step moves along the normalized gradient by step_size * epsilon,
    projects back onto the ball, and halves the step while the objective
    would decrease (keeping the incumbent if no halving helps). Returns the
    final delta and its loss value.
    """
    base = _deviation_value(params, {k: params.arrays[k] + delta[k] for k in params.arrays},
                            tokens, h_ref)
    for _ in range(config.ascent_steps):
        pert = {k: ad.Tensor(params.arrays[k] + delta[k], needs=True) for k in params.arrays}
        out, _ = blocks_tape(ad.Tensor(tokens), pert, params)
        loss_t = _deviation_loss_tape(h_ref, out)
        ad.backward(loss_t)
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                 for k, t in pert.items()}
        gnorm = delta_norm(grads)
        if not np.isfinite(gnorm) or gnorm == 0.0:
            log.warning("rpp_ascent_gradient_degenerate norm=%s; keeping current delta", gnorm)
            return delta, base
        step = config.step_size * config.epsilon
        improved = False
        for _halving in range(8):
            cand = {k: delta[k] + (step / gnorm) * grads[k] for k in delta}
            cand = _project(cand, config.epsilon)
            cand_loss = _deviation_value(
                params, {k: params.arrays[k] + cand[k] for k in params.arrays}, tokens, h_ref
            )
            if cand_loss >= base:
                delta, base = cand, cand_loss
                improved = True
                break
            step *= 0.5
        if not improved:
            break  # ascent stalled; incumbent delta stays
    return delta, base


def _as_token_array(batch, dt) -> np.ndarray:
    """Accept a TokenBatch, an (n, d) array, or a (B, n, d) array."""
    tokens = getattr(batch, "tokens", batch)
    tokens = np.asarray(tokens, dtype=dt)
    if tokens.ndim == 2:
        tokens = tokens[None]
    if tokens.ndim != 3:
        raise ValueError(f"expected (B, n, d) tokens, got shape {tokens.shape}")
    return tokens


def rpp_loss(params: ModelParams, batch, config: PerturbationConfig) -> tuple[float, dict]:
    """Worst-case output deviation on `batch` and the delta that produced it.

    Evaluates perturbed copies only; `params` (and its advisor states) are
    left untouched. With epsilon = 0 the loss is exactly zero.
    """
    dt = params.config.np_dtype
    if not config.epsilon > 0:
        return 0.0, {k: np.zeros_like(v) for k, v in params.arrays.items()}
    tokens = _as_token_array(batch, dt)
    h_ref = _blocks_value(params, params.arrays, tokens)
    delta = sample_perturbation(params, config.epsilon, config.seed)
    delta, loss = _ascend(params, tokens, h_ref, delta, config)
    return loss, delta


def composite_loss(params: ModelParams, batch, config: PerturbationConfig) -> float:
    """Reconstruction loss plus lambda_rpp times the rehearsal loss."""
    dt = params.config.np_dtype
    tokens = _as_token_array(batch, dt)
    out = _blocks_value(params, params.arrays, tokens)
    diff = tokens - out
    rec = float((diff * diff).mean())
    if not config.active:
        return rec
    rpp, _ = rpp_loss(params, tokens, config)
    return rec + config.lambda_rpp * rpp


@dataclass
class CompositeGrads:
    total: float
    recon: float
    rpp: float
    grads: dict[str, np.ndarray] = field(repr=False)
    layer_kv: Optional[list] = field(default=None, repr=False)
    delta: Optional[dict[str, np.ndarray]] = field(default=None, repr=False)


def param_gradients(
    params: ModelParams,
    groups: np.ndarray,
    centers: np.ndarray,
    config: PerturbationConfig,
    collect_kv: bool = True,
) -> CompositeGrads:
    """Exact reverse-mode gradients of the composite loss over one batch.

    `groups`/`centers` are stacked geometry, shapes (B, n, g, 3)/(B, n, 3).
    The rehearsal delta is found first by ascent and then held constant, so
    the returned gradients are exactly those of composite_value_at_delta at
    the final delta. Advisor states and feature maps get no gradient by
    construction.
    """
    dt = params.config.np_dtype
    leaves = make_leaves(params, needs=True)
    tokens = embed_tape(leaves, params, groups, centers)
    recon_out, kv = blocks_tape(tokens, leaves, params, collect_kv=collect_kv)
    diff = ad.sub(tokens, recon_out)
    loss_rec = ad.meanax(ad.mul(diff, diff), axis=None)

    rpp_val = 0.0
    delta = None
    if config.active:
        delta = sample_perturbation(params, config.epsilon, config.seed)
        delta, _ = _ascend(params, tokens.data, recon_out.data, delta, config)
        pert = {k: ad.add(leaves[k], ad.Tensor(delta[k])) for k in leaves}
        out_p, _ = blocks_tape(tokens, pert, params)
        loss_rpp = _deviation_loss_tape(recon_out, out_p)
        lam = ad.Tensor(np.asarray(config.lambda_rpp, dtype=dt))
        total = ad.add(loss_rec, ad.mul(lam, loss_rpp))
        rpp_val = float(loss_rpp.data)
    else:
        total = loss_rec

    ad.backward(total)
    grads = {
        k: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for k, t in leaves.items()
    }
    if kv is not None:
        kv = [(pk.reshape(-1, pk.shape[-1]), v.reshape(-1, v.shape[-1])) for pk, v in kv]
    return CompositeGrads(
        total=float(total.data),
        recon=float(loss_rec.data),
        rpp=rpp_val,
        grads=grads,
        layer_kv=kv,
        delta=delta,
    )


def composite_value_at_delta(
    params: ModelParams,
    arrays: dict[str, np.ndarray],
    groups: np.ndarray,
    centers: np.ndarray,
    config: PerturbationConfig,
    delta: Optional[dict[str, np.ndarray]],
) -> float:
    """Composite loss at explicit parameter values with a frozen delta.

    This is the scalar function that param_gradients differentiates; the
    finite-difference suite perturbs `arrays` coordinates against it.
    """
    override = ModelParams(
        config=params.config,
        arrays=arrays,
        maps=params.maps,
        advisors=params.advisors,
        seed=params.seed,
    )
    leaves = {k: ad.Tensor(v) for k, v in arrays.items()}
    tokens = embed_tape(leaves, override, groups, centers)
    out = _blocks_value(override, arrays, tokens.data)
    diff = tokens.data - out
    rec = float((diff * diff).mean())
    if delta is None or not config.active:
        return rec
    pert_arrays = {k: arrays[k] + delta[k] for k in arrays}
    out_p = _blocks_value(override, pert_arrays, tokens.data)
    dev = out - out_p
    return rec + config.lambda_rpp * float((dev * dev).sum(axis=-1).mean())


# ---------------------------------------------------------------------------
# Finite-difference verification of the gradient contract
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    ok: bool
    worst: float
    rel_tol: float
    per_array: dict[str, float]


def gradient_check(
    model_config: ModelConfig,
    config: PerturbationConfig,
    seed: int = 3,
    rel_tol: float = 1e-4,
    corrupt: Optional[str] = None,
    batch: int = 2,
) -> GradCheckReport:
    """Compare composite-loss gradients against central finite differences.

    Builds a tiny model with non-zero advisor states (so the attention path
    carries signal), finds the rehearsal delta once, freezes it, and checks
    every trainable coordinate of every array. `corrupt` deliberately breaks
    one array's analytic gradient so the detection path itself is testable.
    """
    params = init_params(model_config, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
    d, m = model_config.d, model_config.m
    params.advisors = [
        AdvisorState(
            S=rng.normal(0.0, 0.3, size=(d, m)),
            alpha=model_config.alpha,
            beta=model_config.beta,
            update_count=1,
            z=np.abs(rng.normal(0.2, 0.05, size=m)),
        )
        for _ in range(model_config.blocks)
    ]
    dt = model_config.np_dtype
    groups = rng.normal(0.0, 0.3, size=(batch, model_config.n_groups, model_config.g, 3)).astype(dt)
    centers = rng.normal(0.0, 0.5, size=(batch, model_config.n_groups, 3)).astype(dt)

    res = param_gradients(params, groups, centers, config, collect_kv=False)
    if corrupt is not None:
        if corrupt not in res.grads:
            raise ValueError(f"no parameter named {corrupt!r} to corrupt")
        broken = res.grads[corrupt].copy()
        broken.flat[0] += 1.0
        res.grads[corrupt] = broken

    base = params.copy_arrays()
    h_scale = 1e-5 if model_config.dtype == "float64" else 3e-3
    floor = 1e-6 if model_config.dtype == "float64" else 1e-3

    per_array: dict[str, float] = {}
    worst = 0.0
    for name, arr in base.items():
        analytic = res.grads[name]
        worst_here = 0.0
        work = arr.copy()
        arrays = dict(base)
        arrays[name] = work
        flat = work.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            h = h_scale * (1.0 + abs(float(orig)))
            flat[idx] = orig + h
            up = composite_value_at_delta(params, arrays, groups, centers, config, res.delta)
            flat[idx] = orig - h
            down = composite_value_at_delta(params, arrays, groups, centers, config, res.delta)
            flat[idx] = orig
            fd = (up - down) / (2.0 * h)
            g = float(analytic.reshape(-1)[idx])
            rel = abs(g - fd) / max(abs(g), abs(fd), floor)
            worst_here = max(worst_here, rel)
        per_array[name] = worst_here
        worst = max(worst, worst_here)
    return GradCheckReport(ok=worst <= rel_tol, worst=worst, rel_tol=rel_tol, per_array=per_array)
