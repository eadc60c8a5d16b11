"""Positive random feature map and linear-time kernel attention.

The map phi(x) = exp(-|x|^2/2) * [exp(w_i.x)] / sqrt(m), with rows w_i drawn
i.i.d. standard normal, is an unbiased estimator of the softmax kernel:
E[phi(q).phi(k)] = exp(q.k). Because every feature is strictly positive,
attention denominators never vanish, and the attention sum factorizes into
two accumulators so the cost is linear in the token count. The quadratic
`kernel_oracle` and `softmax_oracle` exist purely as testing references.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger("cloudad.kernel_attention")

DEFAULT_LAMBDA_STAB = 1e-6
EXP_CLAMP = 30.0


@dataclass
class RandomFeatureMap:
    """m x d Gaussian projection defining phi; fixed for a model's lifetime."""

    projections: np.ndarray
    seed: int
    _f32: np.ndarray = field(default=None, repr=False, compare=False)

    @classmethod
    def draw(cls, d: int, m: int, seed: int) -> "RandomFeatureMap":
        if m < 1 or d < 1:
            raise ValueError("need m >= 1 and d >= 1")
        rng = np.random.default_rng(seed)
        return cls(projections=rng.standard_normal((m, d)), seed=seed)

    @property
    def m(self) -> int:
        return self.projections.shape[0]

    @property
    def d(self) -> int:
        return self.projections.shape[1]

    def projections_as(self, dtype) -> np.ndarray:
        if np.dtype(dtype) == np.float64:
            return self.projections
        if self._f32 is None:
            self._f32 = self.projections.astype(np.float32)
        return self._f32


@dataclass
class AttentionInputs:
    """Self-attention inputs: n rows each of queries, keys, values."""

    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.Q, self.K, self.V = (np.asarray(a) for a in (self.Q, self.K, self.V))
        if not (self.Q.shape[0] == self.K.shape[0] == self.V.shape[0]):
            raise ValueError("Q, K, V must share the row count")
        for name, a in (("Q", self.Q), ("K", self.K), ("V", self.V)):
            if not np.isfinite(a).all():
                raise ValueError(f"{name} contains non-finite entries")


def phi(x: np.ndarray, fmap: RandomFeatureMap, clamp: float = EXP_CLAMP) -> np.ndarray:
    """Positive random features of x; accepts a single vector or (n, d) rows.

    Evaluated in log space: exponent = w_i.x - |x|^2/2 - ln(m)/2, clamped to
    +-`clamp` before exponentiation (a warning is logged when the clamp
    actually fires). Entries are strictly positive for any finite input.
    """
    x = np.asarray(x)
    single = x.ndim == 1
    rows = x[None, :] if single else x
    w = fmap.projections_as(rows.dtype if rows.dtype == np.float64 else np.float32)
    logits = rows @ w.T
    logits -= 0.5 * (rows * rows).sum(axis=-1, keepdims=True)
    logits -= 0.5 * np.log(fmap.m)
    oob = (logits < -clamp) | (logits > clamp)
    if oob.any():
        log.warning(
            "phi_exponent_clamped count=%d max_abs=%.3g clamp=%.3g",
            int(oob.sum()),
            float(np.abs(logits).max()),
            clamp,
        )
        np.clip(logits, -clamp, clamp, out=logits)
    out = np.exp(logits)
    return out[0] if single else out


def linear_attention(
    inputs: AttentionInputs,
    fmap: RandomFeatureMap,
    lam_stab: float = DEFAULT_LAMBDA_STAB,
) -> np.ndarray:
    """Kernel attention in O(n): accumulate sum(v phi(k)^T) and sum(phi(k)),
    then resolve every query against the two summaries.

    `lam_stab` pads the denominator against underflow; the features are
    positive so it can be switched off (0.0) for exact-identity checks.
    """
    pq = phi(inputs.Q, fmap)
    pk = phi(inputs.K, fmap)
    summary = pk.T @ inputs.V          # (m, d)
    ksum = pk.sum(axis=0)              # (m,)
    num = pq @ summary                 # (n, d)
    den = pq @ ksum + lam_stab         # (n,)
    return num / den[:, None]


def kernel_oracle(inputs: AttentionInputs, fmap: RandomFeatureMap) -> np.ndarray:
    """Direct O(n^2) kernel attention. Testing reference only."""
    pq = phi(inputs.Q, fmap)
    pk = phi(inputs.K, fmap)
    kappa = pq @ pk.T                  # (n, n), strictly positive
    return (kappa @ inputs.V) / kappa.sum(axis=1, keepdims=True)


def softmax_oracle(inputs: AttentionInputs) -> np.ndarray:
    """Plain softmax attention over raw q.k logits (no scaling).

    Reference for how well the random features approximate the softmax
    kernel, so the logits follow the same exp(q.k) convention as phi.
    """
    logits = inputs.Q @ inputs.K.T
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w @ inputs.V
