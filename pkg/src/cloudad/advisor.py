"""Continually updated attention advisor: a d x m fast-weight matrix S.

S replaces the key-value interaction of one attention layer. It is trained
by a closed-form rule rather than backpropagation: for each token, the
stale prediction v_old = S phi(k) is subtracted and a blend
v_new = (1-beta) v_old + beta (1+alpha) v is written back, which equals a
gradient step of size beta on 0.5|S phi(k) - v|^2 - alpha v.S phi(k).
Attention output is simply phi(q) S^T, with no denominator.

All state math runs in float64: S accumulates many rank-1 updates and
benefits from the wider accumulator even when the surrounding model
trains in float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AdvisorUpdateError


@dataclass
class AdvisorState:
    """Fast-weight matrix of one attention layer plus its update counter.

    `z` is an auxiliary running mean of key features, used only by the
    optional normalized output variant; it never influences S itself.
    """

    S: np.ndarray
    alpha: float = 0.7
    beta: float = 0.7
    update_count: int = 0
    z: np.ndarray = field(default=None)

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=np.float64)
        if self.S.ndim != 2:
            raise ValueError("S must be a d x m matrix")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in (0, 1] (0 accepted as a no-op)")
        if self.z is None:
            self.z = np.zeros(self.S.shape[1], dtype=np.float64)
        else:
            self.z = np.asarray(self.z, dtype=np.float64)

    @classmethod
    def zeros(cls, d: int, m: int, alpha: float = 0.7, beta: float = 0.7) -> "AdvisorState":
        return cls(S=np.zeros((d, m)), alpha=alpha, beta=beta)

    @property
    def d(self) -> int:
        return self.S.shape[0]

    @property
    def m(self) -> int:
        return self.S.shape[1]


def kaa_loss(state: AdvisorState, phi_k: np.ndarray, v: np.ndarray) -> float:
    """0.5 |S phi(k) - v|^2 - alpha * v.(S phi(k)) for one token."""
    pred = state.S @ np.asarray(phi_k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    resid = pred - v
    return float(0.5 * resid @ resid - state.alpha * (v @ pred))


def kaa_gradient(state: AdvisorState, phi_k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Gradient of kaa_loss w.r.t. S: (S phi(k)) phi(k)^T - (1+alpha) v phi(k)^T.

    Oriented d x m so that S - beta * grad stays d x m; the rank-1 terms are
    outer products of d-vectors with phi(k).
    """
    phi_k = np.asarray(phi_k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.outer(state.S @ phi_k - (1.0 + state.alpha) * v, phi_k)


def kaa_update(state: AdvisorState, Phi: np.ndarray, V: np.ndarray) -> AdvisorState:
    """One batch update of S; returns a new state, the input is untouched.

    Every token's contribution (v_new - v_old) phi(k)^T is computed against
    the incoming S, then the mean over the batch is applied, so the result
    does not depend on token order. A non-finite result rejects the update.
    """
    Phi = np.atleast_2d(np.asarray(Phi, dtype=np.float64))
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    if Phi.shape[0] != V.shape[0] or Phi.shape[0] < 1:
        raise ValueError("Phi and V must hold the same (nonzero) token count")
    if Phi.shape[1] != state.m or V.shape[1] != state.d:
        raise ValueError("token width mismatch with advisor state")
    n = Phi.shape[0]
    v_old = Phi @ state.S.T                                   # (n, d)
    # v_new - v_old with v_new = (1-beta) v_old + beta (1+alpha) v, factored
    # so an exact fixed point contributes exactly zero
    shift = state.beta * ((1.0 + state.alpha) * V - v_old)
    delta = shift.T @ Phi / n                                 # (d, m)
    new_s = state.S + delta
    new_z = state.z + state.beta * (Phi.mean(axis=0) - state.z)
    if not (np.isfinite(new_s).all() and np.isfinite(new_z).all()):
        raise AdvisorUpdateError(
            "advisor update produced non-finite entries; state left unchanged"
        )
    return AdvisorState(
        S=new_s,
        alpha=state.alpha,
        beta=state.beta,
        update_count=state.update_count + 1,
        z=new_z,
    )


def kaa_output(state: AdvisorState, Phi_Q: np.ndarray, normalized: bool = False,
               lam_stab: float = 1e-6) -> np.ndarray:
    """Attention output Phi(Q) S^T; row l is S phi(q_l).

    With `normalized=True` each row is divided by z.phi(q_l) + lam_stab,
    restoring a linear-attention style denominator (off by default).
    """
    Phi_Q = np.atleast_2d(np.asarray(Phi_Q, dtype=np.float64))
    out = Phi_Q @ state.S.T
    if normalized:
        den = Phi_Q @ state.z + lam_stab
        out = out / den[:, None]
    return out
