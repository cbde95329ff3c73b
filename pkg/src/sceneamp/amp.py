"""Scene-conditioned motion discriminator and the style reward it provides.

The discriminator scores a transition feature vector: the observation at t and
at t+1, each carrying the character block and the object block. Inputs are
normalized with statistics fitted on the reference dataset; the gradient
penalty is taken with respect to the normalized input at dataset samples.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (NetParams, OptimState, RunningNorm, adam_like_step, init_mlp,
                       input_grad_penalty, mlp_backward, mlp_forward, mlp_forward_cache)

PROB_CLAMP = 1e-4
STYLE_MIN = -np.log1p(-PROB_CLAMP)      # -ln(1 - 1e-4)
STYLE_MAX = -np.log1p(PROB_CLAMP - 1.0)  # -ln(1e-4) up to rounding of 1 - 1e-4


class LayoutMismatch(ValueError):
    pass


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def style_reward(logit):
    """-log(1 - D) with D = sigmoid(logit) clamped to [1e-4, 1 - 1e-4]."""
    scalar = np.ndim(logit) == 0
    p = np.clip(sigmoid(np.atleast_1d(logit)), PROB_CLAMP, 1.0 - PROB_CLAMP)
    r = -np.log1p(-p)
    return float(r[0]) if scalar else r


@dataclass
class DiscConfig:
    hidden: tuple[int, ...] = (256, 128)
    lr: float = 1e-4
    w_gp: float = 5.0
    batch: int = 256
    updates_per_step: int = 2
    out_scale: float = 1.0


@dataclass
class Discriminator:
    params: NetParams
    norm: RunningNorm
    layout: str
    optim: OptimState = None
    config: DiscConfig = field(default_factory=DiscConfig)

    def __post_init__(self):
        if self.optim is None:
            self.optim = OptimState.zeros(self.params)

    @classmethod
    def create(cls, dataset_features, layout: str, rng: np.random.Generator,
               config: DiscConfig | None = None) -> "Discriminator":
        config = config or DiscConfig()
        x = np.asarray(dataset_features, dtype=np.float64)
        params = init_mlp([x.shape[1], *config.hidden, 1], rng, config.out_scale)
        return cls(params, RunningNorm.fit(x), layout, None, config)

    def check(self, layout: str | None) -> None:
        if layout is not None and layout != self.layout:
            raise LayoutMismatch(f"transition layout {layout} does not match discriminator "
                                 f"layout {self.layout}")

    def logits(self, features, layout: str | None = None) -> np.ndarray:
        self.check(layout)
        return mlp_forward(self.params, self.norm(features))[..., 0]

    def reward(self, features, layout: str | None = None) -> np.ndarray:
        return style_reward(self.logits(features, layout))

    def update(self, data_x, policy_x) -> dict:
        loss, grads, stats = disc_loss_and_grads(self.params, self.norm(data_x),
                                                 self.norm(policy_x), self.config.w_gp)
        self.params, self.optim = adam_like_step(self.params, grads, self.optim, self.config.lr)
        return stats


def disc_logit(disc: Discriminator, transition) -> float | np.ndarray:
    """Raw score of a Transition (or a batch of raw feature rows)."""
    if hasattr(transition, "features"):
        return float(disc.logits(transition.features[None], transition.layout or None)[0])
    return disc.logits(transition)


def disc_loss_and_grads(params: NetParams, data_x, policy_x, w_gp: float):
    """Binary cross-entropy (dataset = real) plus w_gp times the mean squared input
    gradient of the logit at dataset samples. Inputs are already normalized."""
    data_x = np.atleast_2d(np.asarray(data_x, dtype=np.float64))
    policy_x = np.atleast_2d(np.asarray(policy_x, dtype=np.float64))
    nd, npol = len(data_x), len(policy_x)
    if nd == 0 or npol == 0:
        raise ValueError("both batches must be non-empty")
    ld, cache_d = mlp_forward_cache(params, data_x)
    lp, cache_p = mlp_forward_cache(params, policy_x)
    ld, lp = ld[:, 0], lp[:, 0]
    bce_d = softplus(-ld).mean()
    bce_p = softplus(lp).mean()
    loss = bce_d + bce_p
    gd, _ = mlp_backward(params, data_x, ((sigmoid(ld) - 1.0) / nd)[:, None], cache_d)
    gp, _ = mlp_backward(params, policy_x, (sigmoid(lp) / npol)[:, None], cache_p)
    grads = [a + b for a, b in zip(gd.arrays(), gp.arrays())]
    pen = 0.0
    if w_gp:
        pvals, pgrad, _ = input_grad_penalty(params, data_x, cache_d)
        pen = float(pvals.mean())
        loss = loss + w_gp * pen
        grads = [g + (w_gp / nd) * a for g, a in zip(grads, pgrad.arrays())]
    if not np.isfinite(loss):
        raise FloatingPointError("discriminator loss is not finite")
    stats = {
        "disc_loss": float(loss),
        "disc_bce": float(bce_d + bce_p),
        "disc_penalty": pen,
        "disc_accuracy": float(0.5 * ((ld > 0).mean() + (lp < 0).mean())),
        "disc_prob_data": float(sigmoid(ld).mean()),
        "disc_prob_policy": float(sigmoid(lp).mean()),
    }
    return float(loss), NetParams.from_arrays(grads), stats
