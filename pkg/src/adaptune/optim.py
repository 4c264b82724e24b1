"""SGD with momentum and coupled weight decay, no-bias-decay grouping, and SAM."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Tuple

import numpy as np

from .modelcore import ModelParams

DEFAULT_WEIGHT_DECAY = 5e-4
DEFAULT_MOMENTUM = 0.9
BIAS_LR_MULTIPLIER = 2.0


class DivergenceError(FloatingPointError):
    """Raised when a gradient or loss turns non-finite."""


@dataclass
class ParamGroup:
    names: List[str]
    lr_multiplier: float = 1.0
    weight_decay: float = 0.0
    momentum: float = DEFAULT_MOMENTUM
    velocity: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass(frozen=True)
class SamConfig:
    rho: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("SAM rho must lie in [0, 1)")


def build_nbd_groups(params: ModelParams, base_weight_decay: float = DEFAULT_WEIGHT_DECAY,
                     momentum: float = DEFAULT_MOMENTUM, nbd: bool = True,
                     bias_lr_multiplier: float = BIAS_LR_MULTIPLIER) -> List[ParamGroup]:
    """Split parameters into weights (decayed) and biases (no decay, 2x lr).

    With ``nbd=False`` a single group holds everything at ``base_weight_decay``.
    """
    if len(params) == 0:
        raise ValueError("model has no parameters")
    if not nbd:
        return [ParamGroup(params.names(), 1.0, base_weight_decay, momentum)]
    weights = [n for n in params if not params.is_bias(n)]
    biases = [n for n in params if params.is_bias(n)]
    return [ParamGroup(weights, 1.0, base_weight_decay, momentum),
            ParamGroup(biases, bias_lr_multiplier, 0.0, momentum)]


def _check_grads(params: ModelParams, grads: Dict[str, np.ndarray]) -> None:
    for name in params:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name!r}")


def sgd_step(params: ModelParams, groups: List[ParamGroup], grads: Dict[str, np.ndarray], lr: float) -> ModelParams:
    """In place, per group: g = grad + wd*w; v = mu*v + g; w -= lr*mult*v."""
    _check_grads(params, grads)
    for group in groups:
        step = lr * group.lr_multiplier
        for name in group.names:
            w = params[name]
            g = grads[name] + group.weight_decay * w if group.weight_decay else grads[name].copy()
            v = group.velocity.get(name)
            if v is None:
                v = np.zeros_like(w)
            v *= group.momentum
            v += g
            group.velocity[name] = v
            w -= step * v
    return params


Closure = Callable[[], Tuple[float, Dict[str, np.ndarray]]]


def sam_step(params: ModelParams, closure: Closure, sam: SamConfig, groups: List[ParamGroup],
             lr: float) -> Tuple[float, Dict[str, np.ndarray]]:
    """Two-pass sharpness-aware step, in place.

    ``closure()`` evaluates (loss, grads) at the current parameters.  The
    ascent perturbation uses the raw loss gradient; weight decay only enters
    the final SGD update.  Returns the first-pass loss and gradients.
    """
    loss, g1 = closure()
    if not np.isfinite(loss):
        raise DivergenceError("non-finite loss")
    _check_grads(params, g1)
    norm = float(np.sqrt(sum(float((g1[n] * g1[n]).sum()) for n in params)))
    if sam.rho == 0.0 or norm == 0.0:
        sgd_step(params, groups, g1, lr)
        return loss, g1
    saved = params.state()
    scale = sam.rho / norm
    for name in params:
        params[name] += scale * g1[name]
    _, g2 = closure()
    params.load_state(saved)
    sgd_step(params, groups, g2, lr)
    return loss, g1


class Optimizer:
    """Bundles parameter groups with the SGD/SAM choice for a training loop."""

    def __init__(self, params: ModelParams, kind: str = "sgd", rho: float = 0.05,
                 weight_decay: float = DEFAULT_WEIGHT_DECAY, momentum: float = DEFAULT_MOMENTUM,
                 nbd: bool = True):
        if kind not in ("sgd", "sam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.params = params
        self.kind = kind
        self.sam = SamConfig(rho)
        self.groups = build_nbd_groups(params, weight_decay, momentum, nbd)

    def step(self, closure: Closure, lr: float) -> float:
        if self.kind == "sam":
            loss, _ = sam_step(self.params, closure, self.sam, self.groups, lr)
            return loss
        loss, grads = closure()
        if not np.isfinite(loss):
            raise DivergenceError("non-finite loss")
        sgd_step(self.params, self.groups, grads, lr)
        return loss

    def reset(self) -> None:
        for group in self.groups:
            group.velocity.clear()
