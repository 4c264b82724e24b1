"""AugMix chain mixing plus MixUp and CutMix.

Image-shaped samples are [H, W] or [C, H, W]; vector samples are [D].  Only
``brightness`` and ``contrast`` are defined for vectors.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple

import numpy as np

IMAGE_OPS = ("flip_h", "rotate90", "translate", "crop_resize", "brightness", "contrast")
VECTOR_OPS = ("brightness", "contrast")
AUGMENT_KINDS = ("none", "basic", "augmix", "mixup", "cutmix", "augmix+mixup", "augmix+cutmix")


@dataclass
class AugPolicy:
    op_set: Tuple[str, ...] = IMAGE_OPS
    severity: int = 3
    chain_count: int = 3
    depth_range: Tuple[int, int] = (1, 3)
    dirichlet_alpha: float = 1.0
    beta_alpha: float = 1.0
    mixup_alpha: float = 0.2
    cutmix_alpha: float = 1.0

    def __post_init__(self):
        self.op_set = tuple(self.op_set)
        self.depth_range = tuple(int(d) for d in self.depth_range)
        if not self.op_set:
            raise ValueError("AugPolicy.op_set must be nonempty")
        unknown = set(self.op_set) - set(IMAGE_OPS)
        if unknown:
            raise ValueError(f"unknown augmentation ops: {sorted(unknown)}")
        if not 1 <= self.severity <= 10:
            raise ValueError("severity must lie in 1..10")
        if self.chain_count < 1:
            raise ValueError("chain_count must be >= 1")
        lo, hi = self.depth_range
        if not 1 <= lo <= hi <= 3:
            raise ValueError("depth_range must satisfy 1 <= low <= high <= 3")
        for name in ("dirichlet_alpha", "beta_alpha", "mixup_alpha", "cutmix_alpha"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["op_set"] = list(self.op_set)
        d["depth_range"] = list(self.depth_range)
        return d


# ---------------------------------------------------------------- primitives
# Each sampler draws the op's parameters; each applier is deterministic given them.


def _flip_h(x, p, lo, hi):
    return x[..., ::-1].copy()


def _rotate90(x, p, lo, hi):
    k = p["k"] if x.shape[-1] == x.shape[-2] else 2
    return np.rot90(x, k=k, axes=(-2, -1)).copy()


def _translate(x, p, lo, hi):
    dy, dx = p["dy"], p["dx"]
    h, w = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(abs(dy), abs(dy)), (abs(dx), abs(dx))]
    padded = np.pad(x, pad, mode="edge")
    y0, x0 = abs(dy) - dy, abs(dx) - dx
    return padded[..., y0:y0 + h, x0:x0 + w].copy()


def _crop_resize(x, p, lo, hi):
    h, w = x.shape[-2:]
    ch, cw = max(1, int(round(h * p["frac"]))), max(1, int(round(w * p["frac"])))
    y0 = int(p["oy"] * (h - ch + 1))
    x0 = int(p["ox"] * (w - cw + 1))
    rows = y0 + (np.arange(h) * ch) // h
    cols = x0 + (np.arange(w) * cw) // w
    return x[..., rows, :][..., cols]


def _brightness(x, p, lo, hi):
    return np.clip(x + p["delta"] * (hi - lo), lo, hi)


def _contrast(x, p, lo, hi):
    m = x.mean()
    return np.clip(m + p["factor"] * (x - m), lo, hi)


_APPLY: Dict[str, Callable] = {
    "flip_h": _flip_h, "rotate90": _rotate90, "translate": _translate,
    "crop_resize": _crop_resize, "brightness": _brightness, "contrast": _contrast,
}


def _sample_params(op: str, level: float, shape, rng) -> dict:
    if op == "rotate90":
        return {"k": int(rng.integers(1, 4))}
    if op == "translate":
        h, w = shape[-2:]
        my, mx = max(1, int(round(level * h / 3))), max(1, int(round(level * w / 3)))
        return {"dy": int(rng.integers(-my, my + 1)), "dx": int(rng.integers(-mx, mx + 1))}
    if op == "crop_resize":
        return {"frac": 1.0 - 0.3 * level * float(rng.random()), "oy": float(rng.random()),
                "ox": float(rng.random())}
    if op == "brightness":
        return {"delta": 0.3 * level * float(rng.uniform(-1.0, 1.0))}
    if op == "contrast":
        return {"factor": 1.0 + 0.5 * level * float(rng.uniform(-1.0, 1.0))}
    return {}


def allowed_ops(policy: AugPolicy, sample_shape) -> Tuple[str, ...]:
    pool = IMAGE_OPS if len(sample_shape) >= 2 else VECTOR_OPS
    ops = tuple(op for op in policy.op_set if op in pool)
    if not ops:
        raise ValueError(f"no augmentation op in {policy.op_set} is defined for samples of shape {tuple(sample_shape)}")
    return ops


# ---------------------------------------------------------------- AugMix


@dataclass
class AugmixPlan:
    chains: List[List[Tuple[str, dict]]]
    weights: np.ndarray
    mix: float


def sample_augmix_plan(policy: AugPolicy, rng, sample_shape) -> AugmixPlan:
    ops = allowed_ops(policy, sample_shape)
    level = policy.severity / 10.0
    weights = rng.dirichlet([policy.dirichlet_alpha] * policy.chain_count)
    mix = float(rng.beta(policy.beta_alpha, policy.beta_alpha))
    lo, hi = policy.depth_range
    chains = []
    for _ in range(policy.chain_count):
        depth = int(rng.integers(lo, hi + 1))
        chain = []
        for _ in range(depth):
            op = ops[int(rng.integers(len(ops)))]
            chain.append((op, _sample_params(op, level, sample_shape, rng)))
        chains.append(chain)
    return AugmixPlan(chains, weights, mix)


def apply_augmix_plan(x, plan: AugmixPlan, value_range: Tuple[float, float]) -> np.ndarray:
    """(1 - m) * x + m * sum_i w_i * chain_i(x), clipped to ``value_range``."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = value_range
    if plan.mix == 0.0:
        return x.copy()
    mixed = np.zeros_like(x)
    for w, chain in zip(plan.weights, plan.chains):
        y = x
        for op, params in chain:
            y = _APPLY[op](y, params, lo, hi)
        mixed += w * y
    return np.clip((1.0 - plan.mix) * x + plan.mix * mixed, lo, hi)


def augmix(x, policy: AugPolicy, rng, value_range: Optional[Tuple[float, float]] = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if value_range is None:
        value_range = (float(x.min()), float(x.max()))
    return apply_augmix_plan(x, sample_augmix_plan(policy, rng, x.shape), value_range)


def sample_vector_draws(policy: AugPolicy, rng, batch: int) -> dict:
    """All AugMix randomness for a batch of vector samples, drawn at once.

    ``op`` indexes :data:`VECTOR_OPS` restricted to the policy; ``u`` is the
    U(-1, 1) strength used by brightness (delta) or contrast (factor).
    """
    ops = allowed_ops(policy, (1,))
    k, (lo, hi) = policy.chain_count, policy.depth_range
    return {
        "ops": ops,
        "weights": rng.dirichlet([policy.dirichlet_alpha] * k, size=batch),
        "mix": rng.beta(policy.beta_alpha, policy.beta_alpha, size=batch),
        "depth": rng.integers(lo, hi + 1, size=(batch, k)),
        "op": rng.integers(len(ops), size=(batch, k, hi)),
        "u": rng.uniform(-1.0, 1.0, size=(batch, k, hi)),
        "level": policy.severity / 10.0,
    }


def _vector_params(op: str, u: float, level: float) -> dict:
    if op == "brightness":
        return {"delta": 0.3 * level * u}
    return {"factor": 1.0 + 0.5 * level * u}


def vector_draws_to_plans(draws: dict) -> List[AugmixPlan]:
    """Per-sample plans equivalent to ``apply_vector_draws`` (reference path)."""
    plans = []
    for b in range(draws["mix"].shape[0]):
        chains = []
        for j in range(draws["depth"].shape[1]):
            chains.append([(draws["ops"][draws["op"][b, j, d]],
                            _vector_params(draws["ops"][draws["op"][b, j, d]], draws["u"][b, j, d], draws["level"]))
                           for d in range(draws["depth"][b, j])])
        plans.append(AugmixPlan(chains, draws["weights"][b], float(draws["mix"][b])))
    return plans


def apply_vector_draws(x, draws: dict, value_range: Tuple[float, float]) -> np.ndarray:
    """Batched AugMix for [B, D] inputs; same result as per-sample plans."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = value_range
    level, ops = draws["level"], draws["ops"]
    mixed = np.zeros_like(x)
    for j in range(draws["depth"].shape[1]):
        y = x.copy()
        for d in range(draws["op"].shape[2]):
            active = draws["depth"][:, j] > d
            if not active.any():
                continue
            name = np.array(ops)[draws["op"][:, j, d]]
            u = draws["u"][:, j, d][:, None]
            bright = np.clip(y + 0.3 * level * u * (hi - lo), lo, hi)
            m = y.mean(axis=1, keepdims=True)
            contrast = np.clip(m + (1.0 + 0.5 * level * u) * (y - m), lo, hi)
            step = np.where((name == "brightness")[:, None], bright, contrast)
            y = np.where(active[:, None], step, y)
        mixed += draws["weights"][:, j][:, None] * y
    mix = draws["mix"][:, None]
    out = np.clip((1.0 - mix) * x + mix * mixed, lo, hi)
    return np.where(mix == 0.0, x, out)


# ---------------------------------------------------------------- MixUp / CutMix


class SoftLabelPair(NamedTuple):
    y_a: object
    y_b: object
    weight: float  # weight of y_a; y_b gets 1 - weight


def mixup(x1, y1, x2, y2, lam: float):
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise ValueError(f"mixup shapes differ: {x1.shape} vs {x2.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("mixup lambda must lie in [0, 1]")
    return lam * x1 + (1.0 - lam) * x2, SoftLabelPair(y1, y2, float(lam))


def cutmix_box(h: int, w: int, lam: float, rng) -> Tuple[int, int, int, int]:
    """Box (y0, x0, bh, bw) of area ratio ~(1 - lam), placed fully inside the image."""
    ratio = np.sqrt(1.0 - lam)
    bh, bw = int(round(h * ratio)), int(round(w * ratio))
    y0 = int(rng.integers(0, h - bh + 1))
    x0 = int(rng.integers(0, w - bw + 1))
    return y0, x0, bh, bw


def cutmix(x1, y1, x2, y2, lam: float, rng, batched: bool = False):
    """Paste a patch of ``x2`` into ``x1``; label weight is the kept area fraction."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise ValueError(f"cutmix shapes differ: {x1.shape} vs {x2.shape}")
    if x1.ndim < (3 if batched else 2):
        raise ValueError("cutmix needs image-shaped inputs")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("cutmix lambda must lie in [0, 1]")
    h, w = x1.shape[-2:]
    y0, x0, bh, bw = cutmix_box(h, w, lam, rng)
    out = x1.copy()
    out[..., y0:y0 + bh, x0:x0 + bw] = x2[..., y0:y0 + bh, x0:x0 + bw]
    lam_adj = 1.0 - (bh * bw) / float(h * w)
    return out, SoftLabelPair(y1, y2, lam_adj)


# ---------------------------------------------------------------- batch pipeline


def _basic(x, rng, lo, hi):
    if x.ndim >= 2:
        if rng.random() < 0.5:
            x = _flip_h(x, {}, lo, hi)
        return _translate(x, _sample_params("translate", 0.3, x.shape, rng), lo, hi)
    return _brightness(x, _sample_params("brightness", 0.3, x.shape, rng), lo, hi)


def augment_batch(kind: str, x, y, policy: AugPolicy, rng, value_range: Tuple[float, float]):
    """Augment one batch.  Returns (x, y_a, y_b, weight_of_y_a)."""
    if kind not in AUGMENT_KINDS:
        raise ValueError(f"unknown augmentation {kind!r}; expected one of {AUGMENT_KINDS}")
    x = np.asarray(x, dtype=np.float64)
    lo, hi = value_range
    if kind == "none":
        return x, y, y, 1.0
    if kind == "basic":
        return np.stack([_basic(s, rng, lo, hi) for s in x]), y, y, 1.0
    if kind.startswith("augmix") and x.ndim == 2:
        x = apply_vector_draws(x, sample_vector_draws(policy, rng, x.shape[0]), value_range)
    elif kind.startswith("augmix"):
        x = np.stack([apply_augmix_plan(s, sample_augmix_plan(policy, rng, s.shape), value_range) for s in x])
    if kind.endswith("mixup"):
        perm = rng.permutation(x.shape[0])
        lam = float(rng.beta(policy.mixup_alpha, policy.mixup_alpha))
        xm, pair = mixup(x, y, x[perm], y[perm], lam)
        return xm, pair.y_a, pair.y_b, pair.weight
    if kind.endswith("cutmix"):
        perm = rng.permutation(x.shape[0])
        lam = float(rng.beta(policy.cutmix_alpha, policy.cutmix_alpha))
        xm, pair = cutmix(x, y, x[perm], y[perm], lam, rng, batched=True)
        return xm, pair.y_a, pair.y_b, pair.weight
    return x, y, y, 1.0
