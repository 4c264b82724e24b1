"""Initial learning-rate estimation.

* LR range test with the steepest-descent proposal, optionally after one
  epoch of pretraining at a small learning rate.
* Uniform grid search.
* TPE suggestions with median pruning.

Trial runners are callables ``trainer(lr, epochs, seed)`` returning an
iterator of per-epoch validation top-1 values; raising
:class:`~adaptune.optim.DivergenceError` or yielding a non-finite value marks
the trial failed.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import ndtr

from .modelcore import SeededRng
from .optim import DivergenceError

log = logging.getLogger(__name__)

TrialRunner = Callable[[float, int, int], Iterator[float]]
TRIAL_STATES = ("running", "pruned", "complete", "failed")


class SearchError(RuntimeError):
    pass


@dataclass(frozen=True)
class LrBounds:
    low: float
    high: float
    discrete_step: float = 0.0

    def __post_init__(self):
        if not 0 < self.low < self.high:
            raise ValueError("LrBounds needs 0 < low < high")
        if self.discrete_step < 0:
            raise ValueError("discrete_step must be >= 0")

    def snap(self, lr: float) -> float:
        lr = min(max(lr, self.low), self.high)
        if self.discrete_step:
            k = round((lr - self.low) / self.discrete_step)
            kmax = math.floor((self.high - self.low) / self.discrete_step + 1e-9)
            lr = round(self.low + min(max(k, 0), kmax) * self.discrete_step, 12)
        return lr

    def clamp(self, lr: float) -> float:
        return min(max(lr, self.low), self.high)


# profiles: lightweight (MobileNetV3-like) and heavier (EfficientNet-like) models
MLP_BOUNDS = LrBounds(0.005, 0.03, 0.001)
SOFTMAX_BOUNDS = LrBounds(0.001, 0.01, 0.001)
WIDE_BOUNDS = LrBounds(0.001, 0.1)


# ---------------------------------------------------------------- fast-ai


@dataclass
class LrCurve:
    lrs: List[float]
    losses: List[float]
    raw_losses: List[float] = field(default_factory=list)
    aborted_at: Optional[int] = None


def lr_range_test(learner, lr_min: float = 1e-5, lr_max: float = 1.0, iterations: int = 100,
                  beta: float = 0.98, divergence_factor: float = 4.0) -> LrCurve:
    """Exponential LR sweep recording the bias-corrected smoothed loss.

    ``learner`` needs ``train_step(lr) -> loss``, ``snapshot()``,
    ``restore(state)``, ``reset_optimizers()`` and ``begin_stream(name)``.
    Weights and optimizer state are restored afterwards.  The sweep stops
    (without recording that point) once the raw loss exceeds
    ``divergence_factor`` times the best smoothed loss.
    """
    if not 0 < lr_min < lr_max:
        raise ValueError("need 0 < lr_min < lr_max")
    if iterations < 10:
        raise ValueError("iterations must be >= 10")
    snap = learner.snapshot()
    learner.reset_optimizers()
    learner.begin_stream("lr_range_test")
    ratio = lr_max / lr_min
    curve = LrCurve([], [])
    avg, best = 0.0, math.inf
    try:
        for t in range(iterations):
            lr = lr_min * ratio ** (t / (iterations - 1))
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss = float(learner.train_step(lr))
            except (DivergenceError, FloatingPointError):
                loss = math.inf
            if not math.isfinite(loss):
                if t == 0:
                    raise SearchError(f"model diverges at lr_min={lr_min:g}")
                curve.aborted_at = t
                break
            if t > 0 and loss > divergence_factor * best:
                curve.aborted_at = t
                break
            avg = beta * avg + (1.0 - beta) * loss
            smoothed = avg / (1.0 - beta ** (t + 1))
            best = min(best, smoothed)
            curve.lrs.append(lr)
            curve.losses.append(smoothed)
            curve.raw_losses.append(loss)
    finally:
        learner.restore(snap)
    return curve


def propose_lr_fastai(curve: LrCurve, skip_end: float = 0.1, skip_start: int = 10) -> float:
    """LR at the steepest negative slope of the smoothed loss.

    The last 10% of points and the first ``skip_start`` (where the smoothed
    loss is still mostly single-batch noise) are ignored.  Short curves fall
    back to ``skip_start=0``.
    """
    n = len(curve.losses)
    if n < 10:
        raise SearchError(f"curve has {n} points; need at least 10")
    losses = np.asarray(curve.losses)
    keep = n - int(math.ceil(skip_end * n))
    start = skip_start if keep - skip_start >= 5 else 0
    slopes = np.diff(losses[start:keep])
    if slopes.size == 0 or slopes.min() >= 0:
        raise SearchError("no descending region in the loss curve")
    return float(curve.lrs[start + int(np.argmin(slopes))])


def estimate_lr_fastai(learner, bounds: LrBounds, lr_min: float = 1e-5, lr_max: float = 1.0,
                       iterations: int = 100) -> float:
    return bounds.clamp(propose_lr_fastai(lr_range_test(learner, lr_min, lr_max, iterations)))


def estimate_lr_with_pretrain(learner, small_lr: Optional[float], bounds: LrBounds,
                              lr_min: float = 1e-5, lr_max: float = 1.0, iterations: int = 100,
                              return_curve: bool = False):
    """One epoch at ``small_lr`` (default bounds.low / 10), then the range test.

    The pretraining only conditions the estimate: the learner's original
    weights and optimizer state are restored before returning.
    """
    if small_lr is None:
        small_lr = bounds.low / 10.0
    if small_lr > bounds.low:
        raise ValueError("small_lr must not exceed bounds.low")
    snap = learner.snapshot()
    try:
        learner.reset_optimizers()
        learner.begin_stream("pretrain")
        learner.train_epoch(small_lr)
        curve = lr_range_test(learner, lr_min, lr_max, iterations)
    finally:
        learner.restore(snap)
    lr = bounds.clamp(propose_lr_fastai(curve))
    return (lr, curve) if return_curve else lr


# ---------------------------------------------------------------- trials


@dataclass
class Trial:
    number: int
    lr: float
    intermediates: List[float] = field(default_factory=list)
    status: str = "running"
    objective: Optional[float] = None

    def best_intermediate(self, upto: Optional[int] = None) -> float:
        vals = self.intermediates if upto is None else self.intermediates[:upto + 1]
        return max(vals) if vals else -math.inf

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StudyHistory:
    trials: List[Trial] = field(default_factory=list)

    def completed(self) -> List[Trial]:
        return [t for t in self.trials if t.status == "complete"]

    def epochs_consumed(self) -> int:
        return sum(len(t.intermediates) for t in self.trials)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(t.to_dict(), sort_keys=True) + "\n" for t in self.trials)

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def read_jsonl(cls, path) -> "StudyHistory":
        trials = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    trials.append(Trial(**json.loads(line)))
        return cls(trials)


def median_prune(history: StudyHistory, current: Trial, epoch_index: int) -> bool:
    """Prune iff the current best up to ``epoch_index`` is below the median of
    completed prior trials' values at ``epoch_index``.  Never on the first report."""
    if epoch_index < 1:
        return False
    prior = [t.intermediates[epoch_index] for t in history.trials
             if t is not current and t.status == "complete" and len(t.intermediates) > epoch_index]
    if not prior:
        return False
    return current.best_intermediate(epoch_index) < float(np.median(prior))


def _run_trial(trainer: TrialRunner, trial: Trial, epochs: int, seed: int,
               history: Optional[StudyHistory] = None, prune: bool = False) -> Trial:
    it = trainer(trial.lr, epochs, seed)
    try:
        for epoch, value in enumerate(it):
            if epoch >= epochs:
                break
            value = float(value)
            if not math.isfinite(value):
                trial.status = "failed"
                return trial
            trial.intermediates.append(value)
            if prune and history is not None and median_prune(history, trial, epoch):
                trial.status = "pruned"
                return trial
    except (DivergenceError, FloatingPointError) as exc:
        log.info("trial %d (lr=%g) failed: %s", trial.number, trial.lr, exc)
        trial.status = "failed"
        return trial
    finally:
        close = getattr(it, "close", None)
        if close:
            close()
    if not trial.intermediates:
        trial.status = "failed"
        return trial
    trial.status = "complete"
    trial.objective = trial.intermediates[-1]
    return trial


def grid_search_lr(trainer: TrialRunner, bounds: LrBounds, points: int = 10, epochs_per_trial: int = 9,
                   seed: int = 0) -> Tuple[float, List[Trial]]:
    """Uniform linear grid over [low, high]; best final val top-1 wins (ties: lower lr)."""
    if points < 2:
        raise ValueError("grid needs at least 2 points")
    grid = np.linspace(bounds.low, bounds.high, points)
    trials = []
    for i, lr in enumerate(grid):
        trials.append(_run_trial(trainer, Trial(i, float(lr)), epochs_per_trial, seed + i))
    done = [t for t in trials if t.status == "complete"]
    if not done:
        statuses = ", ".join(f"lr={t.lr:g}:{t.status}" for t in trials)
        raise SearchError(f"all grid trials failed ({statuses})")
    best = max(done, key=lambda t: (t.objective, -t.lr))
    return best.lr, trials


# ---------------------------------------------------------------- TPE

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class _Parzen:
    mus: np.ndarray
    sigmas: np.ndarray
    weights: np.ndarray

    def _mass(self, lo, hi):
        return ndtr((hi - self.mus) / self.sigmas) - ndtr((lo - self.mus) / self.sigmas)

    def sample(self, rng, n: int, low: float, high: float) -> np.ndarray:
        out = np.empty(n)
        for i in range(n):
            k = int(rng.choice(len(self.mus), p=self.weights))
            while True:
                x = rng.normal(self.mus[k], self.sigmas[k])
                if low <= x <= high:
                    break
            out[i] = x
        return out

    def log_density(self, x: np.ndarray, low: float, high: float, step: float) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)[:, None]
        norm = self._mass(low, high)
        if step:
            lo = np.maximum(x - step / 2.0, low - step / 2.0)
            hi = np.minimum(x + step / 2.0, high + step / 2.0)
            dens = self._mass(lo, hi)
            norm = self._mass(low - step / 2.0, high + step / 2.0)
        else:
            z = (x - self.mus) / self.sigmas
            dens = np.exp(-0.5 * z * z) / (self.sigmas * math.sqrt(2.0 * math.pi))
        mix = (self.weights * dens / np.maximum(norm, 1e-300)).sum(axis=1)
        return np.log(np.maximum(mix, 1e-300))


def _fit_parzen(points: Sequence[float], bounds: LrBounds) -> _Parzen:
    """Gaussian kernels at the observations plus a broad prior component."""
    pts = np.asarray(points, dtype=np.float64)
    width = bounds.high - bounds.low
    n = pts.size
    sd = float(pts.std(ddof=1)) if n > 1 else 0.0
    bandwidth = max(sd * n ** (-1.0 / 5.0), bounds.discrete_step, width / 100.0)
    mus = np.concatenate([pts, [(bounds.low + bounds.high) / 2.0]])
    sigmas = np.concatenate([np.full(n, bandwidth), [width]])
    weights = np.full(n + 1, 1.0 / (n + 1))
    return _Parzen(mus, sigmas, weights)


def tpe_suggest(history: StudyHistory, bounds: LrBounds, gamma: float = 0.25, n_candidates: int = 24,
                rng: Optional[SeededRng] = None, n_startup: int = 5) -> float:
    """Next learning rate to try (objective maximized).

    The first ``n_startup`` suggestions follow a randomly shifted golden-ratio
    sequence over the bounds.  Afterwards completed trials are split at the
    gamma-quantile into good/bad sets (pruned trials join the bad set) and the
    candidate drawn from the good density with the largest good/bad density
    ratio is returned.
    """
    rng = rng or SeededRng(0)
    done = history.completed()
    if len(history.trials) < n_startup or not done:
        shift = float(rng.child("startup").random())
        tried = {round(t.lr, 12) for t in history.trials}
        n = len(history.trials)
        for j in range(n, n + 64):
            lr = bounds.snap(bounds.low + ((shift + j * _GOLDEN) % 1.0) * (bounds.high - bounds.low))
            if round(lr, 12) not in tried:
                break
        return lr
    ordered = sorted(done, key=lambda t: (-t.objective, t.number))
    n_good = max(1, int(math.ceil(gamma * len(ordered))))
    good = [t.lr for t in ordered[:n_good]]
    # pruned trials lost to a completed median, so they always rank as bad
    bad = [t.lr for t in ordered[n_good:]] + [t.lr for t in history.trials if t.status == "pruned"]
    l_model = _fit_parzen(good, bounds)
    g_model = _fit_parzen(bad, bounds)
    cands = l_model.sample(rng, n_candidates, bounds.low, bounds.high)
    cands = np.array([bounds.snap(c) for c in cands])
    step = bounds.discrete_step
    score = (l_model.log_density(cands, bounds.low, bounds.high, step)
             - g_model.log_density(cands, bounds.low, bounds.high, step))
    if step:
        # re-running a grid point only repeats a known result
        tried = {round(t.lr, 12) for t in history.trials}
        fresh = np.array([round(float(c), 12) not in tried for c in cands])
        if fresh.any():
            score = np.where(fresh, score, -np.inf)
        else:
            untried = [lr for lr in _grid(bounds) if lr not in tried]
            if untried:
                ld = l_model.log_density(np.array(untried), bounds.low, bounds.high, step)
                gd = g_model.log_density(np.array(untried), bounds.low, bounds.high, step)
                return float(untried[int(np.argmax(ld - gd))])
    return float(cands[int(np.argmax(score))])


def _grid(bounds: LrBounds) -> List[float]:
    kmax = math.floor((bounds.high - bounds.low) / bounds.discrete_step + 1e-9)
    return [round(bounds.low + k * bounds.discrete_step, 12) for k in range(kmax + 1)]


@dataclass
class SearchResult:
    best_lr: float
    history: StudyHistory
    warning: Optional[str] = None


def tpe_search(trainer: TrialRunner, bounds: LrBounds, max_trials: int = 15, epochs_per_trial: int = 6,
               seed: int = 0, gamma: float = 0.25, n_candidates: int = 24, n_startup: int = 5,
               prune: bool = True) -> SearchResult:
    """Sequential TPE over the initial LR with per-epoch median pruning."""
    if max_trials < 1:
        raise ValueError("max_trials must be >= 1")
    history = StudyHistory()
    rng = SeededRng(seed, ("tpe",))
    for number in range(max_trials):
        lr = tpe_suggest(history, bounds, gamma, n_candidates, rng.child(number), n_startup)
        trial = Trial(number, lr)
        history.trials.append(trial)
        _run_trial(trainer, trial, epochs_per_trial, seed + number, history, prune)
    done = history.completed()
    if done:
        best = max(done, key=lambda t: (t.objective, -t.number))
        return SearchResult(best.lr, history)
    pruned = [t for t in history.trials if t.status == "pruned"]
    if pruned:
        best = max(pruned, key=lambda t: (t.best_intermediate(), -t.number))
        return SearchResult(best.lr, history, warning="all trials pruned; returning best pruned trial")
    raise SearchError("all TPE trials failed")


def random_search(trainer: TrialRunner, bounds: LrBounds, max_trials: int = 15, epochs_per_trial: int = 6,
                  seed: int = 0) -> SearchResult:
    """Uniform random baseline (no pruning), snapped to the bounds' grid."""
    history = StudyHistory()
    rng = SeededRng(seed, ("random_search",))
    for number in range(max_trials):
        lr = bounds.snap(float(rng.uniform(bounds.low, bounds.high)))
        trial = Trial(number, lr)
        history.trials.append(trial)
        _run_trial(trainer, trial, epochs_per_trial, seed + number)
    done = history.completed()
    if not done:
        raise SearchError("all random-search trials failed")
    best = max(done, key=lambda t: (t.objective, -t.number))
    return SearchResult(best.lr, history)
