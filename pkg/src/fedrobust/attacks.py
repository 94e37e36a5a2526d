"""Evaluation-time adversarial attacks, all l-inf and untargeted.

White-box: single-step sign-gradient (FGSM) and iterated projected sign
steps (PGD). Black-box: score-based random square search and hard-label
ray search. Budgets are expressed as a multiple of each trial's signal
standard deviation (a dataset-global-std mode exists behind a flag).

The deployed model co-normalizes each evaluation batch with its own
statistics, so white-box gradients flow through the batch statistics and
black-box oracles always see whole batches.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import model as M


@dataclass(frozen=True)
class AttackSpec:
    family: str                       # fgsm | pgd | square | rays
    epsilon: float                    # multiplier of the signal std
    steps: int = 20                   # pgd iterations
    step_size: Optional[float] = None  # pgd step, std units; default eps/4
    restarts: int = 1
    random_start: bool = True
    queries: int = 500                # black-box budget per trial
    seed: int = 0
    global_std: bool = False

    def __post_init__(self):
        if self.family not in ("fgsm", "pgd", "square", "rays"):
            raise ValueError(f"unknown attack family {self.family!r}")
        if self.epsilon < 0 or self.queries < 0 or self.restarts < 1:
            raise ValueError("invalid attack budget")

    @property
    def pgd_step(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / 4


@dataclass
class AttackResult:
    x_adv: np.ndarray
    queries: Optional[np.ndarray] = None   # per-trial oracle calls (black-box)


def trial_std(x: np.ndarray) -> float:
    """Population std over all entries of one trial."""
    return float(np.std(x))


def batch_radii(x: np.ndarray, eps: float, global_std: float | None = None
                ) -> np.ndarray:
    """Per-trial box radius eps*s, shaped for broadcasting over (B,1,c,t)."""
    if global_std is not None:
        s = np.full((len(x), 1, 1, 1), global_std)
    else:
        s = np.std(x, axis=(1, 2, 3), keepdims=True)
    return eps * s


# ---------------------------------------------------------------------------
# oracles: the only surfaces black-box attacks may touch


class ScoreOracle:
    """Per-class scores for a batch; exposes no gradient entry point."""

    def __init__(self, ps: M.ParameterSet, batch_stats: bool = True):
        self._ps = ps
        self._batch_stats = batch_stats

    def scores(self, x: np.ndarray) -> np.ndarray:
        return M.forward(self._ps, x, "eval", batch_stats=self._batch_stats).value


class LabelOracle:
    """Hard labels only."""

    def __init__(self, ps: M.ParameterSet, batch_stats: bool = True):
        self._inner = ScoreOracle(ps, batch_stats)

    def labels(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self._inner.scores(x), axis=1)


# ---------------------------------------------------------------------------
# white-box


def _input_grad(ps: M.ParameterSet, x: np.ndarray, y: np.ndarray,
                batch_stats: bool) -> tuple[np.ndarray, np.ndarray]:
    xt = ad.constant(x, requires_grad=True)
    logits = M.forward(ps, xt, "eval", batch_stats=batch_stats)
    loss = ad.softmax_cross_entropy(logits, y)
    loss.backward()
    return xt.grad, logits.value


def _per_sample_ce(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(y)), y]


def fgsm_attack(ps: M.ParameterSet, x: np.ndarray, y: np.ndarray, eps: float,
                batch_stats: bool = True,
                global_std: float | None = None) -> AttackResult:
    """X + eps * s * sign(input gradient)."""
    if eps == 0.0:
        return AttackResult(x.copy())
    g, _ = _input_grad(ps, x, y, batch_stats)
    r = batch_radii(x, eps, global_std)
    return AttackResult(x + r * np.sign(g))


def pgd_attack(ps: M.ParameterSet, x: np.ndarray, y: np.ndarray,
               spec: AttackSpec, batch_stats: bool = True,
               global_std: float | None = None) -> AttackResult:
    """Iterated sign steps with per-step projection onto the eps*s box."""
    if spec.epsilon == 0.0 or spec.steps < 1:
        return AttackResult(x.copy())
    rng = np.random.default_rng(spec.seed)
    r = batch_radii(x, spec.epsilon, global_std)
    step = batch_radii(x, spec.pgd_step, global_std)
    best = x.copy()
    best_loss = np.full(len(x), -np.inf)
    best_miss = np.zeros(len(x), dtype=bool)
    for _ in range(spec.restarts):
        if spec.random_start:
            adv = x + rng.uniform(-1.0, 1.0, size=x.shape) * r
        else:
            adv = x.copy()
        for _ in range(spec.steps):
            g, _ = _input_grad(ps, adv, y, batch_stats)
            adv = adv + step * np.sign(g)
            adv = x + np.clip(adv - x, -r, r)
        logits = M.forward(ps, adv, "eval", batch_stats=batch_stats).value
        loss = _per_sample_ce(logits, y)
        miss = np.argmax(logits, axis=1) != y
        # prefer misclassifying candidates, then higher loss
        better = (miss & ~best_miss) | ((miss == best_miss) & (loss > best_loss))
        best[better] = adv[better]
        best_loss[better] = loss[better]
        best_miss[better] = miss[better]
    return AttackResult(best)


# ---------------------------------------------------------------------------
# black-box: score-based square search


def _margin(scores: np.ndarray, y: np.ndarray) -> np.ndarray:
    """score(y) - max other score; negative means misclassified."""
    B = len(y)
    true = scores[np.arange(B), y]
    masked = scores.copy()
    masked[np.arange(B), y] = -np.inf
    return true - masked.max(axis=1)


def square_attack(score_fn: Callable[[np.ndarray], np.ndarray],
                  x: np.ndarray, y: np.ndarray, spec: AttackSpec,
                  global_std: float | None = None) -> AttackResult:
    """Random search over rectangular channel-time patches set to +-eps*s."""
    B, _, c, t = x.shape
    queries = np.zeros(B, dtype=int)
    if spec.queries == 0 or spec.epsilon == 0.0:
        return AttackResult(x.copy(), queries)
    rng = np.random.default_rng(spec.seed)
    r = batch_radii(x, spec.epsilon, global_std)
    adv = x.copy()
    margin = _margin(score_fn(adv), y)
    queries += 1
    side0 = int(np.ceil(0.3 * min(c, t)))
    shrink_every = max(1, spec.queries // 5)   # halve every 20% of the budget
    for it in range(1, spec.queries):
        active = margin > 0
        if not active.any():
            break
        side = max(1, side0 >> (it // shrink_every))
        cand = adv.copy()
        for i in np.nonzero(active)[0]:
            h = min(side, c)
            w = min(side, t)
            ci = rng.integers(0, c - h + 1)
            ti = rng.integers(0, t - w + 1)
            signs = rng.choice([-1.0, 1.0], size=(h, 1))
            cand[i, 0, ci:ci + h, ti:ti + w] = \
                x[i, 0, ci:ci + h, ti:ti + w] + r[i, 0, 0, 0] * signs
        new_margin = _margin(score_fn(cand), y)
        queries[active] += 1
        improved = active & (new_margin < margin)
        adv[improved] = cand[improved]
        margin[improved] = new_margin[improved]
    return AttackResult(adv, queries)


# ---------------------------------------------------------------------------
# black-box: hard-label ray search


def rays_attack(label_fn: Callable[[np.ndarray], np.ndarray],
                x: np.ndarray, y: np.ndarray, spec: AttackSpec,
                global_std: float | None = None,
                bisection_steps: int = 10) -> AttackResult:
    """Coarse-to-fine sign-vector search for the minimal misclassifying radius.

    Each trial keeps a sign vector over hierarchically halved coordinate
    blocks; a block flip is kept iff it shrinks the minimal misclassifying
    radius along the ray, located by bisection. Queries are whole-batch
    oracle calls; co-batched trials sit at their current best candidates.
    """
    B, _, c, t = x.shape
    d = c * t
    queries = np.zeros(B, dtype=int)
    if spec.queries == 0 or spec.epsilon == 0.0:
        return AttackResult(x.copy(), queries)
    radii = batch_radii(x, spec.epsilon, global_std)[:, 0, 0, 0]

    current = x.copy()          # batch context for co-normalized queries

    def batch_labels_with(i, xi):
        probe = current.copy()
        probe[i] = xi
        queries[i] += 1
        return label_fn(probe)[i]

    # already-misclassified trials keep their benign input at radius 0
    base_labels = label_fn(current)
    queries += 1
    done = base_labels != y

    signs = np.ones((B, d))
    best_r = np.full(B, np.inf)
    best_x = x.copy()

    def point(i, rad):
        delta = rad * signs[i].reshape(1, c, t)
        return x[i] + delta

    def radius_of(i, cap):
        """Bisect the misclassifying radius in (0, cap]; inf if cap fails."""
        if queries[i] >= spec.queries:
            return np.inf, None
        xi = point(i, cap)
        if batch_labels_with(i, xi) == y[i]:
            return np.inf, None
        lo, hi, hx = 0.0, cap, xi
        for _ in range(bisection_steps):
            if queries[i] >= spec.queries:
                break
            mid = 0.5 * (lo + hi)
            xm = point(i, mid)
            if batch_labels_with(i, xm) != y[i]:
                hi, hx = mid, xm
            else:
                lo = mid
        return hi, hx

    max_level = int(np.ceil(np.log2(d))) + 1
    for level in range(max_level):
        nblocks = min(2 ** level, d)
        bounds = np.linspace(0, d, nblocks + 1).astype(int)
        for b in range(nblocks):
            for i in range(B):
                if done[i] or queries[i] >= spec.queries:
                    continue
                lo, hi = bounds[b], bounds[b + 1]
                if lo == hi:
                    continue
                signs[i, lo:hi] *= -1.0
                cap = min(best_r[i], radii[i])
                r_new, x_new = radius_of(i, cap)
                if r_new < best_r[i]:
                    best_r[i] = r_new
                    best_x[i] = x_new
                    current[i] = x_new
                else:
                    signs[i, lo:hi] *= -1.0   # revert the flip
        if np.all(done | (queries >= spec.queries)):
            break

    out = x.copy()
    ok = best_r <= radii
    out[ok] = best_x[ok]
    return AttackResult(out, queries)
