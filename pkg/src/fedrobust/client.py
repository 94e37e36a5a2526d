"""Client-side local optimization.

A local update is, per batch: (1) single-step sign-gradient perturbation of
the inputs scaled by each trial's signal std, (2) a one-step adversarial
weight perturbation whose layer-wise norm is proportional to that layer's
weight norm, (3) an SGD-with-momentum descent step at the perturbed weights,
then the perturbation is subtracted again. Normalization statistics always
come from the perturbed batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as M
from .lbsn import strip_bn, merge_bn


@dataclass(frozen=True)
class ClientConfig:
    epochs: int = 2
    batch_size: int = 32
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    fat_alpha: float = 0.03     # input perturbation, units of per-trial std
    awp_xi: float = 0.01        # weight perturbation scale
    reset_optimizer: bool = False

    def __post_init__(self):
        if self.fat_alpha < 0 or self.awp_xi < 0:
            raise ValueError("perturbation magnitudes must be nonnegative")
        if self.lr < 0 or not (0 <= self.momentum < 1) or self.weight_decay < 0:
            raise ValueError("invalid optimizer constants")


# final dense bias and normalization affine tensors are never weight-perturbed
AWP_EXCLUDED = ("dense.b",)


def trial_std(x: np.ndarray) -> float:
    """Population std over all entries of one trial."""
    return float(np.std(x))


def _loss_and_grads(ps: M.ParameterSet, x, y, mode: str, batch_stats: bool,
                    rng=None, input_grad: bool = False):
    xt = ad.constant(x, requires_grad=input_grad)
    logits = M.forward(ps, xt, mode, batch_stats=batch_stats, rng=rng)
    loss = ad.softmax_cross_entropy(logits, y)
    loss.backward()
    if not np.isfinite(loss.value):
        raise FloatingPointError(f"non-finite loss {loss.value!r} during local update")
    pgrads = {n: node.grad for n, node in logits.param_nodes.items()}
    return float(loss.value), pgrads, (xt.grad if input_grad else None)


def fat_perturb(ps: M.ParameterSet, x: np.ndarray, y: np.ndarray,
                alpha: float, batch_stats: bool = True) -> np.ndarray:
    """X + alpha * s * sign(input gradient), s = each trial's benign std."""
    if alpha == 0.0:
        return x
    _, _, xg = _loss_and_grads(ps, x, y, "eval", batch_stats, input_grad=True)
    s = np.std(x, axis=(1, 2, 3), keepdims=True)
    return x + alpha * s * np.sign(xg)


def scaled_direction(grads: dict[str, np.ndarray],
                     weights: dict[str, np.ndarray],
                     xi: float) -> dict[str, np.ndarray]:
    """xi * (g/||g||) * ||w|| over the flattened tensors of one layer.

    Returns {} when the gradient is identically zero (no division by zero).
    """
    gnorm = np.sqrt(sum(float(g.ravel() @ g.ravel()) for g in grads.values()))
    if gnorm == 0.0:
        return {}
    wnorm = np.sqrt(sum(float(w.ravel() @ w.ravel()) for w in weights.values()))
    coef = xi * wnorm / gnorm
    return {n: coef * g for n, g in grads.items()}


def awp_nu(ps: M.ParameterSet, x_adv: np.ndarray, y: np.ndarray,
           xi: float, batch_stats: bool = True) -> dict[str, np.ndarray]:
    """Layer-wise ascent direction: nu_l = xi * (g_l/||g_l||) * ||theta_l||."""
    nu: dict[str, np.ndarray] = {}
    if xi == 0.0:
        return nu
    _, pgrads, _ = _loss_and_grads(ps, x_adv, y, "eval", batch_stats)
    for group, names in ps.layer_groups().items():
        names = [n for n in names if n not in AWP_EXCLUDED]
        if not names:
            continue
        nu.update(scaled_direction({n: pgrads[n] for n in names},
                                   {n: ps.params[n] for n in names}, xi))
    return nu


@dataclass
class OptimizerState:
    """Per-client SGD momentum buffers; persists across rounds."""

    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, ps: M.ParameterSet, grads: dict[str, np.ndarray],
             cfg: ClientConfig) -> None:
        for n, g in grads.items():
            d = g
            if cfg.weight_decay and ps.tags[n] == M.TAG_AGGREGABLE:
                d = g + cfg.weight_decay * ps.params[n]
            v = self.velocity.get(n)
            if v is None:
                v = np.zeros_like(ps.params[n])
                self.velocity[n] = v
            v *= cfg.momentum
            v += d
            ps.params[n] -= cfg.lr * v


def awp_step(ps: M.ParameterSet, nu: dict[str, np.ndarray],
             x_adv: np.ndarray, y: np.ndarray, opt: OptimizerState,
             cfg: ClientConfig, rng: np.random.Generator,
             batch_stats: bool = True) -> float:
    """Ascend by nu, descend with SGD at the perturbed point, restore nu."""
    for n, v in nu.items():
        ps.params[n] += v
    try:
        mode = "train"
        loss, pgrads, _ = _loss_and_grads(ps, x_adv, y, mode, batch_stats, rng=rng)
        opt.step(ps, pgrads, cfg)
    finally:
        for n, v in nu.items():
            ps.params[n] -= v
    return loss


class Client:
    """One simulated participant; holds its data, local normalization
    parameters, and optimizer state across rounds."""

    def __init__(self, cid: int, x: np.ndarray, y: np.ndarray,
                 model_cfg: M.ModelConfig, cfg: ClientConfig,
                 init_seed: int, shuffle_seed: int, lbsn: bool = True):
        if len(x) == 0:
            raise ValueError(f"client {cid}: empty dataset")
        self.cid = cid
        self.x = x
        self.y = y
        self.cfg = cfg
        self.lbsn = lbsn
        self.ps = M.build(model_cfg, seed=init_seed, running_stats=not lbsn)
        self.opt = OptimizerState()
        self.rng = np.random.default_rng(np.random.SeedSequence([shuffle_seed, cid]))

    @property
    def n_samples(self) -> int:
        return len(self.x)

    def get_payload(self) -> dict[str, np.ndarray]:
        if self.lbsn:
            return strip_bn(self.ps)
        payload = {n: v.copy() for n, v in self.ps.params.items()}
        payload.update({n: v.copy() for n, v in self.ps.buffers.items()})
        return payload

    def set_payload(self, payload: dict[str, np.ndarray]) -> None:
        if self.lbsn:
            merge_bn(payload, self.ps)
            return
        for n, v in payload.items():
            if n in self.ps.params:
                self.ps.params[n] = v.copy()
            elif n in self.ps.buffers:
                self.ps.buffers[n] = v.copy()
            else:
                raise KeyError(f"unknown payload tensor {n}")

    def update(self, payload: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """One round of local training; returns the updated payload."""
        self.set_payload(payload)
        if self.cfg.reset_optimizer:
            self.opt = OptimizerState()
        cfg = self.cfg
        for _ in range(cfg.epochs):
            order = self.rng.permutation(self.n_samples)
            for start in range(0, self.n_samples, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                if len(idx) < 2:
                    continue
                xb, yb = self.x[idx], self.y[idx]
                x_adv = fat_perturb(self.ps, xb, yb, cfg.fat_alpha)
                nu = awp_nu(self.ps, x_adv, yb, cfg.awp_xi)
                awp_step(self.ps, nu, x_adv, yb, self.opt, cfg, self.rng)
        return self.get_payload()
