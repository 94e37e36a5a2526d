"""Experiment orchestration: balanced accuracy, leave-one-subject-out
cross-validation, centralized baselines, ablation grids, participation and
local-epoch sweeps, and results persistence.

Methods: "safe" (federated + the three robustness toggles), "fedavg"
(federated, all toggles off), "nt" (centralized standard training on
pooled data), "at" (centralized single-step adversarial training).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import client as C
from . import data as D
from . import federation as F
from . import model as M
from . import attacks as A

METHODS = ("safe", "fedavg", "nt", "at")


@dataclass(frozen=True)
class ExperimentConfig:
    # benchmark
    subjects: int = 8
    classes: int = 2
    channels: int = 8
    samples: int = 128
    trials: int = 160
    data_seed: int = 0
    align: bool = True
    # model
    temporal_filters: int = 8
    depth_multiplier: int = 2
    separable_filters: int = 16
    temporal_kernel: int | None = None
    separable_kernel: int = 15
    dropout: float = 0.25
    # method + robustness toggles (the toggles only apply to "safe")
    method: str = "safe"
    lbsn: bool = True
    fat: bool = True
    awp: bool = True
    # federated schedule
    rounds: int = 100
    selected: int = 4
    epochs: int = 2
    # optimizer / perturbation constants
    batch_size: int = 32
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    fat_alpha: float = 0.03
    awp_xi: float = 0.01
    # centralized schedule
    central_epochs: int = 100
    central_batch: int = 64
    # evaluation
    test_batch: int = 8
    eval_trials: int | None = None     # stratified subsample of the test subject
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    attacks: tuple[A.AttackSpec, ...] = (
        A.AttackSpec(family="pgd", epsilon=0.03),
        A.AttackSpec(family="square", epsilon=0.05, queries=100),
    )

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.subjects < 2:
            raise ValueError("need at least two subjects for cross-validation")

    def toggles(self) -> tuple[bool, bool, bool]:
        """(lbsn, fat, awp) actually in effect for federated training."""
        if self.method == "fedavg":
            return (False, False, False)
        return (self.lbsn, self.fat, self.awp)

    def model_config(self) -> M.ModelConfig:
        return M.ModelConfig(
            channels=self.channels, samples=self.samples, classes=self.classes,
            temporal_filters=self.temporal_filters,
            depth_multiplier=self.depth_multiplier,
            separable_filters=self.separable_filters,
            temporal_kernel=self.temporal_kernel,
            separable_kernel=self.separable_kernel, dropout=self.dropout)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# metric


def bca(predictions: np.ndarray, labels: np.ndarray, L: int) -> float:
    """Mean over classes of per-class recall."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    total = 0.0
    for cls in range(L):
        members = labels == cls
        if not members.any():
            raise ValueError(f"class {cls} absent from labels")
        total += float(np.mean(predictions[members] == cls))
    return total / L


# ---------------------------------------------------------------------------
# evaluation


def _batches(n: int, size: int):
    """Index slices of at most `size`; a trailing singleton joins its
    predecessor so every batch has >= 2 trials."""
    idx = np.arange(n)
    out = [idx[s:s + size] for s in range(0, n, size)]
    if len(out) > 1 and len(out[-1]) == 1:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def predict(ps: M.ParameterSet, x: np.ndarray, batch_stats: bool,
            test_batch: int = 8) -> np.ndarray:
    preds = np.empty(len(x), dtype=int)
    for idx in _batches(len(x), test_batch):
        logits = M.forward(ps, x[idx], "eval", batch_stats=batch_stats).value
        preds[idx] = np.argmax(logits, axis=1)
    return preds


def attack_predict(ps: M.ParameterSet, x: np.ndarray, y: np.ndarray,
                   spec: A.AttackSpec, batch_stats: bool,
                   test_batch: int = 8) -> np.ndarray:
    """Predictions on adversarial counterparts, crafted batch by batch."""
    preds = np.empty(len(x), dtype=int)
    for bi, idx in enumerate(_batches(len(x), test_batch)):
        sp = replace(spec, seed=spec.seed + 7919 * bi)
        xb, yb = x[idx], y[idx]
        if sp.family == "fgsm":
            adv = A.fgsm_attack(ps, xb, yb, sp.epsilon, batch_stats).x_adv
        elif sp.family == "pgd":
            adv = A.pgd_attack(ps, xb, yb, sp, batch_stats).x_adv
        elif sp.family == "square":
            oracle = A.ScoreOracle(ps, batch_stats)
            adv = A.square_attack(oracle.scores, xb, yb, sp).x_adv
        else:
            oracle = A.LabelOracle(ps, batch_stats)
            adv = A.rays_attack(oracle.labels, xb, yb, sp).x_adv
        logits = M.forward(ps, adv, "eval", batch_stats=batch_stats).value
        preds[idx] = np.argmax(logits, axis=1)
    return preds


def attack_key(spec: A.AttackSpec) -> str:
    return f"{spec.family}@{spec.epsilon:g}"


def stratified_subsample(x: np.ndarray, y: np.ndarray, n: int,
                         rng: np.random.Generator):
    """Roughly class-balanced subset of n trials (every class kept)."""
    if n >= len(x):
        return x, y
    classes = np.unique(y)
    per = max(1, n // len(classes))
    picked = []
    for cls in classes:
        members = np.nonzero(y == cls)[0]
        take = min(per, len(members))
        picked.append(rng.choice(members, size=take, replace=False))
    idx = np.sort(np.concatenate(picked))
    return x[idx], y[idx]


def evaluate(ps: M.ParameterSet, x: np.ndarray, y: np.ndarray, L: int,
             attacks: tuple[A.AttackSpec, ...], batch_stats: bool,
             test_batch: int = 8) -> dict[str, float]:
    out = {"benign": bca(predict(ps, x, batch_stats, test_batch), y, L)}
    for spec in attacks:
        preds = attack_predict(ps, x, y, spec, batch_stats, test_batch)
        out[attack_key(spec)] = bca(preds, y, L)
    return out


# ---------------------------------------------------------------------------
# training dispatch


def _fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def centralized_train(method: str, pooled_x: np.ndarray, pooled_y: np.ndarray,
                      cfg: ExperimentConfig, seed: int) -> M.ParameterSet:
    """Minibatch SGD on merged data; "at" trains on single-step sign-gradient
    perturbations of each batch, "nt" on the clean batches."""
    if method not in ("nt", "at"):
        raise ValueError(f"centralized method must be nt|at, got {method!r}")
    ps = M.build(cfg.model_config(), seed=seed, running_stats=True)
    client_cfg = C.ClientConfig(
        epochs=1, batch_size=cfg.central_batch, lr=cfg.lr,
        momentum=cfg.momentum, weight_decay=cfg.weight_decay,
        fat_alpha=0.0, awp_xi=0.0)
    opt = C.OptimizerState()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xCE27]))
    alpha = cfg.fat_alpha if method == "at" else 0.0
    for _ in range(cfg.central_epochs):
        order = rng.permutation(len(pooled_x))
        for start in range(0, len(order), cfg.central_batch):
            idx = order[start:start + cfg.central_batch]
            if len(idx) < 2:
                continue
            xb, yb = pooled_x[idx], pooled_y[idx]
            xb = C.fat_perturb(ps, xb, yb, alpha, batch_stats=False)
            _, grads, _ = C._loss_and_grads(ps, xb, yb, "train",
                                            batch_stats=False, rng=rng)
            opt.step(ps, grads, client_cfg)
    return ps


def train_model(cfg: ExperimentConfig, train_sets, seed: int,
                keep_payloads: bool = False):
    """Train by cfg.method; returns (ps, eval_batch_stats, payload_log)."""
    if cfg.method in ("nt", "at"):
        pooled_x = np.concatenate([x for x, _ in train_sets])
        pooled_y = np.concatenate([y for _, y in train_sets])
        ps = centralized_train(cfg.method, pooled_x, pooled_y, cfg, seed)
        return ps, False, []
    lbsn, fat, awp = cfg.toggles()
    client_cfg = C.ClientConfig(
        epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
        momentum=cfg.momentum, weight_decay=cfg.weight_decay,
        fat_alpha=cfg.fat_alpha if fat else 0.0,
        awp_xi=cfg.awp_xi if awp else 0.0)
    fed_cfg = F.FederationConfig(
        clients=len(train_sets), rounds=cfg.rounds,
        selected_per_round=min(cfg.selected, len(train_sets)), seed=seed)
    result = F.run_federation(fed_cfg, cfg.model_config(), train_sets,
                              client_cfg, lbsn=lbsn,
                              keep_payload_bytes=keep_payloads)
    return result.final_model, lbsn, result.payload_log


# ---------------------------------------------------------------------------
# cross-validation and grids


def loso_run(cfg: ExperimentConfig, keep_payloads: bool = False,
             folds: tuple[int, ...] | None = None):
    """Hold each subject out once (or the given folds), per seed.

    Returns (rows, payload_log). Each row carries subject, seed, metric
    name, value, and the config hash.
    """
    datasets = D.default_benchmark(K=cfg.subjects, L=cfg.classes,
                                   c=cfg.channels, t=cfg.samples,
                                   n=cfg.trials, seed=cfg.data_seed,
                                   align=cfg.align)
    chash = config_hash(cfg)
    rows, payload_log = [], []
    for seed in cfg.seeds:
        for fold in (folds if folds is not None else range(cfg.subjects)):
            train_sets = [d for k, d in enumerate(datasets) if k != fold]
            ps, batch_stats, plog = train_model(cfg, train_sets,
                                                _fold_seed(seed, fold),
                                                keep_payloads)
            payload_log.extend(plog)
            tx, ty = datasets[fold]
            if cfg.eval_trials is not None:
                sub_rng = np.random.default_rng(
                    np.random.SeedSequence([seed, fold, 0xE7A1]))
                tx, ty = stratified_subsample(tx, ty, cfg.eval_trials, sub_rng)
            metrics = evaluate(ps, tx, ty, cfg.classes, cfg.attacks,
                               batch_stats, cfg.test_batch)
            for name, value in metrics.items():
                rows.append({"method": cfg.method, "subject": fold,
                             "seed": seed, "metric": name,
                             "bca": round(value, 10), "config": chash})
    return rows, payload_log


def run_cell(cfg: ExperimentConfig, lbsn: bool, fat: bool, awp: bool,
             seed: int, fold: int, datasets=None,
             return_model: bool = False):
    """One (toggle combo, seed, fold) training + evaluation."""
    cell_cfg = replace(cfg, method="safe", lbsn=lbsn, fat=fat, awp=awp)
    if datasets is None:
        datasets = D.default_benchmark(K=cfg.subjects, L=cfg.classes,
                                       c=cfg.channels, t=cfg.samples,
                                       n=cfg.trials, seed=cfg.data_seed,
                                       align=cfg.align)
    train_sets = [d for k, d in enumerate(datasets) if k != fold]
    ps, batch_stats, _ = train_model(cell_cfg, train_sets,
                                     _fold_seed(seed, fold))
    tx, ty = datasets[fold]
    if cfg.eval_trials is not None:
        sub_rng = np.random.default_rng(
            np.random.SeedSequence([seed, fold, 0xE7A1]))
        tx, ty = stratified_subsample(tx, ty, cfg.eval_trials, sub_rng)
    metrics = evaluate(ps, tx, ty, cfg.classes, cfg.attacks, batch_stats,
                       cfg.test_batch)
    row = {"lbsn": lbsn, "fat": fat, "awp": awp, "seed": seed,
           "subject": fold, **{k: round(v, 10) for k, v in metrics.items()}}
    if return_model:
        return row, (ps, batch_stats, tx, ty)
    return row


def ablate(cfg: ExperimentConfig, datasets=None) -> list[dict]:
    """The 8-row toggle grid; each seed evaluates one rotating held-out
    subject so the grid stays tractable while covering subjects."""
    rows = []
    for lbsn, fat, awp in itertools.product((True, False), repeat=3):
        for seed in cfg.seeds:
            fold = seed % cfg.subjects
            rows.append(run_cell(cfg, lbsn, fat, awp, seed, fold, datasets))
    return rows


def summarize_ablation(rows: list[dict]) -> list[dict]:
    """Seed-averaged metrics per toggle combination."""
    out = []
    for lbsn, fat, awp in itertools.product((True, False), repeat=3):
        cell = [r for r in rows
                if (r["lbsn"], r["fat"], r["awp"]) == (lbsn, fat, awp)]
        metrics = [k for k in cell[0] if k not in
                   ("lbsn", "fat", "awp", "seed", "subject")]
        out.append({"lbsn": lbsn, "fat": fat, "awp": awp,
                    **{m: float(np.mean([r[m] for r in cell]))
                       for m in metrics}})
    return out


def sweep(cfg: ExperimentConfig, parameter: str,
          values: tuple[int, ...], datasets=None) -> list[dict]:
    """Participation (m) or local-epochs (E) curve; one rotating fold per
    seed per value."""
    if parameter not in ("m", "E"):
        raise ValueError("parameter must be 'm' or 'E'")
    if not values:
        raise ValueError("values must be nonempty")
    if datasets is None:
        datasets = D.default_benchmark(K=cfg.subjects, L=cfg.classes,
                                       c=cfg.channels, t=cfg.samples,
                                       n=cfg.trials, seed=cfg.data_seed,
                                       align=cfg.align)
    rows = []
    for value in values:
        vcfg = replace(cfg, selected=value) if parameter == "m" \
            else replace(cfg, epochs=value)
        lbsn, fat, awp = vcfg.toggles()
        for seed in cfg.seeds:
            fold = seed % cfg.subjects
            row = run_cell(vcfg, lbsn, fat, awp, seed, fold, datasets)
            rows.append({"parameter": parameter, "value": value, **row})
    return rows


# ---------------------------------------------------------------------------
# persistence


def write_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(rows[0].keys())
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def write_manifest(path, cfg: ExperimentConfig, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {"config": dataclasses.asdict(cfg),
                "config_hash": config_hash(cfg)}
    if extra:
        manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=1, default=str))
