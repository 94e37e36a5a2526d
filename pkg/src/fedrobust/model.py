"""Compact convolutional classifier for multichannel time-series trials.

Layer stack: temporal conv -> BN -> depthwise spatial conv -> BN -> ELU ->
avg-pool -> separable conv (depthwise + pointwise) -> BN -> ELU -> avg-pool ->
flatten -> dense. Parameters are partitioned into aggregable tensors and
per-normalization-layer affine (scale/shift) tensors; the partition is what
the federation layer relies on to keep normalization local to each client.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad

BN_EPS = 1e-5
RUNNING_MOMENTUM = 0.1

TAG_AGGREGABLE = "aggregable"
TAG_BN_SCALE = "bn_scale"
TAG_BN_SHIFT = "bn_shift"
TAG_BN_STAT = "bn_stat"
BN_TAGS = (TAG_BN_SCALE, TAG_BN_SHIFT)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    channels: int
    samples: int
    classes: int
    temporal_filters: int = 8
    depth_multiplier: int = 2
    separable_filters: int = 16
    temporal_kernel: Optional[int] = None   # default: samples/4 rounded to odd
    separable_kernel: int = 15
    pool1: int = 4
    pool2: int = 8
    dropout: float = 0.25

    def __post_init__(self):
        if self.channels < 1 or self.samples < 8 or self.classes < 2:
            raise ConfigError(f"invalid dims c={self.channels} t={self.samples} "
                              f"L={self.classes}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must be in [0,1), got {self.dropout}")
        kt = self.kt
        if kt > self.samples or self.separable_kernel > self.samples:
            raise ConfigError("kernel length exceeds number of samples")
        if self.samples % (self.pool1 * self.pool2):
            raise ConfigError(f"samples={self.samples} not divisible by "
                              f"pool1*pool2={self.pool1 * self.pool2}")

    @property
    def kt(self) -> int:
        if self.temporal_kernel is not None:
            return self.temporal_kernel
        k = self.samples // 4
        return k if k % 2 == 1 else k + 1

    @property
    def feature_dim(self) -> int:
        return self.separable_filters * (self.samples // (self.pool1 * self.pool2))


@dataclass
class ParameterSet:
    """Named tensors with tags, plus optional running-stat buffers."""

    config: ModelConfig
    seed: int
    params: dict[str, np.ndarray]
    tags: dict[str, str]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.config, self.seed,
                            {k: v.copy() for k, v in self.params.items()},
                            dict(self.tags),
                            {k: v.copy() for k, v in self.buffers.items()})

    def aggregable_names(self) -> list[str]:
        return [n for n, t in self.tags.items() if t == TAG_AGGREGABLE]

    def bn_names(self) -> list[str]:
        return [n for n, t in self.tags.items() if t in BN_TAGS]

    def layer_groups(self) -> dict[str, list[str]]:
        """Aggregable tensors grouped by layer id (the 'conv1' in 'conv1.w')."""
        groups: dict[str, list[str]] = {}
        for n in self.aggregable_names():
            groups.setdefault(n.split(".")[0], []).append(n)
        return groups


def _glorot(rng: np.random.Generator, shape, fan_in, fan_out) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build(config: ModelConfig, seed: int, running_stats: bool = False) -> ParameterSet:
    """Deterministically initialize a ParameterSet.

    running_stats=True additionally allocates running mean/var buffers for the
    conventional-normalization evaluation path; the batch-specific path never
    creates them.
    """
    c, t, L = config.channels, config.samples, config.classes
    F1, D, F2 = config.temporal_filters, config.depth_multiplier, config.separable_filters
    kt, ks = config.kt, config.separable_kernel
    rng = np.random.default_rng(seed)

    params: dict[str, np.ndarray] = {}
    tags: dict[str, str] = {}

    def conv(name, shape, fan_in, fan_out):
        params[name + ".w"] = _glorot(rng, shape, fan_in, fan_out)
        tags[name + ".w"] = TAG_AGGREGABLE

    def bn(name, ch):
        params[name + ".gamma"] = np.ones(ch)
        params[name + ".beta"] = np.zeros(ch)
        tags[name + ".gamma"] = TAG_BN_SCALE
        tags[name + ".beta"] = TAG_BN_SHIFT

    conv("conv_temporal", (F1, 1, 1, kt), kt, F1 * kt)
    bn("bn1", F1)
    conv("conv_spatial", (F1 * D, 1, c, 1), c, D * c)
    bn("bn2", F1 * D)
    conv("conv_sep_dw", (F1 * D, 1, 1, ks), ks, ks)
    conv("conv_sep_pw", (F2, F1 * D, 1, 1), F1 * D, F2)
    bn("bn3", F2)
    params["dense.w"] = _glorot(rng, (config.feature_dim, L), config.feature_dim, L)
    params["dense.b"] = np.zeros(L)
    tags["dense.w"] = TAG_AGGREGABLE
    tags["dense.b"] = TAG_AGGREGABLE

    buffers: dict[str, np.ndarray] = {}
    if running_stats:
        for name, ch in (("bn1", F1), ("bn2", F1 * D), ("bn3", F2)):
            buffers[name + ".run_mean"] = np.zeros(ch)
            buffers[name + ".run_var"] = np.ones(ch)
    return ParameterSet(config, seed, params, tags, buffers)


def forward(ps: ParameterSet, batch, mode: str = "eval",
            batch_stats: bool = True,
            rng: Optional[np.random.Generator] = None) -> ad.Tensor:
    """Forward pass; batch is (B,1,c,t) array or Tensor; returns (B,L) logits.

    batch_stats=True normalizes with the current batch's statistics in both
    train and eval mode (the batch-specific path). batch_stats=False uses the
    batch in train mode (updating running buffers) and the running buffers in
    eval mode (conventional path).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train|eval, got {mode!r}")
    x = batch if isinstance(batch, ad.Tensor) else ad.constant(batch)
    cfg = ps.config
    B = x.shape[0]
    if x.shape != (B, 1, cfg.channels, cfg.samples):
        raise ad.ShapeError("forward", f"batch shape {x.shape} vs expected "
                                       f"(B,1,{cfg.channels},{cfg.samples})")
    use_batch = batch_stats or mode == "train"
    if use_batch and B < 2:
        raise ad.ShapeError(
            "forward", f"B={B} < 2: batch-specific normalization needs at least "
                       "two samples per batch")
    train = mode == "train"
    if train and cfg.dropout > 0 and rng is None:
        raise ValueError("train-mode forward with dropout needs an rng")

    p = {n: ad.Tensor(v, requires_grad=True) for n, v in ps.params.items()}

    def norm(h, name):
        if use_batch:
            out = ad.batch_standardize(h, p[name + ".gamma"], p[name + ".beta"],
                                       eps=BN_EPS)
            if train and ps.buffers:
                rm, rv = ps.buffers[name + ".run_mean"], ps.buffers[name + ".run_var"]
                rm *= 1.0 - RUNNING_MOMENTUM
                rm += RUNNING_MOMENTUM * out.batch_mean
                rv *= 1.0 - RUNNING_MOMENTUM
                rv += RUNNING_MOMENTUM * out.batch_var
            return out
        stats = (ps.buffers[name + ".run_mean"], ps.buffers[name + ".run_var"])
        return ad.batch_standardize(h, p[name + ".gamma"], p[name + ".beta"],
                                    eps=BN_EPS, stats=stats)

    def drop(h):
        return ad.dropout(h, cfg.dropout, rng) if train else h

    h = ad.conv2d(x, p["conv_temporal.w"], padding=(0, cfg.kt // 2))
    h = norm(h, "bn1")
    h = ad.conv2d(h, p["conv_spatial.w"], groups=cfg.temporal_filters)
    h = norm(h, "bn2")
    h = ad.elu(h)
    h = ad.avg_pool(h, (1, cfg.pool1))
    h = drop(h)
    h = ad.conv2d(h, p["conv_sep_dw.w"],
                  groups=cfg.temporal_filters * cfg.depth_multiplier,
                  padding=(0, cfg.separable_kernel // 2))
    h = ad.conv2d(h, p["conv_sep_pw.w"])
    h = norm(h, "bn3")
    h = ad.elu(h)
    h = ad.avg_pool(h, (1, cfg.pool2))
    h = drop(h)
    h = ad.reshape(h, (B, cfg.feature_dim))
    logits = ad.add_bias(ad.matmul(h, p["dense.w"]), p["dense.b"])
    logits.param_nodes = p  # type: ignore[attr-defined]
    return logits


def flat_norm(ps: ParameterSet, group: str) -> float:
    """Euclidean norm of the flattened aggregable tensors of one layer."""
    groups = ps.layer_groups()
    if group not in groups:
        raise KeyError(f"unknown layer group {group!r}; have {sorted(groups)}")
    sq = 0.0
    for n in groups[group]:
        v = ps.params[n]
        sq += float(v.ravel() @ v.ravel())
    return float(np.sqrt(sq))


def predict(ps: ParameterSet, batch, batch_stats: bool = True) -> np.ndarray:
    """Eval-mode class predictions for a batch."""
    return np.argmax(forward(ps, batch, "eval", batch_stats=batch_stats).value, axis=1)


def parameter_count(ps: ParameterSet) -> int:
    return int(sum(v.size for v in ps.params.values()))


# ---------------------------------------------------------------------------
# checkpoint format: manifest JSON + raw little-endian arrays, bit-exact


def save_checkpoint(ps: ParameterSet, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = sorted(ps.params)
    buf_names = sorted(ps.buffers)
    manifest = {
        "config": asdict(ps.config),
        "seed": ps.seed,
        "dtype": "<f8",
        "tensors": [{"name": n, "shape": list(ps.params[n].shape),
                     "tag": ps.tags[n]} for n in names],
        "buffers": [{"name": n, "shape": list(ps.buffers[n].shape),
                     "tag": TAG_BN_STAT} for n in buf_names],
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    with open(path / "params.bin", "wb") as f:
        for n in names:
            f.write(ps.params[n].astype("<f8", copy=False).tobytes())
        for n in buf_names:
            f.write(ps.buffers[n].astype("<f8", copy=False).tobytes())


def load_checkpoint(path) -> ParameterSet:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    raw = (path / "params.bin").read_bytes()
    cfg = ModelConfig(**manifest["config"])
    params, tags, buffers = {}, {}, {}
    off = 0

    def take(shape):
        nonlocal off
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += n * 8
        return arr

    for entry in manifest["tensors"]:
        params[entry["name"]] = take(entry["shape"])
        tags[entry["name"]] = entry["tag"]
    for entry in manifest["buffers"]:
        buffers[entry["name"]] = take(entry["shape"])
    return ParameterSet(cfg, manifest["seed"], params, tags, buffers)
