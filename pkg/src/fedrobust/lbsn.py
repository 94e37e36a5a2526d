"""Batch-specific normalization support: per-batch statistics, payload
strip/merge of normalization-local parameters, and the final server-side
assembly of global scale/shift values.

In the batch-specific mode nothing here ever persists running averages; the
statistics live only for the duration of one forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ParameterSet, TAG_AGGREGABLE


class TagMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class BatchStats:
    mean: np.ndarray
    var: np.ndarray


def batch_statistics(batch: np.ndarray,
                     feature_axes: tuple[int, ...] | None = None) -> BatchStats:
    """Per-feature mean and biased (divide-by-count) variance.

    feature_axes are the axes kept; everything else (always including the
    batch axis 0) is reduced. The default keeps all non-batch axes, i.e. the
    element-wise mean/variance across the batch of trials. Convolutional
    normalization layers use feature_axes=(1,): per channel over
    (batch, height, width).
    """
    batch = np.asarray(batch)
    if batch.shape[0] < 2:
        raise ValueError(f"batch statistics need B >= 2, got B={batch.shape[0]}")
    if feature_axes is None:
        feature_axes = tuple(range(1, batch.ndim))
    if 0 in feature_axes:
        raise ValueError("batch axis 0 cannot be a feature axis")
    axes = tuple(i for i in range(batch.ndim) if i not in feature_axes)
    return BatchStats(mean=batch.mean(axis=axes), var=batch.var(axis=axes))


def strip_bn(ps: ParameterSet) -> dict[str, np.ndarray]:
    """Aggregable-only payload; contains no normalization-tagged tensors."""
    return {n: ps.params[n].copy() for n in sorted(ps.aggregable_names())}


def merge_bn(payload: dict[str, np.ndarray], ps: ParameterSet) -> ParameterSet:
    """Insert an aggregable payload into ps, keeping its local scale/shift."""
    expected = set(ps.aggregable_names())
    if set(payload) != expected:
        extra = set(payload) - expected
        missing = expected - set(payload)
        raise TagMismatchError(f"payload does not match aggregable partition "
                               f"(extra={sorted(extra)}, missing={sorted(missing)})")
    for n, v in payload.items():
        if v.shape != ps.params[n].shape:
            raise TagMismatchError(f"shape mismatch for {n}: "
                                   f"{v.shape} vs {ps.params[n].shape}")
        ps.params[n] = v.copy()
    return ps


def finalize_global_bn(client_bn: list[tuple[dict[str, np.ndarray], int]]
                       ) -> dict[str, np.ndarray]:
    """Sample-weighted average of per-client scale/shift tensors.

    client_bn: list of (bn-tensor dict, n_k). Weights are n_k / sum n_k.
    """
    if not client_bn:
        raise ValueError("finalize_global_bn needs at least one client")
    total = float(sum(n for _, n in client_bn))
    names = sorted(client_bn[0][0])
    out: dict[str, np.ndarray] = {}
    for name in names:
        ref_shape = client_bn[0][0][name].shape
        acc = np.zeros(ref_shape)
        for bn, n in client_bn:
            if set(bn) != set(names) or bn[name].shape != ref_shape:
                raise TagMismatchError(f"inconsistent tensor {name} across clients")
            acc += (n / total) * bn[name]
        out[name] = acc
    return out


def bn_tensors(ps: ParameterSet) -> dict[str, np.ndarray]:
    return {n: ps.params[n].copy() for n in sorted(ps.bn_names())}


def set_bn_tensors(ps: ParameterSet, bn: dict[str, np.ndarray]) -> None:
    for n, v in bn.items():
        if ps.tags.get(n) == TAG_AGGREGABLE or n not in ps.params:
            raise TagMismatchError(f"{n} is not a normalization-local tensor")
        ps.params[n] = v.copy()
