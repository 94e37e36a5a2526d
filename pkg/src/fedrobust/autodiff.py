"""Minimal reverse-mode autodiff over dense numpy arrays.

Define-by-run: each forward pass rebuilds the graph, which keeps the
perturb/restore cycles of weight-perturbation training trivially correct.
Supported ops are exactly the set the classifier and attacks need: dense
matmul+bias, grouped 2D convolution, average pooling, ELU, reshape,
elementwise add/mul/scale, batch standardization, dropout, and
softmax cross-entropy with mean reduction.

No broadcasting except bias-add and scalar scale; everything else must
shape-match exactly and raises ShapeError otherwise.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class Tensor:
    """A node in the computation graph: value, grad accumulator, parents."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward",
                 "batch_mean", "batch_var", "param_nodes")

    def __init__(self, value: np.ndarray, requires_grad: bool = False):
        self.value = np.asarray(value)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from a scalar loss; grads accumulate across calls."""
        if self.value.size != 1:
            raise ShapeError("backward", f"loss must be scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.value)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            if node._backward is None:
                continue
            for parent, pg in node._backward(g):
                if parent.requires_grad or parent._backward is not None:
                    if id(parent) in grads:
                        grads[id(parent)] += pg
                    else:
                        grads[id(parent)] = pg


def _needs_graph(*ts: Tensor) -> bool:
    return any(t.requires_grad or t._backward is not None for t in ts)


def _node(value: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], list]) -> Tensor:
    out = Tensor(value)
    if _needs_graph(*parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def constant(value, requires_grad: bool = False) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad)


# ---------------------------------------------------------------------------
# elementwise / linear ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("add", f"{a.shape} vs {b.shape}")
    return _node(a.value + b.value, (a, b), lambda g: [(a, g), (b, g)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("mul", f"{a.shape} vs {b.shape}")
    return _node(a.value * b.value, (a, b),
                 lambda g: [(a, g * b.value), (b, g * a.value)])


def scale(a: Tensor, s: float) -> Tensor:
    return _node(a.value * s, (a,), lambda g: [(a, g * s)])


def matmul(x: Tensor, w: Tensor) -> Tensor:
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("matmul", f"{x.shape} @ {w.shape}")
    return _node(x.value @ w.value, (x, w),
                 lambda g: [(x, g @ w.value.T), (w, x.value.T @ g)])


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast bias: x (N, M) + b (M,)."""
    if x.value.ndim != 2 or b.value.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError("add_bias", f"{x.shape} + {b.shape}")
    return _node(x.value + b.value, (x, b),
                 lambda g: [(x, g), (b, g.sum(axis=0))])


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != x.value.size:
        raise ShapeError("reshape", f"{x.shape} -> {shape}")
    old = x.shape
    return _node(x.value.reshape(shape), (x,),
                 lambda g: [(x, g.reshape(old))])


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    v = x.value
    y = np.where(v > 0, v, alpha * np.expm1(v))

    def bw(g):
        return [(x, g * np.where(v > 0, 1.0, y + alpha))]

    return _node(y, (x,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: scales kept units by 1/(1-rate)."""
    if rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.value.dtype) / keep
    return _node(x.value * mask, (x,), lambda g: [(x, g * mask)])


# ---------------------------------------------------------------------------
# convolution / pooling


def conv2d(x: Tensor, w: Tensor, groups: int = 1,
           padding: tuple[int, int] = (0, 0)) -> Tensor:
    """Stride-1 grouped cross-correlation: x (B,Cin,H,W), w (Cout,Cin/g,Kh,Kw)."""
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise ShapeError("conv2d", f"need 4-D operands, got {x.shape}, {w.shape}")
    B, Cin, H, W = x.shape
    Cout, Cg, Kh, Kw = w.shape
    ph, pw = padding
    if Cin % groups or Cout % groups or Cg != Cin // groups:
        raise ShapeError("conv2d",
                         f"groups={groups} incompatible with Cin={Cin}, Cout={Cout}, "
                         f"kernel in-channels={Cg}")
    if Kh > H + 2 * ph or Kw > W + 2 * pw:
        raise ShapeError("conv2d", f"kernel ({Kh},{Kw}) larger than padded input "
                                   f"({H + 2 * ph},{W + 2 * pw})")
    if ph or pw:
        xp = np.zeros((B, Cin, H + 2 * ph, W + 2 * pw), dtype=x.value.dtype)
        xp[:, :, ph:ph + H, pw:pw + W] = x.value
    else:
        xp = np.ascontiguousarray(x.value)
    wv = np.ascontiguousarray(w.value)
    y = kernels.conv2d_fwd(xp, wv, groups)

    def bw(g):
        g = np.ascontiguousarray(g)
        out = []
        if x.requires_grad or x._backward is not None:
            dxp = kernels.conv2d_bwd_input(g, wv, groups, H + 2 * ph, W + 2 * pw)
            out.append((x, dxp[:, :, ph:ph + H, pw:pw + W]))
        if w.requires_grad or w._backward is not None:
            out.append((w, kernels.conv2d_bwd_weight(xp, g, groups, Kh, Kw)))
        return out

    return _node(y, (x, w), bw)


def avg_pool(x: Tensor, pool: tuple[int, int]) -> Tensor:
    if x.value.ndim != 4:
        raise ShapeError("avg_pool", f"need 4-D input, got {x.shape}")
    ph, pw = pool
    B, C, H, W = x.shape
    if H % ph or W % pw:
        raise ShapeError("avg_pool", f"input ({H},{W}) not divisible by pool ({ph},{pw})")
    y = kernels.avgpool_fwd(np.ascontiguousarray(x.value), ph, pw)
    return _node(y, (x,),
                 lambda g: [(x, kernels.avgpool_bwd(np.ascontiguousarray(g), ph, pw, H, W))])


# ---------------------------------------------------------------------------
# batch standardization


def batch_standardize(x: Tensor, gamma: Tensor, beta: Tensor,
                      eps: float = 1e-5,
                      stats: Optional[tuple[np.ndarray, np.ndarray]] = None) -> Tensor:
    """Per-channel standardize of (B,C,H,W) over (batch, height, width), then affine.

    With stats=None the mean/variance come from the batch itself (biased, 1/B
    variance) and gradients flow through them. With explicit stats the values
    are treated as constants (running-statistics evaluation path).
    """
    if x.value.ndim != 4:
        raise ShapeError("batch_standardize", f"need 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError("batch_standardize",
                         f"affine shapes {gamma.shape}/{beta.shape} vs C={C}")
    if eps <= 0:
        raise ShapeError("batch_standardize", f"eps must be > 0, got {eps}")
    v = x.value
    from_batch = stats is None
    if from_batch:
        if B < 2:
            raise ShapeError("batch_standardize",
                             f"batch statistics need B >= 2, got B={B}")
        mean = v.mean(axis=(0, 2, 3))
        var = v.var(axis=(0, 2, 3))
    else:
        mean, var = stats
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (v - mean[:, None, None]) * inv[:, None, None]
    y = gamma.value[:, None, None] * xhat + beta.value[:, None, None]
    m = B * H * W

    def bw(g):
        out = []
        if gamma.requires_grad or gamma._backward is not None:
            out.append((gamma, (g * xhat).sum(axis=(0, 2, 3))))
        if beta.requires_grad or beta._backward is not None:
            out.append((beta, g.sum(axis=(0, 2, 3))))
        if x.requires_grad or x._backward is not None:
            gi = g * gamma.value[:, None, None]
            if from_batch:
                mean_gi = gi.mean(axis=(0, 2, 3))
                mean_gx = (gi * xhat).mean(axis=(0, 2, 3))
                dx = inv[:, None, None] * (gi - mean_gi[:, None, None]
                                           - xhat * mean_gx[:, None, None])
            else:
                dx = gi * inv[:, None, None]
            out.append((x, dx))
        return out

    out = _node(y, (x, gamma, beta), bw)
    # expose the statistics used, for running-average maintenance
    out.batch_mean = mean
    out.batch_var = var
    return out


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; labels are integer class ids."""
    if logits.value.ndim != 2:
        raise ShapeError("softmax_cross_entropy", f"need (B,L) logits, got {logits.shape}")
    B, L = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (B,):
        raise ShapeError("softmax_cross_entropy",
                         f"labels shape {labels.shape} vs batch {B}")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(B), labels] - np.log(ez.sum(axis=1)))
    loss = np.array(nll.mean())

    def bw(g):
        d = p.copy()
        d[np.arange(B), labels] -= 1.0
        return [(logits, g * d / B)]

    return _node(loss, (logits,), bw)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)
