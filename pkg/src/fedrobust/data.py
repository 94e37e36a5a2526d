"""Synthetic multi-subject trial generation, on-disk format, alignment,
and mix augmentation.

Trials are (n, 1, c, t) arrays: n labeled multichannel windows of c
channels by t samples. Each synthetic subject draws class-conditional
oscillatory templates through its own channel mixing, amplitude, noise
level, and timing/frequency jitter, producing a controllable
cross-subject covariate shift.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class SubjectSpec:
    template_seed: int                 # shared across subjects of a benchmark
    mixing: np.ndarray                 # c x c, non-singular
    amplitude: float = 1.0
    noise: float = 0.0
    class_ratios: tuple[float, ...] | None = None   # default uniform
    freq_offset: float = 0.0           # subject-wide frequency scaling shift
    freq_jitter: float = 0.0           # per-trial relative frequency sd
    latency_jitter: float = 0.0        # per-trial shift, in samples
    fragile_scale: float = 0.35        # amplitude of the dense fragile cue

    def __post_init__(self):
        m = np.asarray(self.mixing, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DataError("mixing matrix must be square")
        if abs(np.linalg.det(m)) < 1e-12:
            raise DataError("mixing matrix is singular")
        if self.amplitude <= 0 or self.noise < 0:
            raise DataError("amplitude must be positive, noise nonnegative")
        if self.class_ratios is not None and (
                min(self.class_ratios) <= 0):
            raise DataError("class ratios must be positive")


def class_templates(seed: int, L: int, c: int, t: int,
                    freq_scale: float = 1.0, shift: float = 0.0,
                    fragile: float = 0.35) -> np.ndarray:
    """(L, c, t) class-conditional source patterns.

    Each class combines two discriminative components:
    - a robust one: a windowed class-specific oscillation concentrated on a
      few channels and a short time window (low l1/l2 ratio, so a small
      l-inf budget cannot erase it);
    - a fragile one: a faint class-specific sign pattern spread over every
      cell (predictive, but its per-cell amplitude is tiny, so a small
      l-inf budget — or single-step adversarial training — erases it).

    freq_scale and shift (samples) deform the oscillation only.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    tau = np.arange(t, dtype=np.float64)
    out = np.empty((L, c, t))
    for l in range(L):
        chans = rng.choice(c, size=max(2, c // 4), replace=False)
        pattern = np.zeros(c)
        pattern[chans] = rng.uniform(0.5, 1.0, size=len(chans))
        pattern /= np.linalg.norm(pattern)
        center = t * (0.3 + 0.4 * (l / max(L - 1, 1))) + shift
        width = t / 8.0
        envelope = np.exp(-0.5 * ((tau - center) / width) ** 2)
        freq = (4.0 + 3.0 * l) * freq_scale
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (tau - shift) / t + phase) * envelope
        robust = np.outer(pattern, wave)
        robust /= np.linalg.norm(robust)
        shortcut = rng.choice([-1.0, 1.0], size=(c, t)) / np.sqrt(c * t)
        out[l] = robust + fragile * shortcut
    return out


def _class_counts(n: int, L: int, ratios: tuple[float, ...] | None) -> np.ndarray:
    if ratios is None:
        ratios = (1.0,) * L
    if len(ratios) != L:
        raise DataError(f"need {L} class ratios, got {len(ratios)}")
    w = np.asarray(ratios) / sum(ratios)
    counts = np.floor(w * n).astype(int)
    for i in np.argsort(-(w * n - counts))[: n - counts.sum()]:
        counts[i] += 1
    if counts.min() < 1:
        raise DataError("class ratios leave a class empty")
    return counts


def generate_subject(spec: SubjectSpec, L: int, c: int, t: int, n: int,
                     seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (x, y) for one subject; x is (n, 1, c, t)."""
    if n < 2 * L:
        raise DataError(f"need at least {2 * L} trials for {L} classes")
    mixing = np.asarray(spec.mixing, dtype=np.float64)
    if mixing.shape != (c, c):
        raise DataError(f"mixing must be {c}x{c}, got {mixing.shape}")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    counts = _class_counts(n, L, spec.class_ratios)
    y = np.repeat(np.arange(L), counts)
    rng.shuffle(y)
    x = np.empty((n, 1, c, t))
    for i in range(n):
        fs = 1.0 + spec.freq_offset
        if spec.freq_jitter > 0:
            fs += rng.normal() * spec.freq_jitter
        sh = rng.uniform(-spec.latency_jitter, spec.latency_jitter) \
            if spec.latency_jitter > 0 else 0.0
        tpl = class_templates(spec.template_seed, L, c, t, fs, sh,
                              fragile=spec.fragile_scale)[y[i]]
        trial = spec.amplitude * (mixing @ tpl)
        if spec.noise > 0:
            trial = trial + spec.noise * rng.normal(size=(c, t))
        x[i, 0] = trial
    return x, y


def benchmark_specs(K: int = 8, c: int = 8, seed: int = 0,
                    template_seed: int = 7,
                    mixing_strength: float = 0.15,
                    amplitude_range: tuple[float, float] = (0.48, 2.0),
                    noise_range: tuple[float, float] = (0.04, 0.135),
                    freq_offset_sd: float = 0.03,
                    freq_jitter: float = 0.02,
                    latency_jitter: float = 3.5,
                    fragile_scale: float = 0.35,
                    weak_fraction: float = 0.625) -> list[SubjectSpec]:
    """K subject specs sharing templates but differing in every shift knob.

    The cohort spans a signal-quality spectrum on purpose: a weak-signal
    majority (low amplitude, high noise) and a strong-signal minority.
    Models fitted mostly on strong-signal clients transfer poorly to the
    weak-signal clients, which is the regime of interest for cross-subject
    evaluation.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    lo, hi = amplitude_range
    nlo, nhi = noise_range
    n_weak = max(1, min(K - 1, round(weak_fraction * K))) if K > 1 else K
    n_strong = K - n_weak
    amplitudes = np.concatenate([
        np.linspace(lo, lo + 0.2, n_weak),
        np.linspace(0.8 * hi, hi, n_strong)])
    noises = np.concatenate([
        np.linspace(nhi, nhi - 0.02, n_weak),
        np.linspace(1.25 * nlo, nlo, n_strong)])
    specs = []
    for k in range(K):
        mixing = np.eye(c) + mixing_strength * rng.normal(size=(c, c)) / np.sqrt(c)
        specs.append(SubjectSpec(
            template_seed=template_seed,
            mixing=mixing,
            amplitude=float(amplitudes[k]),
            noise=float(noises[k]),
            freq_offset=float(rng.normal() * freq_offset_sd),
            freq_jitter=freq_jitter,
            latency_jitter=latency_jitter,
            fragile_scale=fragile_scale,
        ))
    return specs


def default_benchmark(K: int = 8, L: int = 2, c: int = 8, t: int = 128,
                      n: int = 160, seed: int = 0, align: bool = True,
                      **spec_kwargs) -> list[tuple[np.ndarray, np.ndarray]]:
    """The desk-scale benchmark: K subjects, aligned per subject."""
    specs = benchmark_specs(K=K, c=c, seed=seed, **spec_kwargs)
    out = []
    for k, spec in enumerate(specs):
        x, y = generate_subject(spec, L, c, t, n, seed=seed * 1000 + k)
        if align:
            x = euclidean_align(x)
        out.append((x, y))
    return out


# ---------------------------------------------------------------------------
# alignment


def matrix_inverse_sqrt(s: np.ndarray) -> np.ndarray:
    """S^{-1/2} of a symmetric positive-definite matrix by eigendecomposition."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DataError("matrix must be square")
    if not np.allclose(s, s.T, rtol=0, atol=1e-10 * max(1.0, np.abs(s).max())):
        raise DataError("matrix must be symmetric")
    vals, vecs = np.linalg.eigh(s)
    if vals.min() <= 0:
        raise DataError("matrix must be positive definite")
    return (vecs / np.sqrt(vals)) @ vecs.T


def euclidean_align(x: np.ndarray) -> np.ndarray:
    """Whiten one subject's trials by the inverse sqrt of the mean covariance.

    The mean trial covariance of the output is the identity. A singular
    mean covariance is ridge-regularized with a warning.
    """
    if len(x) < 1:
        raise DataError("alignment needs at least one trial")
    trials = x[:, 0]                       # (n, c, t)
    c = trials.shape[1]
    rbar = np.einsum("nct,ndt->cd", trials, trials) / len(trials)
    rbar = 0.5 * (rbar + rbar.T)
    vals = np.linalg.eigvalsh(rbar)
    if vals.min() <= 1e-12 * max(1.0, vals.max()):
        lam = 1e-8 * np.trace(rbar) / c
        warnings.warn("singular mean covariance; applying ridge "
                      f"regularization lambda={lam:.3e}")
        rbar = rbar + lam * np.eye(c)
    w = matrix_inverse_sqrt(rbar)
    return np.einsum("cd,ndt->nct", w, trials)[:, None]


# ---------------------------------------------------------------------------
# mix augmentation


def mix_pair(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    return 0.5 * (x1 + x2)


def mix_augment(x: np.ndarray, y: np.ndarray, target_class: int,
                rng: np.random.Generator
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Append averaged-trial pairs until class counts are balanced.

    A synthetic target-class trial averages one target trial with any other
    trial (a pair containing at least one target member is labeled target);
    synthetic trials of other classes average two same-class trials.
    Returns (x, y, synthetic-flag) with originals first.
    """
    if len(x) < 2:
        raise DataError("augmentation needs at least two trials")
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise DataError("augmentation needs at least two classes present")
    target_count = counts.max()
    new_x, new_y = [], []
    for cls, cnt in zip(classes, counts):
        members = np.nonzero(y == cls)[0]
        for _ in range(target_count - cnt):
            a = rng.choice(members)
            if cls == target_class:
                b = rng.integers(0, len(x))      # any trial
            else:
                b = rng.choice(members)
            new_x.append(mix_pair(x[a], x[b]))
            new_y.append(cls)
    flags = np.zeros(len(x) + len(new_x), dtype=bool)
    flags[len(x):] = True
    if new_x:
        x = np.concatenate([x, np.stack(new_x)])
        y = np.concatenate([y, np.asarray(new_y, dtype=y.dtype)])
    return x, y, flags


# ---------------------------------------------------------------------------
# on-disk trial format


def save_subject(path, x: np.ndarray, y: np.ndarray, L: int) -> None:
    """Per-subject directory: JSON manifest + raw <f4 trials + <i4 labels."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, _, c, t = x.shape
    counts = np.bincount(y, minlength=L).tolist()
    manifest = {"n": n, "c": c, "t": t, "L": L, "dtype": "<f4",
                "order": "C", "class_counts": counts}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    x[:, 0].astype("<f4").tofile(path / "trials.bin")
    y.astype("<i4").tofile(path / "labels.bin")


def load_subject(path) -> tuple[np.ndarray, np.ndarray, dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    n, c, t = manifest["n"], manifest["c"], manifest["t"]
    x = np.fromfile(path / "trials.bin", dtype="<f4").reshape(n, 1, c, t)
    y = np.fromfile(path / "labels.bin", dtype="<i4")
    if len(y) != n:
        raise DataError("label file length does not match manifest")
    return x.astype(np.float64), y.astype(np.int64), manifest


def save_benchmark(root, datasets, L: int) -> None:
    root = Path(root)
    for k, (x, y) in enumerate(datasets):
        save_subject(root / f"subject_{k:02d}", x, y, L)
    meta = {"subjects": len(datasets), "L": L}
    (root / "benchmark.json").write_text(json.dumps(meta, indent=1))


def load_benchmark(root) -> tuple[list[tuple[np.ndarray, np.ndarray]], dict]:
    root = Path(root)
    meta = json.loads((root / "benchmark.json").read_text())
    datasets = []
    for k in range(meta["subjects"]):
        x, y, _ = load_subject(root / f"subject_{k:02d}")
        datasets.append((x, y))
    return datasets, meta
