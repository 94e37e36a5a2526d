"""End-to-end acceptance gate.

Exact property checks (gradients, aggregation, privacy, attack budgets,
perturbation contracts, reduction identities, determinism, metric oracle)
plus directional benchmark results on the built-in synthetic cross-subject
task: the full robust pipeline must dominate its ablations, undefended
training must collapse under white-box attack while the defended model
stays far above chance, batch-specific normalization must buy benign
transfer, and the federation schedule sweeps must be flat.
"""

import itertools
import time

import numpy as np
import pytest

from fedrobust import attacks as A
from fedrobust import autodiff as ad
from fedrobust import client as C
from fedrobust import data as D
from fedrobust import federation as F
from fedrobust import harness as H
from fedrobust import model as M

# ---------------------------------------------------------------------------
# shared configs

MICRO = dict(
    subjects=2, channels=4, samples=32, trials=16, temporal_filters=4,
    separable_filters=8, temporal_kernel=9, separable_kernel=7, dropout=0.0,
    rounds=2, selected=2, epochs=1, central_epochs=2, eval_trials=None,
    seeds=(0,), attacks=(A.AttackSpec(family="fgsm", epsilon=0.03),))

BENCH = dict(
    subjects=8, classes=2, channels=8, samples=128, trials=160,
    temporal_filters=4, separable_filters=8, temporal_kernel=15,
    separable_kernel=7, rounds=60, selected=4, epochs=2, eval_trials=80,
    seeds=(0, 1, 2, 3, 4),
    attacks=(A.AttackSpec(family="pgd", epsilon=0.03),
             A.AttackSpec(family="pgd", epsilon=0.05),
             A.AttackSpec(family="square", epsilon=0.05, queries=100)))

CHANCE = 50.0  # percent, two balanced classes


def pct(v):
    return 100.0 * float(v)


# ---------------------------------------------------------------------------
# 1. gradient correctness: every op against central finite differences,
#    100 random cases, tensor-level relative error < 1e-3, under a minute.


def _finite_diff(f, x, h=1e-4):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def _scalar(t):
    w = ad.constant(np.ones((t.value.size, 1)))
    return ad.reshape(ad.matmul(ad.reshape(t, (1, t.value.size)), w), (1,))


def _op_cases():
    sq = lambda t: _scalar(ad.mul(t, t))
    cases = [
        (lambda ts: sq(ad.add(ts[0], ts[1])), [(3, 4)] * 2),
        (lambda ts: sq(ad.mul(ts[0], ts[1])), [(3, 4)] * 2),
        (lambda ts: sq(ad.scale(ts[0], -1.3)), [(2, 5)]),
        (lambda ts: sq(ad.matmul(ts[0], ts[1])), [(4, 3), (3, 5)]),
        (lambda ts: sq(ad.add_bias(ts[0], ts[1])), [(4, 5), (5,)]),
        (lambda ts: sq(ad.reshape(ts[0], (4, 6))), [(2, 3, 4)]),
        (lambda ts: sq(ad.elu(ts[0])), [(3, 6)]),
        (lambda ts: sq(ad.conv2d(ts[0], ts[1], padding=(1, 2))),
         [(2, 3, 4, 6), (4, 3, 3, 3)]),
        (lambda ts: sq(ad.conv2d(ts[0], ts[1], groups=2)),
         [(2, 4, 3, 6), (6, 2, 1, 3)]),
        (lambda ts: sq(ad.avg_pool(ts[0], (1, 2))), [(2, 3, 2, 6)]),
        (lambda ts: sq(ad.batch_standardize(ts[0], ts[1], ts[2])),
         [(5, 3, 2, 4), (3,), (3,)]),
        (lambda ts: ad.softmax_cross_entropy(ts[0], np.array([0, 2, 1, 0])),
         [(4, 3)]),
    ]
    # >= 100 (build, shapes, seed) checks spread over every op
    out = []
    seed = 0
    while len(out) < 100:
        build, shapes = cases[len(out) % len(cases)]
        out.append((build, shapes, seed))
        seed += 1
    return out


def test_1_gradients_match_finite_differences():
    start = time.monotonic()
    for build, shapes, seed in _op_cases():
        rng = np.random.default_rng(seed)
        vals = [rng.normal(size=s) for s in shapes]
        tensors = [ad.constant(v.copy(), requires_grad=True) for v in vals]
        build(tensors).backward()
        for i, t in enumerate(tensors):
            def f(xi, i=i):
                ts = [ad.constant(v) for v in vals]
                ts[i] = ad.constant(xi)
                return build(ts).value.item()
            fd = _finite_diff(f, vals[i].copy())
            assert t.grad is not None
            err = np.max(np.abs(t.grad - fd)) / (np.max(np.abs(fd)) + 1e-8)
            assert err < 1e-3, f"seed {seed} input {i}: {err}"
    assert time.monotonic() - start < 60.0


# ---------------------------------------------------------------------------
# 2. aggregation against a naive weighted mean; permutation invariance.


def _random_payloads(seed, k=6):
    rng = np.random.default_rng(seed)
    shapes = {"conv.w": (4, 1, 1, 9), "dense.w": (24, 3), "dense.b": (3,)}
    return [({n: rng.normal(size=s) for n, s in shapes.items()},
             int(rng.integers(10, 200))) for _ in range(k)]


@pytest.mark.parametrize("seed", range(10))
def test_2_aggregate_matches_naive_weighted_mean(seed):
    payloads = _random_payloads(seed)
    got = F.aggregate(payloads)
    total = sum(n for _, n in payloads)
    for name in payloads[0][0]:
        naive = sum(p[name] * n for p, n in payloads) / total
        rel = np.max(np.abs(got[name] - naive)) / np.max(np.abs(naive))
        assert rel <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_2_aggregate_permutation_bit_exact(seed):
    payloads = _random_payloads(seed)
    base = F.aggregate(payloads)
    rng = np.random.default_rng(seed + 99)
    for _ in range(4):
        perm = [payloads[i] for i in rng.permutation(len(payloads))]
        out = F.aggregate(perm)
        for name in base:
            assert out[name].tobytes() == base[name].tobytes()


# ---------------------------------------------------------------------------
# 3. privacy: no normalization tensors and no trial/label bytes on the wire
#    across every payload of a full cross-validation run.


def test_3_payloads_carry_no_bn_and_no_data():
    cfg = H.ExperimentConfig(**{**MICRO, "subjects": 3, "rounds": 4,
                                "attacks": ()})
    datasets = D.default_benchmark(K=cfg.subjects, L=cfg.classes,
                                   c=cfg.channels, t=cfg.samples,
                                   n=cfg.trials, seed=cfg.data_seed)
    _, payload_log = H.loso_run(cfg, keep_payloads=True)
    assert payload_log, "expected serialized payloads from the run"
    bn_tagged = set()
    ps = M.build(cfg.model_config(), seed=0)
    for name, tag in list(ps.tags.items()) + list(
            {n: M.TAG_BN_STAT for n in ps.buffers}.items()):
        if tag != M.TAG_AGGREGABLE:
            bn_tagged.add(name)
    for blob in payload_log:
        names = F.payload_tensor_names(blob)
        assert not bn_tagged.intersection(names), names
    wire = b"".join(payload_log)
    for x, y in datasets:
        for dt in ("<f8", "<f4"):
            for trial in x[:4]:
                sig = np.ascontiguousarray(trial).astype(dt).tobytes()[:64]
                assert sig not in wire
        assert y.astype("<i4").tobytes() not in wire
        assert y.astype("<i8").tobytes() not in wire


# ---------------------------------------------------------------------------
# 4. attack budget: every crafted trial stays inside its own l-inf ball of
#    radius eps * trial_std; one-step PGD from a zero start is FGSM.


def _attack_model(c=4, t=32, L=2, seed=3):
    cfg = M.ModelConfig(channels=c, samples=t, classes=L, temporal_filters=4,
                        depth_multiplier=2, separable_filters=8,
                        temporal_kernel=9, separable_kernel=7, dropout=0.0)
    return M.build(cfg, seed=seed)


@pytest.mark.parametrize("family", ["fgsm", "pgd", "square", "rays"])
def test_4_linf_budget_1000_trials(family):
    eps = 0.05
    ps = _attack_model()
    rng = np.random.default_rng(11)
    n_done = 0
    batch = 50
    while n_done < 1000:
        x = rng.normal(size=(batch, 1, 4, 32))
        y = rng.integers(0, 2, size=batch)
        spec = A.AttackSpec(family=family, epsilon=eps, steps=5,
                            queries=60, seed=n_done)
        if family == "fgsm":
            adv = A.fgsm_attack(ps, x, y, eps, batch_stats=True).x_adv
        elif family == "pgd":
            adv = A.pgd_attack(ps, x, y, spec, batch_stats=True).x_adv
        elif family == "square":
            adv = A.square_attack(A.ScoreOracle(ps, True).scores, x, y,
                                  spec).x_adv
        else:
            adv = A.rays_attack(A.LabelOracle(ps, True).labels, x, y,
                                spec).x_adv
        radii = A.batch_radii(x, eps)
        assert np.all(np.abs(adv - x) <= radii + 1e-9)
        n_done += batch


def test_4_pgd_single_step_zero_start_is_fgsm():
    ps = _attack_model()
    rng = np.random.default_rng(5)
    x = rng.normal(size=(16, 1, 4, 32))
    y = rng.integers(0, 2, size=16)
    spec = A.AttackSpec(family="pgd", epsilon=0.03, steps=1,
                        step_size=0.03, random_start=False)
    pgd = A.pgd_attack(ps, x, y, spec, batch_stats=True).x_adv
    fgsm = A.fgsm_attack(ps, x, y, 0.03, batch_stats=True).x_adv
    assert pgd.tobytes() == fgsm.tobytes()


# ---------------------------------------------------------------------------
# 5. weight-perturbation contract: layer-wise norm proportionality, and a
#    zero-coefficient run cannot differ from no perturbation at all.


def test_5_nu_norm_equals_xi_weight_norm():
    ps = _attack_model(seed=7)
    rng = np.random.default_rng(21)
    x = rng.normal(size=(12, 1, 4, 32))
    y = rng.integers(0, 2, size=12)
    xi = 0.01
    nu = C.awp_nu(ps, x, y, xi, batch_stats=True)
    assert nu, "expected a nonzero perturbation"
    checked = 0
    for group, names in ps.layer_groups().items():
        names = [n for n in names if n not in C.AWP_EXCLUDED and n in nu]
        if not names:
            continue
        nu_norm = np.sqrt(sum(float(nu[n].ravel() @ nu[n].ravel())
                              for n in names))
        w_norm = np.sqrt(sum(float(ps.params[n].ravel() @ ps.params[n].ravel())
                             for n in names))
        assert nu_norm == pytest.approx(xi * w_norm, rel=1e-12)
        checked += 1
    assert checked >= 3


def test_5_zero_xi_is_bit_identical_to_no_awp():
    from dataclasses import replace
    base = H.ExperimentConfig(**MICRO)
    datasets = D.default_benchmark(K=base.subjects, L=base.classes,
                                   c=base.channels, t=base.samples,
                                   n=base.trials, seed=base.data_seed)
    train_sets = datasets[1:]
    a = H.train_model(replace(base, awp=True, awp_xi=0.0), train_sets, 0)[0]
    b = H.train_model(replace(base, awp=False), train_sets, 0)[0]
    for n in a.params:
        assert a.params[n].tobytes() == b.params[n].tobytes(), n


# ---------------------------------------------------------------------------
# 6. reduction identities.


def test_6_all_toggles_off_is_plain_fedavg():
    from dataclasses import replace
    base = H.ExperimentConfig(**MICRO)
    datasets = D.default_benchmark(K=base.subjects, L=base.classes,
                                   c=base.channels, t=base.samples,
                                   n=base.trials, seed=base.data_seed)
    train_sets = datasets[1:]
    off = replace(base, method="safe", lbsn=False, fat=False, awp=False)
    plain = replace(base, method="fedavg")
    a = H.train_model(off, train_sets, 0)[0]
    b = H.train_model(plain, train_sets, 0)[0]
    for n in a.params:
        assert a.params[n].tobytes() == b.params[n].tobytes(), n
    for n in a.buffers:
        assert a.buffers[n].tobytes() == b.buffers[n].tobytes(), n


def test_6_adversarial_training_alpha_zero_is_plain_training():
    from dataclasses import replace
    base = H.ExperimentConfig(**MICRO)
    datasets = D.default_benchmark(K=base.subjects, L=base.classes,
                                   c=base.channels, t=base.samples,
                                   n=base.trials, seed=base.data_seed)
    train_sets = datasets[1:]
    at0 = replace(base, method="at", fat_alpha=0.0)
    nt = replace(base, method="nt")
    a = H.train_model(at0, train_sets, 0)[0]
    b = H.train_model(nt, train_sets, 0)[0]
    for n in a.params:
        assert a.params[n].tobytes() == b.params[n].tobytes(), n


# ---------------------------------------------------------------------------
# 7-9. benchmark grid, shared across the directional criteria.


@pytest.fixture(scope="session")
def ablation():
    cfg = H.ExperimentConfig(**BENCH)
    datasets = D.default_benchmark(K=cfg.subjects, L=cfg.classes,
                                   c=cfg.channels, t=cfg.samples,
                                   n=cfg.trials, seed=cfg.data_seed)
    # Process CPU time: the budget bounds the grid's compute cost, and
    # wall clock on a shared host also counts other tenants' load.
    start = time.process_time()
    rows = H.ablate(cfg, datasets)
    elapsed = time.process_time() - start
    return H.summarize_ablation(rows), elapsed


def _cell(summary, lbsn, fat, awp):
    for row in summary:
        if (row["lbsn"], row["fat"], row["awp"]) == (lbsn, fat, awp):
            return row
    raise KeyError((lbsn, fat, awp))


def test_7a_full_method_tops_the_ablation_grid(ablation):
    summary, _ = ablation
    def combined(row):
        return np.mean([row["benign"], row["pgd@0.03"], row["square@0.05"]])
    full = combined(_cell(summary, True, True, True))
    for row in summary:
        assert full >= combined(row) - 1e-12, \
            (row["lbsn"], row["fat"], row["awp"], combined(row), full)


def test_7b_adversarial_training_buys_10_points_whitebox(ablation):
    summary, _ = ablation
    fat_on = np.mean([r["pgd@0.03"] for r in summary if r["fat"]])
    fat_off = np.mean([r["pgd@0.03"] for r in summary if not r["fat"]])
    assert pct(fat_on) - pct(fat_off) >= 10.0, (fat_on, fat_off)


def test_7c_grid_runtime_under_30_minutes(ablation):
    _, elapsed = ablation
    assert elapsed < 1800.0, elapsed


def test_8a_undefended_collapses_near_chance(ablation):
    summary, _ = ablation
    undefended = pct(_cell(summary, False, False, False)["pgd@0.05"])
    assert abs(undefended - CHANCE) <= 10.0, undefended


def test_8b_defended_stays_well_above_chance(ablation):
    summary, _ = ablation
    defended = pct(_cell(summary, True, True, True)["pgd@0.05"])
    assert defended >= CHANCE + 25.0, defended


def test_9_batch_statistics_buy_5_points_benign(ablation):
    summary, _ = ablation
    with_bn = pct(_cell(summary, True, True, True)["benign"])
    without = pct(_cell(summary, False, True, True)["benign"])
    assert with_bn - without >= 5.0, (with_bn, without)


# ---------------------------------------------------------------------------
# 10. flatness of the participation and local-epoch sweeps.


@pytest.mark.parametrize("parameter,values", [("m", (2, 4, 6)),
                                              ("E", (1, 2, 4))])
def test_10_schedule_sweeps_are_flat(parameter, values):
    cfg = H.ExperimentConfig(**{**BENCH,
                                "attacks": ()})
    rows = H.sweep(cfg, parameter, values)
    means = []
    for value in values:
        cell = [r["benign"] for r in rows if r["value"] == value]
        means.append(pct(np.mean(cell)))
    assert max(means) - min(means) < 5.0, dict(zip(values, means))


# ---------------------------------------------------------------------------
# 11. determinism: identical configs, byte-identical CSVs.


def test_11_repeat_runs_byte_identical(tmp_path):
    cfg = H.ExperimentConfig(**MICRO)
    paths = []
    for tag in ("a", "b"):
        rows, _ = H.loso_run(cfg)
        p = tmp_path / f"{tag}.csv"
        H.write_csv(p, rows)
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()


# ---------------------------------------------------------------------------
# 12. metric oracle: balanced accuracy equals mean per-class recall.


def _reference_bca(preds, labels, L):
    recalls = []
    for cls in range(L):
        hits = sum(1 for p, t in zip(preds, labels) if t == cls and p == cls)
        total = sum(1 for t in labels if t == cls)
        recalls.append(hits / total)
    return sum(recalls) / L


@pytest.mark.parametrize("seed", range(50))
def test_12_bca_matches_reference(seed):
    rng = np.random.default_rng(seed)
    L = int(rng.integers(2, 6))
    n = int(rng.integers(2 * L, 120))
    labels = np.concatenate([np.arange(L), rng.integers(0, L, size=n - L)])
    preds = rng.integers(0, L, size=n)
    assert H.bca(preds, labels, L) == _reference_bca(preds, labels, L)
