"""Acceptance suite. Each test records one PASS/FAIL line, shown in the terminal summary."""

import json
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest

from iais import autodiff as ad
from iais.attention import AttentionBlocks, ModalityLayout, init_params
from iais.cli import load_config, main
from iais.io import read_run_csv
from iais.isda import ObjectAnnotationSet, isda
from iais.regularizer import alignment_terms, distributed_mirror, singular_mirror
from iais.tensor_ops import m_kl
from iais.training.losses import LITERAL, PAIRWISE, lambda_schedule, margin_terms
from iais.training.synthetic import SyntheticTask, generate_pools, generate_synthetic_batch
from iais.training.trainer import TrainConfig, total_loss, train

from oracles import (central_difference, distributed_mirror_loop, isda_loop, rel_error, singular_mirror_loop)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def stochastic(rng, n, m):
    a = rng.random((n, m)) ** 3 + 1e-9  # skewed rows, some near zero
    return a / a.sum(axis=1, keepdims=True)


def test_1_metric_properties(criterion):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst_sym = worst_neg = worst_zero = 0.0
    for _ in range(1000):
        n, m = rng.integers(1, 12, size=2)
        a, b = stochastic(rng, n, m), stochastic(rng, n, m)
        ab, ba = m_kl(a, b), m_kl(b, a)
        worst_sym = max(worst_sym, abs(ab - ba))
        worst_neg = max(worst_neg, -min(ab, 0.0))
        worst_zero = max(worst_zero, abs(m_kl(a, a)))
    elapsed = time.perf_counter() - start
    ok = worst_sym <= 1e-12 and worst_neg <= 1e-12 and worst_zero <= 1e-12 and elapsed < 5.0
    criterion(1, ok, f"max |asym|={worst_sym:.2e} max neg={worst_neg:.2e} max self={worst_zero:.2e} "
                     f"time={elapsed:.2f}s")
    assert ok


def _random_groups(rng, size, k):
    owner = rng.permutation(np.concatenate([np.arange(k), rng.integers(0, k, size=size - k)]))
    return [tuple(np.flatnonzero(owner == o).tolist()) for o in range(k)]


def test_2_isda_oracle(criterion):
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(1, 11))
        n_l, n_v = int(rng.integers(k, 33)), int(rng.integers(k, 33))
        s = rng.normal(size=(n_l + n_v, n_l + n_v)) * rng.uniform(0.5, 4.0)
        p = np.exp(s - s.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        s_ll, s_vv = p[:n_l, :n_l], p[n_l:, n_l:]
        tokens, regions = _random_groups(rng, n_l, k), _random_groups(rng, n_v, k)
        got = isda(s_ll, s_vv, ObjectAnnotationSet.from_lists(tokens, regions))
        want = isda_loop(s_ll, s_vv, tokens, regions)
        worst = max(worst, abs(got - want) / max(abs(want), 1e-300))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-10 and elapsed < 10.0
    criterion(2, ok, f"max rel err={worst:.2e} time={elapsed:.2f}s")
    assert ok


def test_3_mirror_oracles(criterion):
    rng = np.random.default_rng(303)
    worst_s = worst_d = worst_rows = 0.0
    for _ in range(100):
        n_l, n_v = (int(x) for x in rng.integers(1, 16, size=2))
        s = rng.normal(size=(n_l + n_v, n_l + n_v)) * 2
        s_ll, s_lv, s_vl, s_vv = s[:n_l, :n_l], s[:n_l, n_l:], s[n_l:, :n_l], s[n_l:, n_l:]
        for src, cross in ((s_ll, s_vl), (s_vv, s_lv)):
            got, want = singular_mirror(src, cross), np.array(singular_mirror_loop(src, cross))
            worst_s = max(worst_s, float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-300))))
    for _ in range(100):
        n_l, n_v = (int(x) for x in rng.integers(1, 16, size=2))
        s_vl, s_lv = rng.normal(size=(n_v, n_l)) * 2, rng.normal(size=(n_l, n_v)) * 2
        scale = float(rng.uniform(0.1, 1.0))
        got = distributed_mirror(s_vl, s_lv, scale)
        want = distributed_mirror_loop(s_vl, s_lv, scale)
        for g, w in zip(got, want):
            w = np.array(w)
            worst_d = max(worst_d, float(np.max(np.abs(g - w) / np.abs(w))))
            worst_rows = max(worst_rows, float(np.max(np.abs(g.sum(axis=1) - 1.0))))
    ok = worst_s < 1e-10 and worst_d < 1e-10 and worst_rows <= 1e-10
    criterion(3, ok, f"singular max rel={worst_s:.2e} distributed max rel={worst_d:.2e} "
                     f"row-sum dev={worst_rows:.2e}")
    assert ok


MICRO_TASK = SyntheticTask(n_objects=2, tokens_per_object=(1, 2), regions_per_object=(1, 2), feature_width=3,
                           vocab_size=5, pool_size=16, eval_size=10, probe_size=4, seed=5)


def _micro_total_loss_error(rng, seed, kind, mode):
    cfg = TrainConfig(d_model=4, n_layers=1, n_heads=2, positives_per_batch=2, negatives_per_positive=3,
                      iais_kind=kind, margin_mode=mode, schedule="linear", steps=4)
    pools = generate_pools(MICRO_TASK)
    batch = generate_synthetic_batch(pools.train, seed, cfg.composition)
    feats = batch.features(pools.train)
    params = init_params(rng, d_in=3, d_model=4, n_layers=1, n_heads=2, max_tokens=MICRO_TASK.max_tokens)
    t = int(rng.integers(1, 5))
    tensors = params.tensors()
    total_loss(feats, 2, params, tensors, cfg, t).total.backward()
    worst = 0.0
    for name, arr in params.arrays.items():
        def f(x, name=name):
            p = params.replace({**params.arrays, name: x})
            return total_loss(feats, 2, p, p.tensors(False), cfg, t).total.item()
        worst = max(worst, rel_error(tensors[name].grad, central_difference(f, arr, 1e-6)))
    return worst


def _blocks_error(rng, kind):
    n_l, n_v = (int(x) for x in rng.integers(1, 5, size=2))
    s = rng.normal(size=(n_l + n_v, n_l + n_v))
    parts = [s[:n_l, :n_l], s[:n_l, n_l:], s[n_l:, :n_l], s[n_l:, n_l:]]
    ts = [ad.Tensor(p, requires_grad=True) for p in parts]
    v, l = alignment_terms(kind, *ts, scale=0.5)
    (v + l).backward()
    worst = 0.0
    for i, p in enumerate(parts):
        def f(x, i=i):
            xs = list(parts)
            xs[i] = x
            vv, ll = alignment_terms(kind, *xs, scale=0.5)
            return (vv + ll).item()
        worst = max(worst, rel_error(ts[i].grad, central_difference(f, p, 1e-6)))
    return worst


def _margin_error(rng, mode):
    pos, neg = rng.normal(size=2), rng.normal(size=(2, 3)) * 0.2
    tp, tn = ad.Tensor(pos, requires_grad=True), ad.Tensor(neg, requires_grad=True)
    margin_terms(tp, tn, 0.5, mode).backward()
    gp = central_difference(lambda x: margin_terms(ad.Tensor(x), ad.Tensor(neg), 0.5, mode).item(), pos, 1e-6)
    gn = central_difference(lambda x: margin_terms(ad.Tensor(pos), ad.Tensor(x), 0.5, mode).item(), neg, 1e-6)
    return max(rel_error(tp.grad, gp), rel_error(tn.grad, gn))


def test_4_gradient_suite(criterion):
    rng = np.random.default_rng(404)
    start = time.perf_counter()
    worst = {"margin pairwise": 0.0, "margin literal": 0.0, "iais singular": 0.0, "iais distributed": 0.0,
             "total": 0.0}
    for i in range(20):
        worst["margin pairwise"] = max(worst["margin pairwise"], _margin_error(rng, PAIRWISE))
        worst["margin literal"] = max(worst["margin literal"], _margin_error(rng, LITERAL))
        worst["iais singular"] = max(worst["iais singular"], _blocks_error(rng, "singular"))
        worst["iais distributed"] = max(worst["iais distributed"], _blocks_error(rng, "distributed"))
        kind = ("none", "singular", "distributed")[i % 3]
        mode = (PAIRWISE, LITERAL)[i % 2]
        worst["total"] = max(worst["total"], _micro_total_loss_error(rng, i, kind, mode))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 60.0
    criterion(4, ok, " ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f" time={elapsed:.1f}s")
    assert ok


def test_5_schedule_exactness(criterion):
    mpmath.mp.dps = 40
    T = 1000
    configs = [("exp", 5), ("exp", 10), ("log", 5), ("log", 10), ("linear", 5)]

    def closed(kind, g, t):
        r = mpmath.mpf(t) / T
        if kind == "exp":
            return mpmath.exp((r - 1) * g)
        if kind == "log":
            return 1 - mpmath.exp(-r * g)
        return r

    worst = 0.0
    for kind, g in configs:
        for t in (0, T // 2, T):
            worst = max(worst, abs(lambda_schedule(kind, g, t, T) - float(closed(kind, g, t))))
    ok = worst <= 1e-12
    criterion(5, ok, f"max abs err={worst:.2e} over {len(configs)} schedules")
    assert ok


# -- directional runs -----------------------------------------------------------

@pytest.fixture(scope="module")
def directional_runs():
    """The published baseline and IAIS-singular runs, on the default task."""
    base_cfg, task = load_config(CONFIGS / "directional_baseline.json")
    reg_cfg, reg_task = load_config(CONFIGS / "directional_singular.json")
    assert task == reg_task == SyntheticTask(seed=task.seed)
    start = time.perf_counter()
    base = train(base_cfg, task)
    reg = train(reg_cfg, task)
    return base, reg, time.perf_counter() - start


@pytest.mark.slow
def test_6_regularizer_lowers_isda(criterion, directional_runs):
    base, reg, elapsed = directional_runs
    b_isda, r_isda = base.final.isda, reg.final.isda
    drop = 1.0 - r_isda / b_isda
    b_ms, r_ms = base.final.meta_sum, reg.final.meta_sum
    ok = drop >= 0.20 and r_ms >= b_ms - 2.0 and elapsed < 600.0
    criterion(6, ok, f"ISDa {b_isda:.4f} -> {r_isda:.4f} (drop {100 * drop:.1f}%, need >= 20%); "
                     f"Meta-Sum {b_ms:.1f} -> {r_ms:.1f} (need >= {b_ms - 2.0:.1f}); "
                     f"time {elapsed:.0f}s (seeds task={base.task.seed} train={base.config.seed})")
    assert ok


@pytest.mark.slow
def test_7_baseline_isda_anticorrelates(criterion, directional_runs):
    base, _, _ = directional_runs
    n = len(base.checkpoints)
    r = base.pearson_isda_metasum()
    ok = n >= 10 and r is not None and r <= -0.3
    criterion(7, ok, f"Pearson(ISDa, Meta-Sum) = {r if r is None else round(r, 4)} over {n} checkpoints "
                     f"(need <= -0.3)")
    assert ok


# -- harness -------------------------------------------------------------------

EXPECTED_HEADER = "run,checkpoints,final_isda,final_meta_sum,pearson_isda_metasum"


def _well_formed(table: str, names):
    lines = table.splitlines()
    if not table.endswith("\n") or lines[0] != EXPECTED_HEADER or [l.split(",")[0] for l in lines[1:]] != names:
        return False
    for line in lines[1:]:
        cells = line.split(",")
        if len(cells) != 5 or int(cells[1]) != 5:
            return False
        [float(c) for c in cells[2:]]
    return True


def test_8_ablation_harness(criterion, tmp_path, capsys):
    cfg = CONFIGS / "smoke.json"
    results = {}
    for axis, names in (("anchor", ["anchor=both", "anchor=v", "anchor=l"]), ("layer", ["layer=0", "layer=1"])):
        status = main(["ablate", "--config", str(cfg), "--axis", axis, "--out", str(tmp_path / axis)])
        out = capsys.readouterr().out
        results[axis] = status == 0 and _well_formed(out, names)
        identity = True
        for name in names:
            for cp in read_run_csv(tmp_path / axis / name / "run.csv"):
                identity &= cp.iais_loss == cp.iais_v + cp.iais_l
        results[axis + " identity"] = identity
    ok = all(results.values())
    criterion(8, ok, " ".join(f"{k}={'ok' if v else 'bad'}" for k, v in results.items()))
    assert ok


@pytest.mark.slow
def test_9_determinism(criterion, tmp_path, capsys):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps({"train": {"iais_kind": "singular", "steps": 200, "hard_negatives": True}}))
    outputs = []
    for name in ("first", "second"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
        outputs.append((tmp_path / name / "run.csv").read_bytes())
    capsys.readouterr()
    ok = outputs[0] == outputs[1] and len(outputs[0]) > 0
    criterion(9, ok, f"run.csv {'identical' if ok else 'differs'} across two invocations ({len(outputs[0])} bytes)")
    assert ok
