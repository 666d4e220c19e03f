"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s``; the lines are also
collected into an "acceptance criteria" section of the terminal summary.
Criteria 6-8 share five synthetic training runs (full and no_flow models
per seed), a few minutes on one core.
"""

import dataclasses
import math
import time

import numpy as np
import pytest

from nfnpcdr import commonpref, flows, synthdata, training
from nfnpcdr.checkpoint import load_checkpoint, save_checkpoint
from nfnpcdr.data import DomainDataset, Interaction, Task, filter_pair, preprocess
from nfnpcdr.flows import CouplingStep, FlowStack, PlanarStep, RadialStep
from nfnpcdr.model import NFNPCDR, ModelConfig
from nfnpcdr.npencoder import GaussianLatent
from nfnpcdr.numkernel import Tensor, grad_check, no_grad
from nfnpcdr.training import TrainConfig

from conftest import TINY, random_tasks, tiny_id_maps, tiny_tasks

SEEDS = (1, 2, 3, 4, 5)
E2E_MODEL = ModelConfig(rating_scale=0.2)


def e2e_train_config(seed):
    return TrainConfig(lam=0.01, batch_size=32, epochs=200, patience=20, min_epochs=80, seed=seed)


def report(request, criterion, passed, detail):
    line = f"C{criterion}: {'PASS' if passed else 'FAIL'} {detail}"
    request.config.acceptance_lines.append(line)
    print(line)


# -- 1 -------------------------------------------------------------------------------------


def test_c1_gradient_correctness(request):
    start = time.perf_counter()
    model = NFNPCDR(TINY, tiny_id_maps(), seed=3)
    batch = model.batch(tiny_tasks())
    eps = np.random.default_rng(0).standard_normal((2, TINY.d2))
    with no_grad():
        target = commonpref.auxiliary_distribution(model.forward(batch, eps).c)
    err = grad_check(lambda: training.batch_objective(model, batch, eps, 0.3, target=target)[0],
                     model.parameters())
    elapsed = time.perf_counter() - start
    n_params = sum(p.data.size for p in model.parameters())
    ok = err <= 1e-4 and elapsed < 60
    report(request, 1, ok, f"grad_check rel err {err:.2e} (<= 1e-4) over {n_params} "
                           f"parameters, {elapsed:.1f} s (< 60 s)")
    assert ok


# -- 2 -------------------------------------------------------------------------------------


def _random_step(family, dim, rng):
    if family == "planar":
        step, scale = PlanarStep(dim, rng, "s"), 0.7
    elif family == "radial":
        step, scale = RadialStep(dim, rng, "s"), 1.0
    else:
        step, scale = CouplingStep(dim, rng, "s", parity=int(rng.integers(2)), hidden=6), 0.5
    for p in step.params:
        p.data = rng.normal(0.0, scale, p.shape)
    return step


def test_c2_flow_oracle_agreement(request):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {}
    for family in ("planar", "radial", "coupling"):
        worst[family] = 0.0
        for dim in (2, 8):
            for _ in range(100):
                step = _random_step(family, dim, rng)
                z = rng.standard_normal(dim) * 1.5
                analytic = float(flows.log_det_step(step, z).data)
                worst[family] = max(worst[family],
                                    abs(analytic - flows.numeric_jacobian_logdet(step, z)))
    round_trip = 0.0
    for dim in (2, 8):
        for _ in range(20):
            step = _random_step("coupling", dim, rng)
            z = rng.standard_normal((50, dim)) * 2.0
            with no_grad():
                out = step.forward(z)[0].data
            round_trip = max(round_trip, float(np.max(np.abs(flows.invert_coupling(step, out) - z))))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-6 and round_trip <= 1e-10 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(request, 2, ok, f"max |analytic - numeric| log-det: {detail} (<= 1e-6, 200 pairs each); "
                           f"coupling round trip {round_trip:.1e} (<= 1e-10); {elapsed:.1f} s")
    assert ok


# -- 3 -------------------------------------------------------------------------------------


def test_c3_kl_calibration(request):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    d, n = 8, 100_000
    mq, sq = rng.normal(0, 0.5, d), rng.uniform(0.3, 1.0, d)
    mp, sp = rng.normal(0, 0.5, d), rng.uniform(0.3, 1.0, d)
    q = GaussianLatent(Tensor(np.tile(mq, (n, 1))), Tensor(np.tile(sq, (n, 1))))
    p = GaussianLatent(Tensor(np.tile(mp, (n, 1))), Tensor(np.tile(sp, (n, 1))))
    z0 = mq + sq * rng.standard_normal((n, d))
    values = training.kl_loss(q, z0, flows.apply_flow(FlowStack("none", []), z0), p).data
    estimate = float(values.mean())
    se = float(values.std(ddof=1) / math.sqrt(n))
    analytic = float(np.sum(np.log(sp / sq) + (sq ** 2 + (mq - mp) ** 2) / (2 * sp ** 2) - 0.5))
    elapsed = time.perf_counter() - start
    ok = abs(estimate - analytic) <= 3 * se and elapsed < 30
    report(request, 3, ok, f"MC KL {estimate:.5f} vs analytic {analytic:.5f}, "
                           f"|diff| {abs(estimate - analytic):.5f} <= 3 SE = {3 * se:.5f}; {elapsed:.1f} s")
    assert ok


# -- 4 -------------------------------------------------------------------------------------


def _permuted(task, rng):
    sup = tuple(task.support[k] for k in rng.permutation(len(task.support)))
    qry = tuple(task.query[k] for k in rng.permutation(len(task.query)))
    return Task(task.user_id, sup, qry)


def test_c4_permutation_invariance(request):
    rng = np.random.default_rng(4)
    ids, tasks = random_tasks(rng, 8, max_len=10)
    model = NFNPCDR(TINY, ids, seed=4)
    eps = rng.standard_normal((len(tasks), TINY.d2))
    keys = ("prior.mu", "prior.sigma", "posterior.mu", "posterior.sigma", "e")
    with no_grad():
        ref = model.forward(model.batch(tasks), eps).activations()
        worst = 0.0
        for _ in range(100):
            acts = model.forward(model.batch([_permuted(t, rng) for t in tasks]), eps).activations()
            worst = max(worst, max(float(np.max(np.abs(acts[k] - ref[k]))) for k in keys))
    ok = worst <= 1e-12
    report(request, 4, ok, f"max deviation of prior/posterior/identity encodings over 100 "
                           f"permutation trials {worst:.1e} (<= 1e-12)")
    assert ok


# -- 5 -------------------------------------------------------------------------------------


def test_c5_clustering_simplex(request):
    rng = np.random.default_rng(5)
    worst_c = worst_d = 0.0
    for _ in range(200):
        n, k, m = rng.integers(1, 10), rng.integers(1, 12), rng.integers(1, 40)
        pool = commonpref.PreferencePool(k, n, rng, alpha_dof=float(rng.uniform(0.2, 5.0)))
        pool.centroids.data = rng.normal(0, 3, pool.centroids.shape)
        c = commonpref.soft_assign(rng.normal(0, 3, (m, k)), pool).data
        D = commonpref.auxiliary_distribution(c)
        worst_c = max(worst_c, float(np.max(np.abs(c.sum(axis=1) - 1))))
        worst_d = max(worst_d, float(np.max(np.abs(D.sum(axis=1) - 1))))
    self_loss, min_loss = 0.0, math.inf
    for _ in range(1000):
        shape = (rng.integers(1, 30), rng.integers(1, 12))
        M = rng.dirichlet(np.full(shape[1], 0.7), shape[0])
        D = rng.dirichlet(np.full(shape[1], 0.7), shape[0])
        M, D = np.clip(M, 1e-12, None), np.clip(D, 1e-12, None)
        M, D = M / M.sum(axis=1, keepdims=True), D / D.sum(axis=1, keepdims=True)
        self_loss = max(self_loss, abs(float(commonpref.cluster_loss(M, M).data)))
        min_loss = min(min_loss, float(commonpref.cluster_loss(M, D).data))
    ok = worst_c <= 1e-9 and worst_d <= 1e-9 and self_loss == 0.0 and min_loss >= 0.0
    report(request, 5, ok, f"row-sum error: assignments {worst_c:.1e}, targets {worst_d:.1e} "
                           f"(<= 1e-9); max |L(M,M)| {self_loss}; min L(M,D) over 1000 {min_loss:.2e} "
                           f"(>= 0)")
    assert ok


# -- 6, 7, 8 --------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def e2e_runs():
    runs = {}
    for seed in SEEDS:
        synth = synthdata.generate(synthdata.SynthConfig(seed=seed))
        pre = preprocess(synth.source, synth.target, 0.2, seed)
        oracle = synthdata.split_mae(pre)
        tc = e2e_train_config(seed)
        test_tasks = training.build_tasks(pre, pre.test, tc.support_length)
        row = {"oracle": oracle}
        for name, mc in (("full", E2E_MODEL), ("no_flow", dataclasses.replace(E2E_MODEL, no_flow=True))):
            start = time.perf_counter()
            model, result = training.fit(pre, mc, tc)
            row[name] = training.evaluate(model, test_tasks, seed=seed).mae
            row[f"{name}_seconds"] = time.perf_counter() - start
            row[f"{name}_epochs"] = len(result.history)
            if name == "full":
                row["h0"], row["hk"] = training.estimate_entropy(model, test_tasks, 200, seed=seed)
        runs[seed] = row
    return runs


@pytest.mark.slow
def test_c6_end_to_end_synthetic(request, e2e_runs):
    ratios = {s: r["full"] / r["oracle"] for s, r in e2e_runs.items()}
    wins = sum(v <= 0.7 for v in ratios.values())
    slowest = max(r["full_seconds"] for r in e2e_runs.values())
    ok = wins >= 4 and slowest < 600
    detail = " ".join(f"s{s}:{r['full']:.3f}/{e2e_runs[s]['oracle']:.3f}={ratios[s]:.3f}"
                      for s, r in e2e_runs.items())
    report(request, 6, ok, f"MAE/oracle <= 0.7 on {wins}/5 seeds (need 4) [{detail}]; "
                           f"slowest run {slowest:.0f} s (< 600 s)")
    assert ok


def _c7(e2e_runs):
    return sum(r["full"] <= r["no_flow"] for r in e2e_runs.values())


@pytest.mark.slow
def test_c7_ablation_directionality(request, e2e_runs):
    wins = _c7(e2e_runs)
    ok = wins >= 3
    detail = " ".join(f"s{s}:{r['full']:.4f}vs{r['no_flow']:.4f}" for s, r in e2e_runs.items())
    report(request, 7, ok, f"full MAE <= no_flow MAE on {wins}/5 seeds (need 3) [{detail}]")
    assert ok


@pytest.mark.slow
def test_c8_entropy_direction(request, e2e_runs):
    wins = sum(r["hk"] >= r["h0"] for r in e2e_runs.values())
    ok = wins >= 3
    detail = " ".join(f"s{s}:{r['hk'] - r['h0']:+.3f}" for s, r in e2e_runs.items())
    c7_ok = _c7(e2e_runs) >= 3
    note = "" if ok else (" (soft check, report-only: criterion 7 passes)" if c7_ok
                          else " (criterion 7 fails, so this failure counts)")
    report(request, 8, ok, f"H(zK) >= H(z0) on {wins}/5 seeds (need 3) [H(zK)-H(z0) {detail}]{note}")
    assert ok or c7_ok


# -- 9 -------------------------------------------------------------------------------------


def test_c9_determinism_and_persistence(request, tmp_path):
    synth = synthdata.generate(synthdata.SynthConfig(n_users=150, n_items=80, seed=9))
    pre = preprocess(synth.source, synth.target, 0.2, 9)
    mc = ModelConfig(d1=6, d2=16, d3=16, hidden=16, flow_steps=3, pool_size=4, rating_scale=0.2)
    tc = TrainConfig(epochs=2, batch_size=32, seed=9)
    logs = []
    for _ in range(2):
        lines = []
        model, _ = training.fit(pre, mc, tc, log=lines.append)
        logs.append(lines[0].encode("utf-8"))
    same_log = logs[0] == logs[1]
    save_checkpoint(model, tc, tmp_path / "m.ckpt")
    back, _ = load_checkpoint(tmp_path / "m.ckpt")
    tasks = training.build_tasks(pre, pre.test, tc.support_length)
    a = training.predict(model, model.prepare(tasks), 3, seed=1)[0]
    b = training.predict(back, back.prepare(tasks), 3, seed=1)[0]
    same_pred = a.tobytes() == b.tobytes()
    ok = same_log and same_pred
    report(request, 9, ok, f"epoch-1 log lines byte-identical: {same_log}; "
                           f"checkpoint predictions bit-identical: {same_pred} ({a.size} pairs)")
    assert ok


# -- 10 ------------------------------------------------------------------------------------


def _c10_fixture():
    src, tgt = [], []
    for k in range(1, 13):
        u = f"u{k:02d}"
        items = {9: 4, 11: 4}.get(k, 5)
        for i in range(1, items + 1):
            rating = 3 if (k == 12 or (k == 1 and i == 5)) else 4 + (k + i) % 2
            src.append(Interaction(u, f"s{i}", rating, i))
        if k in (10, 11):
            src.append(Interaction(u, "s6", 5, 6))
        if k in (1, 2, 3, 4, 5, 6, 9, 10, 11, 12):
            for i in range(1, (5 if k == 10 else 6)):
                tgt.append(Interaction(u, f"t{i}", 1 + (k * i) % 5, i))
    return src, tgt


# Hand-derived survivors. Source: u09 (4 ratings) and u11 (4 once s6, rated by
# two users, is gone) fall out of the fixpoint; the rating floor then drops
# u01's s5 (rated 3) and all of u12 (every rating 3). Target: u10 has 4 ratings.
C10_SOURCE_USERS = ["u01", "u02", "u03", "u04", "u05", "u06", "u07", "u08", "u10"]
C10_TARGET_USERS = ["u01", "u02", "u03", "u04", "u05", "u06", "u09", "u11", "u12"]
C10_OVERLAP = ["u01", "u02", "u03", "u04", "u05", "u06"]
C10_SOURCE_RATINGS, C10_TARGET_RATINGS = 44, 45
# alpha 0.5 on six overlap users: ceil(3) test users. The seeded shuffle is
# not hand-computable; this list was frozen from one run and the partition
# invariants below are checked independently.
C10_TEST = ["u03", "u04", "u06"]


def test_c10_protocol_fidelity(request):
    src, tgt = _c10_fixture()
    s, t = filter_pair(DomainDataset("source", src), DomainDataset("target", tgt))
    expect_src = [x for x in src if x.user_id in C10_SOURCE_USERS and x.item_id != "s6"
                  and x.rating >= 4]
    expect_tgt = [x for x in tgt if x.user_id in C10_TARGET_USERS]
    pre = preprocess(src, tgt, 0.5, 0)
    checks = {
        "source survivors": sorted(s.users) == C10_SOURCE_USERS,
        "target survivors": sorted(t.users) == C10_TARGET_USERS,
        "source ratings": sorted(s.interactions, key=repr) == sorted(expect_src, key=repr)
        and len(s) == C10_SOURCE_RATINGS,
        "target ratings": sorted(t.interactions, key=repr) == sorted(expect_tgt, key=repr)
        and len(t) == C10_TARGET_RATINGS,
        "overlap": pre.overlap == C10_OVERLAP,
        "split": sorted(pre.test) == C10_TEST
        and sorted(pre.train) == sorted(set(C10_OVERLAP) - set(C10_TEST)),
        "split partition": not set(pre.train) & set(pre.test)
        and sorted(pre.train + pre.test) == C10_OVERLAP,
    }
    failed = [k for k, v in checks.items() if not v]
    ok = not failed
    report(request, 10, ok, f"12-user fixture: {len(checks) - len(failed)}/{len(checks)} checks match "
                            f"hand ground truth" + (f"; mismatched: {failed}" if failed else ""))
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
