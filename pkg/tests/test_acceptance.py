"""Acceptance criteria, each checked at its stated tolerance.

Every test ends in ``verdicts.report`` which prints a PASS/FAIL line; the lines
are repeated in the pytest terminal summary.
"""

import time

import numpy as np
from hypothesis import given, settings, strategies as st

from hiersfl import data, harness, ldp, nn, protocols, split

import oracles
from helpers import centralized_sgd, make_setup
from verdicts import report


def test_criterion_1_split_execution_equivalence():
    stack = nn.LayerStack.from_dims([784, 64, 32, 10])
    start = time.perf_counter()
    worst_loss = worst_grad = 0.0
    for case in range(50):
        rng = np.random.default_rng(1000 + case)
        cut = int(rng.integers(1, len(stack)))
        rows = int(rng.integers(1, 65))
        params = nn.init_params(stack, case)
        x = rng.uniform(0, 1, size=(rows, 784))
        y = rng.integers(0, 10, size=rows)

        acts, probs = nn.forward(stack, params, x)
        mono_loss = nn.loss_cross_entropy(probs, y)
        mono_grad = nn.backward(stack, params, acts, y).values

        client, server = split.split(stack, params, split.SplitSpec(cut))
        smashed = split.client_forward(client, x, y)
        loss, cut_grad, server_grad = split.server_step(server, smashed)
        client_grad = split.client_backward(client, smashed, cut_grad)
        grad = split.join(client_grad, server_grad).values

        worst_loss = max(worst_loss, abs(loss - mono_loss))
        worst_grad = max(worst_grad, float(np.max(np.abs(grad - mono_grad))))
    elapsed = time.perf_counter() - start
    ok = worst_loss <= 1e-9 and worst_grad <= 1e-9 and elapsed < 10
    report(1, ok, f"50 cases, max |dloss|={worst_loss:.2e}, max |dgrad|={worst_grad:.2e}, {elapsed:.2f}s")


def test_criterion_2_gradient_correctness():
    # [8, 8, 8] exercises both layer kinds: a ReLU hidden layer and the softmax head.
    dims = [8, 8, 8]
    stack = nn.LayerStack.from_dims(dims)
    start = time.perf_counter()
    worst = 0.0
    for seed in range(8):
        rng = np.random.default_rng(200 + seed)
        params = nn.init_params(stack, seed)
        params = params.with_values(params.values + rng.normal(0, 0.05, len(params)))
        x = rng.uniform(0, 1, size=(8, 8))
        y = rng.integers(0, 8, size=8)
        acts, _ = nn.forward(stack, params, x)
        analytic = nn.backward(stack, params, acts, y).values
        numeric = oracles.finite_difference(lambda v: oracles.mean_loss(v, dims, x, y), params.values, 1e-5)
        denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-7)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    elapsed = time.perf_counter() - start
    report(2, worst <= 1e-4 and elapsed < 30, f"8 instances of 8x8, max rel err={worst:.2e}, {elapsed:.2f}s")


def _trace_oracle(P, p1, p2):
    edge = [p for p in range(1, P + 1) if p % p1 == 0]
    cloud = [p for p in range(1, P + 1) if p % (p1 * p2) == 0]
    return edge, cloud


def _captured(P, p1, p2):
    setup = make_setup(K=2, M=1, P=P, p1=p1, p2=p2, samples_per_label=2, dims=(4, 3, 10), batch_size=4)
    trace = protocols.run_hiersfl(setup).trace
    return [p for p, lvl in trace if lvl == "edge"], [p for p, lvl in trace if lvl == "cloud"]


_property_failures = []


@given(P=st.integers(1, 50), p1=st.integers(1, 5), p2=st.integers(1, 5))
@settings(max_examples=60, deadline=None)
def _schedule_property(P, p1, p2):
    sched = protocols.Schedule(P, p1, p2)
    predicted = (
        [p for p in range(1, P + 1) if protocols.edge_agg_due(p, sched)],
        [p for p in range(1, P + 1) if protocols.cloud_agg_due(p, sched)],
    )
    if predicted != _trace_oracle(P, p1, p2) or (P <= 12 and _captured(P, p1, p2) != predicted):
        _property_failures.append((P, p1, p2))


def test_criterion_3_schedule_soundness():
    edge, cloud = _captured(12, 2, 3)
    example_ok = edge == [2, 4, 6, 8, 10, 12] and cloud == [6, 12]
    _property_failures.clear()
    _schedule_property()
    ok = example_ok and not _property_failures
    report(3, ok, f"(12,2,3) edge={edge} cloud={cloud}; property failures={_property_failures[:3]}")


def _identical(a, b):
    return (
        len(a) == len(b)
        and all((x.train_loss, x.eval_accuracy) == (y.train_loss, y.eval_accuracy) for x, y in zip(a, b))
        and a.final_params.equals(b.final_params)
    )


def test_criterion_4_protocol_collapses():
    kw = dict(K=3, M=1, P=4, p1=1, p2=1, E=2)
    hiersfl_sfl = _identical(protocols.run_hiersfl(make_setup(**kw)), protocols.run_sfl(make_setup(**kw)))
    hfl_fl = _identical(protocols.run_hfl(make_setup(**kw)), protocols.run_fl(make_setup(**kw)))
    single = make_setup(K=1, M=1, P=5, E=2)
    history = protocols.run_fl(single)
    losses, trajectory = centralized_sgd(single, 5)
    fl_sgd = [r.train_loss for r in history] == losses and history.final_params.equals(trajectory[-1])
    ok = hiersfl_sfl and hfl_fl and fl_sgd
    report(4, ok, f"HierSFL=SFL {hiersfl_sfl}, HFL=FL {hfl_fl}, FL(K=1)=SGD {fl_sgd} (bit-exact)")


def test_criterion_5_laplace_calibration():
    start = time.perf_counter()
    scale = ldp.laplace_scale(1.0, 0.5)
    draws = ldp.sample_laplace(np.random.default_rng(2024), scale, 100_000)
    mean, mean_abs = float(draws.mean()), float(np.abs(draws).mean())
    elapsed = time.perf_counter() - start
    ok = scale == 2.0 and abs(mean) <= 0.05 and abs(mean_abs - 2.0) <= 0.02 * 2.0 and elapsed < 5
    report(5, ok, f"c={scale}, mean={mean:+.4f}, mean|d|={mean_abs:.4f}, {elapsed:.3f}s")


def test_criterion_6_fedavg_oracle():
    rng = np.random.default_rng(6)
    worst = 0.0
    hull_ok = True
    for _ in range(1000):
        k, n = int(rng.integers(1, 5)), int(rng.integers(1, 17))
        vectors = rng.normal(0, 1, size=(k, n))
        weights = rng.integers(1, 1000, size=k).tolist()
        out = protocols.fedavg([nn.ParamVector.flat(v) for v in vectors], weights).values
        worst = max(worst, float(np.max(np.abs(out - np.array(oracles.weighted_mean(vectors.tolist(), weights))))))
        hull_ok &= bool(np.all(out >= vectors.min(axis=0) - 1e-12) and np.all(out <= vectors.max(axis=0) + 1e-12))
    report(6, worst <= 1e-12 and hull_ok, f"1000 cases, max |diff|={worst:.2e}, hull containment {hull_ok}")


def _convergence_cfg(seed, ldp_on):
    # Edge sync every round and cloud sync every second round; 64-dim blobs keep 41 runs under budget.
    return harness.parse_config(env={}, flags={
        "num-clients": 8, "num-mes": 2, "rounds": 30, "local-epochs": 1,
        "edge-agg-every": 1, "cloud-agg-every": 2, "layer-dims": "64,64,32,10",
        "ldp": "on" if ldp_on else "off", "privacy-epsilon": 0.5, "seed": seed,
    })


def test_criterion_7_convergence_smoke():
    start = time.perf_counter()
    off, on = [], []
    for seed in range(20):
        off.append(harness.run_experiment(_convergence_cfg(seed, False), write=False).rows[-1].eval_accuracy)
        on.append(harness.run_experiment(_convergence_cfg(seed, True), write=False).rows[-1].eval_accuracy)
    elapsed = time.perf_counter() - start
    final = off[0]
    mean_off, mean_on = float(np.mean(off)), float(np.mean(on))
    ok = final >= 0.95 and mean_on <= mean_off and elapsed < 120
    report(7, ok, f"seed-0 accuracy {final:.4f}; 20-seed mean off={mean_off:.4f}, eps=0.5 {mean_on:.4f}; {elapsed:.1f}s")


def test_criterion_8_timing_ordering():
    cfg = harness.parse_config(env={}, flags={"num-clients": 20, "num-mes": 4, "rounds": 20,
                                              "edge-agg-every": 5, "cloud-agg-every": 2})
    rows = {r.protocol: r for r in harness.compare_protocols(cfg, ["hiersfl", "hfl", "sfl"])}
    t = {name: rows[name].sim_time_s for name in rows}
    ok = t["hiersfl"] < t["hfl"] < t["sfl"]
    report(8, ok, "simulated seconds " + ", ".join(f"{k}={v:.1f}" for k, v in t.items()))


def test_criterion_9_noniid_partition():
    ds = data.generate_synthetic(0, 16_000, 4, 10)
    plan = data.partition_noniid(ds, 20, 2, 400, seed=0)
    sizes_ok = all(len(idx) == 800 for idx in plan.client_indices)
    seen = set()
    disjoint = True
    labels_ok = True
    for idx in plan.client_indices:
        members = set(idx.tolist())
        disjoint &= not (seen & members) and len(members) == len(idx)
        seen |= members
        values, counts = np.unique(ds.labels[idx], return_counts=True)
        labels_ok &= len(values) == 2 and set(counts.tolist()) == {400}
    ok = len(plan.client_indices) == 20 and sizes_ok and disjoint and labels_ok
    report(9, ok, f"20 clients, 800 each {sizes_ok}, disjoint {disjoint}, 2x400 labels {labels_ok}")
