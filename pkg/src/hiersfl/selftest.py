"""Fast built-in oracle checks exposed as ``hiersfl selftest``."""

from __future__ import annotations

import itertools
from typing import Callable

import numpy as np

from . import ldp, nn, protocols, split


def check_split_equivalence(cases: int = 10, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    stack = nn.LayerStack.from_dims([784, 64, 32, 10])
    worst = 0.0
    for case in range(cases):
        params = nn.init_params(stack, seed * 1000 + case)
        cut = int(rng.integers(1, len(stack)))
        x = rng.uniform(0, 1, size=(int(rng.integers(1, 33)), 784))
        y = rng.integers(0, 10, size=x.shape[0])
        acts, probs = nn.forward(stack, params, x)
        mono_loss = nn.loss_cross_entropy(probs, y)
        mono_grad = nn.backward(stack, params, acts, y)
        client, server = split.split(stack, params, split.SplitSpec(cut))
        smashed = split.client_forward(client, x, y)
        loss, cut_grad, s_grad = split.server_step(server, smashed)
        c_grad = split.client_backward(client, smashed, cut_grad)
        full = split.join(c_grad, s_grad)
        worst = max(worst, abs(loss - mono_loss), float(np.max(np.abs(full.values - mono_grad.values))))
    return worst <= 1e-9, f"max abs deviation {worst:.3e} over {cases} cases"


def check_fedavg(cases: int = 200, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    hull_ok = True
    for _ in range(cases):
        k = int(rng.integers(1, 5))
        n = int(rng.integers(1, 17))
        models = [nn.ParamVector.flat(rng.normal(size=n)) for _ in range(k)]
        weights = [int(w) for w in rng.integers(1, 1000, size=k)]
        out = protocols.fedavg(models, weights).values
        total = sum(weights)
        for i in range(n):
            ref = 0.0
            for m, w in zip(models, weights):
                ref += w / total * m.values[i]
            worst = max(worst, abs(out[i] - ref))
            lo = min(m.values[i] for m in models)
            hi = max(m.values[i] for m in models)
            hull_ok &= lo - 1e-12 <= out[i] <= hi + 1e-12
    return worst <= 1e-12 and hull_ok, f"max abs deviation {worst:.3e}, hull containment {hull_ok}"


def check_schedule() -> tuple[bool, str]:
    sched = protocols.Schedule(12, 2, 3, 1)
    edge = [p for p in range(1, 13) if protocols.edge_agg_due(p, sched)]
    cloud = [p for p in range(1, 13) if protocols.cloud_agg_due(p, sched)]
    ok = edge == [2, 4, 6, 8, 10, 12] and cloud == [6, 12]
    for P, p1, p2 in itertools.product(range(1, 13), range(1, 5), range(1, 5)):
        s = protocols.Schedule(P, p1, p2, 1)
        for p in range(1, P + 1):
            if protocols.cloud_agg_due(p, s) and not protocols.edge_agg_due(p, s):
                ok = False
    return ok, f"edge={edge} cloud={cloud}"


def check_laplace(seed: int = 0) -> tuple[bool, str]:
    c = ldp.laplace_scale(1.0, 0.5)
    draws = ldp.sample_laplace(np.random.default_rng(seed), c, 100_000)
    mean = float(draws.mean())
    mean_abs = float(np.abs(draws).mean())
    ok = c == 2.0 and abs(mean) <= 0.05 and abs(mean_abs - c) <= 0.02 * c
    return ok, f"c={c} mean={mean:+.4f} mean|x|={mean_abs:.4f}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "split-equivalence": check_split_equivalence,
    "fedavg": check_fedavg,
    "schedule": check_schedule,
    "laplace-calibration": check_laplace,
}


def run_all(echo: Callable[[str], None] = print) -> bool:
    all_ok = True
    for name, check in CHECKS.items():
        ok, detail = check()
        all_ok &= ok
        echo(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return all_ok
