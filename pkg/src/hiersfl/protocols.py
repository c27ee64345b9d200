"""Round-based training protocols: FL, SFL, HFL and HierSFL.

All four share the same building blocks (``nn`` for local steps, ``split``
for the smashed-data exchange, ``ldp`` for per-epoch weight perturbation and
``fedavg`` for aggregation) and charge simulated time through ``simnet``.
Clients are always visited in ascending id order, so every reduction is
deterministic.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import data, ldp, nn, simnet, split
from .errors import HierSFLError, InputError, ProtocolError
from .nn import LayerStack, OptimizerState, ParamVector

PROTOCOLS = ("fl", "sfl", "hfl", "hiersfl")


# ---------------------------------------------------------------------------
# aggregation and schedule
# ---------------------------------------------------------------------------


def fedavg(models: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    """Sample-count weighted coordinate-wise mean, summed in list order."""
    if not models:
        raise InputError("fedavg needs at least one model")
    if len(models) != len(weights):
        raise InputError(f"{len(models)} models but {len(weights)} weights")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise InputError("fedavg weights must be positive and finite")
    first = models[0]
    for i, m in enumerate(models[1:], start=1):
        if not first.compatible(m):
            raise InputError(f"model {i} shapes differ from model 0")
    total = w.sum()
    acc = np.zeros_like(first.values)
    for wk, m in zip(w, models):
        acc += (wk / total) * m.values
    return first.with_values(acc)


def weighted_gradient_step(
    params: ParamVector,
    gradients: Sequence[ParamVector],
    weights: Sequence[float],
    opt: OptimizerState,
) -> ParamVector:
    """Server update from per-client gradients weighted by sample counts."""
    return nn.sgd_step(params, fedavg(gradients, weights), opt)


@dataclass(frozen=True)
class Topology:
    num_clients: int
    num_mes: int
    assignment: tuple[int, ...]

    def __post_init__(self):
        if len(self.assignment) != self.num_clients:
            raise InputError("assignment must map every client")
        if any(not 0 <= m < self.num_mes for m in self.assignment):
            raise InputError("assignment refers to an unknown MES")
        empty = sorted(set(range(self.num_mes)) - set(self.assignment))
        if empty:
            raise InputError(f"MES {empty} serve no clients")

    @classmethod
    def balanced(cls, num_clients: int, num_mes: int) -> "Topology":
        if num_mes < 1 or num_clients < num_mes:
            raise InputError(f"need 1 <= M <= K, got K={num_clients}, M={num_mes}")
        return cls(num_clients, num_mes, tuple(k * num_mes // num_clients for k in range(num_clients)))

    def clients_of(self, mes: int) -> list[int]:
        return [k for k, m in enumerate(self.assignment) if m == mes]


@dataclass(frozen=True)
class Schedule:
    total_rounds: int = 20
    p1: int = 5
    p2: int = 2
    epochs: int = 1

    def __post_init__(self):
        for name in ("total_rounds", "p1", "p2", "epochs"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1")


def edge_agg_due(p: int, sched: Schedule) -> bool:
    if p < 1:
        raise InputError("round index starts at 1")
    return p % sched.p1 == 0


def cloud_agg_due(p: int, sched: Schedule) -> bool:
    if p < 1:
        raise InputError("round index starts at 1")
    return p % (sched.p1 * sched.p2) == 0


# ---------------------------------------------------------------------------
# run configuration and results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AggregationEvent:
    round_index: int
    level: str  # "edge" or "cloud"
    group: int | None
    inputs: tuple[ParamVector, ...]
    weights: tuple[float, ...]
    output: ParamVector


@dataclass
class Setup:
    """Everything a protocol run needs, already built and validated."""

    stack: LayerStack
    dataset: data.Dataset
    plan: data.PartitionPlan
    topology: Topology
    schedule: Schedule
    learning_rate: float = 0.01
    decay: float = 0.995
    momentum: float = 0.5
    batch_size: int = 32
    privacy: ldp.PrivacyConfig = field(default_factory=lambda: ldp.PrivacyConfig(enabled=False))
    cut: split.SplitSpec = field(default_factory=split.SplitSpec)
    network: simnet.NetworkModel = field(default_factory=simnet.NetworkModel)
    seed: int = 0
    eval_dataset: data.Dataset | None = None
    on_aggregate: Callable[[AggregationEvent], None] | None = None

    def __post_init__(self):
        if self.plan.num_clients != self.topology.num_clients:
            raise InputError(
                f"plan has {self.plan.num_clients} clients, topology has {self.topology.num_clients}"
            )
        if not self.stack.is_classifier:
            raise InputError("model stack must end in a softmax layer")
        if self.stack.dims[0] != self.dataset.dim:
            raise InputError(f"model input dim {self.stack.dims[0]} != data dim {self.dataset.dim}")
        if self.stack.dims[-1] != self.dataset.num_classes:
            raise InputError("model output dim must equal the number of classes")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        self.cut.check(self.stack)

    def new_optimizer(self) -> OptimizerState:
        return OptimizerState(self.learning_rate, self.decay, self.momentum)

    def noise_stream(self, client: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, 0x1D9, client])

    def client_batches(self, client: int, epoch: int):
        return data.batches(self.dataset, self.plan, client, self.batch_size, self.seed, epoch)

    def pool(self) -> data.Dataset:
        if self.eval_dataset is not None:
            return self.eval_dataset
        return self.dataset.subset(self.plan.all_indices())


@dataclass
class RoundRecord:
    round_index: int
    protocol: str
    train_loss: float
    eval_accuracy: float
    simulated_time_s: float
    bytes_client_mes: int
    bytes_mes_cloud: int


class RunHistory(list):
    """The per-round records plus the final model, trace and clock."""

    def __init__(self, records=(), *, final_params=None, trace=None, clock=None):
        super().__init__(records)
        self.final_params: ParamVector | None = final_params
        self.trace: list[tuple[int, str]] = trace if trace is not None else []
        self.clock: simnet.SimClock = clock if clock is not None else simnet.SimClock()


def evaluate(stack: LayerStack, params: ParamVector, ds: data.Dataset) -> tuple[float, float]:
    """(mean cross-entropy, argmax accuracy) of the model on ``ds``."""
    _, probs = nn.forward(stack, params, ds.features)
    loss = nn.loss_cross_entropy(probs, ds.labels)
    acc = float(np.mean(np.argmax(probs, axis=1) == ds.labels))
    return loss, acc


@contextlib.contextmanager
def _phase(p: int, client: int | None, name: str):
    try:
        yield
    except ProtocolError:
        raise
    except (HierSFLError, ArithmeticError, ValueError) as exc:
        raise ProtocolError(p, client, name, exc) from exc


@dataclass
class _Client:
    cid: int
    params: ParamVector
    opt: OptimizerState
    stream: np.random.Generator
    n_samples: int
    epochs_done: int = 0

    def overwrite(self, params: ParamVector) -> None:
        self.params = params.copy()
        self.opt.reset_velocity()


@dataclass
class _Server:
    params: ParamVector
    opt: OptimizerState


# ---------------------------------------------------------------------------
# local training
# ---------------------------------------------------------------------------


def _perturb(setup: Setup, client: _Client, p: int) -> None:
    with _phase(p, client.cid, "perturb"):
        client.params = ldp.perturb(client.params, setup.privacy, client.stream)


def _train_full(setup: Setup, client: _Client, p: int) -> None:
    """E local epochs of full-model SGD (FL / HFL clients)."""
    for _ in range(setup.schedule.epochs):
        for x, y in setup.client_batches(client.cid, client.epochs_done):
            with _phase(p, client.cid, "local-step"):
                acts, _ = nn.forward(setup.stack, client.params, x)
                grad = nn.backward(setup.stack, client.params, acts, y)
                client.params = nn.sgd_step(client.params, grad, client.opt)
        _perturb(setup, client, p)
        client.opt.end_epoch()
        client.epochs_done += 1


def _train_split(
    setup: Setup,
    client_stack: LayerStack,
    server_stack: LayerStack,
    clients: list[_Client],
    server: _Server,
    p: int,
) -> None:
    """E epochs of split training for the clients sharing one server half.

    Within an epoch the server half takes one step per client batch, visiting
    clients in ascending id order at each batch position.
    """
    for _ in range(setup.schedule.epochs):
        iters = [iter(setup.client_batches(c.cid, c.epochs_done)) for c in clients]
        active = list(range(len(clients)))
        while active:
            still = []
            for i in active:
                c = clients[i]
                batch = next(iters[i], None)
                if batch is None:
                    continue
                still.append(i)
                x, y = batch
                with _phase(p, c.cid, "client-forward"):
                    smashed = split.client_forward(split.Half(client_stack, c.params), x, y, c.cid)
                with _phase(p, c.cid, "server-step"):
                    _, cut_grad, s_grad = split.server_step(split.Half(server_stack, server.params), smashed)
                    server.params = nn.sgd_step(server.params, s_grad, server.opt)
                with _phase(p, c.cid, "client-backward"):
                    c_grad = split.client_backward(split.Half(client_stack, c.params), smashed, cut_grad)
                    c.params = nn.sgd_step(c.params, c_grad, c.opt)
            active = still
        for c in clients:
            _perturb(setup, c, p)
            c.opt.end_epoch()
            c.epochs_done += 1
        server.opt.end_epoch()


# ---------------------------------------------------------------------------
# simulated time
# ---------------------------------------------------------------------------


def _batch_sizes(n: int, b: int) -> list[int]:
    return [min(b, n - s) for s in range(0, n, b)]


def _split_exchange_bytes(setup: Setup, n: int) -> int:
    width = setup.stack.layers[setup.cut.cut_index - 1].out_dim
    per_epoch = sum(
        split.smashed_bytes(r, width) + split.cut_gradient_bytes(r, width)
        for r in _batch_sizes(n, setup.batch_size)
    )
    return per_epoch * setup.schedule.epochs


def _split_path(setup: Setup, n: int, link: simnet.LinkModel, server_tier: str) -> simnet.PhaseTimes:
    """Per-client time of E epochs of split training, server work included."""
    cost = setup.network.compute
    E = setup.schedule.epochs
    n_client = setup.stack[: setup.cut.cut_index].num_params
    n_server = setup.stack[setup.cut.cut_index :].num_params
    width = setup.stack.layers[setup.cut.cut_index - 1].out_dim
    comm = E * sum(
        simnet.transfer_time(split.smashed_bytes(r, width), link)
        + simnet.transfer_time(split.cut_gradient_bytes(r, width), link)
        for r in _batch_sizes(n, setup.batch_size)
    )
    server_cost = cost.mes_s if server_tier == "mes" else cost.cloud_s
    path = simnet.PhaseTimes(client_compute=E * n * n_client * cost.client_s)
    if server_tier == "mes":
        path.mes_compute = E * n * n_server * server_cost
        path.comm_client_mes = comm
    else:
        path.cloud_compute = E * n * n_server * server_cost
        path.comm_client_mes = comm
    return path


def _full_path(setup: Setup, n: int) -> simnet.PhaseTimes:
    E = setup.schedule.epochs
    return simnet.PhaseTimes(client_compute=E * n * setup.stack.num_params * setup.network.compute.client_s)


def _model_bytes(num_params: int) -> int:
    return num_params * 8


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------


def _make_clients(setup: Setup, params: ParamVector) -> list[_Client]:
    return [
        _Client(k, params.copy(), setup.new_optimizer(), setup.noise_stream(k), len(ix))
        for k, ix in enumerate(setup.plan.client_indices)
    ]


def _emit(setup, history, p, level, group, models, weights, out):
    if setup.on_aggregate is not None:
        setup.on_aggregate(AggregationEvent(p, level, group, tuple(models), tuple(weights), out))
    history.trace.append((p, level))


def run_fl(setup: Setup) -> RunHistory:
    """Flat FedAvg: full local models, cloud aggregation every round."""
    stack, sched = setup.stack, setup.schedule
    pool = setup.pool()
    net = setup.network
    clients = _make_clients(setup, nn.init_params(stack, setup.seed))
    weights = [c.n_samples for c in clients]
    history = RunHistory()
    model_bytes = _model_bytes(stack.num_params)
    for p in range(1, sched.total_rounds + 1):
        for c in clients:
            _train_full(setup, c, p)
        with _phase(p, None, "cloud-aggregate"):
            global_params = fedavg([c.params for c in clients], weights)
        _emit(setup, history, p, "cloud", None,
              [c.params for c in clients], weights, global_params)
        for c in clients:
            c.overwrite(global_params)

        up = simnet.transfer_time(model_bytes, net.wan)
        paths = [_full_path(setup, c.n_samples) + simnet.PhaseTimes(comm_client_mes=up) for c in clients]
        cloud = simnet.PhaseTimes(
            cloud_compute=len(clients) * stack.num_params * net.compute.cloud_s,
            comm_client_mes=simnet.transfer_time(model_bytes, net.wan),
        )
        history.clock.advance(simnet.round_time([paths], None, cloud))
        bytes_tier1 = 2 * len(clients) * model_bytes
        _record(history, setup, "fl", p, global_params, pool, bytes_tier1, 0)
    history.final_params = global_params
    return history


def run_hfl(setup: Setup) -> RunHistory:
    """Hierarchical FedAvg: full local models, edge every p1, cloud every p1*p2."""
    stack, sched, topo = setup.stack, setup.schedule, setup.topology
    pool = setup.pool()
    net = setup.network
    clients = _make_clients(setup, nn.init_params(stack, setup.seed))
    groups = [topo.clients_of(m) for m in range(topo.num_mes)]
    mes_models: list[ParamVector | None] = [None] * topo.num_mes
    mes_sizes = [sum(clients[k].n_samples for k in g) for g in groups]
    model_bytes = _model_bytes(stack.num_params)
    history = RunHistory()
    global_params = None
    for p in range(1, sched.total_rounds + 1):
        for c in clients:
            _train_full(setup, c, p)
        edge, cloud_due = edge_agg_due(p, sched), cloud_agg_due(p, sched)
        paths = [[_full_path(setup, clients[k].n_samples) for k in g] for g in groups]
        edge_times = [simnet.PhaseTimes() for _ in groups]
        cloud_time = None
        bytes_tier1 = bytes_tier2 = 0
        if edge:
            up = simnet.transfer_time(model_bytes, net.lan)
            for m, g in enumerate(groups):
                models = [clients[k].params for k in g]
                w = [clients[k].n_samples for k in g]
                with _phase(p, None, f"edge-aggregate[{m}]"):
                    mes_models[m] = fedavg(models, w)
                _emit(setup, history, p, "edge", m, models, w, mes_models[m])
                for path in paths[m]:
                    path.comm_client_mes += up
                edge_times[m].mes_compute = len(g) * stack.num_params * net.compute.mes_s
                bytes_tier1 += len(g) * model_bytes
                if not cloud_due:
                    for k in g:
                        clients[k].overwrite(mes_models[m])
                    edge_times[m].comm_client_mes += simnet.transfer_time(model_bytes, net.lan)
                    bytes_tier1 += len(g) * model_bytes
        if cloud_due:
            with _phase(p, None, "cloud-aggregate"):
                global_params = fedavg(mes_models, mes_sizes)
            _emit(setup, history, p, "cloud", None,
                  mes_models, mes_sizes, global_params)
            for c in clients:
                c.overwrite(global_params)
            for t in edge_times:
                t.comm_mes_cloud += simnet.transfer_time(model_bytes, net.wan)
            cloud_time = simnet.PhaseTimes(
                cloud_compute=topo.num_mes * stack.num_params * net.compute.cloud_s,
                comm_mes_cloud=simnet.transfer_time(model_bytes, net.wan),
                comm_client_mes=simnet.transfer_time(model_bytes, net.lan),
            )
            bytes_tier2 += 2 * topo.num_mes * model_bytes
            bytes_tier1 += len(clients) * model_bytes
            current = global_params
        else:
            current = _two_level([c.params for c in clients], [c.n_samples for c in clients], groups)
        history.clock.advance(simnet.round_time(paths, edge_times, cloud_time))
        _record(history, setup, "hfl", p, current, pool, bytes_tier1, bytes_tier2)
    history.final_params = current
    return history


def _two_level(models: list[ParamVector], sizes: list[int], groups: list[list[int]]) -> ParamVector:
    """Edge-then-cloud average of per-client models (the would-be global model)."""
    per_mes = [fedavg([models[k] for k in g], [sizes[k] for k in g]) for g in groups]
    return fedavg(per_mes, [sum(sizes[k] for k in g) for g in groups])


def _split_setup(setup: Setup):
    full = nn.init_params(setup.stack, setup.seed)
    client_half, server_half = split.split(setup.stack, full, setup.cut)
    return client_half, server_half


def run_sfl(setup: Setup) -> RunHistory:
    """Split FL with one server holding the server half and averaging client halves."""
    sched = setup.schedule
    pool = setup.pool()
    net = setup.network
    client_half, server_half = _split_setup(setup)
    clients = _make_clients(setup, client_half.params)
    server = _Server(server_half.params.copy(), setup.new_optimizer())
    weights = [c.n_samples for c in clients]
    half_bytes = _model_bytes(client_half.stack.num_params)
    history = RunHistory()
    for p in range(1, sched.total_rounds + 1):
        _train_split(setup, client_half.stack, server_half.stack, clients, server, p)
        with _phase(p, None, "client-aggregate"):
            agg = fedavg([c.params for c in clients], weights)
        _emit(setup, history, p, "cloud", None,
              [c.params for c in clients], weights, agg)
        for c in clients:
            c.overwrite(agg)

        up = simnet.transfer_time(half_bytes, net.wan)
        paths = [_split_path(setup, c.n_samples, net.wan, "cloud") + simnet.PhaseTimes(comm_client_mes=up) for c in clients]
        cloud = simnet.PhaseTimes(
            cloud_compute=len(clients) * client_half.stack.num_params * net.compute.cloud_s,
            comm_client_mes=simnet.transfer_time(half_bytes, net.wan),
        )
        history.clock.advance(simnet.round_time([paths], None, cloud))
        bytes_tier1 = sum(_split_exchange_bytes(setup, c.n_samples) for c in clients) + 2 * len(clients) * half_bytes
        _record(history, setup, "sfl", p, split.join(agg, server.params), pool, bytes_tier1, 0)
    history.final_params = split.join(agg, server.params)
    return history


def run_hiersfl(setup: Setup) -> RunHistory:
    """Split FL with per-MES server halves and two-tier edge/cloud aggregation."""
    sched, topo = setup.schedule, setup.topology
    pool = setup.pool()
    net = setup.network
    client_half, server_half = _split_setup(setup)
    clients = _make_clients(setup, client_half.params)
    servers = [_Server(server_half.params.copy(), setup.new_optimizer()) for _ in range(topo.num_mes)]
    groups = [topo.clients_of(m) for m in range(topo.num_mes)]
    mes_sizes = [sum(clients[k].n_samples for k in g) for g in groups]
    mes_client_part: list[ParamVector | None] = [None] * topo.num_mes
    half_bytes = _model_bytes(client_half.stack.num_params)
    full_bytes = _model_bytes(setup.stack.num_params)
    n_half = client_half.stack.num_params
    history = RunHistory()
    for p in range(1, sched.total_rounds + 1):
        for m, g in enumerate(groups):
            _train_split(setup, client_half.stack, server_half.stack, [clients[k] for k in g], servers[m], p)
        edge, cloud_due = edge_agg_due(p, sched), cloud_agg_due(p, sched)

        paths = [[_split_path(setup, clients[k].n_samples, net.lan, "mes") for k in g] for g in groups]
        edge_times = [simnet.PhaseTimes() for _ in groups]
        cloud_time = None
        bytes_tier1 = sum(_split_exchange_bytes(setup, c.n_samples) for c in clients)
        bytes_tier2 = 0
        if edge:
            up = simnet.transfer_time(half_bytes, net.lan)
            for m, g in enumerate(groups):
                models = [clients[k].params for k in g]
                w = [clients[k].n_samples for k in g]
                with _phase(p, None, f"edge-aggregate[{m}]"):
                    mes_client_part[m] = fedavg(models, w)
                _emit(setup, history, p, "edge", m, models, w,
                      mes_client_part[m])
                for path in paths[m]:
                    path.comm_client_mes += up
                edge_times[m].mes_compute = len(g) * n_half * net.compute.mes_s
                bytes_tier1 += len(g) * half_bytes
                if not cloud_due:
                    for k in g:
                        clients[k].overwrite(mes_client_part[m])
                    edge_times[m].comm_client_mes += simnet.transfer_time(half_bytes, net.lan)
                    bytes_tier1 += len(g) * half_bytes
        if cloud_due:
            mes_models = [split.join(mes_client_part[m], servers[m].params) for m in range(topo.num_mes)]
            with _phase(p, None, "cloud-aggregate"):
                global_params = fedavg(mes_models, mes_sizes)
            _emit(setup, history, p, "cloud", None,
                  mes_models, mes_sizes, global_params)
            g_client, g_server = split.split(setup.stack, global_params, setup.cut)
            for c in clients:
                c.overwrite(g_client.params)
            for s in servers:
                # Server-side momentum survives cloud sync; see README.
                s.params = g_server.params.copy()
            for t in edge_times:
                t.comm_mes_cloud += simnet.transfer_time(full_bytes, net.wan)
            cloud_time = simnet.PhaseTimes(
                cloud_compute=topo.num_mes * setup.stack.num_params * net.compute.cloud_s,
                comm_mes_cloud=simnet.transfer_time(full_bytes, net.wan),
                comm_client_mes=simnet.transfer_time(half_bytes, net.lan),
            )
            bytes_tier2 += 2 * topo.num_mes * full_bytes
            bytes_tier1 += len(clients) * half_bytes
            current = global_params
        else:
            client_global = _two_level([c.params for c in clients], [c.n_samples for c in clients], groups)
            server_global = fedavg([s.params for s in servers], mes_sizes)
            current = split.join(client_global, server_global)
        history.clock.advance(simnet.round_time(paths, edge_times, cloud_time))
        _record(history, setup, "hiersfl", p, current, pool, bytes_tier1, bytes_tier2)
    history.final_params = current
    return history


def _record(history: RunHistory, setup: Setup, name: str, p: int, params: ParamVector,
            pool: data.Dataset, bytes_tier1: int, bytes_tier2: int) -> None:
    with _phase(p, None, "evaluate"):
        loss, acc = evaluate(setup.stack, params, pool)
    history.append(RoundRecord(p, name, loss, acc, history.clock.elapsed_s, int(bytes_tier1), int(bytes_tier2)))


RUNNERS = {"fl": run_fl, "sfl": run_sfl, "hfl": run_hfl, "hiersfl": run_hiersfl}


def run(protocol: str, setup: Setup) -> RunHistory:
    try:
        runner = RUNNERS[protocol]
    except KeyError:
        raise InputError(f"unknown protocol {protocol!r}; choose from {', '.join(PROTOCOLS)}") from None
    return runner(setup)
