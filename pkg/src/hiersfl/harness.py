"""Experiment configuration, execution and metrics output."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import data, ldp, nn, protocols, simnet, split
from .errors import ConfigError

log = logging.getLogger(__name__)

ROUNDS_HEADER = "round,protocol,train_loss,accuracy,sim_time_s,bytes_client_mes,bytes_mes_cloud"
COMPARE_HEADER = (
    "protocol,num_clients,num_mes,final_accuracy,final_loss,sim_time_s,"
    "bytes_client_mes,bytes_mes_cloud,total_bytes,status"
)
SEED_ENV = "HIERSFL_SEED"


@dataclass
class ExperimentConfig:
    protocol: str = field(default="hiersfl", metadata={"flag": "protocol", "help": "fl, sfl, hfl or hiersfl", "choices": protocols.PROTOCOLS})
    dataset: str = field(default="synthetic", metadata={"flag": "dataset", "help": "synthetic or idx", "choices": ("synthetic", "idx")})
    idx_images: str = field(default="", metadata={"flag": "idx-images", "help": "IDX image file (dataset=idx)"})
    idx_labels: str = field(default="", metadata={"flag": "idx-labels", "help": "IDX label file (dataset=idx)"})
    num_classes: int = field(default=10, metadata={"flag": "num-classes", "help": "number of classes"})
    synthetic_samples: int = field(default=0, metadata={"flag": "synthetic-samples", "help": "synthetic dataset size; 0 sizes it to the partition"})
    synthetic_spread: float = field(default=0.15, metadata={"flag": "synthetic-spread", "help": "std-dev of synthetic blobs"})
    num_clients: int = field(default=20, metadata={"flag": "num-clients", "help": "K, number of clients"})
    num_mes: int = field(default=4, metadata={"flag": "num-mes", "help": "M, number of edge servers"})
    rounds: int = field(default=20, metadata={"flag": "rounds", "help": "P, total aggregation rounds"})
    edge_agg_every: int = field(default=5, metadata={"flag": "edge-agg-every", "help": "p1, local rounds per edge aggregation"})
    cloud_agg_every: int = field(default=2, metadata={"flag": "cloud-agg-every", "help": "p2, edge aggregations per cloud aggregation"})
    local_epochs: int = field(default=1, metadata={"flag": "local-epochs", "help": "E, local epochs per round"})
    learning_rate: float = field(default=0.01, metadata={"flag": "learning-rate", "help": "initial learning rate"})
    lr_decay: float = field(default=0.995, metadata={"flag": "lr-decay", "help": "per-epoch learning-rate multiplier"})
    momentum: float = field(default=0.5, metadata={"flag": "momentum", "help": "SGD momentum"})
    batch_size: int = field(default=32, metadata={"flag": "batch-size", "help": "mini-batch size"})
    ldp: str = field(default="off", metadata={"flag": "ldp", "help": "on or off", "choices": ("on", "off")})
    privacy_epsilon: float = field(default=0.5, metadata={"flag": "privacy-epsilon", "help": "privacy budget epsilon"})
    clip_bound: float = field(default=0.5, metadata={"flag": "clip-bound", "help": "per-coordinate weight clip C"})
    cut_index: int = field(default=1, metadata={"flag": "cut-index", "help": "client keeps layers [0, cut)"})
    layer_dims: str = field(default="784,64,32,10", metadata={"flag": "layer-dims", "help": "comma-separated layer widths"})
    labels_per_client: int = field(default=2, metadata={"flag": "labels-per-client", "help": "distinct labels per client"})
    samples_per_label: int = field(default=400, metadata={"flag": "samples-per-label", "help": "samples per client label"})
    eval_holdout: str = field(default="off", metadata={"flag": "eval-holdout", "help": "evaluate on unassigned samples instead of the training pool", "choices": ("on", "off")})
    lan_latency: float = field(default=0.005, metadata={"flag": "lan-latency", "help": "client-MES latency (s)"})
    lan_bandwidth: float = field(default=100e6, metadata={"flag": "lan-bandwidth", "help": "client-MES bandwidth (B/s)"})
    wan_latency: float = field(default=0.040, metadata={"flag": "wan-latency", "help": "MES-cloud latency (s)"})
    wan_bandwidth: float = field(default=20e6, metadata={"flag": "wan-bandwidth", "help": "MES-cloud bandwidth (B/s)"})
    client_cost: float = field(default=1e-6, metadata={"flag": "client-cost", "help": "client s per sample*param"})
    mes_cost: float = field(default=2.5e-7, metadata={"flag": "mes-cost", "help": "MES s per sample*param"})
    cloud_cost: float = field(default=2.5e-7, metadata={"flag": "cloud-cost", "help": "cloud s per sample*param"})
    seed: int = field(default=0, metadata={"flag": "seed", "help": "master seed"})
    out: str = field(default="runs/latest", metadata={"flag": "out", "help": "output directory"})

    @property
    def dims(self) -> list[int]:
        return [int(x) for x in self.layer_dims.split(",")]

    @property
    def ldp_enabled(self) -> bool:
        return self.ldp == "on"


FLAG_TO_FIELD = {f.metadata["flag"]: f for f in fields(ExperimentConfig)}


def _coerce(f, raw: Any):
    if f.type in ("int", int):
        if isinstance(raw, bool):
            raise ValueError("boolean is not an integer")
        if isinstance(raw, str):
            raw = raw.strip()
            value = float(raw)
            if not value.is_integer():
                raise ValueError(raw)
            return int(value)
        if isinstance(raw, float) and not raw.is_integer():
            raise ValueError(raw)
        return int(raw)
    if f.type in ("float", float):
        return float(raw)
    value = str(raw).strip()
    if f.name == "layer_dims":
        value = ",".join(str(int(x)) for x in value.split(","))
    return value


def _validate(cfg: ExperimentConfig) -> list[str]:
    problems = []
    for f in fields(cfg):
        choices = f.metadata.get("choices")
        if choices and getattr(cfg, f.name) not in choices:
            problems.append(f"{f.metadata['flag']}: {getattr(cfg, f.name)!r} not in {list(choices)}")
    if cfg.num_clients < cfg.num_mes:
        problems.append(f"K ≥ M violated: num-clients={cfg.num_clients} < num-mes={cfg.num_mes}")
    for flag in ("num-clients", "num-mes", "rounds", "edge-agg-every", "cloud-agg-every",
                 "local-epochs", "batch-size", "labels-per-client", "samples-per-label"):
        if getattr(cfg, FLAG_TO_FIELD[flag].name) < 1:
            problems.append(f"{flag}: must be >= 1")
    if cfg.num_classes < 2:
        problems.append("num-classes: must be >= 2")
    if cfg.synthetic_samples < 0:
        problems.append("synthetic-samples: must be >= 0")
    if cfg.ldp_enabled and not cfg.privacy_epsilon > 0:
        problems.append("privacy-epsilon: must be > 0 when ldp is on")
    if not cfg.clip_bound > 0:
        problems.append("clip-bound: must be > 0")
    if not cfg.learning_rate > 0:
        problems.append("learning-rate: must be > 0")
    if not 0 < cfg.lr_decay <= 1:
        problems.append("lr-decay: must be in (0, 1]")
    if not 0 <= cfg.momentum < 1:
        problems.append("momentum: must be in [0, 1)")
    if not cfg.synthetic_spread > 0:
        problems.append("synthetic-spread: must be > 0")
    try:
        dims = cfg.dims
        if len(dims) < 3 or min(dims) < 1:
            problems.append("layer-dims: need at least 3 positive widths")
        elif not 1 <= cfg.cut_index <= len(dims) - 2:
            problems.append(f"cut-index: must be in [1, {len(dims) - 2}]")
        elif dims[-1] != cfg.num_classes:
            problems.append(f"layer-dims: last width {dims[-1]} != num-classes {cfg.num_classes}")
    except ValueError:
        problems.append(f"layer-dims: {cfg.layer_dims!r} is not a comma-separated integer list")
    if cfg.labels_per_client > cfg.num_classes:
        problems.append("labels-per-client: exceeds num-classes")
    if cfg.dataset == "idx" and not (cfg.idx_images and cfg.idx_labels):
        problems.append("idx-images/idx-labels: both required when dataset=idx")
    for flag in ("lan-latency", "wan-latency", "client-cost", "mes-cost", "cloud-cost"):
        if getattr(cfg, FLAG_TO_FIELD[flag].name) < 0:
            problems.append(f"{flag}: must be >= 0")
    for flag in ("lan-bandwidth", "wan-bandwidth"):
        if not getattr(cfg, FLAG_TO_FIELD[flag].name) > 0:
            problems.append(f"{flag}: must be > 0")
    return problems


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError([f"{path}:{lineno}: expected 'key = value'"])
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def parse_config(
    path=None,
    flags: Mapping[str, Any] | None = None,
    env: Mapping[str, str] | None = None,
) -> ExperimentConfig:
    """Merge defaults < file < environment < flags, then validate.

    ``flags`` maps flag names (``num-clients``) to values; only explicitly
    given flags should be present. Every problem is reported in one
    ``ConfigError``.
    """
    env = os.environ if env is None else env
    layers: list[tuple[str, Mapping[str, Any]]] = []
    if path is not None:
        layers.append((str(path), read_config_file(path)))
    if env.get(SEED_ENV, "") != "":
        layers.append((f"${SEED_ENV}", {"seed": env[SEED_ENV]}))
    if flags:
        layers.append(("flags", {k.replace("_", "-"): v for k, v in flags.items()}))

    cfg = ExperimentConfig()
    problems = []
    for source, values in layers:
        for key, raw in values.items():
            f = FLAG_TO_FIELD.get(key)
            if f is None:
                problems.append(f"{source}: unknown key {key!r}")
                continue
            try:
                setattr(cfg, f.name, _coerce(f, raw))
            except (TypeError, ValueError):
                problems.append(f"{source}: {key}: cannot read {raw!r} as {f.type}")
    if not problems:
        problems = _validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        lines.append(f"{f.metadata['flag']} = {value!r}" if isinstance(value, float) else f"{f.metadata['flag']} = {value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# building a run
# ---------------------------------------------------------------------------


def network_model(cfg: ExperimentConfig) -> simnet.NetworkModel:
    return simnet.NetworkModel(
        lan=simnet.LinkModel(cfg.lan_latency, cfg.lan_bandwidth),
        wan=simnet.LinkModel(cfg.wan_latency, cfg.wan_bandwidth),
        compute=simnet.ComputeModel(cfg.client_cost, cfg.mes_cost, cfg.cloud_cost),
    )


def synthetic_size(cfg: ExperimentConfig, num_clients: int | None = None) -> int:
    if cfg.synthetic_samples:
        return cfg.synthetic_samples
    k = num_clients or cfg.num_clients
    per_class = data.required_per_class(k, cfg.labels_per_client, cfg.samples_per_label, cfg.num_classes)
    return per_class * cfg.num_classes


def load_dataset(cfg: ExperimentConfig, num_clients: int | None = None) -> data.Dataset:
    if cfg.dataset == "idx":
        return data.load_idx(cfg.idx_images, cfg.idx_labels, cfg.num_classes)
    return data.generate_synthetic(
        cfg.seed, synthetic_size(cfg, num_clients), cfg.dims[0], cfg.num_classes, cfg.synthetic_spread
    )


def build_setup(cfg: ExperimentConfig, dataset: data.Dataset | None = None) -> protocols.Setup:
    ds = dataset if dataset is not None else load_dataset(cfg)
    plan = data.partition_noniid(ds, cfg.num_clients, cfg.labels_per_client, cfg.samples_per_label, cfg.seed)
    eval_ds = None
    if cfg.eval_holdout == "on":
        unused = np.setdiff1d(np.arange(len(ds)), plan.all_indices())
        if unused.size == 0:
            raise ConfigError(["eval-holdout: no samples left outside the client partition"])
        eval_ds = ds.subset(unused)
    return protocols.Setup(
        stack=nn.LayerStack.from_dims(cfg.dims),
        dataset=ds,
        plan=plan,
        topology=protocols.Topology.balanced(cfg.num_clients, cfg.num_mes),
        schedule=protocols.Schedule(cfg.rounds, cfg.edge_agg_every, cfg.cloud_agg_every, cfg.local_epochs),
        learning_rate=cfg.learning_rate,
        decay=cfg.lr_decay,
        momentum=cfg.momentum,
        batch_size=cfg.batch_size,
        privacy=ldp.PrivacyConfig(cfg.privacy_epsilon, cfg.clip_bound, cfg.ldp_enabled),
        cut=split.SplitSpec(cfg.cut_index),
        network=network_model(cfg),
        seed=cfg.seed,
        eval_dataset=eval_ds,
    )


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------


@dataclass
class MetricsFile:
    rows: list[protocols.RoundRecord]
    summary: dict[str, Any]

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(ROUNDS_HEADER.split(","))
        for r in self.rows:
            writer.writerow([
                r.round_index, r.protocol, repr(r.train_loss), repr(r.eval_accuracy),
                repr(r.simulated_time_s), r.bytes_client_mes, r.bytes_mes_cloud,
            ])
        return buf.getvalue()

    def summary_text(self) -> str:
        return json.dumps(self.summary, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "rounds.csv").write_text(self.csv_text(), encoding="utf-8")
        (out / "summary.json").write_text(self.summary_text(), encoding="utf-8")
        return out


def summarize(cfg: ExperimentConfig, history: protocols.RunHistory) -> dict[str, Any]:
    last = history[-1]
    b1 = sum(r.bytes_client_mes for r in history)
    b2 = sum(r.bytes_mes_cloud for r in history)
    return {
        "protocol": cfg.protocol,
        "rounds": len(history),
        "final_accuracy": last.eval_accuracy,
        "final_loss": last.train_loss,
        "total_sim_time_s": history.clock.elapsed_s,
        "time_breakdown_s": dict(history.clock.breakdown),
        "total_bytes_client_mes": b1,
        "total_bytes_mes_cloud": b2,
        "total_bytes": b1 + b2,
        "aggregations": {
            "edge": [p for p, level in history.trace if level == "edge"],
            "cloud": [p for p, level in history.trace if level == "cloud"],
        },
        "config": asdict(cfg),
    }


def run_experiment(cfg: ExperimentConfig, write: bool = True, dataset: data.Dataset | None = None) -> MetricsFile:
    setup = build_setup(cfg, dataset)
    log.info("running %s: K=%d M=%d P=%d", cfg.protocol, cfg.num_clients, cfg.num_mes, cfg.rounds)
    history = protocols.run(cfg.protocol, setup)
    metrics = MetricsFile(list(history), summarize(cfg, history))
    if write:
        metrics.write(cfg.out)
    return metrics


@dataclass
class CompareRow:
    protocol: str
    num_clients: int
    num_mes: int
    final_accuracy: float = float("nan")
    final_loss: float = float("nan")
    sim_time_s: float = float("nan")
    bytes_client_mes: int = 0
    bytes_mes_cloud: int = 0
    status: str = "ok"

    @property
    def total_bytes(self) -> int:
        return self.bytes_client_mes + self.bytes_mes_cloud


def _run_cell(cfg: ExperimentConfig, dataset: data.Dataset) -> CompareRow:
    row = CompareRow(cfg.protocol, cfg.num_clients, cfg.num_mes)
    try:
        m = run_experiment(cfg, write=False, dataset=dataset)
    except Exception as exc:  # one failing cell must not stop the grid
        row.status = f"error: {type(exc).__name__}: {exc}"
        return row
    s = m.summary
    row.final_accuracy = s["final_accuracy"]
    row.final_loss = s["final_loss"]
    row.sim_time_s = s["total_sim_time_s"]
    row.bytes_client_mes = s["total_bytes_client_mes"]
    row.bytes_mes_cloud = s["total_bytes_mes_cloud"]
    return row


def compare_protocols(
    base: ExperimentConfig,
    protocol_list: Sequence[str] = protocols.PROTOCOLS,
    clients: Sequence[int] | None = None,
    mes: Sequence[int] | None = None,
    jobs: int = 1,
) -> list[CompareRow]:
    """Run every (protocol, K, M) cell on one shared dataset, in grid order."""
    clients = list(clients or [base.num_clients])
    mes = list(mes or [base.num_mes])
    cells = []
    for k in clients:
        for m in mes:
            for proto in protocol_list:
                cfg = ExperimentConfig(**{**asdict(base), "protocol": proto, "num_clients": k, "num_mes": m})
                cells.append(cfg)
    dataset = load_dataset(base, max(clients))
    rows: list[CompareRow] = []
    bad = []
    for cfg in cells:
        problems = _validate(cfg)
        bad.append(problems)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [None if p else pool.submit(_run_cell, cfg, dataset) for cfg, p in zip(cells, bad)]
            for cfg, p, fut in zip(cells, bad, futures):
                rows.append(_invalid_row(cfg, p) if p else fut.result())
    else:
        for cfg, p in zip(cells, bad):
            rows.append(_invalid_row(cfg, p) if p else _run_cell(cfg, dataset))
    return rows


def _invalid_row(cfg: ExperimentConfig, problems: list[str]) -> CompareRow:
    return CompareRow(cfg.protocol, cfg.num_clients, cfg.num_mes, status="error: " + "; ".join(problems))


def compare_csv(rows: Sequence[CompareRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COMPARE_HEADER.split(","))
    for r in rows:
        writer.writerow([
            r.protocol, r.num_clients, r.num_mes, repr(r.final_accuracy), repr(r.final_loss),
            repr(r.sim_time_s), r.bytes_client_mes, r.bytes_mes_cloud, r.total_bytes, r.status,
        ])
    return buf.getvalue()
