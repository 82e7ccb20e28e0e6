"""Experiment specs, runs, metrics files and presets.

A spec is a YAML file with the sections ``model``, ``data``, ``federation``,
``client``, ``cost`` and ``run`` plus a top-level ``seed``; every field has a
default (see the dataclasses below). ``--set section.key=value`` overrides are
applied on top. Each run directory receives:

``config.resolved``  the fully resolved spec; rerunning it reproduces the run
``rounds.csv``       one row per round (columns in :data:`CSV_COLUMNS`)
``summary.json``     final metrics and sync-event counts
``timing.json``      real elapsed seconds (informational only)
``checkpoints/``     ``latest.phck`` after every round and ``final.phck``
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
import time
import typing
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from fedlm.aggregator import (
    CHECKPOINT_NAME,
    FederationConfig,
    FederationState,
    RoundRecord,
    restore_global,
    run_federation,
)
from fedlm.baselines import CentralizedConfig, ddp_step_time, run_centralized
from fedlm.checkpoint import write_checkpoint
from fedlm.client import (
    Client,
    ClientHardware,
    Interconnect,
    LocalTrainConfig,
    PostProcessPolicy,
    model_memory_mb,
)
from fedlm.costmodel import (
    MB_BYTES,
    CostModelParams,
    Topology,
    ddp_sync_events,
    federated_sync_events,
    load_bandwidth_matrix,
    megabytes_per_round,
)
from fedlm.data import (
    STYLES,
    Corpus,
    ShardPlan,
    generate_corpus,
    heldout_batches,
    partition_by_source,
    partition_iid,
)
from fedlm.errors import ConfigError, ParseError
from fedlm.model import Batch, ModelConfig, eval_perplexity, init_model, param_count
from fedlm.optim import LrSchedule, ServerOptKind, compute_schedule_period

OUTPUT_ROOT_ENV = "FEDLM_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"

# grids used by ``sweep`` when a key is given without values
DEFAULT_GRIDS: dict[str, list] = {
    "federation.clients_per_round": [1, 2, 4, 8, 16],
    "federation.local_steps": [64, 128, 512],
}

CSV_COLUMNS = (
    "round",
    "sampled_ids",
    "mean_client_loss",
    "eval_ppl",
    "t_local_s",
    "t_comm_s",
    "t_agg_s",
    "t_cum_s",
    "bytes_round",
)


@dataclass
class DataSpec:
    """``iid``: the sources are concatenated and dealt into ``population`` shards.
    ``by_source``: each source feeds ``population / len(sources)`` clients."""

    policy: str = "iid"
    sources: list = field(default_factory=lambda: ["web"])
    tokens_per_source: int = 200_000
    heldout_sequences: int = 64


@dataclass
class FederationSpec:
    population: int = 4
    clients_per_round: int = 4
    participation: typing.Optional[float] = None
    rounds: int = 10
    local_steps: int = 64
    topology: str = "ps"
    server_opt: str = "fedavg"
    server_lr: float = 1.0
    server_momentum: float = 0.0
    nesterov: bool = False
    workers: int = 1
    ring: typing.Optional[list] = None


@dataclass
class ClientSpec:
    """``decay_steps``: an integer, ``auto`` (the run's total sequential steps) or
    ``compute_optimal`` (20 tokens per parameter at the client batch)."""

    optimizer: str = "adamw"
    lr_max: float = 6.0e-4
    warmup_steps: int = 0
    decay_steps: typing.Union[int, str] = "auto"
    alpha: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: typing.Optional[float] = 1.0
    batch_size: int = 8
    n_nodes: int = 1
    gpus_per_node: int = 1
    vram_per_gpu_mb: float = 80_000.0
    interconnect: str = "rdma"
    post_process: str = "identity"
    post_process_max_norm: typing.Optional[float] = None


@dataclass
class CostSpec:
    """``payload_mb`` defaults to the f64 size of the model."""

    payload_mb: typing.Optional[float] = None
    bandwidth_mbps: float = 125.0
    throughput: float = 2.0
    server_flops: float = 5e12
    channel_threshold: int = 100
    bandwidth_matrix: typing.Optional[str] = None


@dataclass
class RunSpec:
    """``centralized`` mode trains ``n_workers`` simulated DDP ranks (default: the
    clients per round) for ``rounds * local_steps`` steps on the same plan."""

    mode: str = "federated"
    name: str = "run"
    eval_every: int = 1
    checkpoint: bool = True
    n_workers: typing.Optional[int] = None


@dataclass
class ExperimentSpec:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataSpec = field(default_factory=DataSpec)
    federation: FederationSpec = field(default_factory=FederationSpec)
    client: ClientSpec = field(default_factory=ClientSpec)
    cost: CostSpec = field(default_factory=CostSpec)
    run: RunSpec = field(default_factory=RunSpec)


_SECTIONS = {f.name: f for f in dataclasses.fields(ExperimentSpec)}

PRESETS: dict[str, dict[str, Any]] = {
    "iid": {"data.policy": "iid"},
    "hetero4": {
        "data.policy": "by_source",
        "data.sources": ["arxiv", "web", "wiki", "prose"],
        "federation.population": 4,
        "federation.clients_per_round": 4,
    },
    "hetero8": {
        "data.policy": "by_source",
        "data.sources": ["arxiv", "web", "wiki", "prose"],
        "federation.population": 8,
        "federation.clients_per_round": 8,
    },
    "hetero16": {
        "data.policy": "by_source",
        "data.sources": ["arxiv", "web", "wiki", "prose"],
        "federation.population": 16,
        "federation.clients_per_round": 16,
    },
    "diloco": {
        "federation.server_opt": "fedmomentum",
        "federation.server_lr": 0.1,
        "federation.server_momentum": 0.9,
        "federation.nesterov": True,
    },
    "centralized": {"run.mode": "centralized"},
}


def _coerce(value: Any, hint: Any, where: str) -> Any:
    """Convert a YAML scalar to the annotated field type (YAML reads ``6e-4`` as a string)."""
    if value is None:
        return None
    args = typing.get_args(hint)
    options = [a for a in args if a is not type(None)] if args else [hint]
    if isinstance(value, bool):
        if bool in options:
            return value
        raise ConfigError(f"{where}: expected {hint}, got a boolean")
    for opt in options:
        if opt is float and isinstance(value, (int, float, str)):
            try:
                return float(value)
            except ValueError:
                continue
        if opt is int and isinstance(value, int):
            return value
        if opt is int and isinstance(value, float) and value.is_integer():
            return int(value)
        if opt is str and isinstance(value, str):
            return value
        if opt is bool and isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        if opt is list and isinstance(value, (list, tuple)):
            return list(value)
    raise ConfigError(f"{where}: cannot use {value!r} as {hint}")


def _build_section(cls, raw: Mapping[str, Any], section: str):
    if not isinstance(raw, Mapping):
        raise ConfigError(f"section {section!r} must be a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    values = {k: _coerce(v, hints[k], f"{section}.{k}") for k, v in raw.items()}
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def spec_from_dict(raw: Mapping[str, Any] | None) -> ExperimentSpec:
    raw = dict(raw or {})
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for name, value in raw.items():
        if name == "seed":
            kwargs["seed"] = _coerce(value, int, "seed")
        else:
            cls = _SECTIONS[name].default_factory().__class__
            kwargs[name] = _build_section(cls, value or {}, name)
    return ExperimentSpec(**kwargs)


def spec_to_dict(spec: ExperimentSpec) -> dict[str, Any]:
    return asdict(spec)


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, value = text.split("=", 1)
    return key.strip(), yaml.safe_load(value)


def apply_overrides(raw: dict[str, Any], overrides: Mapping[str, Any]) -> dict[str, Any]:
    out = json.loads(json.dumps(raw))
    for key, value in overrides.items():
        parts = key.split(".")
        if parts == ["seed"]:
            out["seed"] = value
            continue
        if len(parts) != 2 or parts[0] not in _SECTIONS or parts[0] == "seed":
            raise ConfigError(f"override key {key!r} must be section.key")
        section = out.setdefault(parts[0], {})
        if section is None:
            section = out[parts[0]] = {}
        section[parts[1]] = value
    return out


def load_spec(
    path: str | Path | None = None,
    overrides: Sequence[str] | Mapping[str, Any] = (),
    presets: Sequence[str] = (),
) -> ExperimentSpec:
    """Read a YAML spec (or the defaults), apply presets in order, then overrides."""
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        raw = loaded or {}
    for name in presets:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        raw = apply_overrides(raw, PRESETS[name])
    if not isinstance(overrides, Mapping):
        overrides = dict(parse_override(o) for o in overrides)
    return spec_from_dict(apply_overrides(raw, overrides))


def resolve_spec(spec: ExperimentSpec) -> ExperimentSpec:
    """Validate and fill every derived value so the result is self-contained."""
    fed, cl, data, run = spec.federation, spec.client, spec.data, spec.run
    if data.policy not in ("iid", "by_source"):
        raise ConfigError(f"unknown data policy {data.policy!r}")
    if not data.sources:
        raise ConfigError("data.sources must not be empty")
    for s in data.sources:
        if s not in STYLES:
            raise ConfigError(f"unknown source {s!r}; choose from {sorted(STYLES)}")
    for where, value, choices in (
        ("federation.topology", fed.topology, Topology),
        ("federation.server_opt", fed.server_opt, ServerOptKind),
        ("client.interconnect", cl.interconnect, Interconnect),
    ):
        allowed = [c.value for c in choices]
        if value not in allowed:
            raise ConfigError(f"unknown {where} {value!r}; choose from {allowed}")
    if run.mode not in ("federated", "centralized"):
        raise ConfigError(f"unknown run mode {run.mode!r}")
    if run.eval_every < 1:
        raise ConfigError("run.eval_every must be >= 1")
    if data.policy == "by_source" and fed.population % len(data.sources):
        raise ConfigError(
            f"population {fed.population} does not split evenly over {len(data.sources)} sources"
        )
    fcfg = federation_config(spec)
    fed = dataclasses.replace(fed, clients_per_round=fcfg.clients_per_round)
    total_steps = fed.rounds * fed.local_steps
    decay = cl.decay_steps
    if decay == "auto":
        decay = max(total_steps, 1)
    elif decay == "compute_optimal":
        decay = compute_schedule_period(
            param_count(spec.model), cl.batch_size * spec.model.seq_len
        )
    elif isinstance(decay, str):
        raise ConfigError("client.decay_steps must be an integer, 'auto' or 'compute_optimal'")
    cl = dataclasses.replace(cl, decay_steps=int(decay))
    cost = spec.cost
    if cost.payload_mb is None:
        cost = dataclasses.replace(cost, payload_mb=param_count(spec.model) * 8 / MB_BYTES)
    n_workers = run.n_workers if run.n_workers is not None else fed.clients_per_round
    run = dataclasses.replace(run, n_workers=n_workers)
    out = dataclasses.replace(spec, federation=fed, client=cl, cost=cost, run=run)
    local_train_config(out)
    cost_params(out)
    return out


def federation_config(spec: ExperimentSpec) -> FederationConfig:
    f = spec.federation
    return FederationConfig(
        population=f.population,
        clients_per_round=f.clients_per_round,
        rounds=f.rounds,
        local_steps=f.local_steps,
        topology=f.topology,
        server_opt=f.server_opt,
        server_lr=f.server_lr,
        server_momentum=f.server_momentum,
        nesterov=f.nesterov,
        seed=derive_seed(spec.seed, "sample"),
        participation=f.participation,
        workers=f.workers,
        ring=tuple(f.ring) if f.ring is not None else None,
    )


def local_train_config(spec: ExperimentSpec) -> LocalTrainConfig:
    c = spec.client
    return LocalTrainConfig(
        schedule=LrSchedule(c.lr_max, c.warmup_steps, int(c.decay_steps), c.alpha),
        optimizer=c.optimizer,
        beta1=c.beta1,
        beta2=c.beta2,
        eps=c.eps,
        weight_decay=c.weight_decay,
        clip_norm=c.clip_norm,
        batch_size=c.batch_size,
        throughput=spec.cost.throughput,
    )


def cost_params(spec: ExperimentSpec) -> CostModelParams:
    c = spec.cost
    matrix = load_bandwidth_matrix(c.bandwidth_matrix) if c.bandwidth_matrix else None
    return CostModelParams(
        payload_mb=c.payload_mb,
        bandwidth_mbps=c.bandwidth_mbps,
        throughput=c.throughput,
        local_steps=spec.federation.local_steps,
        server_flops=c.server_flops,
        channel_threshold=c.channel_threshold,
        matrix=matrix,
    )


def derive_seed(seed: int, *tags: str | int) -> int:
    """Independent 32-bit seed for a named purpose."""
    words = [int(seed)] + [zlib.crc32(t.encode()) if isinstance(t, str) else int(t) for t in tags]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass
class ExperimentData:
    plan: ShardPlan
    heldout: list[Batch]


def build_data(spec: ExperimentSpec) -> ExperimentData:
    d, seq = spec.data, spec.model.seq_len
    corpora = [
        generate_corpus(s, d.tokens_per_source, derive_seed(spec.seed, "corpus", s), seq)
        for s in d.sources
    ]
    if d.policy == "iid":
        tokens = np.concatenate([c.tokens for c in corpora])
        mixed = Corpus(tokens, "+".join(d.sources), corpora[0].vocab_size)
        plan = partition_iid(mixed, spec.federation.population, derive_seed(spec.seed, "iid"), seq)
    else:
        cps = spec.federation.population // len(d.sources)
        plan = partition_by_source(corpora, cps, seq)
    # held-out text: fresh draws from every source, interleaved
    per_source = -(-d.heldout_sequences // len(d.sources))
    windows = []
    for s in d.sources:
        held = generate_corpus(
            s, per_source * (seq + 1), derive_seed(spec.seed, "heldout", s), seq
        )
        windows.append(held.tokens[: per_source * (seq + 1)].reshape(per_source, seq + 1))
    mixed_windows = np.stack(windows, axis=1).reshape(-1, seq + 1)[: d.heldout_sequences]
    held = Corpus(mixed_windows.reshape(-1), "heldout", corpora[0].vocab_size)
    return ExperimentData(plan, heldout_batches(held, d.heldout_sequences, seq))


def build_clients(spec: ExperimentSpec, plan: ShardPlan) -> dict[int, Client]:
    c = spec.client
    hw = ClientHardware(
        n_nodes=c.n_nodes,
        gpus_per_node=c.gpus_per_node,
        vram_per_gpu=c.vram_per_gpu_mb,
        interconnect=c.interconnect,
        model_mem_estimate=model_memory_mb(param_count(spec.model)),
    )
    policy = PostProcessPolicy(c.post_process, c.post_process_max_norm)
    hp = local_train_config(spec)
    stream_seed = derive_seed(spec.seed, "stream")
    return {
        cid: Client(cid, plan, spec.model, hp, stream_seed, hw, policy) for cid in plan.client_ids
    }


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ";".join(str(v) for v in value)
    return str(value)


def record_row(record: RoundRecord) -> list[str]:
    d = record.to_dict()
    return [_fmt(d[c]) for c in CSV_COLUMNS]


def write_rounds_csv(path: Path, records: Sequence[RoundRecord]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow(record_row(r))
    path.write_text(buf.getvalue())


def append_rounds_csv(path: Path, record: RoundRecord) -> None:
    with path.open("a", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(record_row(record))


def read_rounds_csv(path: str | Path) -> list[dict[str, Any]]:
    """Parse ``rounds.csv`` into typed rows; raises ParseError on any structural problem."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError(f"{path}: empty file") from None
    missing = {"round", "eval_ppl", "t_cum_s"} - set(header)
    if missing:
        raise ParseError(f"{path}: missing columns {sorted(missing)}")
    rows = []
    for lineno, raw in enumerate(reader, start=2):
        if not raw:
            continue
        if len(raw) != len(header):
            raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(raw)}")
        row: dict[str, Any] = dict(zip(header, raw))
        try:
            row["round"] = int(row["round"])
            for key in ("mean_client_loss", "eval_ppl", "t_local_s", "t_comm_s", "t_agg_s",
                        "t_cum_s", "bytes_round"):
                if key in row:
                    row[key] = float(row[key])
            if "sampled_ids" in row:
                ids = row["sampled_ids"]
                row["sampled_ids"] = [int(x) for x in ids.split(";")] if ids else []
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
        rows.append(row)
    return rows


def time_to_target(rounds_csv: str | Path, target_ppl: float) -> float | None:
    """Cumulative simulated seconds at the first round with eval perplexity <= target."""
    for row in read_rounds_csv(rounds_csv):
        ppl = row["eval_ppl"]
        if not math.isnan(ppl) and ppl <= target_ppl:
            return row["t_cum_s"]
    return None


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))


@dataclass
class RunResult:
    out_dir: Path
    summary: dict[str, Any]
    records: list[RoundRecord]


def _evaluator(spec: ExperimentSpec, heldout: list[Batch]):
    return lambda theta: eval_perplexity(theta, heldout, spec.model)


def run_experiment(
    spec: ExperimentSpec,
    out_dir: str | Path | None = None,
    *,
    resume: bool = False,
    stop_after: int | None = None,
) -> RunResult:
    """Execute a resolved spec and write its run directory.

    ``resume`` continues from ``checkpoints/latest.phck``; ``stop_after`` ends the
    process after that many rounds (for interruption tests) without a summary.
    """
    spec = resolve_spec(spec)
    out = Path(out_dir) if out_dir is not None else output_root() / spec.run.name
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(
        yaml.safe_dump(spec_to_dict(spec), sort_keys=False, default_flow_style=None)
    )
    started = time.perf_counter()
    data = build_data(spec)
    evaluate = _evaluator(spec, data.heldout)
    theta0 = init_model(spec.model, derive_seed(spec.seed, "init"))
    initial_ppl = evaluate(theta0)
    if spec.run.mode == "centralized":
        result = _run_centralized(spec, data, theta0, evaluate, out)
    else:
        result = _run_federated(spec, data, theta0, evaluate, out, resume, stop_after)
    if result is None:
        return RunResult(out, {}, [])
    theta, records = result
    total_steps = spec.federation.rounds * spec.federation.local_steps
    summary = {
        "mode": spec.run.mode,
        "rounds": len(records),
        "total_sequential_steps": total_steps,
        "initial_ppl": initial_ppl,
        "final_ppl": records[-1].eval_ppl if records else initial_ppl,
        "final_sim_time_s": records[-1].t_cum_s if records else 0.0,
        "sync_events": len(records)
        if spec.run.mode == "federated"
        else ddp_sync_events(total_steps),
        "ddp_sync_events_equal_steps": ddp_sync_events(total_steps),
        "federated_sync_events_equal_steps": federated_sync_events(
            total_steps, max(spec.federation.local_steps, 1)
        ),
        "param_count": theta.total_len,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "timing.json").write_text(
        json.dumps({"elapsed_s": time.perf_counter() - started}, indent=2) + "\n"
    )
    if spec.run.checkpoint:
        write_checkpoint(
            theta, {"kind": "final", "mode": spec.run.mode}, out / "checkpoints" / "final.phck",
            round=len(records),
        )
    return RunResult(out, summary, records)


def _run_federated(spec, data, theta0, evaluate, out, resume, stop_after):
    fcfg = federation_config(spec)
    clients = build_clients(spec, data.plan)
    cost = cost_params(spec)
    ckpt_dir = out / "checkpoints" if spec.run.checkpoint else None
    csv_path = out / "rounds.csv"
    latest = out / "checkpoints" / CHECKPOINT_NAME
    if resume:
        if not latest.exists():
            raise ConfigError(f"nothing to resume: {latest} does not exist")
        state = restore_global(latest)
    else:
        state = FederationState(theta0, fcfg.make_server_state())
    write_rounds_csv(csv_path, state.records)

    def eval_or_skip(theta):
        r = state.round
        if (r + 1) % spec.run.eval_every == 0 or r + 1 == fcfg.rounds:
            return evaluate(theta)
        return float("nan")

    run_federation(
        state,
        fcfg,
        clients,
        cost,
        evaluate=eval_or_skip,
        checkpoint_dir=ckpt_dir,
        on_round=lambda rec: append_rounds_csv(csv_path, rec),
        stop_after=stop_after,
    )
    if state.round < fcfg.rounds:
        return None
    return state.theta, state.records


def _run_centralized(spec, data, theta0, evaluate, out):
    fed = spec.federation
    n = spec.run.n_workers
    tau = max(fed.local_steps, 1)
    steps = fed.rounds * fed.local_steps
    ccfg = CentralizedConfig(
        n_workers=n,
        global_batch=n * spec.client.batch_size,
        steps=steps,
        hp=local_train_config(spec),
    )
    cost = cost_params(spec)
    res = run_centralized(
        ccfg, data.plan, spec.model, derive_seed(spec.seed, "stream"), theta0,
        cost=cost, evaluate=evaluate, eval_every=tau,
    )
    # one row per window of tau steps, the federated round's span
    per_step = ddp_step_time(cost, n)
    step_comm = per_step - 1.0 / cost.throughput
    evals = dict(res.eval_ppl)
    records, t_cum = [], 0.0
    for r in range(fed.rounds):
        window = res.losses[r * tau : (r + 1) * tau]
        t_l, t_c = tau / cost.throughput, tau * step_comm
        t_cum += t_l + t_c
        records.append(
            RoundRecord(
                round=r,
                sampled_ids=list(range(n)),
                survivor_ids=list(range(n)),
                mean_client_loss=math.fsum(window) / len(window),
                min_client_loss=min(window),
                max_client_loss=max(window),
                eval_ppl=evals.get((r + 1) * tau, float("nan")),
                t_local_s=t_l,
                t_comm_s=t_c,
                t_agg_s=0.0,
                t_cum_s=t_cum,
                bytes_round=tau * megabytes_per_round(Topology.RAR, n, cost.payload_mb) * MB_BYTES,
            )
        )
    write_rounds_csv(out / "rounds.csv", records)
    return res.theta, records


def run_from_resolved(run_dir: str | Path, out_dir: str | Path | None = None, **kw) -> RunResult:
    """Re-execute a run from its ``config.resolved`` (into ``out_dir``, default in place)."""
    run_dir = Path(run_dir)
    spec = load_spec(run_dir / "config.resolved")
    return run_experiment(spec, out_dir if out_dir is not None else run_dir, **kw)


def sweep(
    spec: ExperimentSpec,
    key: str,
    values: Sequence[Any],
    out_root: str | Path | None = None,
    target_ppl: float | None = None,
) -> list[dict[str, Any]]:
    """One run directory per grid value; returns (and writes) a summary table."""
    root = Path(out_root) if out_root is not None else output_root() / f"{spec.run.name}-sweep"
    root.mkdir(parents=True, exist_ok=True)
    base = spec_to_dict(spec)
    rows = []
    for value in values:
        point = spec_from_dict(apply_overrides(base, {key: value}))
        tag = f"{key.split('.')[-1]}={value}"
        point = dataclasses.replace(point, run=dataclasses.replace(point.run, name=tag))
        res = run_experiment(point, root / tag)
        row = {
            "point": tag,
            "final_ppl": res.summary["final_ppl"],
            "final_sim_time_s": res.summary["final_sim_time_s"],
        }
        if target_ppl is not None:
            row["time_to_target_s"] = time_to_target(res.out_dir / "rounds.csv", target_ppl)
        rows.append(row)
    (root / "sweep.json").write_text(json.dumps(rows, indent=2) + "\n")
    return rows
