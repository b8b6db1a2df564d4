"""Experiment runner: declarative configs, training runs, metrics, manifests.

A run is fully described by an ExperimentConfig; with the simulated
transport the resulting metrics are a pure function of the config, and a
run's manifest is sufficient to reproduce its metrics files byte for
byte. Four modes share one entry point:

* ``fls``          server rounds (tune all, average all, broadcast)
* ``braintorrent`` peer rounds; a config asking for R server rounds gets
                   an R x n_clients update budget, warm-up included
* ``pooled``       one model on all training data, R rounds
* ``only_client``  n_clients isolated models, R rounds each
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    FEATURE_CHANNELS,
    DatasetShard,
    GenConfig,
    SegImage,
    generate_dataset,
    generate_dataset_for_cohorts,
    split_by_cohort,
    split_uniform,
)
from .federation import (
    ClientNode,
    ClientState,
    MergeReport,
    RoundParams,
    VersionVector,
    aggregate_all_clients,
    bt_round,
    fls_round,
    pick_initiator,
    run_initiator_round,
    local_update,
)
from .model import ModelSpec, ModelWeights, dice_score, init_model, predict
from .seeding import derive_seed
from .transport import (
    PeerAddress,
    PeerUnreachableError,
    SimTransport,
    TcpPeerServer,
    TcpTransport,
    weights_frame_bytes,
)

MODES = ("fls", "braintorrent", "pooled", "only_client")
EXP1_CLIENT_SWEEP = (5, 7, 10, 20)
EXP2_BOUNDARIES = (20.0, 30.0, 40.0, 50.0)
EXP2_COUNTS = (5, 9, 2, 1, 3)


def _require_keys(section: str, given: dict, allowed: set[str]) -> None:
    unknown = set(given) - allowed
    if unknown:
        raise ValueError(f"unknown {section} keys: {sorted(unknown)}")


@dataclass(frozen=True)
class Seeds:
    data: int = 0
    init: int = 1
    shuffle: int = 2
    initiator: int = 3

    @staticmethod
    def from_dict(d: dict) -> "Seeds":
        _require_keys("seeds", d, {"data", "init", "shuffle", "initiator"})
        return Seeds(**{k: int(v) for k, v in d.items()})

    def to_dict(self) -> dict:
        return {"data": self.data, "init": self.init,
                "shuffle": self.shuffle, "initiator": self.initiator}


@dataclass(frozen=True)
class SplitSpec:
    kind: str = "uniform"
    boundaries: tuple[float, ...] | None = None
    counts: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("uniform", "cohort"):
            raise ValueError(f"unknown split kind {self.kind!r}")
        if self.kind == "uniform" and (self.boundaries or self.counts):
            raise ValueError("uniform split takes no boundaries or counts")
        if self.kind == "cohort":
            if self.boundaries is None:
                raise ValueError("cohort split requires boundaries")
            if self.counts is not None and len(self.counts) != len(self.boundaries) + 1:
                raise ValueError(
                    f"need {len(self.boundaries) + 1} counts for "
                    f"{len(self.boundaries)} boundaries"
                )

    @staticmethod
    def from_dict(d: dict) -> "SplitSpec":
        _require_keys("split", d, {"kind", "boundaries", "counts"})
        return SplitSpec(
            kind=d.get("kind", "uniform"),
            boundaries=tuple(float(b) for b in d["boundaries"]) if d.get("boundaries") else None,
            counts=tuple(int(c) for c in d["counts"]) if d.get("counts") else None,
        )

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.boundaries is not None:
            out["boundaries"] = list(self.boundaries)
        if self.counts is not None:
            out["counts"] = list(self.counts)
        return out


def _model_from_dict(d: dict) -> ModelSpec:
    _require_keys("model", d, {"input_dim", "hidden_dims", "num_classes", "activation"})
    return ModelSpec(
        input_dim=int(d.get("input_dim", FEATURE_CHANNELS)),
        hidden_dims=tuple(int(h) for h in d.get("hidden_dims", (512,))),
        num_classes=int(d.get("num_classes", 4)),
        activation=d.get("activation", "relu"),
    )


def _model_to_dict(spec: ModelSpec) -> dict:
    return {
        "input_dim": spec.input_dim,
        "hidden_dims": list(spec.hidden_dims),
        "num_classes": spec.num_classes,
        "activation": spec.activation,
    }


_DATA_KEYS = {
    "num_train", "num_test", "height", "width", "num_classes",
    "noise_std", "cohort_shift", "feature_scale",
}


def _data_from_dict(d: dict) -> GenConfig:
    if "seed" in d:
        raise ValueError("data.seed is not a config key; generation uses seeds.data")
    _require_keys("data", d, _DATA_KEYS)
    return GenConfig(**{k: v for k, v in d.items()})


def _data_to_dict(cfg: GenConfig) -> dict:
    return {
        "num_train": cfg.num_train,
        "num_test": cfg.num_test,
        "height": cfg.height,
        "width": cfg.width,
        "num_classes": cfg.num_classes,
        "noise_std": cfg.noise_std,
        "cohort_shift": cfg.cohort_shift,
        "feature_scale": cfg.feature_scale,
    }


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; serializes losslessly to and from JSON."""

    mode: str = "fls"
    n_clients: int = 10
    split: SplitSpec = field(default_factory=SplitSpec)
    rounds_fls: int = 16
    model: ModelSpec = field(default_factory=lambda: ModelSpec(FEATURE_CHANNELS, (512,), 4))
    data: GenConfig = field(default_factory=GenConfig)
    base_lr: float = 0.001
    epochs_per_round: int = 2
    batch_size: int = 1
    merge_norm: str = "participants"
    aggregate: str = "weighted"
    bt_warmup: bool = True
    on_unreachable: str = "skip"
    eval_every: int = 1
    seeds: Seeds = field(default_factory=Seeds)
    transport: str = "sim"
    sim_drop_prob: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.n_clients < 1:
            raise ValueError(f"n_clients must be >= 1, got {self.n_clients}")
        if self.rounds_fls < 1:
            raise ValueError(f"rounds_fls must be >= 1, got {self.rounds_fls}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if self.epochs_per_round < 1 or self.batch_size < 1:
            raise ValueError("epochs_per_round and batch_size must be >= 1")
        if self.merge_norm not in ("participants", "global"):
            raise ValueError(f"unknown merge_norm {self.merge_norm!r}")
        if self.aggregate not in ("weighted", "unweighted"):
            raise ValueError(f"unknown aggregate {self.aggregate!r}")
        if self.on_unreachable not in ("skip", "abort"):
            raise ValueError(f"unknown on_unreachable {self.on_unreachable!r}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.transport not in ("sim", "tcp"):
            raise ValueError(f"unknown transport {self.transport!r}")
        if not 0.0 <= self.sim_drop_prob < 1.0:
            raise ValueError(f"sim_drop_prob must be in [0, 1), got {self.sim_drop_prob}")
        if self.model.input_dim != FEATURE_CHANNELS:
            raise ValueError(
                f"model input_dim must equal the {FEATURE_CHANNELS} feature channels"
            )
        if self.model.num_classes != self.data.num_classes:
            raise ValueError(
                f"model num_classes {self.model.num_classes} != "
                f"data num_classes {self.data.num_classes}"
            )
        if self.split.kind == "cohort":
            if self.split.counts is not None:
                if self.n_clients != len(self.split.counts):
                    raise ValueError(
                        f"cohort split with {len(self.split.counts)} buckets needs "
                        f"n_clients={len(self.split.counts)}, got {self.n_clients}"
                    )
                if sum(self.split.counts) != self.data.num_train:
                    raise ValueError(
                        f"cohort counts {self.split.counts} must sum to "
                        f"num_train={self.data.num_train}"
                    )
            elif self.n_clients != len(self.split.boundaries) + 1:
                raise ValueError("cohort split needs one client per bucket")
        elif self.mode != "pooled" and self.n_clients > self.data.num_train:
            raise ValueError(
                f"{self.n_clients} clients cannot share {self.data.num_train} images"
            )

    _TOP_KEYS = {
        "mode", "n_clients", "split", "rounds_fls", "model", "data", "base_lr",
        "epochs_per_round", "batch_size", "merge_norm", "aggregate", "bt_warmup",
        "on_unreachable", "eval_every", "seeds", "transport", "sim_drop_prob",
    }

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        _require_keys("config", d, ExperimentConfig._TOP_KEYS)
        kwargs: dict = {k: v for k, v in d.items()
                        if k not in ("split", "model", "data", "seeds")}
        if "split" in d:
            kwargs["split"] = SplitSpec.from_dict(d["split"])
        if "model" in d:
            kwargs["model"] = _model_from_dict(d["model"])
        if "data" in d:
            kwargs["data"] = _data_from_dict(d["data"])
        if "seeds" in d:
            kwargs["seeds"] = Seeds.from_dict(d["seeds"])
        return ExperimentConfig(**kwargs)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n_clients": self.n_clients,
            "split": self.split.to_dict(),
            "rounds_fls": self.rounds_fls,
            "model": _model_to_dict(self.model),
            "data": _data_to_dict(self.data),
            "base_lr": self.base_lr,
            "epochs_per_round": self.epochs_per_round,
            "batch_size": self.batch_size,
            "merge_norm": self.merge_norm,
            "aggregate": self.aggregate,
            "bt_warmup": self.bt_warmup,
            "on_unreachable": self.on_unreachable,
            "eval_every": self.eval_every,
            "seeds": self.seeds.to_dict(),
            "transport": self.transport,
            "sim_drop_prob": self.sim_drop_prob,
        }


@dataclass
class MetricsRecord:
    round_index: int
    per_client_dice: list[float]
    avg_client_dice: float
    aggregated_model_dice: float
    bytes_transferred: int
    wall_time_ms: int


@dataclass
class RunResult:
    config: ExperimentConfig
    records: list[MetricsRecord]
    final_clients: list[ClientState]
    aggregated: ModelWeights
    total_updates: int
    failed_rounds: int
    reports: list[MergeReport]
    trajectory: list[list[np.ndarray]] | None = None
    manifest: dict | None = None

    @property
    def final(self) -> MetricsRecord:
        return self.records[-1]


def build_dataset(cfg: ExperimentConfig) -> tuple[list[SegImage], list[SegImage]]:
    data = replace(cfg.data, seed=cfg.seeds.data)
    if cfg.split.kind == "cohort" and cfg.split.counts is not None:
        return generate_dataset_for_cohorts(
            data, list(cfg.split.boundaries), list(cfg.split.counts)
        )
    return generate_dataset(data)


def build_shards(cfg: ExperimentConfig, train: list[SegImage]) -> list[DatasetShard]:
    split_seed = derive_seed(cfg.seeds.data, "split")
    if cfg.mode == "pooled":
        # The pooled baseline is the one-client degenerate federation, so
        # its shard ordering matches a 1-client split of the same data.
        return split_uniform(train, 1, split_seed)
    if cfg.split.kind == "cohort":
        return split_by_cohort(
            train,
            list(cfg.split.boundaries),
            list(cfg.split.counts) if cfg.split.counts is not None else None,
        )
    return split_uniform(train, cfg.n_clients, split_seed)


def evaluate_model(
    spec: ModelSpec,
    weights: ModelWeights,
    images: list[SegImage],
    num_classes: int,
) -> float:
    """Mean over images of the per-image mean Dice across present classes."""
    scores = [
        dice_score(predict(spec, weights, im.features), im.labels, num_classes)[1]
        for im in images
    ]
    return float(np.mean(scores))


def _round_params(cfg: ExperimentConfig, total_samples: int) -> RoundParams:
    return RoundParams(
        spec=cfg.model,
        epochs=cfg.epochs_per_round,
        base_lr=cfg.base_lr,
        batch_size=cfg.batch_size,
        shuffle_seed=cfg.seeds.shuffle,
        merge_norm=cfg.merge_norm,
        on_unreachable=cfg.on_unreachable,
        total_samples=total_samples,
    )


def _initial_clients(cfg: ExperimentConfig, shards: list[DatasetShard]) -> list[ClientState]:
    w0 = init_model(cfg.model, cfg.seeds.init)
    return [
        ClientState(
            client_index=i,
            weights=w0.copy(),
            version=VersionVector.zeros(len(shards)),
            shard=shards[i],
            own_update_count=0,
        )
        for i in range(len(shards))
    ]


def bt_total_rounds(cfg: ExperimentConfig) -> int:
    """Peer rounds in an R x N update budget; warm-up passes count toward it."""
    budget = cfg.rounds_fls * cfg.n_clients
    return budget - (cfg.n_clients if cfg.bt_warmup else 0)


class _Recorder:
    """Collects evaluation records at a fixed client-update cadence."""

    def __init__(self, cfg: ExperimentConfig, test: list[SegImage], started: float,
                 capture: bool):
        self.cfg = cfg
        self.test = test
        self.started = started
        self.records: list[MetricsRecord] = []
        self.trajectory: list[list[np.ndarray]] | None = [] if capture else None
        self._last_key = None

    def eval_now(self, clients: list[ClientState], aggregated: ModelWeights,
                 round_index: int, key: int, bytes_transferred: int) -> None:
        if key == self._last_key:
            return
        self._last_key = key
        per_client = [
            evaluate_model(self.cfg.model, c.weights, self.test, self.cfg.data.num_classes)
            for c in clients
        ]
        agg = evaluate_model(self.cfg.model, aggregated, self.test, self.cfg.data.num_classes)
        self.records.append(
            MetricsRecord(
                round_index=round_index,
                per_client_dice=per_client,
                avg_client_dice=float(np.mean(per_client)),
                aggregated_model_dice=agg,
                bytes_transferred=bytes_transferred,
                wall_time_ms=int((time.perf_counter() - self.started) * 1000),
            )
        )
        if self.trajectory is not None:
            self.trajectory.append([c.weights.params.copy() for c in clients])

    def due(self, updates_done: int) -> bool:
        return updates_done % (self.cfg.eval_every * self.cfg.n_clients) == 0


def run_training(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    capture_trajectory: bool = False,
) -> RunResult:
    """Execute one run under the simulated transport and optionally persist it."""
    if cfg.transport != "sim":
        raise ValueError("run_training drives the simulated transport; "
                         "use run_tcp_peer for one TCP peer process")
    started = time.perf_counter()
    started_at = datetime.now(timezone.utc).isoformat()

    train, test = build_dataset(cfg)
    shards = build_shards(cfg, train)
    clients = _initial_clients(cfg, shards)
    params = _round_params(cfg, total_samples=sum(s.sample_count for s in shards))
    recorder = _Recorder(cfg, test, started, capture_trajectory)
    weighted = cfg.aggregate == "weighted"

    total_updates = 0
    failed_rounds = 0
    reports: list[MergeReport] = []

    if cfg.mode in ("pooled", "only_client", "fls"):
        server = clients[0].weights.copy()
        bytes_cum = 0
        for r in range(cfg.rounds_fls):
            if cfg.mode == "fls":
                clients, server = fls_round(clients, server, params)
                # Notional traffic: every client uploads its model and
                # downloads the aggregate once per round.
                bytes_cum += 2 * len(clients) * weights_frame_bytes(cfg.model.param_count())
            else:
                # pooled is a 1-client list; only_client updates each
                # isolated model once per round.
                clients = [local_update(c, params) for c in clients]
            total_updates += len(clients)
            if (r + 1) % cfg.eval_every == 0 or r + 1 == cfg.rounds_fls:
                aggregated = (
                    server if cfg.mode == "fls"
                    else aggregate_all_clients(clients, weighted=weighted)
                )
                recorder.eval_now(clients, aggregated, r + 1, r + 1, bytes_cum)
        aggregated = server if cfg.mode == "fls" else aggregate_all_clients(clients, weighted)
        final_clients = clients
    elif cfg.mode == "braintorrent":
        nodes = [ClientNode(c) for c in clients]
        transport = SimTransport(
            cfg.n_clients,
            seed=derive_seed(cfg.seeds.initiator, "faults"),
            drop_prob=cfg.sim_drop_prob,
        )
        for i, node in enumerate(nodes):
            transport.register(i, node)

        def eval_point() -> None:
            states = [n.state for n in nodes]
            recorder.eval_now(states, aggregate_all_clients(states, weighted),
                              total_updates // cfg.n_clients, total_updates,
                              transport.delivered_bytes())

        if cfg.bt_warmup:
            for node in nodes:
                node.commit(local_update(node.state, params))
                total_updates += 1
            if recorder.due(total_updates):
                eval_point()
        for r in range(bt_total_rounds(cfg)):
            initiator = pick_initiator(r, cfg.n_clients, cfg.seeds.initiator)
            try:
                reports.append(bt_round(nodes, initiator, params, transport))
                total_updates += 1
            except PeerUnreachableError:
                failed_rounds += 1
                continue
            if recorder.due(total_updates):
                eval_point()
        eval_point()
        final_clients = [n.state for n in nodes]
        aggregated = aggregate_all_clients(final_clients, weighted)
    else:  # pragma: no cover - modes are validated in the config
        raise AssertionError(cfg.mode)

    result = RunResult(
        config=cfg,
        records=recorder.records,
        final_clients=final_clients,
        aggregated=aggregated,
        total_updates=total_updates,
        failed_rounds=failed_rounds,
        reports=reports,
        trajectory=recorder.trajectory,
    )
    if out_dir is not None:
        result.manifest = write_run_outputs(result, Path(out_dir), started_at)
    return result


def format_real(x: float) -> str:
    """17 significant digits: enough to round-trip any float64 exactly."""
    return format(float(x), ".17g")


def metrics_to_csv(records: list[MetricsRecord], include_timing: bool = False) -> str:
    """Render records as CSV with a stable column order."""
    n_clients = len(records[0].per_client_dice) if records else 0
    columns = ["round_index", "avg_client_dice", "aggregated_model_dice", "bytes_transferred"]
    columns += [f"client_{i:02d}_dice" for i in range(n_clients)]
    if include_timing:
        columns.append("wall_time_ms")
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for rec in records:
        row = [
            str(rec.round_index),
            format_real(rec.avg_client_dice),
            format_real(rec.aggregated_model_dice),
            str(rec.bytes_transferred),
        ]
        row += [format_real(d) for d in rec.per_client_dice]
        if include_timing:
            row.append(str(rec.wall_time_ms))
        writer.writerow(row)
    return buffer.getvalue()


def metrics_to_json(records: list[MetricsRecord], include_timing: bool = False) -> str:
    out = []
    for rec in records:
        entry = {
            "round_index": rec.round_index,
            "avg_client_dice": rec.avg_client_dice,
            "aggregated_model_dice": rec.aggregated_model_dice,
            "bytes_transferred": rec.bytes_transferred,
            "per_client_dice": list(rec.per_client_dice),
        }
        if include_timing:
            entry["wall_time_ms"] = rec.wall_time_ms
        out.append(entry)
    return json.dumps({"records": out}, indent=2) + "\n"


def emit_metrics(
    records: list[MetricsRecord],
    path: str | Path,
    fmt: str = "csv",
    include_timing: bool = False,
) -> Path:
    """Write records to a file; canonical output excludes wall-clock timing."""
    path = Path(path)
    if fmt == "csv":
        text = metrics_to_csv(records, include_timing)
    elif fmt == "json":
        text = metrics_to_json(records, include_timing)
    else:
        raise ValueError(f"unknown metrics format {fmt!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def write_run_outputs(result: RunResult, out_dir: Path, started_at: str) -> dict:
    """Persist metrics (canonical), a reproduction manifest, and a report."""
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_csv = emit_metrics(result.records, out_dir / "metrics.csv", "csv")
    metrics_json = emit_metrics(result.records, out_dir / "metrics.json", "json")

    manifest = {
        "config": result.config.to_dict(),
        "code_version": __version__,
        "started_at": started_at,
        "finished_at": datetime.now(timezone.utc).isoformat(),
        "total_updates": result.total_updates,
        "failed_rounds": result.failed_rounds,
        "shard_sizes": [c.shard.sample_count for c in result.final_clients],
        "outputs": {
            "metrics_csv": metrics_csv.name,
            "metrics_json": metrics_json.name,
            "report": "report.txt",
        },
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    lines = [
        f"mode={result.config.mode} n_clients={result.config.n_clients} "
        f"rounds_fls={result.config.rounds_fls}",
        f"total client updates: {result.total_updates} "
        f"(failed rounds: {result.failed_rounds})",
    ]
    if result.records:
        final = result.final
        lines += [
            f"final avg dice over clients: {final.avg_client_dice:.4f}",
            f"final aggregated-model dice: {final.aggregated_model_dice:.4f}",
            f"bytes transferred: {final.bytes_transferred}",
            f"wall time: {final.wall_time_ms} ms",
        ]
    (out_dir / "report.txt").write_text("\n".join(lines) + "\n")
    return manifest


def run_from_manifest(manifest_path: str | Path, out_dir: str | Path | None = None) -> RunResult:
    """Re-execute the run a manifest describes; metrics reproduce bitwise."""
    manifest = json.loads(Path(manifest_path).read_text())
    cfg = ExperimentConfig.from_dict(manifest["config"])
    return run_training(cfg, out_dir=out_dir)


# ---------------------------------------------------------------------------
# Experiment sweeps
# ---------------------------------------------------------------------------


def _run_name(mode: str, n_clients: int) -> str:
    return f"{mode}_c{n_clients:02d}"


def run_experiment1(
    base_cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
) -> dict:
    """Client sweep 5/7/10/20 for both protocols plus pooled and only-client.

    Produces a summary table (avg-over-clients and aggregated-model dice
    per client count) and a per-client table for the 10-client setting.
    """
    if base_cfg.data.num_train != max(EXP1_CLIENT_SWEEP):
        raise ValueError(
            f"experiment 1 sweeps up to {max(EXP1_CLIENT_SWEEP)} clients and needs "
            f"num_train={max(EXP1_CLIENT_SWEEP)}, got {base_cfg.data.num_train}"
        )
    out = Path(out_dir) if out_dir is not None else None
    runs: dict[str, RunResult] = {}

    def run_point(mode: str, n_clients: int) -> RunResult:
        cfg = replace(base_cfg, mode=mode, n_clients=n_clients,
                      split=SplitSpec(kind="uniform"))
        name = _run_name(mode, n_clients)
        result = run_training(cfg, out_dir=out / name if out else None)
        runs[name] = result
        return result

    summary_rows = []
    for n_clients in EXP1_CLIENT_SWEEP:
        fls = run_point("fls", n_clients)
        bt = run_point("braintorrent", n_clients)
        summary_rows.append(
            {
                "n_clients": n_clients,
                "images_per_client": round(base_cfg.data.num_train / n_clients),
                "fls_avg_dice": fls.final.avg_client_dice,
                "braintorrent_avg_dice": bt.final.avg_client_dice,
                "fls_aggregated_dice": fls.final.aggregated_model_dice,
                "braintorrent_aggregated_dice": bt.final.aggregated_model_dice,
            }
        )
    pooled = run_point("pooled", base_cfg.n_clients)
    only = run_point("only_client", 10)

    per_client_rows = [
        {"method": "braintorrent", "dice": runs[_run_name("braintorrent", 10)].final.per_client_dice},
        {"method": "fls", "dice": runs[_run_name("fls", 10)].final.per_client_dice},
        {"method": "only_client", "dice": only.final.per_client_dice},
    ]
    for row in per_client_rows:
        row["mean"] = float(np.mean(row["dice"]))

    tables = {
        "summary": summary_rows,
        "pooled_dice": pooled.final.aggregated_model_dice,
        "per_client_10": per_client_rows,
    }
    if out is not None:
        _write_exp1_tables(tables, out)
    return {"tables": tables, "runs": runs}


def _write_exp1_tables(tables: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary_clients.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["n_clients", "images_per_client", "fls_avg_dice", "braintorrent_avg_dice",
             "fls_aggregated_dice", "braintorrent_aggregated_dice"]
        )
        for row in tables["summary"]:
            writer.writerow(
                [row["n_clients"], row["images_per_client"]]
                + [format_real(row[k]) for k in
                   ("fls_avg_dice", "braintorrent_avg_dice",
                    "fls_aggregated_dice", "braintorrent_aggregated_dice")]
            )
        writer.writerow(["pooled", "", "", "", format_real(tables["pooled_dice"]), ""])
    with open(out / "per_client_10.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        n = len(tables["per_client_10"][0]["dice"])
        writer.writerow(["method"] + [f"client_{i:02d}" for i in range(n)] + ["mean"])
        for row in tables["per_client_10"]:
            writer.writerow([row["method"]]
                            + [format_real(d) for d in row["dice"]]
                            + [format_real(row["mean"])])


def run_experiment2(
    base_cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
) -> dict:
    """Non-uniform cohort shards (sizes 5/9/2/1/3) for both protocols plus pooled."""
    if base_cfg.data.num_train != sum(EXP2_COUNTS):
        raise ValueError(
            f"experiment 2 needs num_train={sum(EXP2_COUNTS)}, got {base_cfg.data.num_train}"
        )
    out = Path(out_dir) if out_dir is not None else None
    split = SplitSpec(kind="cohort", boundaries=EXP2_BOUNDARIES, counts=EXP2_COUNTS)
    runs: dict[str, RunResult] = {}
    rows = []
    for mode in ("braintorrent", "fls"):
        cfg = replace(base_cfg, mode=mode, n_clients=len(EXP2_COUNTS), split=split)
        result = run_training(cfg, out_dir=out / _run_name(mode, len(EXP2_COUNTS)) if out else None)
        runs[mode] = result
        rows.append(
            {
                "method": mode,
                "dice": result.final.per_client_dice,
                "avg": result.final.avg_client_dice,
                "aggregated": result.final.aggregated_model_dice,
            }
        )
    pooled_cfg = replace(base_cfg, mode="pooled", n_clients=len(EXP2_COUNTS), split=split)
    pooled = run_training(pooled_cfg, out_dir=out / "pooled" if out else None)
    runs["pooled"] = pooled

    tables = {
        "per_client": rows,
        "pooled_dice": pooled.final.aggregated_model_dice,
        "shard_sizes": [c.shard.sample_count for c in runs["fls"].final_clients],
        "bt_minus_fls_avg": rows[0]["avg"] - rows[1]["avg"],
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "cohort_table.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            n = len(rows[0]["dice"])
            writer.writerow(["method"] + [f"client_{i:02d}" for i in range(n)]
                            + ["avg", "aggregated"])
            for row in rows:
                writer.writerow([row["method"]] + [format_real(d) for d in row["dice"]]
                                + [format_real(row["avg"]), format_real(row["aggregated"])])
            writer.writerow(["pooled"] + [""] * n + ["", format_real(tables["pooled_dice"])])
    return {"tables": tables, "runs": runs}


# ---------------------------------------------------------------------------
# TCP peer process
# ---------------------------------------------------------------------------


def expected_versions(
    schedule: list[int], n_clients: int, upto: int, warmup: bool
) -> list[int]:
    """Own-version each client must have reached before round `upto` starts."""
    counts = [1 if warmup else 0] * n_clients
    for r in range(upto):
        counts[schedule[r]] += 1
    return counts


def _wait_for_versions(
    transport: TcpTransport,
    self_index: int,
    own_version: int,
    expected: list[int],
    deadline_s: float,
    allow_down: bool = False,
    poll_interval_s: float = 0.05,
) -> None:
    pending = {j for j in range(len(expected)) if j != self_index}
    if own_version < expected[self_index]:
        raise RuntimeError("local client is behind its own schedule")
    deadline = time.monotonic() + deadline_s
    while pending:
        for j in sorted(pending):
            try:
                if transport.ping(self_index, j) >= expected[j]:
                    pending.discard(j)
            except PeerUnreachableError:
                if allow_down:
                    pending.discard(j)
        if pending:
            if time.monotonic() > deadline:
                raise RuntimeError(f"peers {sorted(pending)} never reached {expected}")
            time.sleep(poll_interval_s)


def run_tcp_peer(
    cfg: ExperimentConfig,
    self_index: int,
    peers: list[PeerAddress],
    out_dir: str | Path,
    round_deadline_s: float = 120.0,
    grace_s: float = 2.0,
) -> Path:
    """Run one peer process of a serialized-schedule peer-protocol training.

    Every process derives the same data, shards, initial weights, and
    initiator schedule from the config. The initiator of round r polls
    peers (plain pings) until all earlier rounds have committed, so rounds
    execute in schedule order and the final weights match a simulated run
    bit for bit. A failed round retries after a short pause; atomicity
    makes the retry safe.
    """
    if cfg.mode != "braintorrent":
        raise ValueError("TCP peers run the peer-to-peer protocol only")
    if len(peers) != cfg.n_clients:
        raise ValueError(f"peer table has {len(peers)} entries for {cfg.n_clients} clients")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train, _ = build_dataset(cfg)
    shards = build_shards(cfg, train)
    state = _initial_clients(cfg, shards)[self_index]
    params = replace(
        _round_params(cfg, total_samples=sum(s.sample_count for s in shards)),
        on_unreachable="abort",
    )

    node = ClientNode(state)
    address = next(p for p in peers if p.client_index == self_index)
    host, port = address.host_port()
    server = TcpPeerServer(node, self_index, host, port)
    server.start()
    transport = TcpTransport(self_index, peers)
    try:
        n_rounds = bt_total_rounds(cfg)
        schedule = [pick_initiator(r, cfg.n_clients, cfg.seeds.initiator)
                    for r in range(n_rounds)]
        if cfg.bt_warmup:
            node.commit(local_update(node.state, params))

        for r, initiator in enumerate(schedule):
            if initiator != self_index:
                continue
            expected = expected_versions(schedule, cfg.n_clients, r, cfg.bt_warmup)
            _wait_for_versions(transport, self_index, node.version_entry(),
                               expected, round_deadline_s)
            deadline = time.monotonic() + round_deadline_s
            while True:
                try:
                    new_state, _ = run_initiator_round(node.state, transport, params)
                    node.commit(new_state)
                    break
                except PeerUnreachableError:
                    if time.monotonic() > deadline:
                        raise
                    time.sleep(0.1)

        final = expected_versions(schedule, cfg.n_clients, n_rounds, cfg.bt_warmup)
        _wait_for_versions(transport, self_index, node.version_entry(), final,
                           round_deadline_s, allow_down=True)
        weights_path = out_dir / f"client_{self_index}_weights.npy"
        np.save(weights_path, node.state.weights.params)
        time.sleep(grace_s)  # let slower peers finish their final polls
        return weights_path
    finally:
        server.stop()
