"""Scheme runs, metrics rows, CSV output and the comparison summary."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import attack, fedproto, privacy, radionet
from .config import ExperimentConfig
from .rng import stream
from .synthdata import generate_dataset, partition_clients

log = logging.getLogger(__name__)

CSV_HEADER = (
    "scheme,seed,round,train_mse,val_mse,val_mse_db,privacy_rmse_m,"
    "w_1,w_2,w_3,sigma_1,sigma_2,sigma_3"
).split(",")
ERROR_MARKER = "ERROR"


def mse_db(mse: float) -> float:
    if not mse > 0:
        raise ValueError(f"mse must be positive, got {mse}")
    return 10.0 * math.log10(mse)


@dataclass
class MetricsRow:
    scheme: str
    seed: int
    round: int
    train_mse: float
    val_mse: float
    val_mse_db: float
    privacy_rmse_m: float | None = None
    w: tuple[float, ...] | None = None
    sigma: tuple[float, ...] | None = None
    clip_fraction: float = 0.0

    def csv_fields(self) -> list[str]:
        def fmt(x):
            if x is None or (isinstance(x, float) and not math.isfinite(x)):
                return "NA"
            return f"{x:.9g}"

        w = self.w if self.w is not None else (None,) * 3
        s = self.sigma if self.sigma is not None else (None,) * 3
        return [
            self.scheme,
            str(self.seed),
            str(self.round),
            fmt(self.train_mse),
            fmt(self.val_mse),
            fmt(self.val_mse_db),
            fmt(self.privacy_rmse_m),
            *map(fmt, w),
            *map(fmt, s),
        ]


@dataclass
class _ClientResult:
    update: fedproto.ClientUpdate
    telemetry: privacy.Telemetry
    traces: list


def _client_round(ctx, k: int, params, plan: fedproto.RoundPlan):
    cfg, seed, scheme = ctx["config"], ctx["seed"], ctx["scheme"]
    client, defense, masks = ctx["clients"][k], ctx["defenses"][k], ctx["masks"]
    r, phase, R = plan.round_index, plan.phase, cfg.fed.rounds
    pi = privacy.phase_indicator(phase)

    train_rng = stream(seed, r, k, "train")
    if scheme == "fedsgd":
        update = fedproto.fedsgd_step(params, client, plan, train_rng)
    else:
        update = fedproto.local_train(params, client, plan, train_rng)
    raw = update.delta.data
    stats = privacy.extract_stats(raw, masks, r, R, pi)

    probe_rng = stream(seed, r, k, "probe")
    n = len(client.shard)
    probes = probe_rng.choice(n, size=min(cfg.attack.probes_per_client, n), replace=False)
    raw_traces = [
        attack.collect_trace(
            params, client.shard[int(i)], phase, cfg.attack.steps, plan.local_lr,
            client_id=k, round_index=r, max_grad_norm=plan.max_grad_norm,
        )
        for i in probes
    ]
    trace_stats = [
        np.stack([privacy.extract_stats(step, masks, r, R, pi) for step in t.raw])
        for t in raw_traces
    ]

    if scheme == "adaptive":
        for t, st in zip(raw_traces, trace_stats):
            defense.remember(t.raw, st, t.coord_m)
        for i in range(cfg.defense.proxy_steps_per_round):
            defense.train_proxy(stream(seed, r, k, "proxy", i))
        for i in range(cfg.defense.allocator_steps_per_round):
            batch_rng = stream(seed, r, k, "evalbatch", i)
            idx = batch_rng.permutation(n)[: plan.batch_size]
            defense.train_allocator(
                params, phase, client.shard.inputs()[idx], client.shard.targets()[idx],
                raw, stats, stream(seed, r, k, "alloc", i),
            )

    sent, telemetry = defense.apply(raw, stats, stream(seed, r, k, "upload"))
    update.delta = update.delta.with_data(sent)

    traces = []
    for j, (t, st) in enumerate(zip(raw_traces, trace_stats)):
        trng = stream(seed, r, k, "trace", j)
        t.steps = np.stack([defense.apply(step, s, trng)[0] for step, s in zip(t.raw, st)])
        t.raw = None
        traces.append(t)
    return _ClientResult(update, telemetry, traces)


def run_scheme(
    config: ExperimentConfig,
    scheme: str,
    master_seed: int,
    workers: int | None = None,
    trace_sink: list | None = None,
) -> list[MetricsRow]:
    """Full federated run of one scheme; one metrics row per round."""
    fed, dcfg = config.fed, replace(config.defense, scheme=scheme)
    workers = fed.workers if workers is None else workers
    spec = config.data.spec
    data = generate_dataset(
        stream(config.data.seed, master_seed, "data"),
        spec,
        config.data.n_maps,
        config.data.tx_per_map,
    )
    shards, val_idx = partition_clients(
        data.map_id, fed.clients, stream(master_seed, "partition"), config.data.val_maps
    )
    clients = fedproto.make_clients(data, shards)
    val = data.subset(val_idx)
    val_x, val_y = val.inputs(), val.targets()
    masks = radionet.build_group_masks(config.model)
    params = radionet.init_params(stream(master_seed, "init"), config.model)
    extent = float(max(spec.extent_m))
    defenses = [
        privacy.ClientDefense.create(
            dcfg, masks, stream(master_seed, "defense", k), config.attack.steps,
            config.attack.hidden, extent,
        )
        for k in range(fed.clients)
    ]
    ctx = {
        "config": config, "seed": master_seed, "scheme": scheme,
        "clients": clients, "defenses": defenses, "masks": masks,
    }
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    traces: list[attack.UploadTrace] = []
    rows = []
    try:
        for r in range(fed.rounds):
            phase = "joint" if scheme == "fedsgd" else fedproto.phase_for_round(r, fed.split)
            selected = fedproto.select_clients(
                stream(master_seed, r, "select"), fed.clients, fed.per_round
            )
            plan = fedproto.RoundPlan(
                r, phase, selected, fed.local_epochs, fed.batch_size, fed.lr, fed.max_grad_norm
            )
            try:
                if pool is None:
                    results = [_client_round(ctx, k, params, plan) for k in selected]
                else:
                    results = list(pool.map(lambda k: _client_round(ctx, k, params, plan), selected))
            except Exception as exc:
                raise RuntimeError(f"scheme={scheme} seed={master_seed} round={r}: {exc}") from exc
            params = fedproto.apply_update(
                params, fedproto.aggregate([res.update for res in results]), phase
            )
            for res in results:
                traces.extend(res.traces)

            train_mse = float(np.mean([res.update.train_loss for res in results]))
            with np.errstate(over="ignore", invalid="ignore"):
                pred = radionet.predict(params, val_x, phase)
                val_mse = float(np.mean((pred - val_y) ** 2))
            val_db = mse_db(val_mse) if val_mse > 0 and math.isfinite(val_mse) else float("nan")
            rmse = None
            if len(traces) >= config.attack.min_traces:
                rmse = attack.eval_attacker(
                    traces, masks, config.attack, stream(master_seed, r, "attacker"), extent
                )
            tel = [res.telemetry for res in results]
            w = sig = None
            if tel[0].w is not None:
                w = tuple(np.mean([t.w for t in tel], axis=0).tolist())
                sig = tuple(np.mean([t.sigma for t in tel], axis=0).tolist())
            rows.append(
                MetricsRow(
                    scheme, master_seed, r, train_mse, val_mse, val_db, rmse, w, sig,
                    float(np.mean([t.clipped for t in tel])),
                )
            )
    finally:
        if pool is not None:
            pool.shutdown()
    if trace_sink is not None:
        trace_sink.extend(traces)
    return rows


def _run_cell(args):
    config, scheme, seed, want_traces = args
    sink = [] if want_traces else None
    try:
        return scheme, seed, run_scheme(config, scheme, seed, trace_sink=sink), sink, None
    except Exception as exc:  # partial-failure policy: record and continue
        return scheme, seed, None, None, f"{type(exc).__name__}: {exc}"


def run_comparison(
    config: ExperimentConfig,
    schemes=None,
    seeds=None,
    out: str | Path | None = None,
    traces_out: str | Path | None = None,
    cell_workers: int = 1,
):
    """All (scheme, seed) cells; writes the CSV and returns ``(rows, failures)``.

    ``rows`` contains :class:`MetricsRow` objects and, for failed cells,
    ``(scheme, seed, message)`` tuples in their (scheme, seed) position.
    """
    schemes = tuple(schemes or config.schemes)
    seeds = tuple(seeds or config.seeds)
    cells = [(config, s, seed, traces_out is not None) for s in schemes for seed in seeds]
    if cell_workers > 1:
        with ProcessPoolExecutor(max_workers=cell_workers) as ex:
            results = list(ex.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    rows, failures, all_traces = [], [], []
    for scheme, seed, cell_rows, cell_traces, err in results:
        if err is not None:
            log.error("cell scheme=%s seed=%s failed: %s", scheme, seed, err)
            failures.append((scheme, seed, err))
            rows.append((scheme, seed, err))
            continue
        rows.extend(cell_rows)
        if cell_traces:
            all_traces.extend(cell_traces)
    if out is not None:
        Path(out).write_text(format_csv(rows), encoding="utf-8", newline="")
    if traces_out is not None:
        attack.write_traces(traces_out, all_traces)
    return rows, failures


def format_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        if isinstance(row, MetricsRow):
            writer.writerow(row.csv_fields())
        else:
            scheme, seed, _ = row
            writer.writerow([scheme, seed, ERROR_MARKER] + ["NA"] * (len(CSV_HEADER) - 3))
    return buf.getvalue()


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return list(reader)


def _num(value: str) -> float:
    return float("nan") if value == "NA" else float(value)


def summarize(records: list[dict]) -> list[dict]:
    """Per scheme: seed-mean of best (minimum) val MSE dB and of final privacy RMSE."""
    by_cell: dict[tuple[str, str], list[dict]] = {}
    for rec in records:
        if rec["round"] == ERROR_MARKER:
            continue
        by_cell.setdefault((rec["scheme"], rec["seed"]), []).append(rec)
    order = [s for s in privacy.SCHEMES if any(k[0] == s for k in by_cell)]
    order += sorted({k[0] for k in by_cell} - set(order))
    summary = []
    for scheme in order:
        best, final, final_mse = [], [], []
        for (s, _), recs in sorted(by_cell.items()):
            if s != scheme:
                continue
            recs = sorted(recs, key=lambda rec: int(rec["round"]))
            dbs = [_num(rec["val_mse_db"]) for rec in recs]
            finite = [v for v in dbs if math.isfinite(v)]
            best.append(min(finite) if finite else float("nan"))
            final_mse.append(dbs[-1])
            final.append(_num(recs[-1]["privacy_rmse_m"]))
        summary.append(
            {
                "scheme": scheme,
                "seeds": len(best),
                "best_val_mse_db": float(np.mean(best)),
                "final_val_mse_db": float(np.mean(final_mse)),
                "final_privacy_rmse_m": float(np.mean(final)),
            }
        )
    return summary


def summary_rows(rows) -> list[dict]:
    """:func:`summarize` applied to in-memory rows."""
    text = format_csv(rows)
    return summarize(list(csv.DictReader(io.StringIO(text))))


def format_summary(summary: list[dict]) -> str:
    lines = [
        f"{'scheme':<18}{'seeds':>6}{'best val MSE (dB)':>20}"
        f"{'final val MSE (dB)':>20}{'privacy RMSE (m)':>19}"
    ]
    for s in summary:
        lines.append(
            f"{s['scheme']:<18}{s['seeds']:>6}{s['best_val_mse_db']:>20.2f}"
            f"{s['final_val_mse_db']:>20.2f}{s['final_privacy_rmse_m']:>19.2f}"
        )
    return "\n".join(lines)
