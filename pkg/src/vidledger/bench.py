"""Scaling benchmark: average transaction-creation time versus cameras per gateway.

All cameras stream into gateway 0 of an in-process cluster; the other
gateways replicate. Timing per transaction runs from "frame fully
received" to "append done and broadcast handed to the transport".
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import platform
import shutil
import statistics
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .cas import LocalStore
from .chunks import generate_stream
from .encoding import sha256
from .gateway import TimingRecord, wall_clock_ms
from .identity import generate_identity
from .sim import Cluster

log = logging.getLogger(__name__)

CSV_COLUMNS = ("camera_count", "txn_count", "mean_ms", "median_ms", "p95_ms",
               "extract_ms", "store_ms", "sign_ms", "append_ms")


@dataclass(frozen=True)
class ExperimentPlan:
    camera_counts: tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    chunks_per_camera: int = 180
    chunk_duration_ms: int = 10_000
    payload_bytes: int = 512 * 1024
    gateways: int = 4
    pacing: str = "max-rate"
    # Realtime pacing only: wall-clock seconds per footage second (1.0 = live).
    time_scale: float = 1.0
    seed: int = 0
    replicate_concurrently: bool = False

    def __post_init__(self):
        object.__setattr__(self, "camera_counts", tuple(self.camera_counts))
        if not self.camera_counts or any(c <= 0 for c in self.camera_counts):
            raise ValueError("camera_counts must be non-empty and positive")
        for name in ("chunks_per_camera", "chunk_duration_ms", "payload_bytes", "gateways"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.pacing not in ("realtime", "max-rate"):
            raise ValueError(f"pacing must be realtime or max-rate, not {self.pacing!r}")
        if self.time_scale <= 0:
            raise ValueError("time_scale must be positive")

    @classmethod
    def from_file(cls, path) -> "ExperimentPlan":
        doc = json.loads(Path(path).read_text())
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown plan keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class ResultRow:
    camera_count: int
    txn_count: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    extract_ms: float
    store_ms: float
    sign_ms: float
    append_ms: float
    errors: int = 0
    replicas_converged: bool = True
    sequences_ok: bool = True


@dataclass
class ExperimentResult:
    plan: ExperimentPlan
    rows: list[ResultRow] = field(default_factory=list)
    dirty: bool = False
    host: str = field(default_factory=lambda: f"{platform.node()} {platform.machine()} "
                                               f"{platform.python_implementation()} "
                                               f"{platform.python_version()}")

    def row(self, camera_count: int) -> ResultRow:
        for r in self.rows:
            if r.camera_count == camera_count:
                return r
        raise KeyError(camera_count)


def _p95(values: list[float]) -> float:
    if len(values) < 2:
        return values[0]
    return statistics.quantiles(values, n=100, method="inclusive")[94]


def _aggregate(count: int, recs: list[TimingRecord], errors: int) -> ResultRow:
    totals = [r.total_ms for r in recs]
    if not recs:
        nan = float("nan")
        return ResultRow(count, 0, nan, nan, nan, nan, nan, nan, nan, errors)
    mean = statistics.fmean
    return ResultRow(count, len(recs), mean(totals), statistics.median(totals), _p95(totals),
                     mean(r.extract_ms for r in recs), mean(r.store_ms for r in recs),
                     mean(r.sign_ms for r in recs), mean(r.append_ms for r in recs), errors)


def _camera_worker(cluster: Cluster, camera, index: int, count: int, plan: ExperimentPlan,
                   t0: float, errors: list) -> None:
    gw = cluster[0]
    frames = generate_stream(plan.chunks_per_camera * plan.chunk_duration_ms,
                             plan.chunk_duration_ms, payload_bytes=plan.payload_bytes,
                             seed=plan.seed * 100_003 + index)
    period = plan.chunk_duration_ms / 1000 * plan.time_scale
    offset = period * index / count  # cameras are not phase-aligned
    for k, frame in enumerate(frames):
        if plan.pacing == "realtime":
            delay = t0 + offset + k * period - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
        try:
            if gw.process_chunk(camera.public_key, frame) is None:
                errors.append((index, k, "buffered"))
        except Exception as exc:  # recorded, excluded from timing
            errors.append((index, k, repr(exc)))
    leftover = gw.retry_pending(camera.public_key)
    if gw.backlog(camera.public_key):
        errors.append((index, -1, f"{gw.backlog(camera.public_key)} chunks never stored"))
    elif leftover:
        log.info("camera %d: %d buffered chunks stored late", index, len(leftover))


def run_count(plan: ExperimentPlan, count: int, workdir: Path) -> ResultRow:
    store_dir = Path(tempfile.mkdtemp(prefix=f"cas-{count}-", dir=workdir))
    try:
        f = (plan.gateways - 1) // 3
        cluster = Cluster(LocalStore(store_dir), n=plan.gateways, f=f, seed=plan.seed,
                          clock=wall_clock_ms)
        cameras = [generate_identity(sha256(f"camera-{plan.seed}-{i}".encode()))
                   for i in range(count)]
        for cam in cameras:
            if not cluster.bootstrap(cam.public_key, via=0):
                raise RuntimeError("camera bootstrap did not complete")
        errors: list = []
        stop = threading.Event()
        pump = None
        if plan.replicate_concurrently:
            def pump_loop():
                while not stop.is_set():
                    if not cluster.network.pump(256):
                        time.sleep(0.001)
            pump = threading.Thread(target=pump_loop, daemon=True)
            pump.start()
        t0 = time.perf_counter()
        workers = [threading.Thread(target=_camera_worker,
                                    args=(cluster, cam, i, count, plan, t0, errors))
                   for i, cam in enumerate(cameras)]
        for w in workers:
            w.start()
        for w in workers:
            w.join()
        stop.set()
        if pump is not None:
            pump.join()
        cluster.settle()
        gw = cluster[0]
        row = _aggregate(count, list(gw.metrics), len(errors))
        row.replicas_converged = cluster.converged()
        row.sequences_ok = all(
            [t.sequence_number for t in gw.ledger.find_block(c.public_key).transactions]
            == list(range(len(gw.ledger.find_block(c.public_key).transactions)))
            for c in cameras)
        for e in errors[:5]:
            log.warning("camera %s chunk %s failed: %s", *e)
        return row
    finally:
        shutil.rmtree(store_dir, ignore_errors=True)


def run_experiment(plan: ExperimentPlan, out_csv=None, workdir=None) -> ExperimentResult:
    result = ExperimentResult(plan)
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        for count in plan.camera_counts:
            row = run_count(plan, count, Path(tmp))
            expected = count * plan.chunks_per_camera
            if row.errors or row.txn_count != expected:
                log.warning("%d cameras: %d/%d transactions, %d errors", count,
                            row.txn_count, expected, row.errors)
                result.dirty = True
            log.info("%d cameras: mean %.3f ms over %d transactions", count, row.mean_ms,
                     row.txn_count)
            result.rows.append(row)
    if out_csv is not None:
        write_csv(result, out_csv)
    return result


def write_csv(result: ExperimentResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in result.rows:
            w.writerow([r.camera_count, r.txn_count]
                       + [f"{getattr(r, c):.4f}" for c in CSV_COLUMNS[2:]])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("camera_count", "txn_count") else float(v))
             for k, v in row.items()} for row in rows]


def summarize(result: ExperimentResult, baseline_count: int) -> list[tuple[int, float, float]]:
    """(camera_count, mean_ms, mean / baseline mean) rows sorted by count."""
    try:
        base = result.row(baseline_count).mean_ms
    except KeyError:
        raise ValueError(f"result has no row for baseline count {baseline_count}") from None
    return sorted((r.camera_count, r.mean_ms, r.mean_ms / base) for r in result.rows)


def plot(rows: list[dict], path, title: str | None = None) -> None:
    """Write a latency-vs-cameras chart; the format follows the file suffix."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = sorted(rows, key=lambda r: r["camera_count"])
    x = [r["camera_count"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.fill_between(x, [r["median_ms"] for r in rows], [r["p95_ms"] for r in rows],
                    color="tab:blue", alpha=0.15, label="median to p95")
    ax.plot(x, [r["mean_ms"] for r in rows], "o-", color="tab:blue", label="mean (steps 1-4)")
    ax.plot(x, [r["extract_ms"] + r["store_ms"] for r in rows], "s--", color="tab:gray",
            label="steps 1-2 only")
    ax.set_xscale("log", base=2)
    ax.set_xticks(x)
    ax.set_xticklabels([str(v) for v in x])
    ax.set_ylim(bottom=0)
    ax.set_xlabel("cameras per gateway")
    ax.set_ylabel("transaction creation time (ms)")
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
