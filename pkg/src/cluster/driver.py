"""Pipeline driver: data preparation, local server/worker processes, convergence and reports."""

import asyncio
import json
import logging
import os
import shutil
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import AsyncIterator, Callable, Dict, List, Optional, Sequence

import numpy as np

from ..embedding.checkpoint import CHECKPOINT_SUFFIX, load_tables, save_tables
from ..embedding.core import EmbeddingTable, init_embeddings
from ..evaluation.convergence import ConvergenceLog
from ..evaluation.link_prediction import EvalSplit, link_accuracy, split_edges, tables_by_type, write_split
from ..graph.shards import write_shard
from ..graph.store import Graph, load_edge_list, write_id_map
from ..graph.walks import RowBlock, attach_negatives, describe_dataset, generate_pairs, occurrence_counts, shard_rows
from ..models.data_models import (
    AccuracyReport,
    DatasetDescription,
    PartitionPlan,
    PartitionStrategy,
    RouteTable,
    RunConfig,
    RunReport,
    SubsetProgress,
    SweepRow,
    WorkerConfig,
    WorkerReport,
)
from ..server.client import ClusterClient, summed_stats
from ..server.partition import plan_partitions
from ..utils.config import flatten_config
from ..utils.exceptions import GrembedError, StageError

logger = logging.getLogger(__name__)

PROJECT_ROOT = Path(__file__).resolve().parents[2]
NOISE_STREAM = 1 << 32
INIT_STREAM = 1 << 33
WORKER_STREAM = 1 << 34
SPAWN_ATTEMPTS = 3
SHUTDOWN_GRACE = 10.0
EVAL_TAG = "eval"


def derived_seed(seed: int, *stream: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=stream).generate_state(1)[0])


@contextmanager
def stage(name: str):
    """Wrap any failure inside the block as a StageError naming the stage."""
    logger.info(f"Stage '{name}' started")
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        logger.error(f"Stage '{name}' failed: {e}")
        raise StageError(f"stage '{name}' failed: {e}", stage=name, original_error=e) from e


# ------------------------------------------------------------- preparation


@dataclass
class PreparedRun:
    """Everything on disk before any process starts."""
    graph: Graph
    split: EvalSplit
    dataset: DatasetDescription
    shard_paths: List[Path]
    init_dir: Path
    plan: PartitionPlan
    routes: RouteTable


def prepare(cfg: RunConfig, out: Path) -> PreparedRun:
    with stage("load"):
        graph = load_edge_list(
            cfg.graph_path, typed=cfg.typed, undirected=cfg.undirected, type_labels=cfg.type_labels
        )
        write_id_map(graph, out / "id_map.txt")
        logger.info(f"Loaded {graph.n_vertices} vertices, {graph.n_edges} edges from {cfg.graph_path}")

    with stage("split"):
        split = split_edges(graph, cfg.split_ratio, cfg.seed, cfg.eval_negatives_ratio, cfg.walk.max_attempts)
        write_split(split, out / "split.txt")
        train_graph = split.train_graph

    with stage("walks"):
        blocks = list(generate_pairs(train_graph, cfg.walk))
        truncated = sum(block.truncated_walks for block in blocks)
        if truncated:
            logger.warning(f"{truncated} walk(s) ended early at dead ends")
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(NOISE_STREAM,)))
        rows = RowBlock.concat(
            list(attach_negatives(train_graph, blocks, cfg.train.k, cfg.walk.max_attempts, rng, cfg.walk.noise)),
            k=cfg.train.k,
        )
        dataset = describe_dataset(train_graph, cfg.walk, cfg.train.k, rows=len(rows), truncated=truncated)
        logger.info(f"Generated {len(rows)} training rows")

    with stage("shard"):
        shard_dir = out / "shards"
        shard_dir.mkdir(parents=True, exist_ok=True)
        shard_paths = []
        for shard in shard_rows(rows, cfg.worker_count):
            path = shard_dir / f"shard_{shard.shard_index}.gwlk"
            write_shard(shard.rows, path)
            shard_paths.append(path)

    with stage("init"):
        labels = [vt.label for vt in graph.vertex_types]
        tables = {
            label: init_embeddings(count, cfg.train.dim, derived_seed(cfg.seed, INIT_STREAM, vtype),
                                   cfg.train.dtype, label)
            for vtype, (label, count) in enumerate(zip(labels, graph.counts)) if count
        }
        init_dir = out / "init"
        save_tables(tables, init_dir)

    with stage("plan"):
        plan = plan_partitions(
            graph.counts, cfg.train.dim, cfg.train.bytes_per_value, cfg.server_capacity,
            PartitionStrategy.ROW_WISE, occurrence_counts(train_graph, rows), cfg.min_servers_per_type,
        )
        routes = plan.to_route_table(labels, graph.counts, cfg.train.dim)

    return PreparedRun(graph, split, dataset, shard_paths, init_dir, plan, routes)


# ------------------------------------------------------------- supervision


@dataclass
class Child:
    name: str
    process: asyncio.subprocess.Process
    log_path: Path
    reader: Optional[asyncio.Task] = None


@dataclass
class Supervisor:
    """Spawns `python -m src.cli ...` children and reaps them."""
    log_dir: Path
    log_level: str = "INFO"
    children: List[Child] = field(default_factory=list)

    async def spawn(self, name: str, args: Sequence[str]) -> Child:
        self.log_dir.mkdir(parents=True, exist_ok=True)
        log_path = self.log_dir / f"{name}.log"
        env = dict(os.environ)
        env["PYTHONPATH"] = os.pathsep.join(filter(None, [str(PROJECT_ROOT), env.get("PYTHONPATH")]))
        with open(log_path, "ab") as log_file:
            process = await asyncio.create_subprocess_exec(
                sys.executable, "-m", "src.cli", "--log-level", self.log_level, *map(str, args),
                stdout=asyncio.subprocess.PIPE, stderr=log_file, cwd=str(PROJECT_ROOT), env=env,
            )
        child = Child(name, process, log_path)
        self.children.append(child)
        logger.debug(f"Spawned {name} (pid {process.pid})")
        return child

    def follow(self, child: Child, on_line: Callable[[str], None]) -> None:
        """Drain the child's stdout in the background, one line at a time."""
        async def drain():
            while True:
                line = await child.process.stdout.readline()
                if not line:
                    break
                on_line(line.decode("utf-8", errors="replace").strip())
        child.reader = asyncio.create_task(drain())

    async def wait(self, child: Child, timeout: Optional[float] = None) -> int:
        code = await asyncio.wait_for(child.process.wait(), timeout)
        if child.reader is not None:
            await child.reader
        return code

    async def reap(self) -> None:
        """Terminate anything still running, then wait for every child."""
        for child in self.children:
            if child.process.returncode is None:
                try:
                    await asyncio.wait_for(child.process.wait(), SHUTDOWN_GRACE)
                except asyncio.TimeoutError:
                    logger.warning(f"{child.name} did not exit; killing it")
                    child.process.kill()
                    await child.process.wait()
            if child.reader is not None and not child.reader.done():
                child.reader.cancel()
        self.children.clear()


async def start_server(supervisor: Supervisor, cfg: RunConfig, prepared: PreparedRun, server_id: int) -> str:
    """Launch one server on an ephemeral port and return its host:port."""
    vtype = prepared.plan.server_types[server_id]
    ranges = [(a.row_start, a.row_stop) for a in prepared.plan.assignments if a.server_id == server_id]
    label = prepared.routes.type_labels[vtype]
    args = [
        "server", "--checkpoint", prepared.init_dir / f"{label}{CHECKPOINT_SUFFIX}",
        "--server-id", server_id, "--vtype", vtype,
        "--ranges", ",".join(f"{a}:{b}" for a, b in ranges), "--host", "127.0.0.1", "--port", 0,
    ]
    for attempt in range(1, SPAWN_ATTEMPTS + 1):
        child = await supervisor.spawn(f"server_{server_id}", args)
        try:
            line = await asyncio.wait_for(child.process.stdout.readline(), cfg.startup_timeout)
            event = json.loads(line) if line else {}
        except (asyncio.TimeoutError, json.JSONDecodeError):
            event = {}
        if event.get("event") == "listening":
            supervisor.follow(child, lambda text: logger.debug(f"server_{server_id}: {text}"))
            return f"{event.get('host', '127.0.0.1')}:{event['port']}"
        logger.warning(f"Server {server_id} did not come up (attempt {attempt}); see {child.log_path}")
        if child.process.returncode is None:
            child.process.kill()
        await child.process.wait()
    raise StageError(f"server {server_id} failed to start after {SPAWN_ATTEMPTS} attempts", stage="servers")


# ---------------------------------------------------------------- the run


class StepCounter:
    """Global step = completed batches summed over workers, fed by progress lines."""

    def __init__(self):
        self.value = 0
        self._queue: asyncio.Queue = asyncio.Queue()

    def on_line(self, worker: str, line: str) -> None:
        try:
            progress = SubsetProgress.model_validate_json(line)
        except ValueError:
            logger.debug(f"{worker}: {line}")
            return
        self.value += progress.batches
        self._queue.put_nowait(self.value)

    def close(self) -> None:
        self._queue.put_nowait(None)

    async def steps(self) -> AsyncIterator[int]:
        """Latest global step after each burst of progress; ends at close()."""
        while True:
            step = await self._queue.get()
            if step is None:
                return
            while not self._queue.empty():
                newer = self._queue.get_nowait()
                if newer is None:
                    yield step
                    return
                step = newer
            yield step


async def fetch_tables(client: ClusterClient, routes: RouteTable) -> Dict[int, np.ndarray]:
    return {
        vtype: await client.fetch_table(vtype)
        for vtype, count in enumerate(routes.type_counts) if count
    }


async def run_async(cfg: RunConfig, log_level: str = "INFO") -> RunReport:
    """Run the whole pipeline once and write report.json, the convergence CSV and the checkpoint."""
    started = time.monotonic()
    out = Path(cfg.output_dir).resolve()
    out.mkdir(parents=True, exist_ok=True)
    prepared = prepare(cfg, out)
    routes = prepared.routes
    supervisor = Supervisor(out / "logs", log_level)
    counter = StepCounter()
    eval_client: Optional[ClusterClient] = None
    try:
        with stage("servers"):
            for sid in range(prepared.plan.n_servers):
                routes.servers[sid] = await start_server(supervisor, cfg, prepared, sid)
            routes_path = out / "routes.json"
            routes_path.write_text(routes.model_dump_json(indent=2), encoding="utf-8")
            logger.info(f"{prepared.plan.n_servers} server(s) listening")

        evaluable = len(prepared.split.positives) > 0 and len(prepared.split.negatives) > 0
        if not evaluable:
            logger.warning("Held-out split is empty; link accuracy will not be evaluated")
        eval_client = ClusterClient(routes, tag=EVAL_TAG)
        await eval_client.connect()

        async def evaluate(step: int) -> AccuracyReport:
            tables = await fetch_tables(eval_client, routes)
            return link_accuracy(tables, prepared.split, cfg.train.metric, cfg.threshold, step)

        log = ConvergenceLog(evaluate, cfg.eval_cadence)

        async def follow_steps():
            async for step in counter.steps():
                if evaluable:
                    await log.advance(step)

        with stage("workers"):
            worker_dir = out / "workers"
            worker_dir.mkdir(parents=True, exist_ok=True)
            workers = []
            for i, shard_path in enumerate(prepared.shard_paths):
                wcfg = WorkerConfig(
                    shard_path=shard_path, routes_path=routes_path, train=cfg.train,
                    budget_bytes=cfg.budget_bytes, worker_id=i, seed=derived_seed(cfg.seed, WORKER_STREAM, i),
                )
                config_path = worker_dir / f"worker_{i}.json"
                config_path.write_text(wcfg.model_dump_json(indent=2), encoding="utf-8")
                report_path = worker_dir / f"worker_{i}_report.json"
                child = await supervisor.spawn(f"worker_{i}", ["worker", "--config", config_path,
                                                               "--report", report_path])
                supervisor.follow(child, lambda line, name=child.name: counter.on_line(name, line))
                workers.append((child, report_path))
            follower = asyncio.create_task(follow_steps())
            codes = [await supervisor.wait(child) for child, _ in workers]
            counter.close()
            await follower
            reports = [
                WorkerReport.model_validate_json(path.read_text(encoding="utf-8")) if path.exists()
                else WorkerReport(worker_id=i, aborted=True, error="no report written")
                for i, (_, path) in enumerate(workers)
            ]
            failed = [r.worker_id for code, r in zip(codes, reports) if code != 0 or r.aborted]
            if failed:
                raise StageError(f"worker(s) {failed} failed; see {out / 'logs'}", stage="workers")

        with stage("checkpoint"):
            fetched = await fetch_tables(eval_client, routes)
            tables = {
                routes.type_labels[vtype]: EmbeddingTable(values.astype(cfg.train.dtype), routes.type_labels[vtype])
                for vtype, values in fetched.items()
            }
            checkpoint_dir = out / "checkpoint"
            save_tables(tables, checkpoint_dir)

        with stage("evaluate"):
            final = None
            if evaluable:
                final = link_accuracy(
                    tables_by_type(prepared.split, load_tables(checkpoint_dir)), prepared.split,
                    cfg.train.metric, cfg.threshold, counter.value,
                )
                await log.finish(counter.value, final)
            csv_path = out / f"convergence_w{cfg.worker_count}.csv"
            log.write_csv(csv_path, flatten_config(cfg))
            stats = summed_stats(await eval_client.stats())

        with stage("shutdown"):
            await eval_client.shutdown()
            eval_client = None
            await supervisor.reap()
    finally:
        if eval_client is not None:
            try:
                await eval_client.shutdown()
            except (GrembedError, OSError) as e:
                logger.warning(f"Could not shut servers down cleanly: {e}")
        for child in supervisor.children:
            if child.process.returncode is None:
                child.process.terminate()
        await supervisor.reap()

    report = RunReport(
        worker_count=cfg.worker_count,
        config=flatten_config(cfg),
        dataset=prepared.dataset,
        worker_reports=reports,
        final=final,
        steps_to_threshold=log.steps_to_threshold(cfg.accuracy_target),
        global_steps=counter.value,
        wall_ms=(time.monotonic() - started) * 1000.0,
        convergence_csv=str(csv_path),
        checkpoint_dir=str(checkpoint_dir),
        server_stats=stats,
    )
    (out / "report.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
    accuracy = "not evaluated" if final is None else f"total accuracy {final.total_accuracy:.2f}%"
    logger.info(f"Run with {cfg.worker_count} worker(s): {accuracy} after {counter.value} global steps")
    return report


def run(cfg: RunConfig, log_level: str = "INFO") -> RunReport:
    return asyncio.run(run_async(cfg, log_level))


# ------------------------------------------------------------------- sweep


SWEEP_COLUMNS = ("workers", "pos_acc", "neg_acc", "total_acc", "steps_to_threshold", "status")


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.2f}"


def write_sweep_table(rows: Sequence[SweepRow], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\t".join(SWEEP_COLUMNS) + "\n")
        for row in rows:
            handle.write("\t".join([
                str(row.workers), _fmt(row.positive_accuracy), _fmt(row.negative_accuracy),
                _fmt(row.total_accuracy), "" if row.steps_to_threshold is None else str(row.steps_to_threshold),
                row.status,
            ]) + "\n")


async def sweep_async(cfg: RunConfig, worker_counts: Sequence[int], log_level: str = "INFO") -> List[SweepRow]:
    """One full run per worker count with the same seed; failures are recorded and the sweep goes on."""
    if not worker_counts:
        raise StageError("sweep needs at least one worker count", stage="sweep")
    out = Path(cfg.output_dir).resolve()
    out.mkdir(parents=True, exist_ok=True)
    rows: List[SweepRow] = []
    used: Dict[str, int] = {}
    for workers in worker_counts:
        name = f"w{workers}"
        used[name] = used.get(name, 0) + 1
        run_dir = out / (name if used[name] == 1 else f"{name}_{used[name]}")
        run_cfg = RunConfig.model_validate({**cfg.model_dump(), "worker_count": workers, "output_dir": run_dir})
        try:
            report = await run_async(run_cfg, log_level)
        except GrembedError as e:
            logger.error(f"Sweep run with {workers} worker(s) failed: {e.message}")
            rows.append(SweepRow(workers=workers, status="failed", error=e.message))
            continue
        shutil.copyfile(report.convergence_csv, out / Path(report.convergence_csv).name)
        final = report.final
        rows.append(SweepRow(
            workers=workers,
            positive_accuracy=final.positive_accuracy if final else None,
            negative_accuracy=final.negative_accuracy if final else None,
            total_accuracy=final.total_accuracy if final else None,
            steps_to_threshold=report.steps_to_threshold,
        ))
    write_sweep_table(rows, out / "sweep_table.tsv")
    (out / "sweep.json").write_text(
        json.dumps([row.model_dump() for row in rows], indent=2), encoding="utf-8"
    )
    return rows


def sweep(cfg: RunConfig, worker_counts: Sequence[int], log_level: str = "INFO") -> List[SweepRow]:
    return asyncio.run(sweep_async(cfg, worker_counts, log_level))
