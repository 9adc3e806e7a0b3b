"""Command line: grembed run | sweep | eval | plan | worker | server | generate-sbm."""

import argparse
import asyncio
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

from dotenv import load_dotenv

from .cluster.driver import run, sweep
from .embedding.checkpoint import load_tables
from .evaluation.link_prediction import link_accuracy, read_split, tables_by_type
from .graph.generators import stochastic_block_model
from .graph.store import write_edge_list
from .models.data_models import GIB, Metric, PartitionStrategy, TrainConfig, WorkerConfig
from .server.param_server import run_server
from .server.partition import plan_partitions
from .utils.config import load_config, parse_overrides
from .utils.exceptions import GrembedError, InvalidParametersError
from .worker.worker import run_worker

logger = logging.getLogger(__name__)


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from e


def _number(text: str) -> int:
    """Integers that may be written as 30e9."""
    return int(float(text)) if any(c in text for c in "eE.") else int(text)


def _ranges(text: str) -> List[tuple]:
    out = []
    for part in text.split(","):
        start, _, stop = part.partition(":")
        out.append((int(start), int(stop)))
    return out


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="Flat key=value config file")
    parser.add_argument("--graph", type=Path, help="Edge list (overrides graph_path)")
    parser.add_argument("--out", type=Path, help="Output directory (overrides output_dir)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override any config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grembed", description="Distributed asynchronous graph-embedding training")
    parser.add_argument("--log-level", default=os.getenv("GREMBED_LOG_LEVEL", "INFO"))
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", help="Run the full pipeline once")
    _add_run_options(run_parser)
    run_parser.add_argument("--workers", type=int, help="Worker count (overrides worker_count)")

    sweep_parser = commands.add_parser("sweep", help="One run per worker count, plus a comparison table")
    _add_run_options(sweep_parser)
    sweep_parser.add_argument("--workers", type=_int_list, default=[1, 2, 4], help="Comma-separated worker counts")

    evaluate = commands.add_parser("eval", help="Link accuracy of saved checkpoints on a split file")
    evaluate.add_argument("--checkpoint", type=Path, required=True)
    evaluate.add_argument("--split", type=Path, required=True)
    evaluate.add_argument("--metric", choices=[m.value for m in Metric], default=Metric.DOT.value)
    evaluate.add_argument("--threshold", type=float, default=0.5)

    plan = commands.add_parser("plan", help="Partition-planner arithmetic for one table")
    plan.add_argument("--vertices", type=_number, required=True)
    plan.add_argument("--dim", type=int, required=True)
    plan.add_argument("--bytes-per-value", type=int, default=8)
    plan.add_argument("--capacity", type=_number, default=256 * 10 ** 9)
    plan.add_argument("--strategy", choices=[s.value for s in PartitionStrategy], default="row-wise")

    worker = commands.add_parser("worker", help="Run one worker against live servers")
    worker.add_argument("--config", type=Path, help="WorkerConfig JSON; flags below are ignored when given")
    worker.add_argument("--shard", type=Path)
    worker.add_argument("--routes", type=Path)
    worker.add_argument("--dim", type=int, default=16)
    worker.add_argument("--lr", type=float, default=0.05)
    worker.add_argument("--batch-size", type=int, default=256)
    worker.add_argument("--n-steps", type=int, default=10)
    worker.add_argument("--epochs", type=int, default=1)
    worker.add_argument("--budget-bytes", type=_number, default=2 * GIB)
    worker.add_argument("--seed", type=int, default=0)
    worker.add_argument("--worker-id", type=int, default=0)
    worker.add_argument("--metric", choices=[m.value for m in Metric], default=Metric.DOT.value)
    worker.add_argument("--dtype", choices=["float32", "float64"], default="float64")
    worker.add_argument("--report", type=Path, help="Write the final WorkerReport JSON here")

    server = commands.add_parser("server", help="Serve row ranges of one vertex type")
    server.add_argument("--checkpoint", type=Path, required=True, help="Initial table (.gemb)")
    server.add_argument("--server-id", type=int, required=True)
    server.add_argument("--vtype", type=int, required=True)
    server.add_argument("--ranges", type=_ranges, required=True, help="start:stop[,start:stop...]")
    server.add_argument("--host", default="127.0.0.1")
    server.add_argument("--port", type=int, default=0)

    sbm = commands.add_parser("generate-sbm", help="Write a stochastic-block-model edge list")
    sbm.add_argument("--blocks", type=_int_list, default=[1000, 1000])
    sbm.add_argument("--p-in", type=float, default=0.05)
    sbm.add_argument("--p-out", type=float, default=0.002)
    sbm.add_argument("--seed", type=int, default=0)
    sbm.add_argument("--out", type=Path, required=True)
    return parser


def _run_overrides(args: argparse.Namespace) -> Dict[str, object]:
    overrides: Dict[str, object] = dict(parse_overrides(args.overrides))
    for key, value in (("graph_path", args.graph), ("output_dir", args.out), ("seed", args.seed)):
        if value is not None:
            overrides[key] = value
    if args.command == "run" and args.workers is not None:
        overrides["worker_count"] = args.workers
    return overrides


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, _run_overrides(args))
    report = run(cfg, args.log_level)
    accuracy = "not evaluated" if report.final is None else f"total accuracy {report.final.total_accuracy:.2f}%"
    print(f"✅ {report.worker_count} worker(s): {accuracy} "
          f"({report.global_steps} global steps) -> {cfg.output_dir / 'report.json'}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, _run_overrides(args))
    rows = sweep(cfg, args.workers, args.log_level)
    print("workers\t+ve\t-ve\ttotal\tsteps_to_threshold\tstatus")
    for row in rows:
        print(f"{row.workers}\t{row.positive_accuracy}\t{row.negative_accuracy}\t{row.total_accuracy}\t"
              f"{row.steps_to_threshold}\t{row.status}")
    return 0 if all(row.status == "ok" for row in rows) else 1


def _cmd_eval(args: argparse.Namespace) -> int:
    split = read_split(args.split)
    tables = tables_by_type(split, load_tables(args.checkpoint))
    report = link_accuracy(tables, split, Metric(args.metric), args.threshold)
    print(report.model_dump_json())
    return 0


def _cmd_plan(args: argparse.Namespace) -> int:
    plan = plan_partitions([args.vertices], args.dim, args.bytes_per_value, args.capacity,
                           PartitionStrategy(args.strategy))
    print(json.dumps({
        "strategy": plan.strategy.value,
        "servers": plan.n_servers,
        "max_server_bytes": max(plan.server_bytes, default=0),
        "column_bytes": plan.column_bytes.get(0),
        "capacity": plan.server_capacity,
    }))
    return 0


def _cmd_worker(args: argparse.Namespace) -> int:
    if args.config is not None:
        cfg = WorkerConfig.model_validate_json(args.config.read_text(encoding="utf-8"))
    else:
        if args.shard is None or args.routes is None:
            raise InvalidParametersError("worker needs --config or both --shard and --routes", parameter="shard")
        cfg = WorkerConfig(
            shard_path=args.shard, routes_path=args.routes, budget_bytes=args.budget_bytes,
            worker_id=args.worker_id, seed=args.seed,
            train=TrainConfig(dim=args.dim, learning_rate=args.lr, batch_size=args.batch_size,
                              n_steps=args.n_steps, epochs=args.epochs, metric=args.metric, dtype=args.dtype),
        )
    report = asyncio.run(run_worker(cfg))
    if args.report is not None:
        args.report.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    return 1 if report.aborted else 0


def _cmd_server(args: argparse.Namespace) -> int:
    stats = asyncio.run(run_server(args.checkpoint, args.server_id, args.vtype, args.ranges, args.host, args.port))
    logger.info(f"Server {args.server_id} final counters: {stats}")
    return 0


def _cmd_generate_sbm(args: argparse.Namespace) -> int:
    graph, blocks = stochastic_block_model(args.blocks, args.p_in, args.p_out, args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_edge_list(graph, args.out)
    blocks_path = args.out.with_suffix(".blocks")
    blocks_path.write_text("".join(f"{v} {b}\n" for v, b in enumerate(blocks.tolist())), encoding="utf-8")
    print(f"✅ SBM with {graph.n_vertices} vertices and {graph.n_edges} edges -> {args.out}")
    return 0


COMMANDS = {
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "eval": _cmd_eval,
    "plan": _cmd_plan,
    "worker": _cmd_worker,
    "server": _cmd_server,
    "generate-sbm": _cmd_generate_sbm,
}


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level.upper(),
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except GrembedError as e:
        logger.error(json.dumps(e.to_dict(), default=str))
        return 1


if __name__ == "__main__":
    sys.exit(main())
