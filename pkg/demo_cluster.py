#!/usr/bin/env python3
"""
Demo: train embeddings for a small two-community graph on a local cluster.

Optional environment variables:
- GREMBED_WORKER_COUNT: workers to launch (default 2)
- GREMBED_OUTPUT_DIR: where the run writes its outputs (default runs/demo)
"""

import logging
import os
from pathlib import Path

from dotenv import load_dotenv

from src.cluster.driver import run
from src.graph.generators import stochastic_block_model
from src.graph.store import write_edge_list
from src.models.data_models import PartitionStrategy
from src.server.partition import plan_partitions
from src.utils.config import load_config
from src.utils.exceptions import GrembedError

load_dotenv()


def demo_cluster_run():
    """Generate an SBM graph, train on it with several workers, report link accuracy."""
    out = Path(os.getenv("GREMBED_OUTPUT_DIR", "runs/demo"))
    out.mkdir(parents=True, exist_ok=True)

    print("🚀 Starting graph-embedding cluster demo...")
    print("=" * 60)

    graph, _ = stochastic_block_model([200, 200], p_in=0.08, p_out=0.004, seed=7)
    graph_path = out / "sbm.txt"
    write_edge_list(graph, graph_path)
    print(f"✓ Generated SBM: {graph.n_vertices} vertices, {graph.n_edges} edges")

    cfg = load_config(overrides={
        "graph_path": graph_path,
        "output_dir": out,
        "dim": 16,
        "k": 5,
        "epochs": 5,
        "batch_size": 128,
        "n_steps": 4,
        "eval_cadence": 20,
    })
    print(f"\n🏃 Training with {cfg.worker_count} worker(s)...")
    try:
        report = run(cfg)
    except GrembedError as e:
        print(f"❌ Run failed in stage '{e.context.get('stage')}': {e.message}")
        return

    final = report.final
    print("✓ Training complete!")
    print(f"  - Global steps: {report.global_steps}")
    print(f"  - +ve accuracy: {final.positive_accuracy:.1f}%")
    print(f"  - -ve accuracy: {final.negative_accuracy:.1f}%")
    print(f"  - Total accuracy: {final.total_accuracy:.1f}%")
    print(f"  - Steps to {cfg.accuracy_target:.0f}%: {report.steps_to_threshold}")
    print(f"  - Convergence CSV: {report.convergence_csv}")

    print("\n📐 Partition planner, 8-byte values, 256 GB servers:")
    for vertices in (30 * 10 ** 9, 33 * 10 ** 9):
        try:
            plan = plan_partitions([vertices], 300, 8, 256 * 10 ** 9, PartitionStrategy.COLUMN_WISE)
            print(f"  - {vertices:.0e} vertices column-wise: one column = {plan.column_bytes[0] / 1e9:.0f} GB")
        except GrembedError as e:
            print(f"  - {vertices:.0e} vertices column-wise: infeasible ({e.context['violating_bytes'] / 1e9:.0f} GB)")
    plan = plan_partitions([30 * 10 ** 9], 300, 8, 256 * 10 ** 9)
    print(f"  - 3e+10 vertices row-wise, D=300: {plan.n_servers} servers")

    print("\n" + "=" * 60)
    print("🎉 Demo finished!")


if __name__ == "__main__":
    logging.basicConfig(level=logging.WARNING)
    demo_cluster_run()
