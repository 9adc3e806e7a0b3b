"""Accuracy-versus-global-step tracking and its CSV form."""

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import AsyncIterator, Awaitable, Callable, Dict, List, Optional, Union

from ..models.data_models import AccuracyReport
from ..utils.exceptions import GrembedError, InvalidParametersError

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("step", "pos_acc", "neg_acc", "total_acc", "wall_ms")

Evaluator = Callable[[int], Awaitable[AccuracyReport]]


@dataclass
class ConvergenceRow:
    step: int
    positive_accuracy: float
    negative_accuracy: float
    total_accuracy: float
    wall_ms: float

    @property
    def gap(self) -> bool:
        return math.isnan(self.total_accuracy)

    def csv(self) -> str:
        return (
            f"{self.step},{self.positive_accuracy:.4f},{self.negative_accuracy:.4f},"
            f"{self.total_accuracy:.4f},{self.wall_ms:.1f}"
        )


class ConvergenceLog:
    """Evaluates live state every `cadence` global steps; failed evaluations leave gap rows."""

    def __init__(self, evaluate: Evaluator, cadence: int):
        if cadence < 1:
            raise InvalidParametersError("eval cadence must be at least 1", parameter="cadence", value=cadence)
        self.evaluate = evaluate
        self.cadence = cadence
        self.rows: List[ConvergenceRow] = []
        self.next_eval = cadence
        self._started = time.monotonic()

    @property
    def last_step(self) -> int:
        return self.rows[-1].step if self.rows else -1

    async def record(self, step: int) -> Optional[AccuracyReport]:
        """Evaluate at `step` and append a row (or a gap row on failure)."""
        if step <= self.last_step:
            return None
        wall_ms = (time.monotonic() - self._started) * 1000.0
        try:
            report = await self.evaluate(step)
        except (GrembedError, OSError) as e:
            logger.warning(f"Evaluation at step {step} failed, recording a gap: {e}")
            self.rows.append(ConvergenceRow(step, math.nan, math.nan, math.nan, wall_ms))
            return None
        self.rows.append(ConvergenceRow(
            step, report.positive_accuracy, report.negative_accuracy, report.total_accuracy, wall_ms,
        ))
        logger.info(f"step {step}: total accuracy {report.total_accuracy:.2f}%")
        return report

    async def advance(self, step: int) -> None:
        """Called as the global step grows; evaluates once per crossed cadence boundary."""
        if step >= self.next_eval:
            await self.record(step)
            self.next_eval = (step // self.cadence + 1) * self.cadence

    async def finish(self, step: int, final: Optional[AccuracyReport] = None) -> None:
        """Close the series with a row at the final step, from `final` if already computed."""
        if final is not None and step > self.last_step:
            wall_ms = (time.monotonic() - self._started) * 1000.0
            self.rows.append(ConvergenceRow(
                step, final.positive_accuracy, final.negative_accuracy, final.total_accuracy, wall_ms,
            ))
        elif step > self.last_step:
            await self.record(step)

    def steps_to_threshold(self, target: float) -> Optional[int]:
        """First recorded step whose total accuracy reaches `target` percent."""
        for row in self.rows:
            if not row.gap and row.total_accuracy >= target:
                return row.step
        return None

    def write_csv(self, path: Union[str, Path], config: Optional[Dict[str, object]] = None) -> None:
        echo = " ".join(f"{k}={v}" for k, v in (config or {}).items())
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(f"# config: {echo}\n")
            handle.write(",".join(CSV_COLUMNS) + "\n")
            for row in self.rows:
                handle.write(row.csv() + "\n")


async def convergence_log(steps: AsyncIterator[int], evaluate: Evaluator, cadence: int) -> ConvergenceLog:
    """Consume a run's stream of global steps, evaluating every `cadence` steps.

    The last step seen always gets a row, so a cadence larger than the run
    yields a single final row.
    """
    log = ConvergenceLog(evaluate, cadence)
    step = 0
    async for step in steps:
        await log.advance(step)
    await log.finish(step)
    return log


def read_convergence_csv(path: Union[str, Path]) -> List[ConvergenceRow]:
    rows = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.startswith("#") or line.startswith("step") or not line.strip():
                continue
            step, pos, neg, total, wall = line.strip().split(",")
            rows.append(ConvergenceRow(int(step), float(pos), float(neg), float(total), float(wall)))
    return rows
