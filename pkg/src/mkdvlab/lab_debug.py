"""Capture of mkdvlab warning records into per-experiment diagnostic events.

Warnings name the stage that raised them (sampler, flow, fit, runner). A
record may carry ``extra={"sample_indices": ..., "flow_time": ...}`` so the
event points back at the offending samples or the time a trajectory stopped.
"""

from __future__ import annotations

from collections import Counter
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
import logging
from time import perf_counter
from typing import Iterator

LAB_LOGGER_NAME = "mkdvlab"

STAGES = {
    "mkdvlab.measures": "sampler",
    "mkdvlab.flow": "flow",
    "mkdvlab.pairing": "fit",
    "mkdvlab.experiments": "runner",
}


@dataclass(frozen=True)
class LabWarningEvent:
    experiment: str
    stage: str
    message: str
    function: str
    elapsed_seconds: float
    sample_indices: tuple[int, ...] = ()
    flow_time: float | None = None


@dataclass
class LabWarningCollector:
    """Events of one experiment, in emission order."""

    experiment: str = ""
    events: list[LabWarningEvent] = field(default_factory=list)
    started: float = field(default_factory=perf_counter)

    def add_from_log_record(self, record: logging.LogRecord) -> None:
        indices = getattr(record, "sample_indices", ())
        flow_time = getattr(record, "flow_time", None)
        self.events.append(
            LabWarningEvent(
                experiment=self.experiment,
                stage=stage_of(record.name),
                message=record.getMessage(),
                function=record.funcName,
                elapsed_seconds=round(perf_counter() - self.started, 6),
                sample_indices=tuple(int(index) for index in indices),
                flow_time=None if flow_time is None else float(flow_time),
            )
        )

    @property
    def messages(self) -> list[str]:
        return [event.message for event in self.events]

    @property
    def flagged_samples(self) -> list[int]:
        return sorted({index for event in self.events for index in event.sample_indices})

    def stage_counts(self) -> dict[str, int]:
        return dict(sorted(Counter(event.stage for event in self.events).items()))

    def to_dict(self) -> dict[str, object]:
        return {
            "experiment": self.experiment,
            "warnings_count": len(self.events),
            "stages": self.stage_counts(),
            "flagged_samples": self.flagged_samples,
            "events": [asdict(event) for event in self.events],
        }


def stage_of(logger_name: str) -> str:
    for prefix, stage in STAGES.items():
        if logger_name == prefix or logger_name.startswith(prefix + "."):
            return stage
    return "other"


class _CollectorHandler(logging.Handler):
    def __init__(self, collector: LabWarningCollector) -> None:
        super().__init__(level=logging.WARNING)
        self.collector = collector

    def emit(self, record: logging.LogRecord) -> None:
        self.collector.add_from_log_record(record)


@contextmanager
def capture_lab_warnings(collector: LabWarningCollector) -> Iterator[None]:
    """Route WARNING+ records of the mkdvlab logger tree into a collector instead of the console."""
    logger = logging.getLogger(LAB_LOGGER_NAME)
    handler = _CollectorHandler(collector)
    previous_propagate = logger.propagate
    logger.addHandler(handler)
    logger.propagate = False
    try:
        yield
    finally:
        logger.removeHandler(handler)
        logger.propagate = previous_propagate


def ensure_no_lab_warnings(collector: LabWarningCollector) -> None:
    """Raise when a strict run forbids captured warnings."""
    if collector.events:
        stages = ", ".join(f"{stage}={count}" for stage, count in collector.stage_counts().items())
        raise ValueError(f"strict mode: {len(collector.events)} warning(s) captured ({stages})")
