"""Run manifest and report generation for mkdvlab."""

from __future__ import annotations

from dataclasses import fields, is_dataclass
from datetime import datetime, timezone
import getpass
import json
import math
import os
from pathlib import Path
import platform
import sys
import tempfile
from typing import Any

import numpy as np

from mkdvlab import __version__
from mkdvlab.config import config_to_dict
from mkdvlab.models import ExperimentResult, JSONValue, RunConfig, RunManifest

MANIFEST_NAME = "run.json"
REPORT_NAME = "run_report.txt"


def build_run_manifest(
    config: RunConfig,
    experiments: list[ExperimentResult],
    started_utc: datetime,
    warnings: list[str] | None = None,
    errors: list[str] | None = None,
) -> RunManifest:
    """Build an aggregated run manifest with environment metadata."""
    finished_utc = datetime.now(timezone.utc)
    return RunManifest(
        started_local=started_utc.astimezone().isoformat(),
        started_utc=started_utc.isoformat(),
        finished_local=finished_utc.astimezone().isoformat(),
        finished_utc=finished_utc.isoformat(),
        user=_current_user(),
        host=platform.node(),
        python_version=sys.version.split()[0],
        numpy_version=np.__version__,
        tool_version=__version__,
        resolved_seed=config.seed,
        workers=config.workers,
        config=config,
        experiments=experiments,
        totals=_build_totals(experiments),
        warnings=list(warnings or []),
        errors=list(errors or []),
    )


def write_run_reports(manifest: RunManifest, report_dir: Path) -> tuple[Path, Path]:
    """Write run.json atomically and the text mirror next to it."""
    report_dir.mkdir(parents=True, exist_ok=True)
    json_path = report_dir / MANIFEST_NAME
    txt_path = report_dir / REPORT_NAME
    _atomic_write(json_path, _json_text(manifest))
    _atomic_write(txt_path, _text_report(manifest))
    return json_path, txt_path


def manifest_to_dict(manifest: RunManifest) -> dict[str, JSONValue]:
    """Convert a manifest to a JSON-serializable dictionary; config stays flat."""
    serialized = _serialize_value(manifest)
    if not isinstance(serialized, dict):
        raise TypeError("RunManifest serialization must produce a dictionary.")
    serialized["config"] = _serialize_value(config_to_dict(manifest.config))
    return serialized


def _build_totals(experiments: list[ExperimentResult]) -> dict[str, int]:
    return {
        "experiments_run": len(experiments),
        "experiments_ok": sum(1 for item in experiments if item.status != "failed"),
        "experiments_failed": sum(1 for item in experiments if item.status == "failed"),
        "outputs_written": sum(len(item.outputs) for item in experiments),
        "warnings_total": sum(len(item.warnings) for item in experiments),
        "lab_warnings_total": sum(item.lab_warnings_count for item in experiments),
    }


def _current_user() -> str:
    try:
        return getpass.getuser()
    except (KeyError, OSError):
        return "unknown"


def _atomic_write(path: Path, text: str) -> None:
    handle, temp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(handle, "w", encoding="utf-8") as stream:
            stream.write(text)
        os.replace(temp_name, path)
    except BaseException:
        Path(temp_name).unlink(missing_ok=True)
        raise


def _json_text(manifest: RunManifest) -> str:
    return json.dumps(manifest_to_dict(manifest), indent=2, sort_keys=True) + "\n"


def _text_report(manifest: RunManifest) -> str:
    lines = [
        "mkdvlab Run Report",
        "",
        f"Started (local):   {manifest.started_local}",
        f"Started (UTC):     {manifest.started_utc}",
        f"Finished (UTC):    {manifest.finished_utc}",
        f"User:              {manifest.user}",
        f"Host:              {manifest.host}",
        f"Python:            {manifest.python_version}",
        f"numpy:             {manifest.numpy_version}",
        f"mkdvlab:           {manifest.tool_version}",
        f"Seed:              {manifest.resolved_seed}",
        f"Workers:           {manifest.workers}",
        "",
        "Config:",
    ]
    lines.extend(f"  {key}={value}" for key, value in config_to_dict(manifest.config).items())
    lines.extend(["", "Totals:"])
    lines.extend(f"  {key}={value}" for key, value in manifest.totals.items())

    if manifest.warnings:
        lines.extend(["", "Run warnings:"])
        lines.extend(f"  - {warning}" for warning in manifest.warnings)

    if manifest.errors:
        lines.extend(["", "Run errors:"])
        lines.extend(f"  - {error}" for error in manifest.errors)

    lines.extend(["", "Experiments:", _experiment_table(manifest.experiments)])

    for result in manifest.experiments:
        lines.extend(
            [
                "",
                f"[{result.status}] {result.experiment}",
                f"  timings={result.timings}",
                f"  lab_warnings_count={result.lab_warnings_count}",
                f"  warning_stages={result.warning_stages}",
            ]
        )
        lines.extend(f"  {key}={_format_scalar(value)}" for key, value in sorted(result.summary.items()))
        lines.extend(f"  output: {path}" for path in result.outputs)
        lines.extend(f"  warning: {warning}" for warning in result.warnings)
        lines.extend(f"  error: {error}" for error in result.errors)

    return "\n".join(lines) + "\n"


def _experiment_table(experiments: list[ExperimentResult]) -> str:
    if not experiments:
        return "status   outputs   seconds   experiment\n(no experiments run)"

    header = f"{'status':<8} {'outputs':>7} {'seconds':>10} experiment"
    rows = [
        f"{item.status:<8} {len(item.outputs):>7} {item.timings.get('total_seconds', 0.0):>10.3f} {item.experiment}"
        for item in experiments
    ]
    return "\n".join([header, *rows])


def _format_scalar(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _serialize_value(value: Any) -> JSONValue:
    if is_dataclass(value) and not isinstance(value, type):
        return {item.name: _serialize_value(getattr(value, item.name)) for item in fields(value)}
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, dict):
        return {str(key): _serialize_value(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_serialize_value(item) for item in value]
    if isinstance(value, np.generic):
        return _serialize_value(value.item())
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    return str(value)
