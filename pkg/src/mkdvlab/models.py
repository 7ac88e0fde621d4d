"""Typed models for mkdvlab run configuration and results."""

from __future__ import annotations

from dataclasses import dataclass, field

JSONScalar = str | int | float | bool | None
JSONValue = JSONScalar | list["JSONValue"] | dict[str, "JSONValue"]

EXPERIMENTS = ("sample", "evolve", "estar", "decay", "invariance", "converge")
INITIAL_MODES = ("random", "plane_wave", "band_limited", "file")


@dataclass(frozen=True)
class RunConfig:
    """Configuration for a single experiment run, read from a flat JSON file."""

    experiment: str
    n: int = 2
    N_ladder: tuple[int, ...] = (8, 16, 32)
    K: int | None = None
    s_values: tuple[float, ...] = (1.4,)
    R: float = 5.0
    t: float = 0.5
    dt: float | None = None
    n_samples: int = 100
    seed: int = 0
    output_dir: str = "mkdv_runs"
    family: tuple[str, ...] = ("I0",)
    kind: tuple[str, ...] = ("A",)
    radius: float | None = None
    amplitude: float = 0.5
    wave_number: int = 1
    mode: str = "random"
    h: float | None = None
    j: tuple[int, ...] = (3, 5)
    n_records: int = 11
    mc_max_N: int = 4
    field_json: str | None = None
    workers: int = 1
    strict: bool = False
    verbose: bool = False

    @property
    def max_N(self) -> int:
        return max(self.N_ladder)

    @property
    def ambient_cutoff(self) -> int:
        """Explicit K, or the smallest cutoff holding cubic terms of the largest N."""
        if self.K is not None:
            return self.K
        return 3 * self.max_N + 1


@dataclass(frozen=True)
class ExperimentResult:
    """Outcome of one subcommand: files written, summary numbers and diagnostics."""

    experiment: str
    status: str
    outputs: list[str]
    summary: dict[str, JSONValue]
    warnings: list[str] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    lab_warnings_count: int = 0
    warning_stages: dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class RunManifest:
    """Aggregated record of a full CLI run, persisted as run.json."""

    started_local: str
    started_utc: str
    finished_local: str
    finished_utc: str
    user: str
    host: str
    python_version: str
    numpy_version: str
    tool_version: str
    resolved_seed: int
    workers: int
    config: RunConfig
    experiments: list[ExperimentResult]
    totals: dict[str, int]
    warnings: list[str] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)
