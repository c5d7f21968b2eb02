"""
Per-run metrics: a header plus one record per epoch, streamed as JSON lines.
"""
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# fields that depend on the wall clock; excluded when comparing runs for determinism
WALL_CLOCK_FIELDS = ("wall_time", "start_time")


@dataclass
class RunHeader:
    config_hash: str
    seed: int
    optimizer: str
    start_time: float
    budget: float
    schema_version: int = SCHEMA_VERSION


@dataclass
class EpochRecord:
    """
    Metrics of one training epoch.

    Attributes:
        epoch (int): 1-based epoch index.
        env_steps (int): Real-environment steps collected so far.
        J_hat (float): Mean evaluation return.
        Jc_hat (float): Mean evaluation episode cost.
        accumulated_cost (float): Running sum of real episode costs over all training episodes.
        eta (float): Barrier coefficient after the epoch (None for the Lagrangian arm).
        multiplier (float): Lagrange multiplier after the epoch (None for the barrier arm).
        violations (int): Cumulative accepted updates with model-evaluated J_P^c >= 0.
        exceedance_rate (float): Fraction of training episodes so far whose cost exceeded the budget.
        model_constraint (float): Last pessimistic J_P^c seen by the optimizer (None while fit-only).
        wall_time (float): Seconds spent in the epoch.
        aborted (bool): Set on the final record of an aborted run.
        reason (str): Why the run was aborted.
    """
    epoch: int
    env_steps: int
    J_hat: float
    Jc_hat: float
    accumulated_cost: float
    eta: Optional[float]
    multiplier: Optional[float]
    violations: int
    exceedance_rate: float
    model_constraint: Optional[float] = None
    wall_time: float = 0.0
    aborted: bool = False
    reason: Optional[str] = None


@dataclass
class RunMetrics:
    header: RunHeader
    records: list = field(default_factory=list)

    @property
    def aborted(self):
        return any(r.aborted for r in self.records)

    @property
    def final(self):
        return self.records[-1] if self.records else None

    def check(self):
        """
        Raises:
            ValueError: If accumulated cost decreases or env steps do not strictly increase.
        """
        for prev, cur in zip(self.records, self.records[1:]):
            if cur.accumulated_cost < prev.accumulated_cost:
                raise ValueError(f"accumulated cost decreased at epoch {cur.epoch}")
            if cur.env_steps <= prev.env_steps:
                raise ValueError(f"env steps did not increase at epoch {cur.epoch}")

    def values(self):
        """Records as dicts without wall-clock fields, for determinism comparisons."""
        return [{k: v for k, v in asdict(r).items() if k not in WALL_CLOCK_FIELDS} for r in self.records]


class MetricsWriter:
    """
    Append-only JSON-lines sink; every line is flushed as soon as it is written.

    Example:
        >>> with MetricsWriter("runs/metrics.jsonl") as sink:
        ...     sink.write_header(header)
        ...     sink.write(record)
    """

    def __init__(self, filename):
        self.filename = filename
        self._file = open(filename, "w")

    def _line(self, kind, payload):
        payload = dict(payload, type=kind)
        self._file.write(json.dumps(payload, sort_keys=True) + "\n")
        self._file.flush()

    def write_header(self, header):
        self._line("header", asdict(header))

    def write(self, record):
        self._line("epoch", asdict(record))

    def close(self):
        if not self._file.closed:
            self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _build(cls, data):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in data.items() if k in names})


def load_metrics(filename):
    """
    Reads a metrics stream.

    A truncated final line (crash mid-write) is skipped with a warning; a corrupt line
    anywhere else is an error.

    Raises:
        FileNotFoundError: If the file does not exist.
        ValueError: Corrupt interior line or missing header.
    """
    with open(filename, "r") as f:
        lines = f.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()

    header, records = None, []
    for i, line in enumerate(lines):
        try:
            data = json.loads(line)
        except json.JSONDecodeError as e:
            if i == len(lines) - 1:
                logger.warning(f"Skipping truncated final line of {filename}")
                break
            logger.error(f"Corrupt line {i + 1} in {filename}")
            raise ValueError(f"corrupt metrics line {i + 1} in {filename}: {e}") from e
        kind = data.pop("type", "epoch")
        if kind == "header":
            header = _build(RunHeader, data)
        else:
            records.append(_build(EpochRecord, data))
    if header is None:
        raise ValueError(f"{filename} has no run header")
    return RunMetrics(header, records)
