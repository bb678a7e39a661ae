"""
Artifact writers for the harness.

All outputs are deterministic for identical inputs: JSON is written with
sorted keys, logs carry no timestamps, and CSV rows keep job order.
"""

import csv
import json
import logging
from pathlib import Path

logger = logging.getLogger(__name__)

TRAIN_LOG_FORMAT = "rads-train-log"
TRAIN_LOG_VERSION = 1
TRACE_HEADER = "# rads-trace v1"


def write_json(path: str | Path, payload: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    logger.info("Wrote %s", path)
    return path


def read_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


class TrainLog:
    """JSON-lines training log; the first line is a version header record."""

    def __init__(self, path: str | Path, **header):
        self.path = Path(path)
        self._fh = self.path.open("w")
        self.write({"format": TRAIN_LOG_FORMAT, "version": TRAIN_LOG_VERSION, **header})

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "TrainLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_train_log(path: str | Path) -> tuple[dict, list[dict]]:
    lines = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not lines or lines[0].get("format") != TRAIN_LOG_FORMAT:
        raise ValueError(f"{path} is not a training log")
    return lines[0], lines[1:]


def write_csv(path: str | Path, rows: list[dict], columns: tuple[str, ...]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(TRACE_HEADER + "\n")
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if row.get(k) is None else row[k] for k in columns})
    logger.info("Wrote %s (%d rows)", path, len(rows))
    return path


def read_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        first = fh.readline().rstrip("\n")
        if first != TRACE_HEADER:
            raise ValueError(f"{path} does not start with '{TRACE_HEADER}'")
        return list(csv.DictReader(fh))
