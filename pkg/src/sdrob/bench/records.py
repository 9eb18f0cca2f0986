"""Benchmark result records and their CSV / JSON-lines encodings."""

import csv
import json
import math
from dataclasses import asdict, dataclass

CSV_FIELDS = ("metric", "backend", "param", "samples", "mean", "stddev", "unit")


@dataclass
class BenchRecord:
    metric: str
    backend: str
    param: str
    samples: int
    mean: float
    stddev: float
    unit: str

    def row(self) -> list:
        return [self.metric, self.backend, self.param, self.samples,
                f"{self.mean:.6g}", f"{self.stddev:.6g}", self.unit]


def summarize(metric: str, backend: str, param: str, values: list[float],
              unit: str) -> BenchRecord:
    n = len(values)
    mean = sum(values) / n if n else 0.0
    var = (sum((v - mean) ** 2 for v in values) / (n - 1)) if n > 1 else 0.0
    return BenchRecord(metric=metric, backend=backend, param=str(param),
                       samples=n, mean=mean, stddev=math.sqrt(var), unit=unit)


def write_csv(records: list[BenchRecord], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for record in records:
            writer.writerow(record.row())


def write_jsonl(records: list[BenchRecord], path: str) -> None:
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(asdict(record)) + "\n")


def print_records(records: list[BenchRecord]) -> None:
    print(",".join(CSV_FIELDS))
    for record in records:
        print(",".join(str(x) for x in record.row()))
