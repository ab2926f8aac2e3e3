"""Iteration history shared by the solvers and optimizers."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field


@dataclass
class RunRecord:
    history: dict = field(default_factory=dict)
    converged: bool = False
    summary: dict = field(default_factory=dict)
    _count: int = 0

    def log(self, iteration, **values):
        """Append one row; columns missing from this row are filled with NaN."""
        if self.history.get("iter") and iteration <= self.history["iter"][-1]:
            raise ValueError("iteration indices must increase")
        cols = set(self.history) | set(values) | {"iter"}
        for c in cols:
            col = self.history.setdefault(c, [math.nan] * self._count)
            col.append(iteration if c == "iter" else float(values.get(c, math.nan)))
        self._count += 1

    def __len__(self):
        return self._count

    def column(self, name):
        return list(self.history.get(name, []))

    def last(self, name, default=math.nan):
        col = self.history.get(name)
        return col[-1] if col else default

    def to_csv(self, path, columns=None):
        columns = list(columns or ["iter"] + sorted(c for c in self.history if c != "iter"))
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for i in range(self._count):
                row = []
                for c in columns:
                    v = self.history.get(c, [math.nan] * self._count)[i]
                    row.append(v if c == "iter" else repr(float(v)))
                writer.writerow(row)
