"""Per-attempt run ledger shared by the adaptive loops and the flow solver.

The CSV column order (attempt_index, t_n, k_n, accepted, estimator, E_ND,
E_VD, energy) is fixed; extra columns are appended after these eight.
"""

from __future__ import annotations

import hashlib
import json
import math

import numpy as np
from dataclasses import dataclass, field

__all__ = ["LedgerRow", "RunLedger", "BASE_COLUMNS"]

BASE_COLUMNS = ("attempt_index", "t_n", "k_n", "accepted", "estimator", "E_ND", "E_VD", "energy")


@dataclass
class LedgerRow:
    attempt_index: int
    t_n: float
    k_n: float
    accepted: bool
    estimator: float
    e_nd: float
    e_vd: float
    energy: float
    extra: dict = field(default_factory=dict)

    def base_values(self):
        return (
            self.attempt_index,
            self.t_n,
            self.k_n,
            int(self.accepted),
            self.estimator,
            self.e_nd,
            self.e_vd,
            self.energy,
        )


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


class RunLedger:
    """Ordered record of every attempted step, accepted or rejected."""

    def __init__(self, extra_columns: tuple[str, ...] = ()):
        self.extra_columns = tuple(extra_columns)
        self.rows: list[LedgerRow] = []

    def append(self, row: LedgerRow) -> None:
        self.rows.append(row)

    @property
    def accepted_rows(self) -> list[LedgerRow]:
        return [r for r in self.rows if r.accepted]

    @property
    def rejected_rows(self) -> list[LedgerRow]:
        return [r for r in self.rows if not r.accepted]

    def summary(self) -> dict:
        return {
            "attempts": len(self.rows),
            "accepted": len(self.accepted_rows),
            "rejected": len(self.rejected_rows),
        }

    def data_lines(self) -> list[str]:
        header = ",".join(BASE_COLUMNS + self.extra_columns)
        lines = [header]
        for r in self.rows:
            vals = list(r.base_values()) + [r.extra.get(c, float("nan")) for c in self.extra_columns]
            lines.append(",".join(_fmt(v) for v in vals))
        return lines

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self.data_lines()).encode()).hexdigest()

    def write_csv(self, path, metadata: dict | None = None) -> None:
        lines = []
        if metadata:
            lines.append("# config: " + json.dumps(metadata, sort_keys=True))
        lines.append("# summary: " + json.dumps(self.summary(), sort_keys=True))
        lines.append("# sha256: " + self.content_hash())
        lines.extend(self.data_lines())
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
