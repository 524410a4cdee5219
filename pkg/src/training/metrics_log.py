"""
Append-only line-delimited JSON log of training losses and evaluation snapshots.
"""

import json
import os
import time
from typing import Dict, List, Optional

from src.matchloss.weights import LossBreakdown


class MetricsLog:
    """One JSON object per line; iterations strictly increase per record kind.

    `fresh=True` truncates an existing file; otherwise logging continues
    after its last records.
    """

    def __init__(self, path: str, fresh: bool = False):
        self.path = path
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self._last: Dict[str, int] = {}
        if os.path.exists(path) and not fresh:
            for record in read_metrics(path):
                self._last[record["kind"]] = record["iteration"]
        else:
            open(path, "w").close()

    def _append(self, kind: str, iteration: int, payload: Dict):
        last = self._last.get(kind)
        if last is not None and iteration <= last:
            raise ValueError(f"{kind} iteration {iteration} does not follow {last}")
        record = {"kind": kind, "iteration": iteration, "time": time.time()}
        record.update(payload)
        with open(self.path, "a") as f:
            f.write(json.dumps(record) + "\n")
        self._last[kind] = iteration

    def log_loss(self, iteration: int, breakdown: LossBreakdown, lr: Optional[float] = None):
        payload = breakdown.to_dict()
        if lr is not None:
            payload["lr"] = lr
        self._append("loss", iteration, payload)

    def log_eval(self, iteration: int, report: Dict):
        self._append("eval", iteration, {"report": report})


def read_metrics(path: str, kind: Optional[str] = None) -> List[Dict]:
    records = []
    with open(path, "r") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if kind is None or record.get("kind") == kind:
                records.append(record)
    return records
