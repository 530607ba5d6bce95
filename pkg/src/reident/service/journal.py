"""Append-only journal of gallery mutations.

Each line is one JSON record. Replaying the journal over the initial gallery
snapshot reconstructs the current gallery exactly; embeddings are stored in
full precision so the reconstruction is byte-identical.
"""

from __future__ import annotations

import json
import os
import time
from pathlib import Path

import numpy as np

from ..errors import DataFormatError
from ..retrieval import Gallery


class Journal:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._next_seq = 1
        if self.path.exists():
            records = self.read_all()
            if records:
                self._next_seq = records[-1]["seq"] + 1

    def read_all(self) -> list[dict]:
        if not self.path.exists():
            return []
        records = []
        with self.path.open("r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(json.loads(line))
                except ValueError as exc:
                    raise DataFormatError(f"{self.path}:{line_no}: bad journal line") from exc
        return records

    def append(self, action: str, actor: str, payload: dict) -> dict:
        record = {
            "seq": self._next_seq,
            "ts": time.time(),
            "actor": actor,
            "action": action,
            **payload,
        }
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        self._next_seq += 1
        return record


def replay(initial: Gallery, records: list[dict], from_seq: int = 0) -> Gallery:
    """Apply journaled gallery mutations after from_seq to a snapshot."""
    embeddings = [e for e in initial.embeddings]
    obs_ids = list(initial.obs_ids)
    individual_ids = list(initial.individual_ids)
    sides = list(initial.sides)
    days = list(initial.days)
    for record in records:
        if record["seq"] <= from_seq:
            continue
        if record["action"] in ("confirm", "new_individual"):
            entry = record["entry"]
            embeddings.append(np.asarray(entry["embedding"], dtype=np.float64))
            obs_ids.append(entry["obs_id"])
            individual_ids.append(entry["individual_id"])
            sides.append(1 if entry["side"] == "R" else 0)
            days.append(entry["capture_day"])
    return Gallery(
        np.stack(embeddings) if embeddings else np.zeros((0, initial.dim)),
        np.asarray(obs_ids, dtype=np.int64),
        np.asarray(individual_ids, dtype=np.int64),
        np.asarray(sides, dtype=np.int64),
        np.asarray(days, dtype=np.int64),
    )
