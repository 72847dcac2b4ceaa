"""Run manifests: every CLI run records its resolved config, seed, and the
sha256 of every file it read or wrote, so experiments replay exactly."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    seed: int
    config: dict
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    prev_manifest: str | None = None
    wall_time: float = 0.0
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def add_output(self, path) -> None:
        self.outputs[str(path)] = sha256_file(path)

    def write(self, path) -> str:
        """Finalize wall time, write the manifest, return its own sha256."""
        self.wall_time = time.perf_counter() - self._t0
        doc = {
            "command": self.command,
            "seed": self.seed,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "prev_manifest": self.prev_manifest,
            "wall_time": self.wall_time,
        }
        blob = json.dumps(doc, sort_keys=True, indent=1)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(blob + "\n")
        return sha256_file(path)
