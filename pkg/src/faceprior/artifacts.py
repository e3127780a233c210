"""Run directories: manifest, key=value logging and precision setup."""
from __future__ import annotations

import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from . import diffcore as dc

MANIFEST_NAME = "run.json"


class KeyValueFormatter(logging.Formatter):
    """One line per record: ``level=... logger=... <message>``.

    Messages are expected to be ``key=value`` pairs already; anything else is
    wrapped as ``msg="..."``.
    """

    def format(self, record):
        msg = record.getMessage()
        if "=" not in msg.split(" ", 1)[0]:
            msg = "msg=" + json.dumps(msg)
        line = f"level={record.levelname.lower()} logger={record.name} {msg}"
        if record.exc_info:
            line += " exc=" + json.dumps(self.formatException(record.exc_info))
        return line


def setup_logging(level: str = "INFO", stream=None, path=None) -> None:
    """Send ``faceprior`` logs to ``stream`` (stderr by default) and optionally a file."""
    root = logging.getLogger("faceprior")
    root.handlers.clear()
    root.setLevel(level)
    root.propagate = False
    handlers = [logging.StreamHandler(stream or sys.stderr)]
    if path is not None:
        handlers.append(logging.FileHandler(path))
    for h in handlers:
        h.setFormatter(KeyValueFormatter())
        root.addHandler(h)


def apply_precision(name: str) -> None:
    dc.set_dtype(np.float32 if name == "float32" else np.float64)


@dataclass
class RunManifest:
    """What a run produced and how to reproduce it."""
    seed: int
    config_hash: str
    code_version: str = __version__
    command: str = ""
    checkpoints: dict = field(default_factory=dict)     # stage -> relative path
    metrics: dict = field(default_factory=dict)         # name -> relative CSV path
    outputs: dict = field(default_factory=dict)         # other artifacts

    def save(self, run_dir) -> None:
        with open(os.path.join(run_dir, MANIFEST_NAME), "w") as f:
            json.dump(asdict(self), f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, run_dir) -> "RunManifest":
        with open(os.path.join(run_dir, MANIFEST_NAME)) as f:
            return cls(**json.load(f))

    def missing(self, run_dir) -> list:
        """Referenced artifacts that do not exist under ``run_dir``."""
        paths = [*self.checkpoints.values(), *self.metrics.values(), *self.outputs.values()]
        return [p for p in paths if not os.path.exists(os.path.join(run_dir, p))]
