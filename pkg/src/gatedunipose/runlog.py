"""key=value log lines and the per-command run manifest."""
from __future__ import annotations

import json
import logging
import subprocess
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path


def _fmt(v) -> str:
    if isinstance(v, float):
        v = f"{v:.6g}"
    s = str(v)
    return json.dumps(s) if (not s or any(c in s for c in ' ="\n')) else s


def kv(**fields) -> str:
    return " ".join(f"{k}={_fmt(v)}" for k, v in fields.items())


def configure_logging(level=logging.INFO, stream=None) -> None:
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(logging.Formatter("level=%(levelname)s logger=%(name)s %(message)s"))
    root = logging.getLogger("gatedunipose")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def git_describe(cwd=None) -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=cwd,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


@dataclass
class RunManifest:
    command: str
    argv: list
    config: str
    seed: int
    precision: str
    threads: int | None
    git_describe: str
    started: str
    finished: str | None = None
    exit_code: int | None = None
    result: dict = field(default_factory=dict)

    def finish(self, exit_code: int, **result) -> "RunManifest":
        self.exit_code = exit_code
        self.result.update(result)
        self.finished = utc_now()
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True, default=str)

    def write(self, directory) -> Path:
        path = Path(directory) / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))
