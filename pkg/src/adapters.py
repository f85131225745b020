"""
External detector/trainer processes.

The orchestrator writes an invocation JSON, launches the adapter command in
its own process group, and waits with a timeout. On timeout the whole group
gets SIGTERM, then SIGKILL. stdout/stderr go to files next to the outputs.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import signal
import subprocess
import sys
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

from .errors import AdapterFailure, ConfigError, FailureReason

logger = logging.getLogger(__name__)

KILL_GRACE_SECONDS = 2.0
DIAGNOSTIC_TAIL = 2000


class AdapterRole(str, Enum):
    DETECTOR = "detector"
    TRAINER = "trainer"


@dataclass(frozen=True)
class AdapterSpec:
    """An external executable; `command` items may use the placeholders
    {invocation}, {output_dir}, {python} and {root}."""
    adapter_id: str
    role: AdapterRole
    command: tuple[str, ...]
    workdir: Optional[str] = None
    timeout: float = 3600.0
    env: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "role", AdapterRole(self.role))
        object.__setattr__(self, "command", tuple(str(c) for c in self.command))
        if not self.command:
            raise ConfigError(f"adapter '{self.adapter_id}': command must not be empty")
        if not self.timeout > 0:
            raise ConfigError(f"adapter '{self.adapter_id}': timeout must be > 0")

    @classmethod
    def from_dict(cls, adapter_id: str, d: dict) -> "AdapterSpec":
        try:
            command = d["command"]
            if isinstance(command, str):
                command = command.split()
            return cls(
                adapter_id=adapter_id,
                role=AdapterRole(d["role"]),
                command=tuple(command),
                workdir=d.get("workdir"),
                timeout=float(d.get("timeout", 3600.0)),
                env={str(k): str(v) for k, v in (d.get("env") or {}).items()},
            )
        except (KeyError, ValueError, TypeError) as e:
            raise ConfigError(f"adapter '{adapter_id}': {e}") from e

    def digest(self) -> str:
        """Identifies the command line and its environment (not the timeout)."""
        blob = json.dumps(
            {"command": list(self.command), "env": self.env, "workdir": self.workdir, "role": self.role.value},
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class AdapterRun:
    returncode: int
    duration: float
    stdout_path: Path
    stderr_path: Path


def _tail(path: Path) -> str:
    try:
        text = path.read_text(encoding="utf-8", errors="replace")
    except OSError:
        return ""
    return text[-DIAGNOSTIC_TAIL:]


def _kill_group(proc: subprocess.Popen):
    for sig in (signal.SIGTERM, signal.SIGKILL):
        try:
            os.killpg(os.getpgid(proc.pid), sig)
        except (ProcessLookupError, OSError):
            return
        try:
            proc.wait(timeout=KILL_GRACE_SECONDS)
            return
        except subprocess.TimeoutExpired:
            logger.warning("adapter pid %s ignored %s", proc.pid, sig.name)
    proc.wait()


def run_adapter(spec: AdapterSpec, invocation_path: Path, output_dir: Path, log_dir: Path,
                root: Optional[Path] = None) -> AdapterRun:
    """Run one adapter to completion; raises AdapterFailure on launch error,
    timeout or non-zero exit."""
    root = root or Path(__file__).parents[1]
    values = {
        "invocation": str(invocation_path),
        "output_dir": str(output_dir),
        "python": sys.executable,
        "root": str(root),
    }
    try:
        argv = [part.format(**values) for part in spec.command]
    except (KeyError, IndexError) as e:
        raise ConfigError(f"adapter '{spec.adapter_id}': unknown placeholder {e} in command") from e

    env = os.environ.copy()
    env.update(spec.env)
    env["PYTHONPATH"] = os.pathsep.join(filter(None, [str(root), env.get("PYTHONPATH")]))

    log_dir.mkdir(parents=True, exist_ok=True)
    stdout_path = log_dir / f"{spec.role.value}.stdout.log"
    stderr_path = log_dir / f"{spec.role.value}.stderr.log"

    logger.info("[%s] launching %s", spec.role.value.upper(), " ".join(argv))
    t0 = time.time()
    with open(stdout_path, "wb") as out, open(stderr_path, "wb") as err:
        try:
            proc = subprocess.Popen(
                argv,
                cwd=spec.workdir or str(root),
                env=env,
                stdin=subprocess.DEVNULL,
                stdout=out,
                stderr=err,
                start_new_session=True,
            )
        except OSError as e:
            raise AdapterFailure(spec.adapter_id, FailureReason.LAUNCH, str(e)) from e

        try:
            returncode = proc.wait(timeout=spec.timeout)
        except subprocess.TimeoutExpired:
            _kill_group(proc)
            raise AdapterFailure(
                spec.adapter_id, FailureReason.TIMEOUT,
                f"no exit after {spec.timeout:g} s; process group killed",
                diagnostics=_tail(stderr_path),
            )
        except BaseException:
            _kill_group(proc)
            raise

    duration = time.time() - t0
    if returncode != 0:
        raise AdapterFailure(
            spec.adapter_id, FailureReason.EXIT_CODE,
            f"exited with status {returncode}",
            returncode=returncode,
            diagnostics=_tail(stderr_path),
        )
    logger.info("[%s] %s finished in %.1fs", spec.role.value.upper(), spec.adapter_id, duration)
    return AdapterRun(returncode, duration, stdout_path, stderr_path)
