"""Run solver queries in a fresh subprocess with a hard wall-clock budget.

The bundled solver ships inside this package and runs under ``python -S``
so startup stays in the low milliseconds.  Any external SMT-LIB v2.6
solver binary that prints ``sat``/``unsat``/``unknown`` and a
``(define-fun ...)`` model can be swapped in through ``SolverConfig``.
"""

from __future__ import annotations

import importlib.resources
import logging
import os
import shlex
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass
from enum import Enum

from .smtlite import parse_sexprs

log = logging.getLogger(__name__)


class Verdict(str, Enum):
    SAT = "sat"
    UNSAT = "unsat"
    UNKNOWN = "unknown"
    TIMEOUT = "timeout"


class SolverFailure(RuntimeError):
    """The solver process crashed or produced unparseable output."""


def bundled_solver_path() -> str:
    return str(importlib.resources.files("advflow.smt") / "smtlite.py")


@dataclass(frozen=True)
class SolverConfig:
    """How to invoke the solver.  `command` is a shell-style string whose
    argv gets the query file path appended; None means the bundled solver."""

    command: str | None = None
    budget_s: float = 5.0

    def argv(self) -> list[str]:
        if self.command is None:
            return [sys.executable, "-S", bundled_solver_path()]
        return shlex.split(self.command)


@dataclass
class SolveResult:
    verdict: Verdict
    model: dict[str, int] | None = None
    elapsed_s: float = 0.0


def _parse_model(text: str) -> dict[str, int]:
    model: dict[str, int] = {}
    for node in parse_sexprs(text):
        if not isinstance(node, list):
            continue
        entries = node
        if entries and entries[0] == "model":
            entries = entries[1:]
        for entry in entries:
            if (
                isinstance(entry, list)
                and len(entry) == 5
                and entry[0] == "define-fun"
                and entry[2] == []
                and entry[3] == "Int"
            ):
                value = entry[4]
                if isinstance(value, list) and len(value) == 2 and value[0] == "-":
                    model[entry[1]] = -int(value[1])
                else:
                    model[entry[1]] = int(value)
    return model


def solve_text(text: str, config: SolverConfig | None = None) -> SolveResult:
    """Solve one query, killing the subprocess when the budget runs out."""
    config = config or SolverConfig()
    fd, path = tempfile.mkstemp(suffix=".smt2", prefix="advflow-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        started = time.monotonic()
        proc = subprocess.Popen(
            config.argv() + [path],
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
        )
        try:
            out, err = proc.communicate(timeout=config.budget_s)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.communicate()
            return SolveResult(Verdict.TIMEOUT, None, time.monotonic() - started)
        elapsed = time.monotonic() - started
    finally:
        os.unlink(path)
    if proc.returncode != 0:
        raise SolverFailure(
            f"solver exited with {proc.returncode}: {err.strip()[-500:]}"
        )
    head, _, rest = out.partition("\n")
    head = head.strip()
    if head == "sat":
        return SolveResult(Verdict.SAT, _parse_model(rest), elapsed)
    if head == "unsat":
        return SolveResult(Verdict.UNSAT, None, elapsed)
    if head == "unknown":
        return SolveResult(Verdict.UNKNOWN, None, elapsed)
    raise SolverFailure(f"unrecognized solver verdict {head!r}")
