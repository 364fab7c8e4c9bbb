"""Run-context counters: overflow events and per-stage execution statistics.

A :class:`RunContext` is confined to one logical thread of execution.  All
quantization overflow/saturation events and per-stage counters produced while
a context is active are recorded on it; independent contexts may run
concurrently.  When no context has been entered, events fall through to a
process-wide default context.
"""

from __future__ import annotations

import contextvars
from contextlib import contextmanager
from dataclasses import dataclass, field


@dataclass
class StageCounters:
    """Counters for one named pipeline stage (optionally one per block)."""

    name: str
    block: int | None = None
    mac_count: int = 0
    blocks_loaded: int = 0
    iterations: int = 0
    expert_loads: int = 0
    overflow_events: int = 0

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "block": self.block,
            "mac_count": self.mac_count,
            "blocks_loaded": self.blocks_loaded,
            "iterations": self.iterations,
            "expert_loads": self.expert_loads,
            "overflow_events": self.overflow_events,
        }


@dataclass
class RunContext:
    """Mutable event counters for one run.

    ``overflow_events`` counts every quantization whose rounded value fell
    outside the target format's range (whether it was then wrapped or
    saturated).  Stage counters accumulate under whichever stage scope is
    currently open; overflow events are attributed to the open stage as well
    as to the run total.
    """

    overflow_events: int = 0
    stages: dict[tuple[str, int | None], StageCounters] = field(default_factory=dict)
    _stack: list[StageCounters] = field(default_factory=list, repr=False)
    _token: object = field(default=None, repr=False)

    def count_overflow(self, n: int) -> None:
        if n:
            self.overflow_events += int(n)
            if self._stack:
                self._stack[-1].overflow_events += int(n)

    def bump(self, **deltas: int) -> None:
        """Add counter deltas to the innermost open stage (no-op outside one)."""
        if self._stack:
            st = self._stack[-1]
            for name, delta in deltas.items():
                setattr(st, name, getattr(st, name) + int(delta))

    def stage(self, name: str, block: int | None = None) -> StageCounters:
        key = (name, block)
        st = self.stages.get(key)
        if st is None:
            st = StageCounters(name=name, block=block)
            self.stages[key] = st
        return st

    @contextmanager
    def stage_scope(self, name: str, block: int | None = None):
        st = self.stage(name, block)
        self._stack.append(st)
        try:
            yield st
        finally:
            self._stack.pop()

    def __enter__(self) -> "RunContext":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None


_ACTIVE: contextvars.ContextVar[RunContext | None] = contextvars.ContextVar(
    "fxmoe_run_context", default=None
)
_DEFAULT = RunContext()


def current_context() -> RunContext:
    """The innermost active context, or the process-wide default."""
    ctx = _ACTIVE.get()
    return _DEFAULT if ctx is None else ctx
