"""Script execution engine: applies commands in order, re-typechecking the
whole program after every one; a failed recheck aborts the run naming the
offending command."""

from __future__ import annotations

from dataclasses import dataclass, field

from .ast import Program
from .checker import Usage, check_program
from .errors import CheckError
from .parser import Command
from .printer import print_program


@dataclass
class StepRecord:
    index: int          # 1-based command ordinal (0 = initial state)
    label: str
    printed: str


@dataclass
class PhaseRecord:
    name: str
    after_command: int
    printed: str


class ScriptError(Exception):
    def __init__(self, command: Command | None, step: int, cause: Exception):
        self.command = command
        self.step = step
        self.cause = cause
        where = f"command {step} ({command.text})" if command else "initial check"
        super().__init__(f"{where}: {cause}")


class Pipeline:
    def __init__(self, program: Program):
        self.program = program
        self.usage: Usage = Usage()
        self.history: list[StepRecord] = []
        self.phases: list[PhaseRecord] = []
        self._current: tuple[Command | None, int] = (None, 0)

    def recheck(self, label: str = ""):
        try:
            self.usage = check_program(self.program)
        except CheckError as e:
            cmd, step = self._current
            raise ScriptError(cmd, step, e) from e

    def run(self, commands: list[Command], stop_after: int | None = None):
        self._current = (None, 0)
        self.recheck("initial")
        self.history.append(StepRecord(0, "initial", print_program(self.program)))
        for k, cmd in enumerate(commands, start=1):
            if stop_after is not None and k > stop_after:
                break
            self._current = (cmd, k)
            if cmd.name == "phase":
                name = cmd.args.get("name") or cmd.args.get("id") or f"phase{len(self.phases)}"
                self.recheck(f"phase boundary {name}")
                self.phases.append(PhaseRecord(name, k, print_program(self.program)))
                self.history.append(StepRecord(k, cmd.text, print_program(self.program)))
                continue
            handler = REGISTRY.get(cmd.name)
            if handler is None:
                raise ScriptError(cmd, k, CheckError(
                    "E-TARGET", f"unknown transformation {cmd.name!r}"))
            try:
                handler(self, cmd)
            except ScriptError:
                raise
            except CheckError as e:
                raise ScriptError(cmd, k, e) from e
            self.recheck(cmd.text)
            self.history.append(StepRecord(k, cmd.text, print_program(self.program)))
        return self


def _registry():
    from . import transforms_cpu as c
    from . import transforms_gpu as g
    return {
        "tile": c.t_tile,
        "swap_loops": c.t_swap_loops,
        "fission": c.t_fission,
        "hoist": c.t_hoist,
        "local_name": c.t_local_name,
        "shift_accesses": c.t_shift_accesses,
        "loop_parallel": c.t_loop_parallel,
        "heap_local_copy": c.t_heap_local_copy,
        "fn_inline": c.t_fn_inline,
        "fn_insert": c.t_fn_insert,
        "insert_ghost": c.t_insert_ghost,
        "create_kernel_launch": g.t_create_kernel_launch,
        "to_setup": g.t_to_setup,
        "to_magic_thread_for": g.t_to_magic_thread_for,
        "remove_loop_around_barrier": g.t_remove_loop_around_barrier,
        "convert_magic_thread_fors": g.t_convert_magic_thread_fors,
        "convert_memory": g.t_convert_memory,
        "realize_barrier": g.t_realize_barrier,
    }


REGISTRY = _registry()
