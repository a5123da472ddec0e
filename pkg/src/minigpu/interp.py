"""Concrete interpreter: the semantics oracle for preservation tests.

Ghosts and annotations are ignored; thread loops run sequentially in
ascending index order (sound because the checker guarantees iteration
independence between barriers); barriers and kernel transitions are no-ops
apart from tracking launch parameters for shared-memory sizing. Float
cells round to 32-bit IEEE on every store.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .ast import (
    Access,
    Assign,
    BinOp,
    Call,
    CallStmt,
    Decl,
    Expr,
    FloatLit,
    For,
    If,
    IntLit,
    Lam,
    Loc,
    Program,
    Ptr,
    Return,
    Seq,
    Stmt,
    UNINIT,
    Var,
)


class InterpError(Exception):
    pass


def f32(x: float) -> float:
    return struct.unpack("f", struct.pack("f", float(x)))[0]


@dataclass
class Array:
    dims: list[int]
    data: list
    ctype: str = "float"
    freed: bool = False

    @staticmethod
    def alloc(dims, ctype):
        n = 1
        for d in dims:
            n *= d
        return Array(list(dims), [None] * n, ctype)

    def offset(self, idxs: list[int]) -> int:
        if len(idxs) != len(self.dims):
            raise InterpError(f"rank mismatch: {len(idxs)} indices into "
                              f"{len(self.dims)}-d array")
        off = 0
        for i, (ix, d) in enumerate(zip(idxs, self.dims)):
            if not (0 <= ix < d):
                raise InterpError(f"index {ix} out of bounds 0..{d}")
            off = off * d + ix
        return off

    def get(self, idxs):
        if self.freed:
            raise InterpError("use after free")
        v = self.data[self.offset(idxs)]
        if v is None:
            raise InterpError("read of uninitialized cell")
        return v

    def set(self, idxs, v):
        if self.freed:
            raise InterpError("use after free")
        if self.ctype == "float":
            v = f32(v)
        self.data[self.offset(idxs)] = v


@dataclass
class PtrVal:
    array: Array
    prefix: list[int] = field(default_factory=list)


@dataclass
class _Frame:
    vars: dict[str, object] = field(default_factory=dict)


class Interp:
    def __init__(self, program: Program):
        self.program = program
        self.launch: list[tuple[int, int, int]] = []  # (bpg, tpb, smem)
        self.ctx_width: list[int] = []

    # -- environment ---------------------------------------------------------
    def run(self, fn_name: str, inputs: dict) -> tuple[object, dict]:
        fn = self.program.fn(fn_name)
        frame = _Frame()
        arrays: dict[str, Array] = {}
        for pname, ptype in fn.params:
            if pname not in inputs:
                raise InterpError(f"missing input {pname!r}")
            v = inputs[pname]
            if ptype.endswith("*"):
                if isinstance(v, Array):
                    arr = v
                else:
                    data = list(v)
                    arr = Array([len(data)],
                                [f32(x) for x in data] if ptype.startswith("float")
                                else list(data),
                                "float" if ptype.startswith("float") else "int")
                arrays[pname] = arr
                frame.vars[pname] = PtrVal(arr)
            else:
                frame.vars[pname] = v
        ret = self.exec_seq(fn.body, [frame])
        return ret, arrays

    def lookup(self, env, name):
        for frame in reversed(env):
            if name in frame.vars:
                return frame.vars[name]
        raise InterpError(f"unbound variable {name!r}")

    def assign_cell(self, env, name, value):
        for frame in reversed(env):
            if name in frame.vars:
                cell = frame.vars[name]
                if isinstance(cell, dict) and "cell" in cell:
                    cell["cell"] = f32(value) if cell["t"] == "float" else value
                    return
                raise InterpError(f"{name!r} is not assignable")
        raise InterpError(f"unbound variable {name!r}")

    # -- expressions -----------------------------------------------------------
    def eval(self, e: Expr, env) -> object:
        if isinstance(e, IntLit):
            return e.value
        if isinstance(e, FloatLit):
            return f32(e.value)
        if isinstance(e, Var):
            v = self.lookup(env, e.name)
            if isinstance(v, dict) and "cell" in v:
                if v["cell"] is None:
                    raise InterpError(f"read of uninitialized {e.name!r}")
                return v["cell"]
            return v
        if isinstance(e, Access):
            tgt = self.lookup(env, e.base)
            idxs = [self.eval(i, env) for i in e.idxs]
            if not isinstance(tgt, PtrVal):
                raise InterpError(f"{e.base!r} is not an array")
            return self._indexed(tgt).get(self._full_idxs(tgt, idxs))
        if isinstance(e, BinOp):
            a = self.eval(e.lhs, env)
            b = self.eval(e.rhs, env)
            return self._binop(e.op, a, b)
        if isinstance(e, Call):
            return self._call_expr(e, env)
        if isinstance(e, Ptr):
            v = self.lookup(env, e.base)
            if not isinstance(v, PtrVal):
                raise InterpError(f"{e.base!r} is not an array")
            idxs = [self.eval(i, env) for i in e.idxs]
            return PtrVal(v.array, v.prefix + idxs)
        raise InterpError(f"cannot evaluate {e!r}")

    @staticmethod
    def _binop(op, a, b):
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "/":
            return int(a / b) if b else 0
        if op == "%":
            if b == 0:
                return 0
            q = int(a / b)
            return a - q * b
        if op == "==":
            return a == b
        if op == "!=":
            return a != b
        if op == "<":
            return a < b
        if op == "<=":
            return a <= b
        if op == ">":
            return a > b
        if op == ">=":
            return a >= b
        raise InterpError(f"unknown operator {op}")

    def _call_expr(self, e: Call, env):
        if e.fn == "exact_div":
            a = self.eval(e.args[0], env)
            b = self.eval(e.args[1], env)
            if b == 0 or a % b != 0:
                raise InterpError(f"exact_div({a}, {b}) is not exact")
            return a // b
        if e.fn == "pow2":
            k = self.eval(e.args[0], env)
            if k < 0:
                return 0
            return 1 << k
        if e.fn.startswith("DMINDEX"):
            k = len(e.args) // 2
            dims = [self.eval(a, env) for a in e.args[:k]]
            idxs = [self.eval(a, env) for a in e.args[k:]]
            off = 0
            for d, ix in zip(dims, idxs):
                off = off * d + ix
            return off
        if e.fn.startswith("MINDEX") or e.fn.startswith("MSIZE"):
            raise InterpError(f"{e.fn} only appears in generated CUDA")
        raise InterpError(f"cannot call {e.fn!r} in an expression")

    def _full_idxs(self, p: PtrVal, idxs):
        full = list(p.prefix) + list(idxs)
        if len(full) == len(p.array.dims):
            return full
        if len(full) == 1 and len(p.array.dims) == 1:
            return full
        # pointer-offset form: &a[k] indexed once more on a 1-d array
        if len(full) == len(p.array.dims) + 1 and len(p.array.dims) == 1:
            return [full[0] + full[1]]
        raise InterpError(f"rank mismatch on {p.array.dims}￨{full}")

    @staticmethod
    def _indexed(p: PtrVal) -> Array:
        return p.array

    # -- statements --------------------------------------------------------------
    def exec_seq(self, seq: Seq, env) -> object:
        env = env + [_Frame()]
        for s in seq.stmts:
            r = self.exec(s, env)
            if r is not None:
                return r
        return None

    def exec(self, s: Stmt, env) -> object:
        if isinstance(s, Decl):
            return self._exec_decl(s, env)
        if isinstance(s, Assign):
            tgt = self.lookup(env, s.target.base)
            val = self.eval(s.value, env)
            if isinstance(tgt, dict) and "cell" in tgt:
                old = tgt["cell"]
                if s.op == "+=":
                    if old is None:
                        raise InterpError(f"read of uninitialized "
                                          f"{s.target.base!r}")
                    val = old + val
                tgt["cell"] = f32(val) if tgt["t"] == "float" else val
                return None
            if not isinstance(tgt, PtrVal):
                raise InterpError(f"{s.target.base!r} is not assignable")
            idxs = self._full_idxs(tgt, [self.eval(i, env) for i in s.target.idxs])
            if s.op == "+=":
                val = tgt.array.get(idxs) + val
            tgt.array.set(idxs, val)
            return None
        if isinstance(s, CallStmt):
            return self._exec_call(s, env)
        if isinstance(s, Seq):
            return self.exec_seq(s, env)
        if isinstance(s, For):
            start = self.eval(s.range.start, env)
            stop = self.eval(s.range.stop, env)
            thread = s.mode in ("thread", "magic_thread")
            if thread and self.ctx_width:
                outer = self.ctx_width[-1]
                n = max(stop - start, 1)
                self.ctx_width.append(outer // n if n and outer % n == 0 else outer)
            for i in range(start, stop):
                frame = _Frame()
                frame.vars[s.index] = i
                r = self.exec_seq(s.body, env + [frame])
                if r is not None:
                    if thread and self.ctx_width:
                        self.ctx_width.pop()
                    return r
            if thread and self.ctx_width:
                self.ctx_width.pop()
            return None
        if isinstance(s, If):
            if self.eval(s.cond, env):
                return self.exec_seq(s.then, env)
            if s.els is not None:
                return self.exec_seq(s.els, env)
            return None
        if isinstance(s, Return):
            return ("ret", self.eval(s.value, env))
        raise InterpError(f"cannot execute {type(s).__name__}")

    def _exec_decl(self, d: Decl, env):
        frame = env[-1]
        if d.alloc is None:
            val = self.eval(d.init, env) if d.init is not None else None
            if val is not None and d.ctype == "float":
                val = f32(val)
            frame.vars[d.name] = {"cell": val, "t": d.ctype}
            return None
        dims = [self.eval(x, env) for x in d.dims]
        if d.alloc == "__smem_malloc":
            if not self.launch:
                raise InterpError("__smem_malloc outside a kernel launch")
            dims = [self.launch[-1][0]] + dims
        elif d.alloc == "__treg_malloc":
            width = self.ctx_width[-1] if self.ctx_width else 1
            dims = [width] + dims
        frame.vars[d.name] = PtrVal(Array.alloc(dims, d.ctype))
        return None

    def _exec_call(self, s: CallStmt, env):
        if s.ghost:
            return None
        fn = s.fn
        if fn == "kernel_launch":
            bpg = self.eval(s.args[0], env)
            tpb = self.eval(s.args[1], env)
            smem = self.eval(s.args[2], env)
            self.launch.append((bpg, tpb, smem))
            self.ctx_width.append(bpg * tpb)
            return None
        if fn in ("kernel_setup_end", "kernel_teardown_begin", "blocksync",
                  "magic_barrier", "kernel_teardown_sync"):
            return None
        if fn == "kernel_kill":
            self.launch.pop()
            self.ctx_width.pop()
            return None
        if fn in ("free", "gmem_free") or fn.startswith("__smem_free"):
            p = self.eval(s.args[0], env)
            if isinstance(p, PtrVal):
                p.array.freed = True
            return None
        if fn.startswith("memcpy_host_to_device") or \
                fn.startswith("memcpy_device_to_host"):
            dest = self.eval(s.args[0], env)
            src = self.eval(s.args[1], env)
            n = 1
            for a in s.args[2:]:
                n *= self.eval(a, env)
            for i in range(n):
                v = src.array.data[i]
                if v is None:
                    raise InterpError("memcpy of uninitialized data")
                dest.array.data[i] = v
            return None
        # user function
        try:
            callee = self.program.fn(fn)
        except KeyError:
            raise InterpError(f"unknown function {fn!r}")
        if callee.body is None:
            raise InterpError(f"cannot interpret admitted function {fn!r}")
        frame = _Frame()
        for (pname, ptype), a in zip(callee.params, s.args):
            frame.vars[pname] = self.eval(a, env)
        r = self.exec_seq(callee.body, [frame])
        return None  # statement-position calls discard results


def run_program(program: Program, entry: str, inputs: dict):
    """Returns (return value, {param name: flat list of final array data})."""
    it = Interp(program)
    ret, arrays = it.run(entry, dict(inputs))
    out_arrays = {k: list(a.data) for k, a in arrays.items()}
    if isinstance(ret, tuple) and ret and ret[0] == "ret":
        ret = ret[1]
    return ret, out_arrays
