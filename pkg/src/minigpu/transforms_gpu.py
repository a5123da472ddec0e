"""GPU-phase transformations: kernel-launch insertion, thread-hierarchy
conversion with barrier hoisting, and memory/instruction selection."""

from __future__ import annotations

from dataclasses import replace

from . import arith
from .ast import (
    Access,
    Assign,
    BinOp,
    Call,
    CallStmt,
    Decl,
    Expr,
    For,
    IntLit,
    Loc,
    LoopAnnots,
    MAGIC_MODE,
    Program,
    Ptr,
    Range,
    SEQ_MODE,
    Seq,
    Stmt,
    THREAD_MODE,
    Var,
    fresh_name,
    is_ghost_stmt,
    iter_stmts,
)
from .errors import CheckError
from .parser import parse_expr_str
from .printer import format_expr
from .resources import GMEM, Group, PointsTo, ResExpr, SMEM
from .rewrite import map_stmt_locs
from .targets import find_parent, resolve_one
from .transforms_cpu import _seq_owner, arg_expr, err, fission_loop


TRANSITIONS = ("kernel_launch", "kernel_setup_end", "kernel_teardown_begin",
               "kernel_kill")


def t_create_kernel_launch(pipe, cmd):
    hit = resolve_one(pipe.program, cmd.target)
    n = int(cmd.args.get("span", "1"))
    bpg = arg_expr(cmd, "bpg")
    tpb = arg_expr(cmd, "tpb")
    smem = arg_expr(cmd, "smem")
    fn = _owning_fn(pipe.program, hit.stmt)
    if not _mentions_hostctx(fn):
        raise err(f"create_kernel_launch: function {fn.name} does not carry "
                  f"HostCtx in its precondition", "E-NOMATCH")
    span = hit.parent.stmts[hit.index:hit.index + n]
    wrap = Seq(scope=True, stmts=[
        CallStmt(fn="kernel_launch", args=(bpg, tpb, smem)),
        CallStmt(fn="kernel_setup_end"),
        *span,
        CallStmt(fn="kernel_teardown_begin"),
        CallStmt(fn="kernel_kill"),
    ])
    hit.parent.stmts[hit.index:hit.index + n] = [wrap]


def _owning_fn(program: Program, node: Stmt):
    for fn in program.fns:
        if fn.body is None:
            continue
        for s in iter_stmts(fn.body):
            if s is node:
                return fn
    raise err("node is not in the program")


def _mentions_hostctx(fn) -> bool:
    from .resources import HostCtx
    for clause in ("preserves", "consumes"):
        for _, r in getattr(fn.annots, clause):
            if isinstance(r, HostCtx):
                return True
    return False


def t_to_setup(pipe, cmd):
    hit = resolve_one(pipe.program, cmd.target)
    d = hit.stmt
    if not isinstance(d, Decl) or d.alloc is None:
        raise err("to_setup: target must be an array declaration")
    kernel = hit.parent
    idx = {s.fn: i for i, s in enumerate(kernel.stmts)
           if isinstance(s, CallStmt) and s.fn in TRANSITIONS}
    if "kernel_setup_end" not in idx or "kernel_teardown_begin" not in idx:
        raise err("to_setup: declaration is not inside a kernel block")
    kernel.stmts.remove(d)
    kernel.stmts.insert(kernel.stmts.index(
        next(s for s in kernel.stmts if isinstance(s, CallStmt)
             and s.fn == "kernel_setup_end")), d)
    # move the free into the teardown region
    free_stmt = None
    for s in kernel.stmts:
        if isinstance(s, CallStmt) and s.fn == "free" and s.args and \
                getattr(s.args[0], "name", getattr(s.args[0], "base", None)) == d.name:
            free_stmt = s
    if free_stmt is not None:
        kernel.stmts.remove(free_stmt)
        td = next(s for s in kernel.stmts if isinstance(s, CallStmt)
                  and s.fn == "kernel_teardown_begin")
        kernel.stmts.insert(kernel.stmts.index(td) + 1, free_stmt)


# ---------------------------------------------------------------------------
# magic thread for conversion (Fig. 5.4 micro-steps)


def t_to_magic_thread_for(pipe, cmd):
    hit = resolve_one(pipe.program, cmd.target)
    L = hit.stmt
    if not isinstance(L, For):
        raise err("to_magic_thread_for: target must be a loop")
    flags = [f.strip() in ("true", "t", "1", "yes")
             for f in cmd.args.get("flags", "").split(",") if f.strip()]
    # tail-nest validation along the planned chain
    cur = L
    for flag in flags:
        parent, i = find_parent(pipe.program, cur)
        trailing = parent.stmts[i + 1:]
        if any(not is_ghost_stmt(t) and not _is_barrier(t) for t in trailing):
            raise err("to_magic_thread_for: not a tail loop nest "
                      f"(statements follow the loop over {cur.index})")
        owner = _seq_owner(pipe.program, parent)
        if not isinstance(owner, For):
            raise err("to_magic_thread_for: flags exceed the nest depth")
        cur = owner

    _convert_one(pipe, L, cmd)
    for flag in flags:
        parent, i = find_parent(pipe.program, L)
        enclosing = _seq_owner(pipe.program, parent)
        if not isinstance(enclosing, For):
            raise err("to_magic_thread_for: ran out of enclosing loops")
        if not flag:
            break
        bar_idx = _barrier_index_after(parent, L)
        loop1, loop2 = fission_loop(pipe, enclosing, bar_idx)
        pipe.recheck(f"{cmd.name}: fission around the barrier")
        _remove_loop_around_barrier(pipe, loop2)
        pipe.recheck(f"{cmd.name}: hoist the barrier")
        L = loop1
        _convert_one(pipe, L, cmd)


def _is_barrier(s: Stmt) -> bool:
    return isinstance(s, CallStmt) and s.fn in ("magic_barrier", "blocksync",
                                                "kernel_teardown_sync")


def _barrier_index_after(parent: Seq, L: For) -> int:
    i = parent.stmts.index(L)
    j = i + 1
    while j < len(parent.stmts) and is_ghost_stmt(parent.stmts[j]):
        j += 1
    if j >= len(parent.stmts) or not _is_barrier(parent.stmts[j]):
        raise err("expected a barrier after the converted loop", "E-INTERNAL")
    return j


def _convert_one(pipe, L: For, cmd):
    L.mode = MAGIC_MODE
    parent, i = find_parent(pipe.program, L)
    j = i + 1
    while j < len(parent.stmts) and is_ghost_stmt(parent.stmts[j]):
        j += 1
    if not (j < len(parent.stmts) and isinstance(parent.stmts[j], CallStmt)
            and parent.stmts[j].fn == "magic_barrier"):
        parent.stmts.insert(i + 1, CallStmt(fn="magic_barrier"))
    pipe.recheck(f"{cmd.name}: convert loop over {L.index}")


def _remove_loop_around_barrier(pipe, loop: For):
    body = [s for s in loop.body.stmts]
    barriers = [s for s in body if _is_barrier(s)]
    others = [s for s in body if not _is_barrier(s)]
    if len(barriers) != 1 or any(not is_ghost_stmt(s) for s in others):
        raise err("remove_loop_around_barrier: body must be exactly one "
                  "barrier plus ghosts")
    lifted: list[Stmt] = []
    for g in others:
        lifted.append(_lift_ghost(g, loop))
    parent, pos = find_parent(pipe.program, loop)
    parent.stmts[pos:pos + 1] = [barriers[0]] + lifted


def _lift_ghost(g: CallStmt, loop: For) -> CallStmt:
    """Wrap a per-iteration group ghost so it acts under the loop's group."""
    items = []
    ok = False
    for it in g.ghost_args:
        if it[0] == "res":
            items.append(("res", it[1],
                          Group(loop.index, loop.range, it[2])))
            ok = True
        elif it[0] == "kw" and it[1] == "under" and isinstance(it[2], IntLit):
            items.append(("kw", "under", IntLit(it[2].value + 1)))
        else:
            items.append(it)
    if not ok:
        raise err(f"cannot hoist ghost {g.fn} out of the dissolved loop")
    if not any(it[0] == "kw" and it[1] == "under" for it in items):
        items.append(("kw", "under", IntLit(1)))
    return CallStmt(fn=g.fn, ghost=True, ghost_args=tuple(items))


def t_remove_loop_around_barrier(pipe, cmd):
    hit = resolve_one(pipe.program, cmd.target)
    if not isinstance(hit.stmt, For):
        raise err("remove_loop_around_barrier: target must be a loop")
    _remove_loop_around_barrier(pipe, hit.stmt)


def t_convert_magic_thread_fors(pipe, cmd):
    hit = resolve_one(pipe.program, cmd.target)
    L = hit.stmt
    if not isinstance(L, For):
        raise err("convert_magic_thread_fors: target must be a loop")
    count = 0
    for s in iter_stmts(L):
        if isinstance(s, For) and s.mode == MAGIC_MODE:
            s.mode = THREAD_MODE
            count += 1
    if count == 0:
        raise err("convert_magic_thread_fors: no magic thread loops found")


# ---------------------------------------------------------------------------
# memory conversion


def t_convert_memory(pipe, cmd):
    mem = cmd.args.get("mem")
    if mem not in ("gmem", "smem"):
        raise err("convert_memory: mem= must be gmem or smem")
    hit = resolve_one(pipe.program, cmd.target)
    d = hit.stmt
    if not isinstance(d, Decl) or d.alloc != "MALLOC":
        raise err("convert_memory: target must be a generic heap declaration")
    fn = _owning_fn(pipe.program, d)
    if mem == "gmem":
        _convert_gmem(pipe, fn, d)
    else:
        erase = int(cmd.args.get("erase_dims", "0"))
        _convert_smem(pipe, fn, d, erase)


def _convert_gmem(pipe, fn, d: Decl):
    d.alloc = "gmem_malloc"
    free_stmt = _find_free(fn, d.name)
    if free_stmt is not None:
        free_stmt.fn = "gmem_free"

    def leaf(pt: PointsTo) -> PointsTo:
        return replace(pt, mem=GMEM)

    map_stmt_locs(fn.body, d.name, lambda idxs: (d.name, tuple(idxs)), leaf_fn=leaf)
    _fuse_copies(pipe, fn, d)


def _convert_smem(pipe, fn, d: Decl, erase: int):
    if erase <= 0 or erase >= len(d.dims):
        raise err("convert_memory: erase_dims must leave at least one real "
                  "dimension")
    dist_dims = d.dims[:erase]
    real_dims = d.dims[erase:]
    kernel = _enclosing_kernel(pipe.program, d)
    if kernel is None or not _in_setup(kernel, d):
        raise err("convert_memory: shared memory must be allocated in the "
                  "kernel setup region", "E-PHASE")
    d.alloc = "__smem_malloc"
    d.dims = real_dims
    free_stmt = _find_free(fn, d.name)
    if free_stmt is not None:
        free_stmt.fn = f"__smem_free{len(real_dims)}"
        free_stmt.args = (free_stmt.args[0],) + tuple(real_dims)
        if not _in_teardown(kernel, free_stmt):
            raise err("convert_memory: shared memory must be freed in the "
                      "kernel teardown region", "E-PHASE")

    def remap(idxs):
        if len(idxs) != erase + len(real_dims):
            return (d.name, tuple(idxs))
        dm = Call(f"DMINDEX{erase}", tuple(dist_dims) + tuple(idxs[:erase]))
        return (d.name, (dm,) + tuple(idxs[erase:]))

    def leaf(pt: PointsTo) -> PointsTo:
        return replace(pt, mem=SMEM)

    map_stmt_locs(fn.body, d.name, remap, leaf_fn=leaf)
    _desyncify_distributed(fn.body, d.name)


def _desyncify_distributed(body: Seq, base: str):
    """Group binders feeding a DMINDEX slot of `base` become desync groups
    in every contract formula."""
    def fix_res(r: ResExpr) -> ResExpr:
        return _fix_layers(r, set())

    def _dm_binders(r: ResExpr, acc: set):
        if isinstance(r, PointsTo):
            if r.loc.base == base and r.loc.idxs:
                first = r.loc.idxs[0]
                if isinstance(first, Call) and first.fn.startswith("DMINDEX"):
                    k = len(first.args) // 2
                    from .ast import expr_free_vars
                    for a in first.args[k:]:
                        acc |= expr_free_vars(a)
        elif isinstance(r, Group):
            _dm_binders(r.body, acc)

    def _fix_layers(r: ResExpr, inherited) -> ResExpr:
        if not isinstance(r, Group):
            return r
        acc: set = set()
        _dm_binders(r, acc)
        desync = r.desync or (r.binder in acc)
        return replace(r, desync=desync, body=_fix_layers(r.body, inherited))

    for s in iter_stmts(body):
        if isinstance(s, For):
            c = s.contract
            for clause in LoopAnnots.CLAUSES:
                items = []
                for name, payload in getattr(c, clause):
                    if isinstance(payload, ResExpr):
                        items.append((name, fix_res(payload)))
                    else:
                        items.append((name, payload))
                setattr(c, clause, items)
        elif isinstance(s, CallStmt) and s.ghost:
            out = []
            for it in s.ghost_args:
                if it[0] == "res":
                    out.append(("res", it[1], fix_res(it[2])))
                elif it[0] == "hole":
                    out.append(("hole", it[1], it[2], fix_res(it[3])))
                else:
                    out.append(it)
            s.ghost_args = tuple(out)


def _enclosing_kernel(program: Program, node: Stmt) -> Seq | None:
    fn = _owning_fn(program, node)

    def walk(seq: Seq, kernel: Seq | None):
        k = kernel
        if any(isinstance(s, CallStmt) and s.fn == "kernel_launch"
               for s in seq.stmts):
            k = seq
        for s in seq.stmts:
            if s is node:
                return k
            if isinstance(s, Seq):
                r = walk(s, k)
                if r is not None:
                    return r
            elif isinstance(s, For):
                r = walk(s.body, k)
                if r is not None:
                    return r
            elif hasattr(s, "then"):
                r = walk(s.then, k)
                if r is None and s.els is not None:
                    r = walk(s.els, k)
                if r is not None:
                    return r
        return None

    return walk(fn.body, None)


def _region_index(kernel: Seq, name: str) -> int:
    for i, s in enumerate(kernel.stmts):
        if isinstance(s, CallStmt) and s.fn == name:
            return i
    return -1


def _in_setup(kernel: Seq, node: Stmt) -> bool:
    launch = _region_index(kernel, "kernel_launch")
    end = _region_index(kernel, "kernel_setup_end")
    return launch >= 0 and end >= 0 and node in kernel.stmts[launch + 1:end]


def _in_teardown(kernel: Seq, node: Stmt) -> bool:
    begin = _region_index(kernel, "kernel_teardown_begin")
    kill = _region_index(kernel, "kernel_kill")
    return begin >= 0 and kill >= 0 and node in kernel.stmts[begin + 1:kill]


def _find_free(fn, name: str) -> CallStmt | None:
    for s in iter_stmts(fn.body):
        if isinstance(s, CallStmt) and (s.fn == "free" or s.fn == "gmem_free"
                                        or s.fn.startswith("__smem_free")):
            if s.args and getattr(s.args[0], "name",
                                  getattr(s.args[0], "base", None)) == name:
                return s
    return None


def _fuse_copies(pipe, fn, d: Decl):
    """Turn canonical element-copy loop nests touching the converted array
    into memcpy intrinsics."""
    k = len(d.dims)

    def is_copy_nest(s: Stmt):
        idxs = []
        cur = s
        for _ in range(k):
            if not isinstance(cur, For):
                return None
            idxs.append((cur.index, cur.range))
            inner = [x for x in cur.body.stmts if not is_ghost_stmt(x)]
            if len(inner) != 1:
                return None
            cur = inner[0]
        if not isinstance(cur, Assign) or cur.op != "=":
            return None
        tgt = cur.target
        if not isinstance(cur.value, Access):
            return None
        src = cur.value
        names = [v for v, _ in idxs]
        if [format_expr(i) for i in tgt.idxs] != names:
            return None
        if [format_expr(i) for i in src.idxs] != names:
            return None
        for (_, rng), dim in zip(idxs, list(d.dims)):
            facts = arith.Facts()
            if not (arith.prove_eq(rng.start, IntLit(0), facts)):
                return None
        return tgt.base, src.base

    def walk(seq: Seq):
        for i, s in enumerate(seq.stmts):
            hit = is_copy_nest(s)
            if hit:
                tgt, src = hit
                if tgt == d.name and src != d.name:
                    seq.stmts[i] = CallStmt(
                        fn=f"memcpy_host_to_device{k}",
                        args=(Var(tgt), Var(src)) + tuple(d.dims))
                    continue
                if src == d.name and tgt != d.name:
                    seq.stmts[i] = CallStmt(
                        fn=f"memcpy_device_to_host{k}",
                        args=(Var(tgt), Var(src)) + tuple(d.dims))
                    continue
            if isinstance(s, Seq):
                walk(s)
            elif isinstance(s, For):
                walk(s.body)

    walk(fn.body)


# ---------------------------------------------------------------------------
# realize_barrier


def t_realize_barrier(pipe, cmd):
    kind = cmd.args.get("kind")
    if kind not in ("block", "kernel_end"):
        raise err("realize_barrier: kind= must be block or kernel_end")
    hit = resolve_one(pipe.program, cmd.target)
    call = hit.stmt
    if not (isinstance(call, CallStmt) and call.fn == "magic_barrier"):
        raise err("realize_barrier: target must be a magic_barrier call")
    if kind == "block":
        call.fn = "blocksync"
        return
    call.fn = "kernel_teardown_sync"
    parent, i = find_parent(pipe.program, call)
    j = i + 1
    while j < len(parent.stmts) and is_ghost_stmt(parent.stmts[j]):
        j += 1
    if j < len(parent.stmts) and isinstance(parent.stmts[j], CallStmt) \
            and parent.stmts[j].fn == "kernel_teardown_begin":
        parent.stmts.pop(i)
        parent.stmts.insert(j, call)
