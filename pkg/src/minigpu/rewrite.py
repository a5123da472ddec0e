"""Statement-level rewriting utilities shared by the transformations:
capture-avoiding substitution over code, contracts and ghost arguments,
plus location/access mapping (used when arrays are renamed, reindexed or
given distributed dimensions).
"""

from __future__ import annotations

from dataclasses import replace

from .ast import (
    Access,
    Assign,
    CallStmt,
    Decl,
    Expr,
    For,
    If,
    Loc,
    LoopAnnots,
    Range,
    Return,
    Seq,
    Stmt,
    Var,
    subst_expr,
)
from .resources import Group, PointsTo, PureItem, ResExpr, subst_res


def subst_ghost_args(items, env: dict[str, Expr]):
    out = []
    for it in items:
        if it[0] == "pos":
            out.append(("pos", subst_expr(it[1], env)))
        elif it[0] == "kw":
            out.append(("kw", it[1], subst_expr(it[2], env)))
        elif it[0] == "res":
            out.append(("res", it[1], subst_res(it[2], env)))
        elif it[0] == "hole":
            hole = it[2]
            inner = {k: v for k, v in env.items() if k != hole}
            out.append(("hole", it[1], hole, subst_res(it[3], inner)))
    return tuple(out)


def subst_annot_items(items, env, pure=False):
    out = []
    for name, payload in items:
        if isinstance(payload, PureItem):
            if payload.prop is not None:
                out.append((name, PureItem(prop=subst_expr(payload.prop, env))))
            else:
                out.append((name, payload))
        else:
            out.append((name, subst_res(payload, env)))
    return out


def subst_loop_annots(c: LoopAnnots, env) -> LoopAnnots:
    out = LoopAnnots()
    for clause in LoopAnnots.CLAUSES:
        pure = clause in ("xrequires", "xensures")
        setattr(out, clause, subst_annot_items(getattr(c, clause), env, pure))
    return out


def subst_stmt(s: Stmt, env: dict[str, Expr]) -> None:
    """In-place capture-avoiding substitution over a statement subtree,
    descending into contracts and ghost arguments."""
    if not env:
        return
    if isinstance(s, Decl):
        if s.init is not None:
            s.init = subst_expr(s.init, env)
        s.dims = tuple(subst_expr(d, env) for d in s.dims)
    elif isinstance(s, Assign):
        base = s.target.base
        repl = env.get(base)
        idxs = tuple(subst_expr(i, env) for i in s.target.idxs)
        if isinstance(repl, Var):
            base = repl.name
        elif repl is not None:
            from .ast import Ptr
            if isinstance(repl, Ptr):
                base, idxs = repl.base, repl.idxs + idxs
        s.target = Loc(base, idxs)
        s.value = subst_expr(s.value, env)
    elif isinstance(s, CallStmt):
        s.args = tuple(subst_expr(a, env) for a in s.args)
        s.ghost_args = subst_ghost_args(s.ghost_args, env)
    elif isinstance(s, Seq):
        for c in s.stmts:
            subst_stmt(c, env)
    elif isinstance(s, For):
        s.range = Range(subst_expr(s.range.start, env), subst_expr(s.range.stop, env))
        inner = {k: v for k, v in env.items() if k != s.index}
        s.contract = subst_loop_annots(s.contract, inner)
        subst_stmt(s.body, inner)
    elif isinstance(s, If):
        s.cond = subst_expr(s.cond, env)
        subst_stmt(s.then, env)
        if s.els is not None:
            subst_stmt(s.els, env)
    elif isinstance(s, Return):
        s.value = subst_expr(s.value, env)


# ---------------------------------------------------------------------------
# Location mapping: rename/reindex every access and permission of one array


def map_expr_locs(e: Expr, base: str, fn) -> Expr:
    """fn(idxs) -> (new_base, new_idxs); applied to Access/Ptr on `base`."""
    if isinstance(e, Access):
        idxs = tuple(map_expr_locs(i, base, fn) for i in e.idxs)
        if e.base == base:
            nb, ni = fn(idxs)
            return Access(nb, ni)
        return Access(e.base, idxs)
    from .ast import BinOp, Call, Lam, Ptr
    if isinstance(e, Ptr):
        idxs = tuple(map_expr_locs(i, base, fn) for i in e.idxs)
        if e.base == base:
            nb, ni = fn(idxs)
            return Ptr(nb, ni)
        return Ptr(e.base, idxs)
    if isinstance(e, BinOp):
        return BinOp(e.op, map_expr_locs(e.lhs, base, fn), map_expr_locs(e.rhs, base, fn))
    if isinstance(e, Call):
        return Call(e.fn, tuple(map_expr_locs(a, base, fn) for a in e.args))
    if isinstance(e, Lam):
        return Lam(e.params, map_expr_locs(e.body, base, fn))
    return e


def map_res_locs(r: ResExpr, base: str, fn, leaf_fn=None) -> ResExpr:
    """Rewrite permissions on `base`: fn maps index tuples, leaf_fn may
    further adjust the rewritten PointsTo (e.g. set a memory type)."""
    if isinstance(r, PointsTo):
        idxs = tuple(map_expr_locs(i, base, fn) for i in r.loc.idxs)
        val = r.val
        from .ast import UNINIT
        if val is not UNINIT:
            val = map_expr_locs(val, base, fn)
        if r.loc.base == base:
            nb, ni = fn(idxs)
            out = PointsTo(Loc(nb, ni), r.mem, r.frac, val)
            return leaf_fn(out) if leaf_fn else out
        return PointsTo(Loc(r.loc.base, idxs), r.mem, r.frac, val)
    if isinstance(r, Group):
        return replace(r, body=map_res_locs(r.body, base, fn, leaf_fn),
                       range=Range(map_expr_locs(r.range.start, base, fn),
                                   map_expr_locs(r.range.stop, base, fn)))
    from .resources import FreeTok, SyncRes
    if isinstance(r, SyncRes):
        return SyncRes(r.pred, map_res_locs(r.inner, base, fn, leaf_fn))
    if isinstance(r, FreeTok):
        inner = map_res_locs(r.inner, base, fn, leaf_fn) if r.inner else None
        nb = r.base
        if r.base == base:
            nb, _ = fn(())
        return FreeTok(nb, inner)
    return r


def map_stmt_locs(s: Stmt, base: str, fn, leaf_fn=None) -> None:
    """In-place location mapping over code, contracts and ghost args."""
    if isinstance(s, Decl):
        if s.init is not None:
            s.init = map_expr_locs(s.init, base, fn)
        s.dims = tuple(map_expr_locs(d, base, fn) for d in s.dims)
    elif isinstance(s, Assign):
        idxs = tuple(map_expr_locs(i, base, fn) for i in s.target.idxs)
        if s.target.base == base:
            nb, ni = fn(idxs)
            s.target = Loc(nb, ni)
        else:
            s.target = Loc(s.target.base, idxs)
        s.value = map_expr_locs(s.value, base, fn)
    elif isinstance(s, CallStmt):
        s.args = tuple(map_expr_locs(a, base, fn) for a in s.args)
        out = []
        for it in s.ghost_args:
            if it[0] == "pos":
                out.append(("pos", map_expr_locs(it[1], base, fn)))
            elif it[0] == "kw":
                out.append(("kw", it[1], map_expr_locs(it[2], base, fn)))
            elif it[0] == "res":
                out.append(("res", it[1], map_res_locs(it[2], base, fn, leaf_fn)))
            elif it[0] == "hole":
                out.append(("hole", it[1], it[2],
                            map_res_locs(it[3], base, fn, leaf_fn)))
        s.ghost_args = tuple(out)
    elif isinstance(s, Seq):
        for c in s.stmts:
            map_stmt_locs(c, base, fn, leaf_fn)
    elif isinstance(s, For):
        s.range = Range(map_expr_locs(s.range.start, base, fn),
                        map_expr_locs(s.range.stop, base, fn))
        nc = LoopAnnots()
        for clause in LoopAnnots.CLAUSES:
            items = []
            for name, payload in getattr(s.contract, clause):
                if isinstance(payload, PureItem):
                    items.append((name, payload))
                else:
                    items.append((name, map_res_locs(payload, base, fn, leaf_fn)))
            setattr(nc, clause, items)
        s.contract = nc
        map_stmt_locs(s.body, base, fn, leaf_fn)
    elif isinstance(s, If):
        s.cond = map_expr_locs(s.cond, base, fn)
        map_stmt_locs(s.then, base, fn, leaf_fn)
        if s.els is not None:
            map_stmt_locs(s.els, base, fn, leaf_fn)
    elif isinstance(s, Return):
        s.value = map_expr_locs(s.value, base, fn)


def collect_access_bases(s: Stmt) -> tuple[set[str], set[str]]:
    """(read bases, written bases) of array accesses in a subtree."""
    reads: set[str] = set()
    writes: set[str] = set()

    def expr(e: Expr):
        from .ast import BinOp, Call, Lam, Ptr
        if isinstance(e, Access):
            reads.add(e.base)
            for i in e.idxs:
                expr(i)
        elif isinstance(e, BinOp):
            expr(e.lhs)
            expr(e.rhs)
        elif isinstance(e, (Call,)):
            for a in e.args:
                expr(a)
        elif isinstance(e, Ptr):
            for a in e.idxs:
                expr(a)
        elif isinstance(e, Lam):
            expr(e.body)

    def walk(t: Stmt):
        if isinstance(t, Assign):
            if t.target.idxs:
                writes.add(t.target.base)
                if t.op == "+=":
                    reads.add(t.target.base)
            for i in t.target.idxs:
                expr(i)
            expr(t.value)
        elif isinstance(t, Decl):
            if t.init is not None:
                expr(t.init)
        elif isinstance(t, CallStmt):
            for a in t.args:
                expr(a)
        elif isinstance(t, Seq):
            for c in t.stmts:
                walk(c)
        elif isinstance(t, For):
            expr(t.range.start)
            expr(t.range.stop)
            walk(t.body)
        elif isinstance(t, If):
            expr(t.cond)
            walk(t.then)
            if t.els:
                walk(t.els)
        elif isinstance(t, Return):
            expr(t.value)

    walk(s)
    return reads, writes
