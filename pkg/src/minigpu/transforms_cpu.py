"""CPU-phase transformations: loop restructuring with contract synthesis.

Every transformation rewrites the AST (and the contracts/ghosts needed to
keep the proof alive); the engine re-typechecks the whole program after
each command, so synthesis here only has to be sound for the corpus-honest
cases and may fail loudly otherwise.

Group-reshaping ghosts are always placed at the root of the affected loop
nest: enclosing loop contracts are rewritten instead of planting ghosts
between nested loops, which keeps tail nests clean for the GPU phase.
"""

from __future__ import annotations

from dataclasses import replace

from . import arith
from .arith import Facts
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
    IntLit,
    Loc,
    LoopAnnots,
    PAR_MODE,
    Program,
    Ptr,
    Range,
    SEQ_MODE,
    Seq,
    Stmt,
    UNINIT,
    Var,
    clone_stmt,
    fresh_name,
    is_ghost_stmt,
    iter_stmts,
    subst_expr,
)
from .contracts import uninit_res
from .errors import CheckError
from .frame import res_canon
from .parser import parse_expr_str, parse_ghost_args
from .printer import format_expr, format_res
from .resources import Group, PointsTo, PureItem, ResExpr, subst_res
from .rewrite import (
    collect_access_bases,
    map_stmt_locs,
    subst_loop_annots,
    subst_stmt,
)
from .targets import Hit, find_parent, resolve_one


def err(msg: str, code: str = "E-TARGET") -> CheckError:
    return CheckError(code, msg)


def facts_at(pipe, node: Stmt) -> Facts:
    """Function-level facts plus the bounds of every loop enclosing node."""
    facts = Facts()
    fn = None
    for f in pipe.program.fns:
        if f.body is None:
            continue
        if any(s is node for s in iter_stmts(f.body)):
            fn = f
            break
    if fn is None:
        return facts
    for _, item in fn.annots.requires:
        if item.prop is not None:
            facts.add_prop(item.prop)

    def walk(seq: Seq, bounds):
        for s in seq.stmts:
            if s is node:
                for v, lo, hi in bounds:
                    facts.add_bound(v, lo, hi)
                return True
            if isinstance(s, Seq) and walk(s, bounds):
                return True
            if isinstance(s, For) and (s is node or walk(
                    s.body, bounds + [(s.index, s.range.start, s.range.stop)])):
                if s is node:
                    for v, lo, hi in bounds:
                        facts.add_bound(v, lo, hi)
                return True
            if hasattr(s, "then"):
                if walk(s.then, bounds) or (s.els and walk(s.els, bounds)):
                    return True
        return False

    walk(fn.body, [])
    return facts


def ghost(fn: str, args: str) -> CallStmt:
    return CallStmt(fn=fn, ghost=True, ghost_args=parse_ghost_args(args))


def ghost_res(fn: str, items: list) -> CallStmt:
    return CallStmt(fn=fn, ghost=True, ghost_args=tuple(items))


def arg_expr(cmd, key: str, default: str | None = None) -> Expr:
    v = cmd.args.get(key, default)
    if v is None:
        raise err(f"{cmd.name}: missing argument {key}=")
    return parse_expr_str(v, allow_access=True)


# ---------------------------------------------------------------------------
# Contract-entry chains: a loop's exclusive entry and the enclosing entries
# that wrap it, up to the outermost carrying loop.

_X_CLAUSES = ("xconsumes", "xproduces", "xwrites")


def _entries(loop: For):
    for clause in _X_CLAUSES:
        for i, (name, r) in enumerate(getattr(loop.contract, clause)):
            yield clause, i, name, r


def _loop_chain(pipe, loop: For) -> list[For]:
    """Enclosing loops from the innermost outwards (perfect containment of
    statements is not required, only body membership)."""
    chain = []
    cur: Stmt = loop
    while True:
        parent, _ = find_parent(pipe.program, cur)
        owner = _seq_owner(pipe.program, parent)
        if isinstance(owner, For):
            chain.append(owner)
            cur = owner
        else:
            break
    return chain


def _seq_owner(program: Program, seq: Seq):
    for fn in program.fns:
        if fn.body is None:
            continue
        if fn.body is seq:
            return fn
        for s in iter_stmts(fn.body):
            if isinstance(s, For) and s.body is seq:
                return s
            if isinstance(s, Seq) and s is seq:
                continue
    # a plain nested scope: find the statement owning it
    for fn in program.fns:
        if fn.body is None:
            continue
        for s in iter_stmts(fn.body):
            if isinstance(s, Seq) and seq in s.stmts:
                return s
    return None


def _carry_chain(pipe, loop: For, entry: ResExpr, facts: Facts):
    """Walk outwards while each enclosing loop has an entry equal to the
    group-wrapped inner entry. Returns (carrying loops, their entry slots,
    the outermost resource shape)."""
    chain = []
    cur_entry = entry
    cur_loop = loop
    for enc in _loop_chain(pipe, loop):
        wrapped = Group(cur_loop.index, cur_loop.range, cur_entry)
        found = None
        for clause, i, name, r in _entries(enc):
            if res_canon(r, facts) == res_canon(wrapped, facts):
                found = (enc, clause, i, name)
                break
        if not found:
            break
        chain.append(found)
        cur_entry = wrapped
        cur_loop = enc
    top = Group(cur_loop.index, cur_loop.range, cur_entry)
    return chain, top, cur_loop


def _set_entry(loop: For, clause: str, i: int, r: ResExpr):
    items = getattr(loop.contract, clause)
    name, _ = items[i]
    items[i] = (name, r)


def _rewrap(chain, new_entry: ResExpr, inner_loop: For):
    """Rewrite each carrying entry to wrap the new inner entry."""
    cur = new_entry
    cur_loop = inner_loop
    for enc, clause, i, name in chain:
        cur = Group(cur_loop.index, cur_loop.range, cur)
        _set_entry(enc, clause, i, cur)
        cur_loop = enc
    return Group(cur_loop.index, cur_loop.range, cur)


# ---------------------------------------------------------------------------
# tile


def t_tile(pipe, cmd):
    hit = resolve_one(pipe.program, cmd.target)
    L = hit.stmt
    if not isinstance(L, For):
        raise err("tile: target must be a loop")
    if cmd.args.get("bound", "divides") != "divides":
        raise err("tile: only bound=divides is supported")
    size = arg_expr(cmd, "size")
    outer_idx = cmd.args.get("index") or fresh_name(L.index + "o")
    facts = facts_at(pipe, L)
    if not arith.prove_eq(L.range.start, IntLit(0), facts):
        raise err("tile: loop must start at 0")
    if not arith.prove_divides(size, L.range.stop, facts):
        raise err(f"tile: cannot prove {format_expr(size)} divides "
                  f"{format_expr(L.range.stop)}", "E-DIV")
    if L.contract.xreads or L.contract.xrequires or L.contract.xensures:
        raise err("tile: loops with exclusive reads or pure exclusives are "
                  "not supported")
    n = L.range.stop
    i = L.index
    comb = BinOp("+", BinOp("*", size, Var(outer_idx)), Var(i))
    sub = {i: comb}

    inner = For(index=i, range=Range(IntLit(0), size), mode=L.mode,
                contract=LoopAnnots(), body=L.body)
    subst_stmt(inner.body, sub)
    new_contract_inner = subst_loop_annots(L.contract, sub)
    inner.contract = new_contract_inner

    outer = For(index=outer_idx, range=Range(IntLit(0), Call("exact_div", (n, size))),
                mode=L.mode, contract=LoopAnnots(), body=Seq(stmts=[inner], scope=True))
    oc = LoopAnnots()
    oc.spreserves = [(nm, subst_res(r, {i: BinOp("*", size, Var(outer_idx))}))
                     for nm, r in L.contract.spreserves]
    oc.sreads = list(L.contract.sreads)
    for clause in _X_CLAUSES:
        items = []
        for nm, r in getattr(L.contract, clause):
            items.append((nm, Group(i, Range(IntLit(0), size), subst_res(r, sub))))
        setattr(oc, clause, items)
    outer.contract = oc

    # root ghosts reshaping the context-level groups
    pre_ghosts, post_ghosts = [], []
    for clause, _, _, r in list(_entries(L)):
        chain, top_old, top_loop = _carry_chain(pipe, L, _pre_shape(clause, r), facts)
        if clause in ("xconsumes", "xwrites"):
            depth = len(chain)
            pre_ghosts.append(ghost_res("tile_group", [
                ("res", "H", top_old),
                ("kw", "size", size),
                ("kw", "index", Var(outer_idx)),
                ("kw", "inner", Var(i)),
                ("kw", "under", IntLit(depth)),
            ]))
        if clause in ("xproduces", "xwrites"):
            chain_p, top_old_p, _ = _carry_chain(pipe, L, _post_shape(clause, r), facts)
            new_inner = Group(outer_idx, outer.range,
                              Group(i, Range(IntLit(0), size),
                                    _post_shape(clause, subst_res(r, sub))))
            cur = new_inner
            cur_loop_rng = None
            for enc, _c, _i, _n in chain_p:
                cur = Group(enc.index, enc.range, cur)
            post_ghosts.append(ghost_res("untile_group", [
                ("res", "H", cur),
                ("kw", "size", size),
                ("kw", "index", Var(i)),
                ("kw", "under", IntLit(len(chain_p))),
            ]))
        # rewrite carrying entries (shared pre/post formula per entry)
    for clause, idx2, nm, r in list(_entries(L)):
        chain, _, _ = _carry_chain(pipe, L, _pre_shape(clause, r), facts)
        new_entry = Group(outer_idx, outer.range,
                          Group(i, Range(IntLit(0), size), subst_res(r, sub)))
        cur = new_entry
        cur_loop = None
        for enc, c2, i2, n2 in chain:
            _set_entry(enc, c2, i2, cur if cur_loop is None else cur)
            cur = Group(enc.index, enc.range, cur)
            cur_loop = enc

    # locate the insertion root: the outermost carrying loop (or L itself)
    root = L
    for clause, _, _, r in _entries(L):
        chain, _, top_loop = _carry_chain(pipe, L, _pre_shape(clause, r), facts)
        if chain:
            root = chain[-1][0]
        break
    parent, pos = find_parent(pipe.program, L)
    parent.stmts[pos] = outer
    rparent, rpos = find_parent(pipe.program, root if root is not L else outer)
    for g in reversed(pre_ghosts):
        rparent.stmts.insert(rpos, g)
        rpos += 1
    rpos_after = rpos + 1
    for g in post_ghosts:
        rparent.stmts.insert(rpos_after, g)
        rpos_after += 1


def _pre_shape(clause: str, r: ResExpr) -> ResExpr:
    if clause == "xwrites":
        return uninit_res(r)
    return r


def _post_shape(clause: str, r: ResExpr) -> ResExpr:
    return r


# ---------------------------------------------------------------------------
# swap_loops


def t_swap_loops(pipe, cmd):
    hit = resolve_one(pipe.program, cmd.target)
    A = hit.stmt
    if not isinstance(A, For):
        raise err("swap_loops: target must be a loop")
    inner_stmts = [s for s in A.body.stmts if not is_ghost_stmt(s)]
    if len(inner_stmts) != 1 or not isinstance(inner_stmts[0], For):
        raise err("swap_loops: target body must be exactly one nested loop")
    if any(is_ghost_stmt(s) for s in A.body.stmts):
        raise err("swap_loops: ghosts inside the pair are unsupported")
    B: For = inner_stmts[0]
    if A.contract.spreserves or B.contract.spreserves:
        raise err("swap_loops: loops with sequential invariants cannot be "
                  "swapped", "E-INVARIANT")
    from .ast import expr_free_vars
    if A.index in (expr_free_vars(B.range.start) | expr_free_vars(B.range.stop)):
        raise err("swap_loops: inner bounds depend on the outer index")
    facts = facts_at(pipe, A)

    ghosts_pre, ghosts_post = [], []
    root = A
    for clause, i, nm, rB in list(_entries(B)):
        # A's carrying entry is Group(B.idx, B.range, rB); replace with the
        # swapped wrapping and propagate outwards
        chain, top_old, top_loop = _carry_chain(pipe, B, _pre_shape(clause, rB), facts)
        if not chain or chain[0][0] is not A:
            raise err(f"swap_loops: outer loop does not carry `{nm}`")
        if len(chain) > 0:
            root = chain[-1][0]
        depth = len(chain) - 1  # layers above the A-group inside the root shape
        if clause in ("xconsumes", "xwrites"):
            ghosts_pre.append(ghost_res("swap_group", [
                ("res", "H", top_old), ("kw", "under", IntLit(depth))]))
        if clause in ("xproduces", "xwrites"):
            chain_p, top_old_p, _ = _carry_chain(pipe, B, _post_shape(clause, rB), facts)
            swapped_inner = Group(B.index, B.range,
                                  Group(A.index, A.range, _post_shape(clause, rB)))
            cur = swapped_inner
            for enc, _c, _i, _n in chain_p[1:]:
                cur = Group(enc.index, enc.range, cur)
            ghosts_post.append(ghost_res("swap_group", [
                ("res", "H", cur), ("kw", "under", IntLit(len(chain_p) - 1))]))
        # rewrite carrying entries above A
        cur = Group(B.index, B.range, Group(A.index, A.range, rB))
        for enc, c2, i2, n2 in chain[1:]:
            _set_entry(enc, c2, i2, cur)
            cur = Group(enc.index, enc.range, cur)

    # swap contracts: new outer carries groups over A's index
    new_outer_c = LoopAnnots()
    new_outer_c.sreads = list(A.contract.sreads)
    for clause in _X_CLAUSES:
        items = []
        for nm, rB in getattr(B.contract, clause):
            items.append((nm, Group(A.index, A.range, rB)))
        setattr(new_outer_c, clause, items)
    new_inner_c = B.contract.clone()
    new_inner_c.sreads = list(B.contract.sreads)

    parent, pos = find_parent(pipe.program, A)
    new_inner = For(index=A.index, range=A.range, mode=A.mode,
                    contract=new_inner_c, body=B.body)
    new_outer = For(index=B.index, range=B.range, mode=B.mode,
                    contract=new_outer_c,
                    body=Seq(stmts=[new_inner], scope=True))
    parent.stmts[pos] = new_outer
    rparent, rpos = find_parent(pipe.program, root if root is not A else new_outer)
    for g in reversed(ghosts_pre):
        rparent.stmts.insert(rpos, g)
        rpos += 1
    rpos_after = rpos + 1
    for g in ghosts_post:
        rparent.stmts.insert(rpos_after, g)
        rpos_after += 1


# ---------------------------------------------------------------------------
# fission


def t_fission(pipe, cmd):
    hit = resolve_one(pipe.program, cmd.target)
    if hit.position not in ("before", "after"):
        raise err("fission: target must be a before/after point")
    split_stmt = hit.stmt
    parent = hit.parent
    k = hit.index + (1 if hit.position == "after" else 0)
    loop = _seq_owner(pipe.program, parent)
    if not isinstance(loop, For):
        raise err("fission: split point must be directly inside a loop body")
    fission_loop(pipe, loop, k)


def fission_loop(pipe, loop: For, k: int):
    """Split loop.body at statement index k; synthesize both contracts."""
    body = loop.body.stmts
    if not (0 <= k <= len(body)):
        raise err("fission: split index out of range")
    usage = pipe.usage
    if k == 0 or k == len(body):
        mid_entries = [] if k == 0 else None
    # iteration context at the split point
    if k < len(body):
        entry = usage.get(body[k].nid)
        if entry is None:
            raise err("fission: no usage for the split point (recheck first)",
                      "E-INTERNAL")
        mid_ctx = entry.ctx_before
    else:
        raise err("fission: splitting at the loop end is pointless")

    inv_bases: dict[str, tuple[str, ResExpr]] = {}
    for nm, r in loop.contract.spreserves:
        for b in _res_bases(r):
            inv_bases[b] = (nm, r)
    shared_names = set()
    mid: list[ResExpr] = []
    for n, r in mid_ctx.linear:
        if not isinstance(r, (PointsTo, Group)):
            continue
        if _has_fraction(r):
            continue  # shared read-only pieces return to the context anyway
        bases = _res_bases(r)
        if bases & set(inv_bases):
            continue
        mid.append(r)

    # assign invariants to a side
    before_reads, before_writes = collect_access_bases(Seq(stmts=[clone_stmt(s) for s in body[:k]]))
    after_reads, after_writes = collect_access_bases(Seq(stmts=[clone_stmt(s) for s in body[k:]]))
    inv1, inv2 = [], []
    for nm, r in loop.contract.spreserves:
        bases = _res_bases(r)
        used_before = bool(bases & (before_reads | before_writes))
        used_after = bool(bases & (after_reads | after_writes))
        if used_before and used_after:
            raise err(f"fission: invariant `{nm}` is used on both sides of "
                      f"the split", "E-INVARIANT")
        (inv1 if used_before else inv2).append((nm, r))

    c1 = LoopAnnots()
    c1.spreserves = inv1
    c1.sreads = list(loop.contract.sreads)
    c1.xconsumes = [(nm, _pre_shape(cl, r)) for cl, _, nm, r in _entries(loop)
                    if cl in ("xconsumes", "xwrites")]
    c1.xproduces = [(fresh_name("#m"), r) for r in mid]

    c2 = LoopAnnots()
    c2.spreserves = inv2
    c2.sreads = list(loop.contract.sreads)
    c2.xconsumes = [(fresh_name("#m"), r) for r in mid]
    c2.xproduces = [(nm, r) for cl, _, nm, r in _entries(loop)
                    if cl in ("xproduces", "xwrites")]

    loop1 = For(index=loop.index, range=loop.range, mode=loop.mode, contract=c1,
                body=Seq(stmts=body[:k], scope=True))
    loop2 = For(index=loop.index, range=loop.range, mode=loop.mode, contract=c2,
                body=Seq(stmts=body[k:], scope=True))
    parent, pos = find_parent(pipe.program, loop)
    parent.stmts[pos:pos + 1] = [loop1, loop2]
    return loop1, loop2


def _res_bases(r: ResExpr) -> set[str]:
    if isinstance(r, PointsTo):
        return {r.loc.base}
    if isinstance(r, Group):
        return _res_bases(r.body)
    return set()


def _has_fraction(r: ResExpr) -> bool:
    if isinstance(r, PointsTo):
        return not r.frac.is_full()
    if isinstance(r, Group):
        return _has_fraction(r.body)
    return False


# ---------------------------------------------------------------------------
# hoist


def t_hoist(pipe, cmd):
    hit = resolve_one(pipe.program, cmd.target)
    d = hit.stmt
    if not isinstance(d, Decl) or d.alloc is None:
        raise err("hoist: target must be an array declaration")
    parent = hit.parent
    loop = _seq_owner(pipe.program, parent)
    if not isinstance(loop, For):
        raise err("hoist: declaration is not directly inside a loop body")
    facts = facts_at(pipe, loop)
    if not arith.prove_eq(loop.range.start, IntLit(0), facts):
        raise err("hoist: loop must start at 0")

    # find the matching free and the tile state right before it
    free_stmt = None
    for s in iter_stmts(loop.body):
        if isinstance(s, CallStmt) and s.fn in ("free",) and s.args \
                and isinstance(s.args[0], (Var, Ptr)) \
                and getattr(s.args[0], "name", getattr(s.args[0], "base", None)) == d.name:
            free_stmt = s
    if free_stmt is None:
        raise err(f"hoist: no free({d.name}) inside the loop")
    entry = pipe.usage.get(free_stmt.nid)
    if entry is None:
        raise err("hoist: no usage information (recheck first)", "E-INTERNAL")
    finals = [r for _, r in entry.ctx_before.linear
              if isinstance(r, (Group, PointsTo)) and _res_bases(r) == {d.name}
              and not _has_fraction(r)]
    if not finals:
        raise err(f"hoist: no final permissions for {d.name} before its free")

    # remove decl and free from the loop body
    parent.stmts.remove(d)
    fparent, fpos = find_parent(pipe.program, free_stmt)
    fparent.stmts.remove(free_stmt)

    # reindex every access and formula: name[i...] -> name[loop.index][i...]
    li = Var(loop.index)

    def remap(idxs):
        return d.name, (li,) + tuple(idxs)

    map_stmt_locs(loop, d.name, remap)

    # new declaration above the loop, one extra dimension
    nd = Decl(name=d.name, ctype=d.ctype, alloc=d.alloc,
              dims=(loop.range.stop,) + d.dims)
    lparent, lpos = find_parent(pipe.program, loop)
    lparent.stmts.insert(lpos, nd)

    # free goes after the loop, past any trailing barriers/ghosts
    ins = lpos + 2
    while ins < len(lparent.stmts) and (
            is_ghost_stmt(lparent.stmts[ins])
            or (isinstance(lparent.stmts[ins], CallStmt)
                and lparent.stmts[ins].fn in ("magic_barrier", "blocksync"))):
        ins += 1
    lparent.stmts.insert(ins, CallStmt(fn="free", args=(Var(d.name),)))

    # loop contract gains the per-iteration slice
    pre_slice = _slice_formula(d, li, UNINIT)
    loop.contract.xconsumes.append((fresh_name("#h"), pre_slice))
    post = []
    for r in finals:
        rr = _reindex_res(r, d.name, li)
        post.append((fresh_name("#h"), rr))
    loop.contract.xproduces.extend(post)


def _slice_formula(d: Decl, prefix: Expr, val) -> ResExpr:
    binders = [fresh_name(f"__s{k}") for k in range(len(d.dims))]
    body: ResExpr = PointsTo(Loc(d.name, (prefix,) + tuple(Var(b) for b in binders)),
                             "Any", val=val)
    for b, dim in zip(reversed(binders), reversed(d.dims)):
        body = Group(b, Range(IntLit(0), dim), body)
    return body


def _reindex_res(r: ResExpr, base: str, prefix: Expr) -> ResExpr:
    from .rewrite import map_res_locs
    return map_res_locs(r, base, lambda idxs: (base, (prefix,) + tuple(idxs)))


# ---------------------------------------------------------------------------
# local_name


def t_local_name(pipe, cmd):
    var = cmd.args.get("var")
    local = cmd.args.get("local")
    if not var or not local:
        raise err("local_name: needs var= and local=")
    hit = resolve_one(pipe.program, cmd.target)
    n = int(cmd.args.get("span", "1"))
    parent, start = hit.parent, hit.index
    span = parent.stmts[start:start + n]
    decl = Decl(name=local, ctype="float", init=Access(var, ()) if False else Var(var))
    for s in span:
        subst_stmt(s, {var: Var(local)})
        map_stmt_locs(s, var, lambda idxs, l=local: (l, tuple(idxs)))
    write_back = Assign(target=Loc(var), op="=", value=Var(local))
    parent.stmts[start:start + n] = [decl] + span + [write_back]


# ---------------------------------------------------------------------------
# shift_accesses


def t_shift_accesses(pipe, cmd):
    var = cmd.args.get("var")
    if not var:
        raise err("shift_accesses: needs var=")
    factor = arg_expr(cmd, "factor")
    hit = resolve_one(pipe.program, cmd.target)
    d = hit.stmt
    if not isinstance(d, Decl) or d.name != var:
        raise err("shift_accesses: target must be the variable's declaration")
    parent, start = hit.parent, hit.index

    # the pure value of the factor at the declaration point
    entry = pipe.usage.get(d.nid)
    if entry is None:
        raise err("shift_accesses: no usage information", "E-INTERNAL")
    fval = _pure_value_of(factor, entry.ctx_before)
    if fval is None:
        raise err("shift_accesses: cannot resolve the factor's value")

    # code: initializer shifted; reads add the factor back; writes subtract
    d.init = arith.simplify(BinOp("-", d.init, factor))
    for s in parent.stmts[start + 1:]:
        _shift_code(s, var, factor)
        _shift_formulas(s, var, fval)


def _pure_value_of(e: Expr, ctx) -> Expr | None:
    """Evaluate a factor expression against a context snapshot (cells only)."""
    if isinstance(e, Var):
        for _, r in ctx.linear:
            if isinstance(r, PointsTo) and r.loc.base == e.name and not r.loc.idxs:
                return r.val if r.val is not UNINIT else None
        return e
    if isinstance(e, (IntLit, FloatLit)):
        return e
    if isinstance(e, BinOp):
        a = _pure_value_of(e.lhs, ctx)
        b = _pure_value_of(e.rhs, ctx)
        if a is None or b is None:
            return None
        return BinOp(e.op, a, b)
    return None


def _shift_code(s: Stmt, var: str, factor: Expr):
    def fix_expr(e: Expr) -> Expr:
        if isinstance(e, Var) and e.name == var:
            return BinOp("+", e, factor)
        if isinstance(e, BinOp):
            return BinOp(e.op, fix_expr(e.lhs), fix_expr(e.rhs))
        if isinstance(e, Call):
            return Call(e.fn, tuple(fix_expr(a) for a in e.args))
        if isinstance(e, Access):
            return Access(e.base, tuple(fix_expr(i) for i in e.idxs))
        return e

    if isinstance(s, Assign):
        if s.target.base == var and not s.target.idxs and s.op == "=":
            s.value = arith.simplify(BinOp("-", fix_expr(s.value), factor)) \
                if False else BinOp("-", fix_expr(s.value), factor)
            s.value = _gather(s.value)
            return
        s.value = _gather(fix_expr(s.value))
    elif isinstance(s, Decl):
        if s.init is not None:
            s.init = _gather(fix_expr(s.init))
    elif isinstance(s, Seq):
        for c in s.stmts:
            _shift_code(c, var, factor)
    elif isinstance(s, For):
        _shift_code(s.body, var, factor)
    elif isinstance(s, CallStmt):
        s.args = tuple(fix_expr(a) for a in s.args)


def _gather(e: Expr) -> Expr:
    out = arith.simplify(e)
    return out


def _shift_formulas(s: Stmt, var: str, fval: Expr):
    def leaf(pt: PointsTo) -> PointsTo:
        if pt.val is UNINIT:
            return pt
        return replace(pt, val=arith.simplify(BinOp("-", pt.val, fval)))

    map_stmt_locs(s, var, lambda idxs: (var, tuple(idxs)), leaf_fn=leaf)


# ---------------------------------------------------------------------------
# loop_parallel


def t_loop_parallel(pipe, cmd):
    hit = resolve_one(pipe.program, cmd.target)
    L = hit.stmt
    if not isinstance(L, For):
        raise err("loop_parallel: target must be a loop")
    if L.contract.spreserves:
        raise err("loop_parallel: loop carries a sequential invariant",
                  "E-INVARIANT")
    L.mode = PAR_MODE


# ---------------------------------------------------------------------------
# heap_local_copy


def t_heap_local_copy(pipe, cmd):
    var = cmd.args.get("var")
    local = cmd.args.get("local")
    if not var or not local:
        raise err("heap_local_copy: needs var= and local=")
    window = cmd.args.get("window")
    if not window:
        raise err("heap_local_copy: needs window=off:ext,...")
    parts = [w for w in window.split(",") if w]
    offs, exts = [], []
    for w in parts:
        o, _, e = w.partition(":")
        offs.append(parse_expr_str(o))
        exts.append(parse_expr_str(e))
    expand = int(cmd.args.get("expand", "0"))

    hit = resolve_one(pipe.program, cmd.target)
    n = int(cmd.args.get("span", "1"))
    parent, start = hit.parent, hit.index
    span = parent.stmts[start:start + n]
    span_seq = Seq(stmts=span)
    reads, writes = collect_access_bases(span_seq)
    is_read = var in reads
    is_written = var in writes

    # the model value of var's cells, from the context before the span
    entry = pipe.usage.get(span[0].nid)
    if entry is None:
        raise err("heap_local_copy: no usage information", "E-INTERNAL")
    template = _leaf_template(entry.ctx_before, var, len(offs))
    if is_read and template is None:
        raise err(f"heap_local_copy: no readable permission for {var}")

    k = len(offs)
    decl = Decl(name=local, ctype="float", alloc="MALLOC",
                dims=tuple(exts) + ((IntLit(expand),) if expand else ()))
    new_stmts: list[Stmt] = [decl]

    cvars = [fresh_name(f"c{j}") for j in range(k)]
    if is_read:
        val = template(tuple(BinOp("+", offs[j], Var(cvars[j])) for j in range(k)))
        body_assign = Assign(
            target=Loc(local, tuple(Var(c) for c in cvars)
                       + ((IntLit(0),) if expand else ())),
            op="=",
            value=Access(var, tuple(BinOp("+", offs[j], Var(cvars[j]))
                                    for j in range(k))))
        # with expansion, fill every replica
        copy_in = _copy_nest(cvars, exts, body_assign, local, val, expand,
                             writing_local=True)
        new_stmts.append(copy_in)

    # rewrite the span to use the local array
    for s in span:
        _redirect(s, var, local, offs, expand)
    new_stmts.extend(span)

    if is_written:
        dvars = [fresh_name(f"d{j}") for j in range(k)]
        back = Assign(
            target=Loc(var, tuple(BinOp("+", offs[j], Var(dvars[j]))
                                  for j in range(k))),
            op="=",
            value=Access(local, tuple(Var(d) for d in dvars)
                         + ((IntLit(0),) if expand else ())))
        # synthesized value: whatever the span's contracts say it wrote
        out_template = _written_template(span_seq, local)
        copy_out = _copy_back_nest(dvars, exts, offs, back, var, local,
                                   out_template, expand)
        new_stmts.append(copy_out)

    new_stmts.append(CallStmt(fn="free", args=(Var(local),)))
    parent.stmts[start:start + n] = new_stmts


def _leaf_template(ctx, base: str, rank: int):
    """Returns fn(idx tuple) -> value expr for the array's model."""
    for _, r in ctx.linear:
        binders = []
        cur = r
        while isinstance(cur, Group):
            binders.append(cur.binder)
            cur = cur.body
        if isinstance(cur, PointsTo) and cur.loc.base == base \
                and len(cur.loc.idxs) == rank and cur.val is not UNINIT:
            leaf = cur

            def tmpl(idxs, leaf=leaf, binders=binders):
                env = {}
                for b, te in zip(binders, leaf.loc.idxs):
                    if isinstance(te, Var):
                        env[te.name] = None
                # solve binder values assuming identity idx template
                env = {}
                for te, ix in zip(leaf.loc.idxs, idxs):
                    if isinstance(te, Var):
                        env[te.name] = ix
                return subst_expr(leaf.val, env)

            return tmpl
    return None


def _copy_nest(cvars, exts, assign: Assign, local: str, val: Expr, expand: int,
               writing_local: bool) -> For:
    inner: Stmt = assign
    if expand:
        rr = fresh_name("r")
        assign.target = Loc(local, assign.target.idxs[:-1] + (Var(rr),))
        rloop = For(index=rr, range=Range(IntLit(0), IntLit(expand)),
                    mode=SEQ_MODE, contract=LoopAnnots(),
                    body=Seq(stmts=[assign], scope=True))
        rloop.contract.xwrites = [(fresh_name("#cp"),
                                   PointsTo(Loc(local, assign.target.idxs[:-1] + (Var(rr),)),
                                            "Any", val=val))]
        inner = rloop
    loops = inner
    for j in reversed(range(len(cvars))):
        body = Seq(stmts=[loops], scope=True)
        L = For(index=cvars[j], range=Range(IntLit(0), exts[j]), mode=SEQ_MODE,
                contract=LoopAnnots(), body=body)
        target_idxs = tuple(Var(c) for c in cvars) + \
            ((Var(inner.index),) if expand and isinstance(inner, For) else ())
        w = PointsTo(Loc(local, tuple(Var(c) for c in cvars)
                         + ((Var(inner.index),) if expand and isinstance(inner, For)
                            else ())), "Any", val=val)
        for jj in range(len(cvars) - 1, j, -1):
            w = Group(cvars[jj], Range(IntLit(0), exts[jj]), w)
        if expand and isinstance(inner, For):
            w = _wrap_expand(w, inner.index, expand)
        L.contract.xwrites = [(fresh_name("#cp"), w)]
        loops = L
    return loops


def _wrap_expand(r: ResExpr, rr: str, expand: int) -> ResExpr:
    # expansion dimension sits innermost in the permission
    if isinstance(r, Group):
        return replace(r, body=_wrap_expand(r.body, rr, expand))
    return Group(rr, Range(IntLit(0), IntLit(expand)), r)


def _copy_back_nest(dvars, exts, offs, assign: Assign, var: str, local: str,
                    val_fn, expand: int) -> For:
    loops: Stmt = assign
    k = len(dvars)
    for j in reversed(range(k)):
        body = Seq(stmts=[loops], scope=True)
        L = For(index=dvars[j], range=Range(IntLit(0), exts[j]), mode=SEQ_MODE,
                contract=LoopAnnots(), body=body)
        val = val_fn(tuple(Var(d) for d in dvars)) if val_fn else None
        w = PointsTo(Loc(var, tuple(BinOp("+", offs[jj], Var(dvars[jj]))
                                    for jj in range(k))), "Any",
                     val=val if val is not None else UNINIT)
        for jj in range(k - 1, j, -1):
            w = Group(dvars[jj], Range(IntLit(0), exts[jj]), w)
        L.contract.xwrites = [(fresh_name("#cb"), w)]
        loops = L
    return loops


def _written_template(span: Seq, local: str):
    """Model of what the span writes into the local array, drawn from its
    loop contracts (xproduces/xwrites entries on the local)."""
    for s in iter_stmts(span):
        if not isinstance(s, For):
            continue
        for clause in ("xproduces", "xwrites"):
            for _, r in getattr(s.contract, clause):
                binders = []
                cur = r
                while isinstance(cur, Group):
                    binders.append((cur.binder, cur.range))
                    cur = cur.body
                if isinstance(cur, PointsTo) and cur.loc.base == local \
                        and cur.val is not UNINIT:
                    leaf = cur
                    outer_binders = [s.index]

                    def tmpl(idxs, leaf=leaf):
                        env = {}
                        for te, ix in zip(leaf.loc.idxs, idxs):
                            if isinstance(te, Var):
                                env[te.name] = ix
                        missing = [v for v in _expr_vars(leaf.val)
                                   if v not in env]
                        try:
                            return subst_expr(leaf.val, env)
                        except Exception:
                            return None

                    return tmpl
    return None


def _expr_vars(e: Expr) -> set[str]:
    from .ast import expr_free_vars
    return expr_free_vars(e)


def _redirect(s: Stmt, var: str, local: str, offs, expand: int):
    """Rewrite span accesses/permissions of var to the local window."""
    k = len(offs)

    def remap(idxs):
        if len(idxs) != k:
            return (local, tuple(idxs))
        new = tuple(arith.simplify(BinOp("-", ix, offs[j]))
                    for j, ix in enumerate(idxs))
        if expand:
            new = new + (IntLit(0),)
        return (local, new)

    map_stmt_locs(s, var, remap)


# ---------------------------------------------------------------------------
# fn_inline / fn_insert / insert_ghost


def t_fn_inline(pipe, cmd):
    hit = resolve_one(pipe.program, cmd.target)
    call = hit.stmt
    if not isinstance(call, CallStmt) or call.ghost:
        raise err("fn_inline: target must be a call statement")
    callee = pipe.program.fn(call.fn)
    if callee.body is None:
        raise err("fn_inline: cannot inline an admitted function")
    if callee.ret != "void":
        raise err("fn_inline: only void functions can be inlined")
    entry = pipe.usage.get(call.nid)
    env: dict[str, Expr] = {}
    for (pname, _), a in zip(callee.params, call.args):
        env[pname] = _as_value(a)
    if entry is not None:
        for k, v in getattr(entry, "bindings", {}).items():
            if isinstance(v, Expr) and k not in env:
                env[k] = v
    body = clone_stmt(callee.body)
    subst_stmt(body, env)
    body.scope = True
    hit.parent.stmts[hit.index] = body


def _as_value(e: Expr) -> Expr:
    if isinstance(e, Access):
        return Ptr(e.base, e.idxs)
    if isinstance(e, Var):
        return Ptr(e.name)
    return e


def t_fn_insert(pipe, cmd):
    fn = cmd.args.get("fn")
    if not fn:
        raise err("fn_insert: needs fn=")
    args = [parse_expr_str(a.strip(), allow_access=True)
            for a in cmd.args.get("args", "").split(";") if a.strip()]
    hit = resolve_one(pipe.program, cmd.target)
    n = int(cmd.args.get("span", "1"))
    new: list[Stmt] = [CallStmt(fn=fn, args=tuple(args))]
    for g in cmd.args.get("ghosts_after", "").split("|"):
        g = g.strip()
        if not g:
            continue
        gname, _, gargs = g.partition(" ")
        new.append(ghost(gname, gargs.strip()))
    hit.parent.stmts[hit.index:hit.index + n] = new


def t_insert_ghost(pipe, cmd):
    gname = cmd.args.get("name")
    if not gname:
        raise err("insert_ghost: needs name=")
    g = ghost(gname, cmd.args.get("args", ""))
    hit = resolve_one(pipe.program, cmd.target)
    at = hit.index + (1 if hit.position == "after" else 0)
    hit.parent.stmts.insert(at, g)
