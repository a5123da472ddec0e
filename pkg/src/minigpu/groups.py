"""Ghost library: proof steps that rewrite resources without touching
executable state. Group reshaping ghosts are rejected on desynchronized
groups (weaken_to_desync excepted), which is exactly what pins resources
to threads between barriers.
"""

from __future__ import annotations

from dataclasses import replace

from . import arith, frame
from .arith import Facts, norm, poly_to_expr, thaw
from .ast import (
    BinOp,
    Call,
    CallStmt,
    Expr,
    IntLit,
    Loc,
    Range,
    UNINIT,
    Var,
    fresh_name,
    subst_expr,
)
from .errors import CheckError
from .frame import MatchState, match_res, res_canon
from .printer import format_expr, format_res
from .resources import Group, PointsTo, ResExpr, ResSet, subst_res


def _gargs(s: CallStmt):
    pos, kw, res, holes = [], {}, {}, {}
    for it in s.ghost_args:
        if it[0] == "pos":
            pos.append(it[1])
        elif it[0] == "kw":
            kw[it[1]] = it[2]
        elif it[0] == "res":
            res[it[1]] = it[2]
        elif it[0] == "hole":
            holes[it[1]] = (it[2], it[3])
    return pos, kw, res, holes


def _find_exact(ck, r: ResExpr, s: CallStmt) -> int:
    key = res_canon(r, ck.facts)
    for pos, (_, have) in enumerate(ck.ctx.linear):
        if res_canon(have, ck.facts) == key:
            return pos
    ck.err("E-GHOST", f"no context resource matches `{format_res(r)}`", s)


def _take(ck, pos: int):
    name, r = ck.ctx.linear[pos]
    ck.ctx.linear = ck.ctx.linear[:pos] + ck.ctx.linear[pos + 1:]
    return name, r


def _peel(ck, r: ResExpr, k: int, s: CallStmt, allow_desync=False):
    """Descend k group layers; reshaping under a desync layer is illegal."""
    wrappers = []
    cur = r
    for _ in range(k):
        if not isinstance(cur, Group):
            ck.err("E-GHOST", f"under={k} exceeds group nesting", s)
        if cur.desync and not allow_desync:
            ck.err("E-DESYNC", "cannot rewrite under a desynchronized group", s)
        wrappers.append(cur)
        cur = cur.body
    return wrappers, cur


def _rebuild(wrappers, inner: ResExpr) -> ResExpr:
    for w in reversed(wrappers):
        inner = replace(w, body=inner)
    return inner


def _as_group(ck, r: ResExpr, s: CallStmt, op: str) -> Group:
    if not isinstance(r, Group):
        ck.err("E-GHOST", f"{op} expects a group, found {format_res(r)}", s)
    if r.desync:
        ck.err("E-DESYNC", f"{op} is forbidden on a desynchronized group", s)
    return r


def apply_ghost(ck, s: CallStmt):
    pos, kw, res, holes = _gargs(s)
    name = s.fn
    facts: Facts = ck.facts

    if name == "in_range_bounds":
        if not pos or not isinstance(pos[0], Var):
            ck.err("E-GHOST", "in_range_bounds needs an index variable", s)
        v = pos[0].name
        bound = None
        for w, b in facts.all_bounds():
            if w == v:
                bound = b
                break
        if bound is None:
            ck.err("E-GHOST", f"{v!r} has no enclosing loop bound", s)
        lo, hi = bound
        if "lower" in kw:
            f = BinOp("<=", lo, Var(v))
            ck.pure_props[kw["lower"].name] = f
            facts.add_prop(f)
        if "upper" in kw:
            f = BinOp("<", Var(v), hi)
            ck.pure_props[kw["upper"].name] = f
            facts.add_prop(f)
        if "lower" not in kw and "upper" not in kw:
            ck.err("E-GHOST", "in_range_bounds produces nothing "
                   "(name lower := .. or upper := ..)", s)
        return

    if name == "eq_refl":
        if not pos:
            ck.err("E-GHOST", "eq_refl needs an expression", s)
        e = pos[0]
        f = BinOp("==", e, e)
        nm = kw.get("name")
        if nm is not None and isinstance(nm, Var):
            ck.pure_props[nm.name] = f
        facts.add_prop(f)
        return

    if name == "rewrite_linear":
        if "inside" not in holes or "by" not in kw:
            ck.err("E-GHOST", "rewrite_linear needs inside := (fun v -> H) "
                   "and by := axiom(args)", s)
        hole_var, template = holes["inside"]
        by = kw["by"]
        if not isinstance(by, Call):
            ck.err("E-GHOST", "by := must be an axiom instance", s)
        lhs, rhs = _instantiate_axiom(ck, by, s)
        # locate the resource matching the template
        found = None
        for i, (n, r) in enumerate(ck.ctx.linear):
            st = MatchState(facts, {hole_var}, {})
            try:
                rem = match_res(template, r, st)
            except frame.MatchError:
                rem = None
            if rem == [] and hole_var in st.bindings:
                found = (i, st.bindings[hole_var])
                break
        if found is None:
            ck.err("E-GHOST",
                   f"no resource matches the rewrite template "
                   f"`{format_res(template)}`", s)
        i, old = found
        if old is UNINIT:
            ck.err("E-GHOST", "cannot rewrite an uninitialized value", s)
        new = _rewrite_value(old, lhs, rhs, facts, reverse=bool(kw.get("rev")))
        if new is None:
            ck.err("E-GHOST",
                   f"neither side of {format_expr(lhs)} == {format_expr(rhs)} "
                   f"occurs in {format_expr(old)}", s)
        nm, _ = _take(ck, i)
        ck.produce([(nm, subst_res(template, {hole_var: new}))])
        return

    # group-shape ghosts all take H := <formula>
    if "H" not in res:
        ck.err("E-GHOST", f"{name} needs H := <resource>", s)
    under = 0
    if "under" in kw and isinstance(kw["under"], IntLit):
        under = kw["under"].value
    i = _find_exact(ck, res["H"], s)
    nm, whole = _take(ck, i)
    wrappers, target = _peel(ck, whole, under, s,
                             allow_desync=(name == "forget_init"))

    if name == "weaken_to_desync":
        g = target
        if not isinstance(g, Group):
            ck.err("E-GHOST", "weaken_to_desync expects a group", s)
        ck.produce([(nm, _rebuild(wrappers, replace(g, desync=True)))])
        return

    if name == "forget_init":
        ck.produce([(nm, _rebuild(wrappers, _forget(ck, target, s)))])
        return

    if name == "tile_group":
        g = _as_group(ck, target, s, name)
        b = kw.get("size")
        if b is None:
            ck.err("E-GHOST", "tile_group needs size := b", s)
        if not arith.prove_eq(g.range.start, IntLit(0), facts):
            ck.err("E-GHOST", "tile_group needs a zero-based range", s)
        n_e = g.range.stop
        if not arith.prove_divides(b, n_e, facts):
            ck.err("E-DIV", f"cannot prove {format_expr(b)} divides "
                   f"{format_expr(n_e)}", s)
        outer = kw["index"].name if isinstance(kw.get("index"), Var) else fresh_name(g.binder + "o")
        inner = kw["inner"].name if isinstance(kw.get("inner"), Var) else fresh_name(g.binder + "i")
        body = subst_res(g.body, {g.binder: BinOp("+", BinOp("*", b, Var(outer)), Var(inner))})
        tiled = Group(outer, Range(IntLit(0), Call("exact_div", (n_e, b))),
                      Group(inner, Range(IntLit(0), b), body))
        ck.produce([(nm, _rebuild(wrappers, tiled))])
        return

    if name == "untile_group":
        g = _as_group(ck, target, s, name)
        inner_g = g.body
        if not isinstance(inner_g, Group) or inner_g.desync:
            ck.err("E-GHOST", "untile_group expects a group of groups", s)
        if not arith.prove_eq(inner_g.range.start, IntLit(0), facts) or \
                not arith.prove_eq(g.range.start, IntLit(0), facts):
            ck.err("E-GHOST", "untile_group needs zero-based ranges", s)
        b = inner_g.range.stop
        new_idx = kw["index"].name if isinstance(kw.get("index"), Var) else fresh_name("i")
        combo = norm(BinOp("+", BinOp("*", b, Var(g.binder)), Var(inner_g.binder)), facts)
        body = _replace_combo_res(inner_g.body, combo,
                                  {g.binder, inner_g.binder}, new_idx, facts)
        if body is None:
            ck.err("E-GHOST", "untile_group: body does not factor through "
                   "the flat index", s)
        total = BinOp("*", g.range.stop, b)
        ck.produce([(nm, _rebuild(wrappers,
                                  Group(new_idx, Range(IntLit(0), total), body)))])
        return

    if name == "swap_group":
        g = _as_group(ck, target, s, name)
        inner_g = g.body
        if not isinstance(inner_g, Group) or inner_g.desync:
            ck.err("E-GHOST", "swap_group expects two nested groups", s)
        from .ast import expr_free_vars
        if g.binder in (expr_free_vars(inner_g.range.start)
                        | expr_free_vars(inner_g.range.stop)):
            ck.err("E-GHOST", "swap_group: inner range depends on the outer "
                   "binder", s)
        swapped = Group(inner_g.binder, inner_g.range,
                        Group(g.binder, g.range, inner_g.body))
        ck.produce([(nm, _rebuild(wrappers, swapped))])
        return

    if name == "shift_group":
        g = _as_group(ck, target, s, name)
        d = kw.get("by")
        if d is None:
            ck.err("E-GHOST", "shift_group needs by := d", s)
        body = subst_res(g.body, {g.binder: BinOp("-", Var(g.binder), d)})
        rng = Range(BinOp("+", g.range.start, d), BinOp("+", g.range.stop, d))
        ck.produce([(nm, _rebuild(wrappers, Group(g.binder, rng, body)))])
        return

    if name == "split_group":
        g = _as_group(ck, target, s, name)
        m = kw.get("at")
        if m is None:
            ck.err("E-GHOST", "split_group needs at := m", s)
        if not (arith.prove_le(g.range.start, m, facts)
                and arith.prove_le(m, g.range.stop, facts)):
            ck.err("E-RANGE", f"cannot prove {format_expr(m)} within "
                   f"{format_expr(g.range.start)}..{format_expr(g.range.stop)}", s)
        if wrappers:
            ck.err("E-GHOST", "split_group only applies at the top level", s)
        ck.produce([(nm, replace(g, range=Range(g.range.start, m))),
                    (nm + "'", replace(g, range=Range(m, g.range.stop)))])
        return

    if name == "join_group":
        g1 = _as_group(ck, target, s, name)
        if wrappers:
            ck.err("E-GHOST", "join_group only applies at the top level", s)
        if "with" not in res:
            ck.err("E-GHOST", "join_group needs with := <resource>", s)
        j = _find_exact(ck, res["with"], s)
        nm2, r2 = _take(ck, j)
        g2 = _as_group(ck, r2, s, name)
        if not arith.prove_eq(g1.range.stop, g2.range.start, facts):
            ck.err("E-RANGE", "join_group: ranges are not adjacent", s)
        b2 = subst_res(g2.body, {g2.binder: Var(g1.binder)})
        if res_canon(b2, facts, {g1.binder: "@j"}) != \
                res_canon(g1.body, facts, {g1.binder: "@j"}):
            ck.err("E-GHOST", "join_group: bodies differ", s)
        ck.produce([(nm, replace(g1, range=Range(g1.range.start, g2.range.stop)))])
        return

    if name == "focus":
        g = _as_group(ck, target, s, name)
        idx = kw.get("idx")
        if idx is None:
            ck.err("E-GHOST", "focus needs idx := e", s)
        if not (arith.prove_le(g.range.start, idx, facts)
                and arith.prove_lt(idx, g.range.stop, facts)):
            ck.err("E-RANGE",
                   f"cannot prove {format_expr(idx)} inside the group range", s)
        for ex in g.excluded:
            d = norm(ex, facts) - norm(idx, facts)
            if not (d.is_const() and d.const_value() != 0):
                ck.err("E-RANGE", "focus index may collide with an already "
                       "focused element", s)
        inst = subst_res(g.body, {g.binder: idx})
        ck.produce([(nm, _rebuild(wrappers, replace(g, excluded=g.excluded + (idx,)))),
                    (nm + "@", inst)])
        return

    if name == "unfocus":
        g = target
        if not isinstance(g, Group) or not g.excluded:
            ck.err("E-GHOST", "unfocus expects a group with a focused element", s)
        idx = kw.get("idx", g.excluded[-1])
        inst = subst_res(g.body, {g.binder: idx})
        _take(ck, _find_exact(ck, inst, s))
        ikey = arith.canon(idx, facts)
        excluded = list(g.excluded)
        for pos_e, e in enumerate(excluded):
            if arith.canon(e, facts) == ikey:
                excluded.pop(pos_e)
                break
        else:
            ck.err("E-GHOST", "unfocus: index was not focused out", s)
        ck.produce([(nm, _rebuild(wrappers, replace(g, excluded=tuple(excluded))))])
        return

    ck.err("E-GHOST", f"unhandled ghost {name!r}", s)


def _forget(ck, r: ResExpr, s: CallStmt) -> ResExpr:
    if isinstance(r, PointsTo):
        if not r.frac.is_full():
            ck.err("E-GHOST", "forget_init needs full permissions", s)
        return replace(r, val=UNINIT)
    if isinstance(r, Group):
        return replace(r, body=_forget(ck, r.body, s))
    ck.err("E-GHOST", f"forget_init cannot handle {format_res(r)}", s)


def _instantiate_axiom(ck, by: Call, s: CallStmt):
    ax = None
    for a in ck.program.axioms:
        if a.name == by.fn:
            ax = a
            break
    if ax is None:
        ck.err("E-GHOST", f"unknown axiom {by.fn!r}", s)
    if len(by.args) != len(ax.params):
        ck.err("E-GHOST", f"axiom {ax.name} takes {len(ax.params)} arguments, "
               f"got {len(by.args)}", s)
    env: dict[str, Expr] = {}
    for (pname, ptype), arg in zip(ax.params, by.args):
        if isinstance(ptype, Expr):  # hypothesis parameter
            if not isinstance(arg, Var) or arg.name not in ck.pure_props:
                ck.err("E-GHOST",
                       f"axiom {ax.name}: argument for hypothesis {pname!r} "
                       f"must name a pure fact in scope", s)
            wanted = subst_expr(ptype, env)
            got = ck.pure_props[arg.name]
            if not arith.props_equal(wanted, got, ck.facts):
                ck.err("E-GHOST",
                       f"axiom {ax.name}: fact {arg.name!r} proves "
                       f"`{format_expr(got)}`, hypothesis wants "
                       f"`{format_expr(wanted)}`", s)
        else:
            env[pname] = arg
    return subst_expr(ax.lhs, env), subst_expr(ax.rhs, env)


def _rewrite_value(old: Expr, lhs: Expr, rhs: Expr, facts: Facts,
                   reverse: bool = False) -> Expr | None:
    """Replace an occurrence (in the linear-combination sense) of one side
    of the equation with the other inside `old`."""
    op = norm(old, facts)
    sides = [(rhs, lhs), (lhs, rhs)]
    if reverse:
        sides.reverse()
    for a, b in sides:
        ap = norm(a, facts)
        if _occurs(ap, op):
            out = op - ap + norm(b, facts)
            float_ctx = any(isinstance(c, float) for c in out.terms.values())
            return poly_to_expr(out, float_ctx)
    return None


def _occurs(sub: "arith.Poly", whole: "arith.Poly") -> bool:
    for m, c in sub.terms.items():
        w = whole.terms.get(m, 0)
        if c > 0 and not (w >= c):
            return False
        if c < 0 and not (w <= c):
            return False
    return True


def _replace_combo_res(r: ResExpr, combo, binders: set[str], newvar: str,
                       facts: Facts) -> ResExpr | None:
    def fix(e: Expr) -> Expr | None:
        key = frame._abstract_poly(norm(e, facts), combo, binders, newvar, facts)
        if key is None:
            return None
        return poly_to_expr(thaw(key))

    if isinstance(r, PointsTo):
        idxs = []
        for i in r.loc.idxs:
            f = fix(i)
            if f is None:
                return None
            idxs.append(f)
        val = r.val
        if val is not UNINIT:
            val = fix(val)
            if val is None:
                return None
        if r.loc.base in binders:
            return None
        return PointsTo(Loc(r.loc.base, tuple(idxs)), r.mem, r.frac, val)
    if isinstance(r, Group):
        if r.desync or r.excluded:
            return None
        lo, hi = fix(r.range.start), fix(r.range.stop)
        body = _replace_combo_res(r.body, combo, binders - {r.binder}, newvar, facts)
        if lo is None or hi is None or body is None:
            return None
        return Group(r.binder, Range(lo, hi), body)
    return None
