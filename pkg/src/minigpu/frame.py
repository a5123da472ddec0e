"""Entailment engine: match needed resources against a context.

frame_subtract finds, for every linear resource in `need`, a matching
resource in `have` up to arithmetic normalization, fraction splitting,
group-to-desync weakening, value forgetting (initialized satisfies
uninitialized at full permission), automatic group focus with a provable
in-range index, and ownership-preserving flattening of nested desync
groups. Quantified variables of `need` are instantiated along the way.

Matching is deterministic: needs are processed in order and a need that
admits two distinct instantiations raises AmbiguousMatch instead of
backtracking.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import arith
from .arith import Facts, Poly, norm, poly_to_expr, prove_eq, prove_le, prove_lt, thaw
from .ast import Expr, IntLit, Lam, Loc, Ptr, Range, UNINIT, Var, fresh_name, subst_expr
from .resources import (
    Frac,
    FreeTok,
    Group,
    HostCtx,
    KernelParams,
    KernelSetupCtx,
    KernelTeardownCtx,
    ONE,
    PointsTo,
    ResExpr,
    ResSet,
    SMemAllowance,
    SyncRes,
    ThreadsCtx,
    frac_merge,
    frac_pieces,
    range_empty,
    ranges_equal,
    res_free_vars,
    subst_res,
)


class MatchError(Exception):
    def __init__(self, code: str, message: str, resource: str | None = None):
        super().__init__(message)
        self.code = code
        self.resource = resource


class NoMatch(MatchError):
    def __init__(self, message, resource=None, code="E-NOMATCH"):
        super().__init__(code, message, resource)


class AmbiguousMatch(MatchError):
    def __init__(self, message, resource=None):
        super().__init__("E-AMBIG", message, resource)


@dataclass(frozen=True)
class ResVar(ResExpr):
    """Quantified resource variable (HProp parameter of a contract)."""

    name: str


@dataclass
class MatchState:
    facts: Facts
    quantified: set[str] = field(default_factory=set)
    bindings: dict[str, object] = field(default_factory=dict)  # Expr | Frac | ResExpr

    def copy(self) -> "MatchState":
        st = MatchState(self.facts, set(self.quantified), dict(self.bindings))
        return st

    def is_free(self, name: str) -> bool:
        return name in self.quantified and name not in self.bindings

    def bind(self, name: str, value):
        if name in self.bindings:
            raise NoMatch(f"conflicting binding for {name}")
        self.bindings[name] = value


# ---------------------------------------------------------------------------
# Applying bindings to resources / expressions


def bind_expr(e: Expr, st: MatchState) -> Expr:
    env = {k: v for k, v in st.bindings.items() if isinstance(v, (Expr,))}
    return subst_expr(e, env) if env else e


def bind_frac(f: Frac, st: MatchState) -> Frac:
    if f.atom is not None and f.atom in st.bindings:
        v = st.bindings[f.atom]
        if isinstance(v, Frac):
            return Frac(v.atom, v.k + f.k)
    return f


def bind_res(r: ResExpr, st: MatchState) -> ResExpr:
    if isinstance(r, ResVar):
        v = st.bindings.get(r.name)
        if isinstance(v, ResExpr):
            return bind_res(v, st)
        return r
    env = {k: v for k, v in st.bindings.items() if isinstance(v, Expr)}
    r = subst_res(r, env) if env else r
    return _map_fracs(r, lambda f: bind_frac(f, st))


def _map_fracs(r: ResExpr, fn) -> ResExpr:
    if isinstance(r, PointsTo):
        return replace(r, frac=fn(r.frac))
    if isinstance(r, Group):
        return replace(r, body=_map_fracs(r.body, fn))
    if isinstance(r, (HostCtx, KernelSetupCtx, KernelTeardownCtx, ThreadsCtx, KernelParams)):
        return replace(r, frac=fn(r.frac))
    if isinstance(r, SyncRes):
        return replace(r, inner=_map_fracs(r.inner, fn))
    return r


# ---------------------------------------------------------------------------
# Expression unification (need side may contain quantified variables)


def unify_expr(need: Expr, have: Expr, st: MatchState) -> bool:
    need = bind_expr(need, st)
    if isinstance(need, Var) and st.is_free(need.name):
        st.bind(need.name, have)
        return True
    # Miller-pattern case: F(b1..bk) with F quantified, bi rigid and distinct
    from .ast import Call
    if isinstance(need, Call) and st.is_free(need.fn):
        args = need.args
        if all(isinstance(a, Var) for a in args) and len({a.name for a in args}) == len(args):
            st.bind(need.fn, Lam(tuple(a.name for a in args), have))
            return True
    np = norm(need, st.facts)
    hp = norm(have, st.facts)
    if arith.prove_eq_poly(np - hp, st.facts):
        return True
    # linear solve for a single free variable with constant coefficient
    free = [v for v in arith.poly_vars(np - hp) if st.is_free(v)]
    if len(set(free)) == 1:
        v = free[0]
        occ = arith._linear_coeff(np - hp, v)
        if occ is not None:
            coeff, rest = occ
            if coeff.is_const() and coeff.const_value() in (1, -1):
                sol = rest if coeff.const_value() == -1 else -rest
                st.bind(v, poly_to_expr(sol))
                return True
    return False


def unify_loc(need: Loc, have: Loc, st: MatchState) -> bool:
    base, idxs = need.base, list(need.idxs)
    b = st.bindings.get(base)
    if isinstance(b, Ptr):
        base, idxs = b.base, list(b.idxs) + idxs
    elif isinstance(b, Var):
        base = b.name
    if st.is_free(base):
        if len(have.idxs) < len(idxs):
            return False
        k = len(have.idxs) - len(idxs)
        st.bind(base, Ptr(have.base, tuple(have.idxs[:k])))
        return all(unify_expr(n, h, st) for n, h in zip(idxs, have.idxs[k:]))
    if base != have.base or len(idxs) != len(have.idxs):
        return False
    return all(unify_expr(n, h, st) for n, h in zip(idxs, have.idxs))


# ---------------------------------------------------------------------------
# Canonical resource keys (for merging, comparisons, dedup)


def res_canon(r: ResExpr, facts: Facts, benv: dict | None = None, with_frac=True):
    benv = benv or {}

    def ce(e: Expr):
        from .ast import subst_expr as se
        e2 = se(e, {k: Var(v) for k, v in benv.items()}) if benv else e
        return arith.canon(e2, facts)

    if isinstance(r, PointsTo):
        loc = (r.loc.base if r.loc.base not in benv else benv[r.loc.base],
               tuple(ce(i) for i in r.loc.idxs))
        val = ("uninit",) if r.val is UNINIT else ("v", ce(r.val))
        fr = (r.frac.atom, r.frac.k) if with_frac else None
        return ("pt", loc, r.mem, fr, val)
    if isinstance(r, Group):
        nb = f"@b{len(benv)}"
        inner = dict(benv)
        inner[r.binder] = nb
        return ("grp", r.desync, ce(r.range.start), ce(r.range.stop),
                tuple(sorted(ce(e) for e in r.excluded)),
                res_canon(r.body, facts, inner, with_frac))
    if isinstance(r, HostCtx):
        return ("host", (r.frac.atom, r.frac.k) if with_frac else None)
    if isinstance(r, KernelSetupCtx):
        return ("setup", (r.frac.atom, r.frac.k) if with_frac else None)
    if isinstance(r, KernelTeardownCtx):
        return ("teardown", (r.frac.atom, r.frac.k) if with_frac else None)
    if isinstance(r, ThreadsCtx):
        return ("threads", ce(r.range.start), ce(r.range.stop),
                (r.frac.atom, r.frac.k) if with_frac else None)
    if isinstance(r, KernelParams):
        return ("kparams", ce(r.bpg), ce(r.tpb), ce(r.smem),
                (r.frac.atom, r.frac.k) if with_frac else None)
    if isinstance(r, SMemAllowance):
        return ("smem", ce(r.bytes))
    if isinstance(r, FreeTok):
        return ("free", r.base,
                res_canon(r.inner, facts, benv, with_frac) if r.inner else None)
    if isinstance(r, SyncRes):
        return ("sync", r.pred, res_canon(r.inner, facts, benv, with_frac))
    if isinstance(r, ResVar):
        return ("rvar", r.name)
    raise TypeError(r)


# ---------------------------------------------------------------------------
# Desync spines and flattening


def desync_spine(r: ResExpr):
    """Longest prefix of desync groups with pure, excluded-free ranges."""
    binders, extents, starts = [], [], []
    cur = r
    while isinstance(cur, Group) and cur.desync and not cur.excluded:
        binders.append(cur.binder)
        extents.append(cur.range.extent())
        starts.append(cur.range.start)
        cur = cur.body
    return binders, extents, starts, cur


def flat_signature(r: ResExpr, facts: Facts):
    """(total extent canon, body canon abstracted over the row-major index).

    Returns None when the leaf indexing does not factor through the
    row-major combination of the spine binders (an ownership reshape)."""
    binders, extents, starts, body = desync_spine(r)
    if not binders:
        return None
    for s in starts:
        if not arith.prove_eq(s, IntLit(0), facts):
            return None
    total = Poly.const(1)
    for e in extents:
        total = total.mul(norm(e, facts))
    combo = Poly()
    for i, b in enumerate(binders):
        stride = Poly.const(1)
        for e in extents[i + 1:]:
            stride = stride.mul(norm(e, facts))
        combo = combo + Poly.atom(("var", b)).mul(stride)
    mvar = "@flat"
    key = _abstract_res(body, combo, set(binders), mvar, facts)
    if key is None:
        return None
    return (total.freeze(), key)


def _abstract_res(r: ResExpr, combo: Poly, binders: set[str], mvar: str, facts: Facts):
    def ab(e: Expr):
        p = norm(e, facts)
        return _abstract_poly(p, combo, binders, mvar, facts)

    if isinstance(r, PointsTo):
        idxs = tuple(ab(i) for i in r.loc.idxs)
        if any(i is None for i in idxs):
            return None
        if r.loc.base in binders:
            return None
        val = ("uninit",)
        if r.val is not UNINIT:
            v = ab(r.val)
            if v is None:
                return None
            val = ("v", v)
        return ("pt", (r.loc.base, idxs), r.mem, (r.frac.atom, r.frac.k), val)
    if isinstance(r, Group):
        if r.excluded or r.desync:
            return None
        lo, hi = ab(r.range.start), ab(r.range.stop)
        body = _abstract_res(r.body, combo, binders - {r.binder}, mvar, facts)
        if lo is None or hi is None or body is None:
            return None
        return ("grp", False, lo, hi, body, r.binder)
    return None


def _abstract_poly(p: Poly, combo: Poly, binders: set[str], mvar: str, facts: Facts):
    """Rewrite p = a*combo + rest (a, rest binder-free) as a*m + rest."""
    pv = arith.poly_vars(p)
    if not (pv & binders):
        return _abstract_atoms(p, combo, binders, mvar, facts)
    bpart = Poly()
    rest = Poly()
    for m, c in p.terms.items():
        mv: set = set()
        for at, _ in m:
            arith._atom_vars(at, mv)
        if mv & binders:
            bpart = bpart + Poly({m: c})
        else:
            rest = rest + Poly({m: c})
    # try bpart == a * combo for binder-free a; we only need integer a
    for a in _candidate_scales(bpart, combo):
        if bpart == combo.scale(a):
            out = rest + Poly.atom(("var", mvar)).scale(a)
            return _abstract_atoms(out, combo, binders, mvar, facts)
    return None


def _candidate_scales(bpart: Poly, combo: Poly):
    for m, c in combo.terms.items():
        if m in bpart.terms:
            bc, cc = bpart.terms[m], c
            if isinstance(bc, int) and isinstance(cc, int) and cc != 0 and bc % cc == 0:
                yield bc // cc
            break


def _abstract_atoms(p: Poly, combo: Poly, binders: set[str], mvar: str, facts: Facts):
    """Recurse into atoms (dm indices, app args) that still hold binders."""
    out = Poly()
    for m, c in p.terms.items():
        nm = []
        for at, pw in m:
            s: set = set()
            arith._atom_vars(at, s)
            if s & binders:
                at2 = _abstract_atom(at, combo, binders, mvar, facts)
                if at2 is None:
                    return None
                nm.append((at2, pw))
            else:
                nm.append((at, pw))
        out = out + Poly({tuple(sorted(nm)): c})
    return out.freeze()


def _abstract_atom(at, combo, binders, mvar, facts):
    tag = at[0]
    if tag == "dm":
        size = _abstract_poly(thaw(at[1]), combo, binders, mvar, facts)
        lin = _abstract_poly(thaw(at[2]), combo, binders, mvar, facts)
        if size is None or lin is None:
            return None
        return ("dm", size, lin)
    if tag == "app":
        args = []
        for cp in at[2]:
            a2 = _abstract_poly(thaw(cp), combo, binders, mvar, facts)
            if a2 is None:
                return None
            args.append(a2)
        return ("app", at[1], tuple(args))
    if tag == "var" and at[1] in binders:
        # a bare binder only abstracts when it IS the combo
        if combo == Poly.atom(at):
            return ("var", mvar)
        return None
    return None


# ---------------------------------------------------------------------------
# Leaf matching (PointsTo vs PointsTo at an agreed location)


def _match_frac(need: Frac, have: Frac, st: MatchState):
    """Returns (consumed frac, remainder fracs) or None."""
    if need.atom is not None and st.is_free(need.atom):
        piece = have.half()
        if piece.k - need.k < 0:
            return None
        st.bind(need.atom, Frac(piece.atom, piece.k - need.k))
        return piece, [piece]
    need = bind_frac(need, st)
    if need == have:
        return need, []
    if need.atom == have.atom and need.k > have.k:
        pieces = frac_pieces(have, need.k)
        return pieces[0], pieces[1:]
    return None


def _match_leaf(need: PointsTo, have: PointsTo, st: MatchState, check_loc=True):
    if need.mem != have.mem:
        return None
    if check_loc and not unify_loc(need.loc, have.loc, st):
        return None
    if need.val is UNINIT:
        if have.val is not UNINIT:
            # forget the contents: only sound when taking the whole permission
            nb = bind_frac(need.frac, st)
            if nb.is_full() and have.frac.is_full():
                return []
            return None
        fm = _match_frac(need.frac, have.frac, st)
        if fm is None:
            return None
        _, rem = fm
        return [replace(have, frac=f) for f in rem]
    if have.val is UNINIT:
        return None  # cannot read an uninitialized cell
    if not unify_expr(need.val, have.val, st):
        return None
    fm = _match_frac(need.frac, have.frac, st)
    if fm is None:
        return None
    _, rem = fm
    return [replace(have, frac=f) for f in rem]


# ---------------------------------------------------------------------------
# Resource matching


def match_res(need: ResExpr, have: ResExpr, st: MatchState):
    """Try to satisfy `need` from `have`. Returns a list of remainder
    resources (possibly empty) on success, None on failure. May bind
    quantified variables in st."""
    need = bind_res(need, st)

    if isinstance(need, ResVar):
        raise NoMatch(f"unresolved resource variable {need.name}")

    if isinstance(need, PointsTo):
        if isinstance(have, PointsTo):
            return _match_leaf(need, have, st)
        if isinstance(have, Group):
            return _focus_match(need, have, st)
        return None

    if isinstance(need, Group):
        if isinstance(have, Group):
            out = _match_group(need, have, st)
            if out is not None:
                return out
            if need.desync:
                return _match_flat(need, have, st)
        return None

    if isinstance(need, ThreadsCtx):
        if not isinstance(have, ThreadsCtx):
            return None
        trial = st.copy()
        if not (unify_expr(need.range.start, have.range.start, trial)
                and unify_expr(need.range.stop, have.range.stop, trial)):
            return None
        fm = _match_frac(need.frac, have.frac, trial)
        if fm is None:
            return None
        st.quantified, st.bindings = trial.quantified, trial.bindings
        _, rem = fm
        return [replace(have, frac=f) for f in rem]

    if isinstance(need, KernelParams):
        if not isinstance(have, KernelParams):
            return None
        trial = st.copy()
        for n, h in ((need.bpg, have.bpg), (need.tpb, have.tpb), (need.smem, have.smem)):
            if not unify_expr(n, h, trial):
                return None
        fm = _match_frac(need.frac, have.frac, trial)
        if fm is None:
            return None
        st.quantified, st.bindings = trial.quantified, trial.bindings
        _, rem = fm
        return [replace(have, frac=f) for f in rem]

    if isinstance(need, SMemAllowance):
        if not isinstance(have, SMemAllowance):
            return None
        trial = st.copy()
        if not unify_expr(need.bytes, have.bytes, trial):
            return None
        st.quantified, st.bindings = trial.quantified, trial.bindings
        return []

    if isinstance(need, (HostCtx, KernelSetupCtx, KernelTeardownCtx)):
        if type(have) is not type(need):
            return None
        fm = _match_frac(need.frac, have.frac, st)
        if fm is None:
            return None
        _, rem = fm
        return [replace(have, frac=f) for f in rem]

    if isinstance(need, FreeTok):
        if not isinstance(have, FreeTok):
            return None
        base = need.base
        b = st.bindings.get(base)
        if isinstance(b, Ptr) and not b.idxs:
            base = b.base
        elif isinstance(b, Var):
            base = b.name
        if st.is_free(base):
            st.bind(base, Ptr(have.base))
            base = have.base
        if base != have.base:
            return None
        if need.inner is not None and isinstance(need.inner, ResVar):
            if st.is_free(need.inner.name):
                st.bind(need.inner.name, have.inner if have.inner is not None else None)
        return []

    if isinstance(need, SyncRes):
        if not isinstance(have, SyncRes) or need.pred != have.pred:
            return None
        return match_res(need.inner, have.inner, st)

    return None


def _match_group(need: Group, have: Group, st: MatchState):
    if need.desync is False and have.desync:
        return None  # desync is strictly weaker; never satisfies a plain group
    if need.excluded or have.excluded:
        if len(need.excluded) != len(have.excluded):
            return None
    trial = st.copy()
    if not (unify_expr(need.range.start, have.range.start, trial)
            and unify_expr(need.range.stop, have.range.stop, trial)):
        return None
    for ne, he in zip(need.excluded, have.excluded):
        if not unify_expr(ne, he, trial):
            return None
    hb = have.body
    if have.binder != need.binder:
        hb = subst_res(hb, {have.binder: Var(need.binder)})
    inner = match_res(need.body, hb, trial)
    if inner is None:
        return None
    st.quantified, st.bindings = trial.quantified, trial.bindings
    return [Group(need.binder, have.range, r, desync=have.desync, excluded=have.excluded)
            for r in inner]


def _match_flat(need: Group, have: ResExpr, st: MatchState):
    """Ownership-preserving comparison of nested desync groups."""
    if not (isinstance(have, Group) and have.desync):
        return None
    sn = flat_signature(bind_res(need, st), st.facts)
    sh = flat_signature(have, st.facts)
    if sn is None or sh is None:
        return None
    tn, kn = sn
    th, kh = sh
    if not arith.prove_eq_poly(thaw(tn) - thaw(th), st.facts):
        return None
    if kn != kh:
        return None
    return []


def _focus_match(need: PointsTo, have: Group, st: MatchState):
    """Automatic focus: extract one element of a plain group."""
    if have.desync:
        raise NoMatch(
            f"cannot focus element out of a desynchronized group over {have.binder}",
            code="E-DESYNC")
    body = have.body
    if not isinstance(body, PointsTo):
        # nested group: focus outer binder then recurse
        if not isinstance(body, Group):
            return None
        trial = st.copy()
        idx = _solve_binder_idx(need, have, trial)
        if idx is None:
            return None
        inner = subst_res(body, {have.binder: idx})
        sub = _focus_match(need, inner, trial) if isinstance(inner, Group) \
            else _match_leaf(need, inner, trial)
        if sub is None:
            return None
        st.quantified, st.bindings = trial.quantified, trial.bindings
        return [replace(have, excluded=have.excluded + (idx,))] + sub
    trial = st.copy()
    idx = _solve_binder_idx(need, have, trial)
    if idx is None:
        return None
    inst = subst_res(body, {have.binder: idx})
    sub = _match_leaf(need, inst, trial)
    if sub is None:
        return None
    st.quantified, st.bindings = trial.quantified, trial.bindings
    return [replace(have, excluded=have.excluded + (idx,))] + sub


def _solve_binder_idx(need: PointsTo, have: Group, st: MatchState) -> Expr | None:
    """Find idx with body[binder := idx] matching need's location; prove
    range membership and distinctness from excluded indices."""
    body = have.body
    leaf = body
    inner_binders = []
    while isinstance(leaf, Group):
        inner_binders.append(leaf.binder)
        leaf = leaf.body
    if not isinstance(leaf, PointsTo):
        return None
    nl = bind_res(need, st)
    assert isinstance(nl, PointsTo)
    if leaf.loc.base != nl.loc.base or len(leaf.loc.idxs) != len(nl.loc.idxs):
        return None
    facts = st.facts
    idx_val: Expr | None = None
    for te, ne in zip(leaf.loc.idxs, nl.loc.idxs):
        tp = norm(te, facts)
        np_ = norm(ne, facts)
        occ = arith._linear_coeff(tp, have.binder)
        if occ is None:
            continue
        coeff, rest = occ
        if not coeff.terms:
            if not arith.prove_eq_poly(tp - np_, facts):
                return None
            continue
        if not coeff.is_const() or coeff.const_value() not in (1, -1):
            return None
        sol = (np_ - rest) if coeff.const_value() == 1 else (rest - np_)
        cand = poly_to_expr(sol)
        if idx_val is None:
            idx_val = cand
        elif not prove_eq(idx_val, cand, facts):
            return None
    if idx_val is None:
        return None
    if not (prove_le(have.range.start, idx_val, facts)
            and prove_lt(idx_val, have.range.stop, facts)):
        return None
    for e in have.excluded:
        d = norm(e, facts) - norm(idx_val, facts)
        if not (d.is_const() and d.const_value() != 0):
            return None
    return idx_val


# ---------------------------------------------------------------------------
# Set-level subtraction


def frame_subtract(have: ResSet, need: ResSet, facts: Facts,
                   quantified: set[str] | None = None,
                   bindings: dict | None = None):
    """Returns (frame ResSet, bindings). Raises NoMatch / AmbiguousMatch."""
    st = MatchState(facts, set(quantified or ()), dict(bindings or {}))
    pool: list[tuple[str, ResExpr]] = list(have.linear)
    for nname, nres in need.linear:
        nres_b = bind_res(nres, st)
        if isinstance(nres_b, Group) and not nres_b.excluded and \
                not res_contains_free(nres_b, st) and range_empty(nres_b.range, facts):
            continue  # empty group holds vacuously
        successes = []
        for i, (hname, hres) in enumerate(pool):
            trial = st.copy()
            try:
                rem = match_res(nres, hres, trial)
            except MatchError:
                rem = None
            if rem is not None:
                delta = {k: v for k, v in trial.bindings.items() if k not in st.bindings}
                successes.append((i, rem, trial, delta))
        if not successes:
            err = NoMatch(_nomatch_message(nname, nres_b, pool, st), resource=nname)
            err.need = nres_b
            raise err
        if len(successes) > 1:
            deltas = {_freeze_delta(d, facts) for _, _, _, d in successes}
            if len(deltas) > 1:
                raise AmbiguousMatch(
                    f"resource {nname} admits {len(successes)} distinct matches",
                    resource=nname)
        i, rem, trial, _ = successes[0]
        st.quantified, st.bindings = trial.quantified, trial.bindings
        taken_name = pool[i][0]
        pool = pool[:i] + pool[i + 1:]
        for j, r in enumerate(rem):
            pool.append((fresh_name(taken_name + "#r"), r))
    frame = ResSet(pure=list(have.pure), linear=pool)
    return frame, st.bindings


def res_contains_free(r: ResExpr, st: MatchState) -> bool:
    return any(st.is_free(v) for v in res_free_vars(r))


def _freeze_delta(delta: dict, facts: Facts):
    out = []
    for k in sorted(delta):
        v = delta[k]
        if isinstance(v, Expr):
            out.append((k, arith.canon(v, facts)))
        elif isinstance(v, Frac):
            out.append((k, ("frac", v.atom, v.k)))
        elif isinstance(v, ResExpr):
            out.append((k, res_canon(v, facts)))
        else:
            out.append((k, repr(v)))
    return tuple(out)


def _nomatch_message(name: str, need: ResExpr, pool, st: MatchState) -> str:
    from .printer import format_res
    have_desc = ", ".join(format_res(r) for _, r in pool) or "<empty>"
    return (f"no resource matches `{name}: {format_res(need)}`; "
            f"context holds: {have_desc}")


# ---------------------------------------------------------------------------
# Context normalization: merge fraction pieces, unfocus, drop empty groups


def normalize_ctx(rs: ResSet, facts: Facts) -> ResSet:
    items = list(rs.linear)
    changed = True
    while changed:
        changed = False
        # drop provably-empty groups
        kept = []
        for name, r in items:
            if isinstance(r, Group) and not r.excluded and range_empty(r.range, facts):
                changed = True
                continue
            kept.append((name, r))
        items = kept
        # merge equal-fraction twins
        by_skel: dict = {}
        merged = None
        for i, (name, r) in enumerate(items):
            fr = _leaf_frac(r)
            if fr is None or fr.k == 0:
                continue
            key = res_canon(r, facts, with_frac=False)
            if key in by_skel:
                j, other_fr = by_skel[key]
                if other_fr == fr:
                    merged = (j, i, frac_merge(fr, fr))
                    break
            by_skel[key] = (i, fr)
        if merged:
            j, i, nf = merged
            name, r = items[j]
            items = [it for k, it in enumerate(items) if k not in (i, j)]
            items.append((name, _set_leaf_frac(r, nf)))
            changed = True
            continue
        # unfocus: merge a focused-out element back into its group
        for i, (name, r) in enumerate(items):
            if not (isinstance(r, Group) and r.excluded):
                continue
            idx = r.excluded[-1]
            want = _instantiate_body(r, idx)
            for j, (n2, r2) in enumerate(items):
                if i == j:
                    continue
                if res_canon(r2, facts) == res_canon(want, facts):
                    items = [it for k, it in enumerate(items) if k not in (i, j)]
                    items.append((name, replace(r, excluded=r.excluded[:-1])))
                    changed = True
                    break
            if changed:
                break
    return ResSet(pure=list(rs.pure), linear=items)


def _leaf_frac(r: ResExpr) -> Frac | None:
    if isinstance(r, PointsTo):
        return r.frac
    if isinstance(r, Group):
        return _leaf_frac(r.body)
    if isinstance(r, (HostCtx, KernelSetupCtx, KernelTeardownCtx, ThreadsCtx, KernelParams)):
        return r.frac
    return None


def _set_leaf_frac(r: ResExpr, f: Frac) -> ResExpr:
    if isinstance(r, PointsTo):
        return replace(r, frac=f)
    if isinstance(r, Group):
        return replace(r, body=_set_leaf_frac(r.body, f))
    if isinstance(r, (HostCtx, KernelSetupCtx, KernelTeardownCtx, ThreadsCtx, KernelParams)):
        return replace(r, frac=f)
    return r


def _instantiate_body(g: Group, idx: Expr) -> ResExpr:
    return subst_res(g.body, {g.binder: idx})


def resset_equal(a: ResSet, b: ResSet, facts: Facts) -> bool:
    ka = sorted(repr(res_canon(r, facts)) for _, r in a.linear)
    kb = sorted(repr(res_canon(r, facts)) for _, r in b.linear)
    return ka == kb
