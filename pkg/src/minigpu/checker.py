"""The proof verifier.

check_program threads a resource context through every statement of each
non-admitted function body, applying intrinsic contracts, ghost rewrites
and the loop rules, and finally matches the function postcondition with no
linear resources left over. It returns a Usage report: per-node context
snapshots plus consumed/produced deltas, which the transformation engine
relies on for contract synthesis.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import arith
from .arith import Facts
from .ast import (
    Access,
    Assign,
    Axiom,
    BinOp,
    Call,
    CallStmt,
    Decl,
    Expr,
    FloatLit,
    FnDef,
    For,
    If,
    IntLit,
    Lam,
    Loc,
    MAGIC_MODE,
    PAR_MODE,
    Program,
    Ptr,
    Range,
    Return,
    SEQ_MODE,
    Seq,
    Stmt,
    THREAD_MODE,
    UNINIT,
    Var,
    apply_lam,
    expr_free_vars,
    fresh_name,
    subst_expr,
)
from .contracts import (
    Contract,
    ContractError,
    LoopContract,
    desugar_contract,
    desugar_loop_contract,
    uninit_res,
)
from .errors import *  # noqa: F401,F403
from .errors import CheckError
from .frame import (
    AmbiguousMatch,
    MatchError,
    MatchState,
    NoMatch,
    ResVar,
    bind_expr,
    bind_res,
    frame_subtract,
    match_res,
    normalize_ctx,
    res_canon,
    resset_equal,
    unify_expr,
)
from .intrinsics import BARRIER_PREDS, CELL_BYTES, GHOST_NAMES, Intrinsic, build_registry
from .printer import format_expr, format_res
from .resources import (
    ANY,
    Frac,
    FreeTok,
    Group,
    GMEM,
    HostCtx,
    KernelParams,
    KernelSetupCtx,
    KernelTeardownCtx,
    MEM_PREDS,
    ONE,
    PointsTo,
    PureItem,
    ResExpr,
    ResSet,
    SMEM,
    SMemAllowance,
    SyncRes,
    T_INT,
    TREG,
    ThreadsCtx,
    chunk,
    ChunkError,
    contains_desync,
    desync_leaf_mems,
    scale_res,
    subst_res,
    sync_normalize,
)

INTRINSICS = build_registry()


@dataclass
class UsageEntry:
    ctx_before: ResSet
    consumed: list[tuple[str, ResExpr]] = field(default_factory=list)
    produced: list[tuple[str, ResExpr]] = field(default_factory=list)
    bindings: dict = field(default_factory=dict)


@dataclass
class Usage:
    entries: dict[int, UsageEntry] = field(default_factory=dict)

    def get(self, nid: int) -> UsageEntry | None:
        return self.entries.get(nid)


@dataclass
class _Scope:
    names: list[str] = field(default_factory=list)        # all declared names
    autos: list[tuple[str, str]] = field(default_factory=list)  # (kind, name)


class FnChecker:
    def __init__(self, program: Program, fn: FnDef, usage: Usage):
        self.program = program
        self.fn = fn
        self.usage = usage
        self.facts = Facts()
        self.ctx = ResSet()
        self.cells: set[str] = set()          # scalar locals (stack cells)
        self.arrays: dict[str, Decl] = {}     # arrays in scope, by name
        self.pure_props: dict[str, Expr] = {}
        self.declared: set[str] = set()
        self.ret_value: Expr | None = None
        self.cur: Stmt | None = None
        self._call_bindings: dict[int, dict] = {}

    # -- diagnostics ---------------------------------------------------------
    def err(self, code: str, msg: str, stmt: Stmt | None = None):
        s = stmt or self.cur
        raise CheckError(code, msg, nid=s.nid if s else None,
                         loc=s.loc_info if s else None, source=self.program.source)

    def _wrap_match_error(self, e: MatchError, stmt: Stmt | None = None):
        code = e.code
        need = getattr(e, "need", None)
        if isinstance(need, ThreadsCtx):
            code = "E-THREADS-CTX"
        elif isinstance(need, SMemAllowance):
            code = "E-SMEM"
        raise CheckError(code, str(e), nid=(stmt or self.cur).nid if (stmt or self.cur) else None,
                         loc=(stmt or self.cur).loc_info if (stmt or self.cur) else None,
                         source=self.program.source)

    # -- entry ---------------------------------------------------------------
    def check(self):
        fn = self.fn
        try:
            contract = desugar_contract(fn.annots)
        except ContractError as e:
            raise CheckError("E-NOMATCH", str(e), source=self.program.source)
        for pname, ptype in fn.params:
            self.declared.add(pname)
        for name, item in contract.pre.pure:
            self.declared.add(name)
            if item.prop is not None:
                self.facts.add_prop(item.prop)
                self.pure_props[name] = item.prop
        self.ctx = ResSet(linear=list(contract.pre.linear))
        self.check_seq(fn.body, scope=True)
        # bind _Res and match the postcondition
        env = {}
        if self.ret_value is not None:
            env["_Res"] = self.ret_value
        post_lin = [(n, subst_res(r, env)) for n, r in contract.post.linear]
        try:
            frame, _ = frame_subtract(self.ctx, ResSet(linear=post_lin), self.facts)
        except MatchError as e:
            raise CheckError("E-POST", f"postcondition unmet: {e}",
                             source=self.program.source)
        if frame.linear:
            name, r = frame.linear[0]
            raise CheckError("E-LEAK",
                             f"function {fn.name} leaks `{name}: {format_res(r)}`",
                             source=self.program.source)
        for name, item in contract.post.pure:
            if item.prop is not None:
                f = subst_expr(item.prop, env)
                if not arith.prove_prop(f, self.facts):
                    raise CheckError("E-POST",
                                     f"cannot prove postcondition "
                                     f"`{name}: {format_expr(f)}`",
                                     source=self.program.source)

    # -- context helpers -----------------------------------------------------
    def consume(self, need: list[tuple[str, ResExpr]], quantified=None,
                stmt: Stmt | None = None) -> dict:
        try:
            frame, bindings = frame_subtract(self.ctx, ResSet(linear=need),
                                             self.facts, quantified)
        except MatchError as e:
            self._wrap_match_error(e, stmt)
        self.ctx = frame
        return bindings

    def produce(self, items: list[tuple[str, ResExpr]]):
        for n, r in items:
            if isinstance(r, SyncRes):
                r = sync_normalize(r)
            self.ctx.add_linear(n, r)
        self.ctx = normalize_ctx(self.ctx, self.facts)

    def record(self, stmt: Stmt, before: ResSet):
        entry = UsageEntry(ctx_before=before)
        entry.bindings = self._call_bindings.pop(stmt.nid, {})
        before_keys = {}
        for n, r in before.linear:
            before_keys.setdefault(repr(res_canon(r, self.facts)), []).append((n, r))
        after_keys = {}
        for n, r in self.ctx.linear:
            after_keys.setdefault(repr(res_canon(r, self.facts)), []).append((n, r))
        for k, items in before_keys.items():
            extra = len(items) - len(after_keys.get(k, []))
            entry.consumed.extend(items[:max(0, extra)])
        for k, items in after_keys.items():
            extra = len(items) - len(before_keys.get(k, []))
            entry.produced.extend(items[:max(0, extra)])
        self.usage.entries[stmt.nid] = entry

    # -- statements ----------------------------------------------------------
    def check_seq(self, seq: Seq, scope: bool):
        before = self.ctx.clone()
        scope_rec = _Scope()
        for s in seq.stmts:
            if isinstance(s, Return) and s is not seq.stmts[-1]:
                self.err("E-NOMATCH", "return must be in tail position", s)
            self.check_stmt(s, scope_rec)
        if scope and seq.scope:
            self.close_scope(scope_rec, seq)
        self.record(seq, before)

    def check_stmt(self, s: Stmt, scope: _Scope):
        self.cur = s
        before = self.ctx.clone()
        if isinstance(s, Decl):
            self.check_decl(s, scope)
        elif isinstance(s, Assign):
            self.check_assign(s)
        elif isinstance(s, CallStmt):
            if s.ghost:
                self.apply_ghost(s)
            else:
                self.apply_call(s)
        elif isinstance(s, Seq):
            self.check_seq(s, scope=True)
            return  # check_seq records
        elif isinstance(s, For):
            self.check_for(s)
        elif isinstance(s, If):
            self.check_if(s)
        elif isinstance(s, Return):
            self.ret_value = self.eval_expr(s.value)
        else:
            self.err("E-INTERNAL", f"unknown statement {type(s).__name__}", s)
        self.cur = s
        self.record(s, before)

    def check_decl(self, d: Decl, scope: _Scope):
        if d.name in self.declared:
            self.err("E-SCOPE", f"duplicate declaration of {d.name!r}", d)
        self.declared.add(d.name)
        scope.names.append(d.name)
        if d.alloc is None:
            val = self.eval_expr(d.init) if d.init is not None else UNINIT
            self.cells.add(d.name)
            scope.autos.append(("scalar", d.name))
            self.produce([(d.name, PointsTo(Loc(d.name), ANY, ONE, val))])
            return
        dims = tuple(self.eval_expr(x) for x in d.dims)
        self.arrays[d.name] = d
        if d.alloc == "MALLOC":
            grp = _uninit_cells(d.name, (), dims, ANY)
            self.produce([(d.name, grp), (d.name + "~tok", FreeTok(d.name, grp))])
        elif d.alloc == "gmem_malloc":
            self._require_present(HostCtx(), d)
            grp = _uninit_cells(d.name, (), dims, GMEM)
            self.produce([(d.name, grp), (d.name + "~tok", FreeTok(d.name, grp))])
        elif d.alloc == "__smem_malloc":
            self._require_present(KernelSetupCtx(), d)
            bpg = self._kernel_param(d, which="bpg")
            bytes_e = IntLit(CELL_BYTES)
            for x in dims:
                bytes_e = BinOp("*", bytes_e, x)
            sz = fresh_name("__sz")
            b = self.consume([("smem-allowance",
                               SMemAllowance(BinOp("+", Var(sz), bytes_e)))],
                             quantified={sz}, stmt=d)
            left = b.get(sz, IntLit(0))
            if not arith.prove_nonneg_poly(arith.norm(left, self.facts), self.facts):
                self.err("E-SMEM",
                         f"shared memory over-allocation: remaining allowance "
                         f"{format_expr(left)} is negative", d)
            binder = fresh_name("__b")
            dm = Call("DMINDEX1", (bpg, Var(binder)))
            grp = Group(binder, Range(IntLit(0), bpg),
                        _uninit_cells(d.name, (dm,), dims, SMEM), desync=True)
            self.produce([(d.name, grp), (d.name + "~tok", FreeTok(d.name, None)),
                          ("smem-allowance", SMemAllowance(left))])
        elif d.alloc == "__treg_malloc":
            tc = self._find_threads_ctx(d)
            sz = tc.range.extent()
            binder = fresh_name("__t")
            dm = Call("DMINDEX1", (sz, Var(binder)))
            grp = Group(binder, Range(IntLit(0), sz),
                        _uninit_cells(d.name, (dm,), dims, TREG), desync=True)
            scope.autos.append(("treg", d.name))
            self.produce([(d.name, grp)])
        else:
            self.err("E-INTERNAL", f"unknown allocator {d.alloc}", d)

    def _require_present(self, template: ResExpr, stmt: Stmt):
        for _, r in self.ctx.linear:
            if type(r) is type(template):
                return r
        self.err("E-NOMATCH",
                 f"{type(template).__name__} required but not in context", stmt)

    def _kernel_param(self, stmt: Stmt, which: str) -> Expr:
        for _, r in self.ctx.linear:
            if isinstance(r, KernelParams):
                return getattr(r, {"bpg": "bpg", "tpb": "tpb", "smem": "smem"}[which])
        self.err("E-NOMATCH", "KernelParams required but not in context", stmt)

    def _find_threads_ctx(self, stmt: Stmt) -> ThreadsCtx:
        for _, r in self.ctx.linear:
            if isinstance(r, ThreadsCtx):
                return r
        self.err("E-THREADS-CTX", "no ThreadsCtx in context", stmt)

    def close_scope(self, scope: _Scope, seq: Seq):
        for kind, name in scope.autos:
            kept = []
            for n, r in self.ctx.linear:
                if _res_base_is(r, name):
                    continue
                kept.append((n, r))
            self.ctx.linear = kept
        dead = set(scope.names)
        for n, r in self.ctx.linear:
            from .resources import res_free_vars
            used = res_free_vars(r) & dead
            if used:
                self.err("E-LEAK",
                         f"`{n}: {format_res(r)}` outlives the scope of "
                         f"{sorted(used)}", seq)
        for name in scope.names:
            self.cells.discard(name)
            self.arrays.pop(name, None)
            self.declared.discard(name)

    # -- expression evaluation -----------------------------------------------
    def eval_expr(self, e: Expr, pure: bool = False) -> Expr:
        if isinstance(e, (IntLit, FloatLit)):
            return e
        if isinstance(e, Var):
            if e is UNINIT:
                return e
            if e.name in self.cells:
                if pure:
                    self.err("E-RANGE", f"memory read of {e.name!r} in a pure position")
                return self.read_cell(Loc(e.name))
            return e
        if isinstance(e, Access):
            if pure:
                self.err("E-RANGE", f"memory read of {e.base!r} in a pure position")
            idxs = tuple(self.eval_expr(i) for i in e.idxs)
            return self.read_cell(Loc(e.base, idxs))
        if isinstance(e, BinOp):
            return BinOp(e.op, self.eval_expr(e.lhs, pure), self.eval_expr(e.rhs, pure))
        if isinstance(e, Call):
            return Call(e.fn, tuple(self.eval_expr(a, pure) for a in e.args))
        if isinstance(e, Ptr):
            return Ptr(e.base, tuple(self.eval_expr(i, pure) for i in e.idxs))
        if isinstance(e, Lam):
            return e
        self.err("E-INTERNAL", f"cannot evaluate {e!r}")

    def read_cell(self, loc: Loc) -> Expr:
        res = self._locate(loc, for_write=False)
        val = res[0]
        if val is UNINIT:
            self.err("E-READ", f"read of uninitialized cell &{loc.base}"
                     + "".join(f"[{format_expr(i)}]" for i in loc.idxs))
        return val

    def _mem_ctx_check(self, mem: str):
        if mem == ANY:
            return
        tc = None
        for _, r in self.ctx.linear:
            if isinstance(r, ThreadsCtx):
                tc = r
                break
        if tc is None:
            self.err("E-THREADS-CTX",
                     f"{mem} access requires an active ThreadsCtx")
        if mem == GMEM:
            ext = tc.range.extent()
            if not arith.prove_eq(ext, IntLit(1), self.facts):
                self.err("E-THREADS-CTX",
                         f"global memory access requires a single-thread "
                         f"context, have ThreadsCtx of width {format_expr(ext)}")

    def _locate(self, loc: Loc, for_write: bool):
        """Find the permission covering loc. Returns (value, mem, kind, pos)
        where kind is 'atom' or ('focus', group-pos, idx)."""
        # direct atom
        for pos, (n, r) in enumerate(self.ctx.linear):
            if isinstance(r, PointsTo) and r.loc.base == loc.base \
                    and len(r.loc.idxs) == len(loc.idxs):
                if all(arith.prove_eq(a, b, self.facts)
                       for a, b in zip(r.loc.idxs, loc.idxs)):
                    if for_write and not r.frac.is_full():
                        self.err("E-WRITE",
                                 f"write needs the full permission of &{loc.base}, "
                                 f"context holds a fraction")
                    self._mem_ctx_check(r.mem)
                    return r.val, r.mem, "atom", pos
        # focus into a group
        for pos, (n, r) in enumerate(self.ctx.linear):
            if not isinstance(r, Group):
                continue
            hit = self._try_focus(r, loc)
            if hit is None:
                continue
            leaf, idx_path, desync = hit
            if desync:
                self.err("E-DESYNC",
                         f"access to &{loc.base}"
                         + "".join(f"[{format_expr(i)}]" for i in loc.idxs)
                         + " focuses into a desynchronized group; "
                           "a barrier is required first")
            if for_write and not leaf.frac.is_full():
                self.err("E-WRITE",
                         f"write needs the full permission of &{loc.base}, "
                         f"the group holds a fraction")
            self._mem_ctx_check(leaf.mem)
            return leaf.val, leaf.mem, ("focus", pos, idx_path), pos
        self.err("E-NOMATCH",
                 "no permission covers &" + loc.base
                 + "".join(f"[{format_expr(i)}]" for i in loc.idxs))

    def _try_focus(self, g: Group, loc: Loc):
        """Instantiate nested binders so the leaf matches loc; prove ranges."""
        binders: list[tuple[str, Range, tuple]] = []
        cur: ResExpr = g
        while isinstance(cur, Group):
            binders.append((cur.binder, cur.range, cur.excluded))
            cur = cur.body
        if not isinstance(cur, PointsTo):
            return None
        if cur.loc.base != loc.base or len(cur.loc.idxs) != len(loc.idxs):
            return None
        # solve binder values from index equations, left to right
        env: dict[str, Expr] = {}
        facts = self.facts
        for te, ne in zip(cur.loc.idxs, loc.idxs):
            te_s = subst_expr(te, env)
            unknowns = [b for b, _, _ in binders
                        if b not in env and b in expr_free_vars(te_s)]
            if not unknowns:
                if not arith.prove_eq(te_s, ne, facts):
                    return None
                continue
            if len(unknowns) > 1:
                return None
            v = unknowns[0]
            tp = arith.norm(te_s, facts)
            np_ = arith.norm(ne, facts)
            occ = arith._linear_coeff(tp, v)
            if occ is None:
                return None
            coeff, rest = occ
            if not coeff.is_const() or coeff.const_value() not in (1, -1):
                return None
            sol = (np_ - rest) if coeff.const_value() == 1 else (rest - np_)
            env[v] = arith.poly_to_expr(sol)
        idx_path = []
        desync = False
        for b, rng, excluded in binders:
            if b not in env:
                return None
            idx = env[b]
            lo = subst_expr(rng.start, env)
            hi = subst_expr(rng.stop, env)
            if not (arith.prove_le(lo, idx, facts) and arith.prove_lt(idx, hi, facts)):
                return None
            for ex in excluded:
                d = arith.norm(subst_expr(ex, env), facts) - arith.norm(idx, facts)
                if not (d.is_const() and d.const_value() != 0):
                    return None
            idx_path.append(idx)
        leaf = cur
        leaf = subst_res(leaf, env)
        d = g
        while isinstance(d, Group):
            if d.desync:
                desync = True
            d = d.body
        return leaf, tuple(idx_path), desync

    # -- assignment ------------------------------------------------------------
    def check_assign(self, a: Assign):
        loc = Loc(a.target.base, tuple(self.eval_expr(i) for i in a.target.idxs))
        rhs = self.eval_expr(a.value)
        if a.op == "+=":
            old = self.read_cell(loc)
            rhs = BinOp("+", old, rhs)
        val, mem, kind, pos = self._locate(loc, for_write=True)
        name, r = self.ctx.linear[pos]
        if kind == "atom":
            self.ctx.linear[pos] = (name, replace(r, val=rhs))
            return
        # write through an automatic focus: carve the element out, update
        # it, and let context normalization merge it back if shapes realign
        _, gpos, idx_path = kind
        if len(idx_path) != 1 or not isinstance(r.body, PointsTo):
            self.err("E-WRITE",
                     f"write into the nested group holding &{loc.base} needs "
                     f"explicit focus ghosts")
        idx = idx_path[0]
        leaf = subst_res(r.body, {r.binder: idx})
        self.ctx.linear[pos] = (name, replace(r, excluded=r.excluded + (idx,)))
        self.produce([(name + "@w", replace(leaf, val=rhs))])

    # -- conditionals ----------------------------------------------------------
    def check_if(self, s: If):
        self.eval_expr(s.cond)
        saved = self.ctx.clone()
        self.check_seq(s.then, scope=True)
        then_ctx = self.ctx
        self.ctx = saved.clone()
        if s.els is not None:
            self.check_seq(s.els, scope=True)
        els_ctx = self.ctx
        if not resset_equal(then_ctx, els_ctx, self.facts):
            self.err("E-NOMATCH", "if branches end in different resource states", s)
        self.ctx = then_ctx

    # -- loops -----------------------------------------------------------------
    def check_for(self, loop: For):
        try:
            lc = desugar_loop_contract(loop.contract)
        except ContractError as e:
            self.err("E-NOMATCH", str(e), loop)
        idx = loop.index
        rng = Range(self.eval_expr(loop.range.start, pure=True),
                    self.eval_expr(loop.range.stop, pure=True))
        if loop.mode in (PAR_MODE, THREAD_MODE, MAGIC_MODE) and lc.invariant:
            self.err("E-INVARIANT",
                     f"{loop.mode} loop cannot carry a sequential invariant", loop)
        desync = loop.mode in (THREAD_MODE, MAGIC_MODE)

        # auto-shared reads: whole resources read in the body but absent
        # from the contract
        auto_shared = self._infer_shared(loop, lc)
        shared_entries = list(lc.shared) + auto_shared

        # exclusive pure preconditions hold for each iteration
        child = self.facts.child()
        child.add_bound(idx, rng.start, rng.stop)
        for n, item in lc.xpure_pre:
            if item.prop is not None and not arith.prove_prop(item.prop, child):
                self.err("E-PROP",
                         f"cannot establish `{n}` for every iteration of {idx}", loop)

        # consume the outer view
        need: list[tuple[str, ResExpr]] = []
        quantified: set[str] = set()
        inv_start = [(n, subst_res(r, {idx: rng.start})) for n, r in lc.invariant]
        need += inv_start
        for n, a, r in shared_entries:
            quantified.add(a)
            need.append((n, _set_frac(r, Frac(a, 0))))
        for n, r in lc.xpre:
            quantified |= _frac_atoms(r)
            need.append((n, Group(idx, rng, r, desync=desync)))
        tc_have: ThreadsCtx | None = None
        if loop.mode == THREAD_MODE:
            tc_have = self._find_threads_ctx(loop)
            need.append(("threads", ThreadsCtx(tc_have.range, tc_have.frac)))
        bindings = self.consume(need, quantified, loop)

        # check the body against the iteration view
        outer_ctx = self.ctx
        outer_facts = self.facts
        outer_cells = set(self.cells)
        body_ctx = ResSet()
        for n, r in lc.invariant:
            body_ctx.add_linear(n, r)
        for n, a, r in shared_entries:
            fr = bindings.get(a)
            fr = fr if isinstance(fr, Frac) else Frac(a, 0)
            body_ctx.add_linear(n, _set_frac(r, fr))
        for n, r in lc.xpre:
            body_ctx.add_linear(n, _apply_frac_bindings(r, bindings))
        if loop.mode == THREAD_MODE:
            try:
                sub = chunk(Var(idx), rng.extent(), tc_have.range, self.facts)
            except ChunkError as e:
                self.err("E-DIV", f"thread-for over {idx}: {e}", loop)
            body_ctx.add_linear("threads", ThreadsCtx(sub, tc_have.frac))
        self.ctx = body_ctx
        self.facts = child
        try:
            self.check_seq(loop.body, scope=True)
            # the body must deliver the next-iteration view
            body_post: list[tuple[str, ResExpr]] = []
            nxt = BinOp("+", Var(idx), IntLit(1))
            body_post += [(n, subst_res(r, {idx: nxt})) for n, r in lc.invariant]
            for n, a, r in shared_entries:
                fr = bindings.get(a)
                fr = fr if isinstance(fr, Frac) else Frac(a, 0)
                body_post.append((n, _set_frac(r, fr)))
            for n, r in lc.xpost:
                body_post.append((n, _apply_frac_bindings(r, bindings)))
            if loop.mode == THREAD_MODE:
                body_post.append(("threads", ThreadsCtx(sub, tc_have.frac)))
            try:
                frame, _ = frame_subtract(self.ctx, ResSet(linear=body_post), self.facts)
            except MatchError as e:
                self._wrap_match_error(e, loop)
            if frame.linear:
                n, r = frame.linear[0]
                self.err("E-LEAK",
                         f"loop body over {idx} leaks `{n}: {format_res(r)}`", loop)
        finally:
            self.facts = outer_facts
            self.cells = outer_cells
        self.ctx = outer_ctx

        # produce the outer view
        out: list[tuple[str, ResExpr]] = []
        out += [(n, subst_res(r, {idx: rng.stop})) for n, r in lc.invariant]
        for n, a, r in shared_entries:
            fr = bindings.get(a)
            fr = fr if isinstance(fr, Frac) else Frac(a, 0)
            out.append((n, _set_frac(r, fr)))
        for n, r in lc.xpost:
            out.append((n, Group(idx, rng, _apply_frac_bindings(r, bindings),
                                 desync=desync)))
        if loop.mode == THREAD_MODE:
            out.append(("threads", ThreadsCtx(tc_have.range, tc_have.frac)))
        self.produce(out)

    def _infer_shared(self, loop: For, lc: LoopContract):
        covered: set[str] = set()
        for group in (lc.invariant, lc.xpre, lc.xpost):
            for _, r in group:
                covered |= _res_bases(r)
        for _, _, r in lc.shared:
            covered |= _res_bases(r)
        reads = _read_bases(loop.body, self.cells)
        auto = []
        for name, r in self.ctx.linear:
            if isinstance(r, (PointsTo, Group)):
                bases = _res_bases(r)
                if bases & reads and not (bases & covered):
                    auto.append((name, fresh_name("al"), r))
                    covered |= bases
        return auto

    # -- calls -----------------------------------------------------------------
    def apply_call(self, s: CallStmt):
        name = s.fn
        if name in INTRINSICS:
            intr = INTRINSICS[name]
            if intr.special == "alloc":
                self.err("E-CALL", f"{name} is only legal as a declaration "
                         f"initializer", s)
            if intr.special in BARRIER_PREDS:
                return self.apply_barrier(s, intr)
            if intr.special == "mem_op":
                self.err("E-CALL", f"{name} is implicit in memory accesses", s)
            return self._apply_contract(s, intr.params,
                                        [(n, PureItem(typ=t)) for n, t in intr.quantified],
                                        intr.props, intr.consumes, intr.produces,
                                        intr.reads, intr.preserves)
        # user-defined function
        try:
            callee = self.program.fn(name)
        except KeyError:
            self.err("E-CALL", f"unknown function {name!r}", s)
        c = desugar_contract(callee.annots)
        params = [p for p, _ in callee.params]
        props = [it.prop for _, it in c.pre.pure if it.prop is not None]
        quantified = [(n, it) for n, it in c.pre.pure if it.typ is not None]
        self._apply_contract(s, params, quantified, props,
                             [r for _, r in c.pre.linear],
                             [r for _, r in c.post.linear], [], [],
                             post_pure=[(n, it) for n, it in c.post.pure
                                        if it.prop is not None])

    def _apply_contract(self, s: CallStmt, params, quantified, props,
                        consumes, produces, reads, preserves, post_pure=()):
        if len(s.args) != len(params):
            self.err("E-CALL", f"{s.fn} expects {len(params)} arguments, "
                     f"got {len(s.args)}", s)
        env = {p: self.eval_expr(a) for p, a in zip(params, s.args)}
        qnames = {n for n, _ in quantified}
        # each call reads its own fraction of read-only resources
        read_fracs = [fresh_name("al") for _ in reads]
        qnames |= set(read_fracs)
        need: list[tuple[str, ResExpr]] = []
        for i, r in enumerate(consumes):
            need.append((f"{s.fn}!c{i}", subst_res(r, env)))
        for i, r in enumerate(preserves):
            need.append((f"{s.fn}!p{i}", subst_res(r, env)))
        for i, r in enumerate(reads):
            need.append((f"{s.fn}!r{i}", scale_res(subst_res(r, env), Frac(read_fracs[i], 0))))
        bindings = self.consume(need, qnames, s)
        full_env = dict(env)
        for k, v in bindings.items():
            if isinstance(v, Expr):
                full_env[k] = v
        # solve remaining unknowns from requires-equations with one unknown
        for p in props:
            f = subst_expr(subst_expr(p, env), {k: v for k, v in full_env.items()
                                                if isinstance(v, Expr)})
            unknown = [v for v in expr_free_vars(f)
                       if v in qnames and v not in bindings]
            if len(unknown) == 1 and isinstance(f, BinOp) and f.op == "==":
                st = MatchState(self.facts, {unknown[0]}, {})
                if unify_expr(f.lhs, f.rhs, st) or unify_expr(f.rhs, f.lhs, st):
                    v = st.bindings.get(unknown[0])
                    if v is not None:
                        bindings[unknown[0]] = v
                        full_env[unknown[0]] = v
        for p in props:
            f = subst_expr(p, {k: v for k, v in full_env.items()
                               if isinstance(v, Expr)})
            if not arith.prove_prop(f, self.facts):
                self.err("E-PROP", f"{s.fn}: cannot prove `{format_expr(f)}`", s)
        # produce
        res_name = fresh_name(f"__res_{s.fn}")
        full_env["_Res"] = Var(res_name)
        out = []
        sub_env = {k: v for k, v in full_env.items() if isinstance(v, Expr)}
        for i, r in enumerate(produces):
            rr = subst_res(r, sub_env)
            rr = bind_res(rr, MatchState(self.facts, set(), bindings))
            out.append((f"{s.fn}!o{i}", rr))
        for i, r in enumerate(preserves):
            rr = bind_res(subst_res(r, sub_env), MatchState(self.facts, set(), bindings))
            out.append((f"{s.fn}!p{i}", rr))
        for i, r in enumerate(reads):
            fr = bindings.get(read_fracs[i])
            fr = fr if isinstance(fr, Frac) else Frac(read_fracs[i], 0)
            rr = scale_res(bind_res(subst_res(r, sub_env),
                                    MatchState(self.facts, set(), bindings)), fr)
            out.append((f"{s.fn}!r{i}", rr))
        self.produce(out)
        self._call_bindings[s.nid] = {k: v for k, v in full_env.items()}
        for n, it in post_pure:
            f = subst_expr(it.prop, sub_env)
            self.facts.add_prop(f)
            self.pure_props[n] = f

    def apply_barrier(self, s: CallStmt, intr: Intrinsic):
        pred_name = BARRIER_PREDS[intr.special]
        pred = MEM_PREDS[pred_name]
        if intr.special == "barrier_block":
            tpb = self._kernel_param(s, "tpb")
            tc = self._find_threads_ctx(s)
            if not arith.prove_eq(tc.range.extent(), tpb, self.facts):
                self.err("E-THREADS-CTX",
                         f"blocksync requires a block-wide ThreadsCtx of "
                         f"{format_expr(tpb)} threads, have width "
                         f"{format_expr(tc.range.extent())}", s)
        elif intr.special == "barrier_teardown":
            self._require_present(KernelTeardownCtx(), s)
        # batch: all resources holding a desync group whose desync leaves
        # the predicate accepts
        selected = []
        kept = []
        for n, r in self.ctx.linear:
            if contains_desync(r):
                mems = desync_leaf_mems(r)
                if mems and mems <= pred:
                    selected.append((n, r))
                    continue
            kept.append((n, r))
        self.ctx.linear = kept
        self.produce([(n, SyncRes(pred_name, r)) for n, r in selected])

    # -- ghosts ----------------------------------------------------------------
    def apply_ghost(self, s: CallStmt):
        from . import groups
        name = s.fn
        if name not in GHOST_NAMES:
            self.err("E-GHOST", f"unknown ghost {name!r}", s)
        try:
            groups.apply_ghost(self, s)
        except CheckError:
            raise
        except MatchError as e:
            self._wrap_match_error(e, s)


def _set_frac(r: ResExpr, f: Frac) -> ResExpr:
    from .frame import _set_leaf_frac
    return _set_leaf_frac(r, f)


def _apply_frac_bindings(r: ResExpr, bindings: dict) -> ResExpr:
    st = MatchState(Facts(), set(), bindings)
    return bind_res(r, st)


def _frac_atoms(r: ResExpr) -> set[str]:
    out = set()
    if isinstance(r, PointsTo):
        if r.frac.atom:
            out.add(r.frac.atom)
    elif isinstance(r, Group):
        out |= _frac_atoms(r.body)
    elif isinstance(r, (HostCtx, KernelSetupCtx, KernelTeardownCtx, ThreadsCtx,
                        KernelParams)):
        if r.frac.atom:
            out.add(r.frac.atom)
    elif isinstance(r, SyncRes):
        out |= _frac_atoms(r.inner)
    return out


def _res_base_is(r: ResExpr, name: str) -> bool:
    if isinstance(r, PointsTo):
        return r.loc.base == name
    if isinstance(r, Group):
        return _res_base_is(r.body, name)
    if isinstance(r, SyncRes):
        return _res_base_is(r.inner, name)
    return False


def _res_bases(r: ResExpr) -> set[str]:
    if isinstance(r, PointsTo):
        return {r.loc.base}
    if isinstance(r, Group):
        return _res_bases(r.body)
    if isinstance(r, SyncRes):
        return _res_bases(r.inner)
    return set()


def _read_bases(s: Stmt, cells: set[str]) -> set[str]:
    out: set[str] = set()

    def expr(e: Expr):
        if isinstance(e, Access):
            out.add(e.base)
            for i in e.idxs:
                expr(i)
        elif isinstance(e, Var):
            if e.name in cells:
                out.add(e.name)
        elif isinstance(e, BinOp):
            expr(e.lhs)
            expr(e.rhs)
        elif isinstance(e, (Call, Ptr)):
            args = e.args if isinstance(e, Call) else e.idxs
            for a in args:
                expr(a)

    def walk(t: Stmt):
        if isinstance(t, Assign):
            expr(t.value)
            for i in t.target.idxs:
                expr(i)
            if t.op == "+=":
                out.add(t.target.base)
        elif isinstance(t, Decl):
            if t.init is not None:
                expr(t.init)
        elif isinstance(t, CallStmt):
            if not t.ghost:
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
    return out


def _uninit_cells(base: str, prefix: tuple, dims: tuple, mem: str) -> ResExpr:
    binders = [fresh_name(f"__i{k}") for k in range(len(dims))]
    body: ResExpr = PointsTo(Loc(base, prefix + tuple(Var(b) for b in binders)),
                             mem, val=UNINIT)
    for b, d in zip(reversed(binders), reversed(dims)):
        body = Group(b, Range(IntLit(0), d), body)
    return body


def check_program(program: Program) -> Usage:
    """Check every non-admitted function; returns the usage report."""
    usage = Usage()
    _validate_names(program)
    for fn in program.fns:
        if fn.admitted or fn.body is None:
            continue
        FnChecker(program, fn, usage).check()
    return usage


def _validate_names(program: Program):
    for fn in program.fns:
        if fn.admitted and fn.body is not None:
            raise CheckError("E-INTERNAL",
                             f"admitted function {fn.name} must have no body",
                             source=program.source)
