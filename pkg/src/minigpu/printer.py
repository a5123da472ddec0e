"""Pretty-printers: annotated C-style source, resource formulas, raw AST.

print_program is round-trip stable: parsing its output yields an
alpha-equivalent program. Expression printing has two modes: "surface"
(exact_div renders as /) and "cuda" (exact_div stays a call, / and % are
C operators).
"""

from __future__ import annotations

from .ast import (
    UNINIT,
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
    LoopAnnots,
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
    Var,
)
from .resources import (
    Frac,
    FreeTok,
    Group,
    HostCtx,
    KernelParams,
    KernelSetupCtx,
    KernelTeardownCtx,
    PointsTo,
    PureItem,
    PureType,
    ResExpr,
    ResSet,
    SMemAllowance,
    SyncRes,
    ThreadsCtx,
)

_PREC = {"==": 0, "!=": 0, "<": 0, "<=": 0, ">": 0, ">=": 0,
         "+": 1, "-": 1, "*": 2, "/": 2, "%": 2}


def format_expr(e: Expr, mode: str = "surface", prec: int = 0) -> str:
    if isinstance(e, IntLit):
        return str(e.value)
    if isinstance(e, FloatLit):
        v = e.value
        if v == int(v):
            return f"{int(v)}."
        return repr(v)
    if isinstance(e, Var):
        return "UninitCell" if e is UNINIT else e.name
    if isinstance(e, BinOp):
        p = _PREC[e.op]
        s = f"{format_expr(e.lhs, mode, p)} {e.op} {format_expr(e.rhs, mode, p + 1)}"
        return f"({s})" if p < prec else s
    if isinstance(e, Call):
        if e.fn == "exact_div" and mode == "surface" and len(e.args) == 2:
            p = _PREC["/"]
            s = f"{format_expr(e.args[0], mode, p)} / {format_expr(e.args[1], mode, p + 1)}"
            return f"({s})" if p < prec else s
        args = ", ".join(format_expr(a, mode) for a in e.args)
        return f"{e.fn}({args})"
    if isinstance(e, Lam):
        return f"fun {' '.join(e.params)} -> {format_expr(e.body, mode)}"
    if isinstance(e, Ptr):
        if not e.idxs:
            return e.base
        idx = "".join(f"[{format_expr(i, mode)}]" for i in e.idxs)
        return f"&{e.base}{idx}"
    from .ast import Access
    if isinstance(e, Access):
        idx = "".join(f"[{format_expr(i, mode)}]" for i in e.idxs)
        return f"{e.base}{idx}"
    raise TypeError(e)


def format_frac(f: Frac) -> str:
    base = f.atom if f.atom is not None else "1"
    if f.k == 0:
        return base
    return f"{base}/{1 << f.k}"


def format_range(r: Range) -> str:
    return f"{format_expr(r.start)}..{format_expr(r.stop)}"


def format_res(r: ResExpr) -> str:
    if isinstance(r, PointsTo):
        loc = "&" + r.loc.base + "".join(f"[{format_expr(i)}]" for i in r.loc.idxs)
        arrow = "~>" if r.mem == "Any" else f"~>[{r.mem}]"
        val = "UninitCell" if r.val is UNINIT else format_expr(r.val)
        core = f"{loc} {arrow} {val}"
        if r.frac.is_full():
            return core
        return f"{format_frac(r.frac)} * ({core})"
    if isinstance(r, Group):
        kw = "desync_for" if r.desync else "for"
        rng = format_range(r.range)
        if r.excluded:
            rng += " \\ {" + "; ".join(format_expr(e) for e in r.excluded) + "}"
        return f"{kw} {r.binder} in {rng} -> {format_res(r.body)}"
    if isinstance(r, HostCtx):
        return _with_frac("HostCtx", r.frac)
    if isinstance(r, KernelSetupCtx):
        return _with_frac("KernelSetupCtx", r.frac)
    if isinstance(r, KernelTeardownCtx):
        return _with_frac("KernelTeardownCtx", r.frac)
    if isinstance(r, ThreadsCtx):
        return _with_frac(f"ThreadsCtx({format_range(r.range)})", r.frac)
    if isinstance(r, KernelParams):
        s = (f"KernelParams({format_expr(r.bpg)}, {format_expr(r.tpb)}, "
             f"{format_expr(r.smem)})")
        return _with_frac(s, r.frac)
    if isinstance(r, SMemAllowance):
        return f"SMemAllowance({format_expr(r.bytes)})"
    if isinstance(r, FreeTok):
        if r.inner is None:
            return f"FreeTok({r.base})"
        return f"FreeTok({r.base}, {format_res(r.inner)})"
    if isinstance(r, SyncRes):
        return f"Sync({r.pred}, {format_res(r.inner)})"
    from .frame import ResVar
    if isinstance(r, ResVar):
        return r.name
    raise TypeError(r)


def _with_frac(s: str, f: Frac) -> str:
    if f.is_full():
        return s
    return f"{format_frac(f)} * ({s})"


def format_pure_item(item: PureItem) -> str:
    if item.typ is not None:
        return str(item.typ)
    return format_expr(item.prop)


def format_resset(rs: ResSet) -> str:
    parts = [f"{n}: {format_pure_item(it)}" for n, it in rs.pure]
    parts += [f"{n}: {format_res(r)}" for n, r in rs.linear]
    return "{" + ", ".join(parts) + "}"


# ---------------------------------------------------------------------------
# Annotated program printing


def _fmt_named(items) -> str:
    out = []
    for name, payload in items:
        body = format_res(payload) if isinstance(payload, ResExpr) else (
            format_pure_item(payload) if isinstance(payload, PureItem)
            else format_expr(payload))
        if name and not name.startswith("#"):
            out.append(f"{name}: {body}")
        else:
            out.append(body)
    return ", ".join(out)


_MODE_KW = {SEQ_MODE: "for", PAR_MODE: "parallel for",
            THREAD_MODE: "thread for", MAGIC_MODE: "magic thread for"}


class _Printer:
    def __init__(self):
        self.lines: list[str] = []
        self.indent = 0

    def emit(self, s: str = ""):
        self.lines.append("    " * self.indent + s if s else "")

    def stmt(self, s: Stmt):
        if isinstance(s, Decl):
            if s.alloc is None:
                init = f" = {format_expr(s.init)}" if s.init is not None else ""
                self.emit(f"{s.ctype} {s.name}{init};")
            else:
                dims = ", ".join(format_expr(d) for d in s.dims)
                self.emit(f"{s.ctype}* const {s.name} = "
                          f"{s.alloc}{len(s.dims)}<{s.ctype}>({dims});")
        elif isinstance(s, Assign):
            tgt = s.target.base + "".join(f"[{format_expr(i)}]" for i in s.target.idxs)
            self.emit(f"{tgt} {s.op} {format_expr(s.value)};")
        elif isinstance(s, CallStmt):
            if s.ghost:
                from .parser import format_ghost_args
                args = format_ghost_args(s.ghost_args)
                self.emit(f'__ghost({s.fn}, "{args}");')
            else:
                args = ", ".join(format_expr(a) for a in s.args)
                self.emit(f"{s.fn}({args});")
        elif isinstance(s, Seq):
            self.emit("{")
            self.indent += 1
            for a in sorted(s.attrs):
                self.emit(f'__block_attr("{a}");')
            for c in s.stmts:
                self.stmt(c)
            self.indent -= 1
            self.emit("}")
        elif isinstance(s, For):
            kw = _MODE_KW[s.mode]
            hdr = (f"{kw} (int {s.index} = {format_expr(s.range.start)}; "
                   f"{s.index} < {format_expr(s.range.stop)}; {s.index}++) {{")
            self.emit(hdr)
            self.indent += 1
            self.loop_contract(s.contract)
            for c in s.body.stmts:
                self.stmt(c)
            self.indent -= 1
            self.emit("}")
        elif isinstance(s, If):
            self.emit(f"if ({format_expr(s.cond)}) {{")
            self.indent += 1
            for c in s.then.stmts:
                self.stmt(c)
            self.indent -= 1
            if s.els is not None:
                self.emit("} else {")
                self.indent += 1
                for c in s.els.stmts:
                    self.stmt(c)
                self.indent -= 1
            self.emit("}")
        elif isinstance(s, Return):
            self.emit(f"return {format_expr(s.value)};")
        else:
            raise TypeError(s)

    def loop_contract(self, c: LoopAnnots):
        if c is None:
            return
        for clause in LoopAnnots.CLAUSES:
            items = getattr(c, clause)
            if items:
                self.emit(f'__{clause}("{_fmt_named(items)}");')

    def fn(self, f: FnDef):
        params = ", ".join(f"{t} {n}" for n, t in f.params)
        self.emit(f"{f.ret} {f.name}({params}) {{")
        self.indent += 1
        if f.admitted:
            self.emit("__admitted();")
        if f.ghost:
            self.emit("__ghost_fn();")
        for clause in ("requires", "ensures", "consumes", "produces",
                       "preserves", "writes", "reads"):
            items = getattr(f.annots, clause)
            if items:
                self.emit(f'__{clause}("{_fmt_named(items)}");')
        if f.body is not None:
            for s in f.body.stmts:
                self.stmt(s)
        self.indent -= 1
        self.emit("}")


def print_program(p: Program) -> str:
    pr = _Printer()
    for name, typ in p.pures:
        pr.emit(f'__pure("{name}: {typ}");')
    for ax in p.axioms:
        params = ", ".join(
            f"{n}: {t if isinstance(t, PureType) else format_expr(t)}"
            for n, t in ax.params)
        pr.emit(f'__axiom({ax.name}, "{params} . '
                f"{format_expr(ax.lhs)} == {format_expr(ax.rhs)}\");")
    if p.pures or p.axioms:
        pr.emit()
    for f in p.fns:
        pr.fn(f)
        pr.emit()
    return "\n".join(pr.lines).rstrip() + "\n"


# ---------------------------------------------------------------------------
# Raw AST dump (debugging aid)


def print_raw(p: Program) -> str:
    out: list[str] = []

    def walk(s: Stmt, d: int):
        pad = "  " * d
        if isinstance(s, Seq):
            out.append(f"{pad}(seq#{s.nid}{' scope' if s.scope else ''}"
                       f"{' ' + ','.join(sorted(s.attrs)) if s.attrs else ''}")
            for c in s.stmts:
                walk(c, d + 1)
            out.append(f"{pad})")
        elif isinstance(s, For):
            out.append(f"{pad}(for#{s.nid} {s.mode} {s.index} "
                       f"{format_range(s.range)}")
            walk(s.body, d + 1)
            out.append(f"{pad})")
        elif isinstance(s, If):
            out.append(f"{pad}(if#{s.nid} {format_expr(s.cond)}")
            walk(s.then, d + 1)
            if s.els:
                walk(s.els, d + 1)
            out.append(f"{pad})")
        elif isinstance(s, Decl):
            out.append(f"{pad}(decl#{s.nid} {s.name} {s.alloc or 'scalar'})")
        elif isinstance(s, Assign):
            out.append(f"{pad}(assign#{s.nid} {s.target.base})")
        elif isinstance(s, CallStmt):
            out.append(f"{pad}(call#{s.nid} {'ghost ' if s.ghost else ''}{s.fn})")
        elif isinstance(s, Return):
            out.append(f"{pad}(return#{s.nid})")

    for f in p.fns:
        out.append(f"(fn {f.name}{' admitted' if f.admitted else ''}")
        if f.body is not None:
            walk(f.body, 1)
        out.append(")")
    return "\n".join(out) + "\n"
