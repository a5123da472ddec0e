"""Object-language AST: pure expressions, statements, functions, programs.

Expressions (Expr) are immutable and hashable; they appear both in executable
code and inside resource formulas. Statements (Stmt) are mutable nodes that
the transformation engine rewrites in place. Every Stmt carries a small
integer id (nid) used by usage reports and diagnostics.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

# ---------------------------------------------------------------------------
# Expressions

INT = "int"
FLOAT = "float"


@dataclass(frozen=True)
class Expr:
    pass


@dataclass(frozen=True)
class IntLit(Expr):
    value: int


@dataclass(frozen=True)
class FloatLit(Expr):
    value: float


@dataclass(frozen=True)
class Var(Expr):
    name: str


@dataclass(frozen=True)
class BinOp(Expr):
    # op in {+, -, *, /, %, ==, !=, <, <=, >, >=}; / on ints is exact
    # division parsed to Call("exact_div"); % and a raw "/" only appear in
    # codegen-synthesized index expressions.
    op: str
    lhs: Expr
    rhs: Expr


@dataclass(frozen=True)
class Call(Expr):
    # Pure application: uninterpreted symbols (reduce_sum, A), interpreted
    # helpers (exact_div, pow2, DMINDEXk) and, in executable positions,
    # calls to defined functions.
    fn: str
    args: tuple[Expr, ...]


@dataclass(frozen=True)
class Lam(Expr):
    params: tuple[str, ...]
    body: Expr


@dataclass(frozen=True)
class Ptr(Expr):
    # Pointer value: base array name plus a (possibly empty) index prefix,
    # e.g. &a[i] as a value. Produced by unification and &-expressions.
    base: str
    idxs: tuple[Expr, ...] = ()


@dataclass(frozen=True)
class Access(Expr):
    # Memory read a[i][j] in executable code; the checker and interpreter
    # evaluate these away, they never reach arithmetic normalization.
    base: str
    idxs: tuple[Expr, ...] = ()


UNINIT = Var("__uninit__")  # cell-value sentinel for uninitialized memory


def mk_call(fn: str, *args: Expr) -> Call:
    return Call(fn, tuple(args))


def add(a: Expr, b: Expr) -> Expr:
    return BinOp("+", a, b)


def sub(a: Expr, b: Expr) -> Expr:
    return BinOp("-", a, b)


def mul(a: Expr, b: Expr) -> Expr:
    return BinOp("*", a, b)


def lit(v) -> Expr:
    return IntLit(v) if isinstance(v, int) else FloatLit(v)


# ---------------------------------------------------------------------------
# Ranges and locations


@dataclass(frozen=True)
class Range:
    """Half-open interval [start, stop) with unit step."""

    start: Expr
    stop: Expr

    def extent(self) -> Expr:
        return BinOp("-", self.stop, self.start)


def range_upto(stop: Expr) -> Range:
    return Range(IntLit(0), stop)


def range_plus(start: Expr, extent: Expr) -> Range:
    return Range(start, BinOp("+", start, extent))


@dataclass(frozen=True)
class Loc:
    """Addressable cell: base name plus index path (&base[i0][i1]...)."""

    base: str
    idxs: tuple[Expr, ...] = ()


# ---------------------------------------------------------------------------
# Free variables and substitution over expressions


def expr_free_vars(e: Expr) -> set[str]:
    if isinstance(e, (IntLit, FloatLit)):
        return set()
    if isinstance(e, Var):
        return {e.name} if e is not UNINIT else set()
    if isinstance(e, BinOp):
        return expr_free_vars(e.lhs) | expr_free_vars(e.rhs)
    if isinstance(e, Call):
        out = {e.fn}
        for a in e.args:
            out |= expr_free_vars(a)
        return out
    if isinstance(e, Lam):
        return expr_free_vars(e.body) - set(e.params)
    if isinstance(e, (Ptr, Access)):
        out = {e.base}
        for a in e.idxs:
            out |= expr_free_vars(a)
        return out
    raise TypeError(e)


_fresh_counter = itertools.count()


def fresh_name(hint: str) -> str:
    return f"{hint}_{next(_fresh_counter)}"


def subst_expr(e: Expr, env: dict[str, Expr]) -> Expr:
    """Capture-avoiding substitution of variables (and nullary symbols)."""
    if not env:
        return e
    if isinstance(e, (IntLit, FloatLit)):
        return e
    if isinstance(e, Var):
        return env.get(e.name, e)
    if isinstance(e, BinOp):
        return BinOp(e.op, subst_expr(e.lhs, env), subst_expr(e.rhs, env))
    if isinstance(e, Call):
        args = tuple(subst_expr(a, env) for a in e.args)
        repl = env.get(e.fn)
        if repl is None:
            return Call(e.fn, args)
        if isinstance(repl, Var):
            return Call(repl.name, args)
        if isinstance(repl, Lam):
            return apply_lam(repl, args)
        if isinstance(repl, Ptr) and not args:
            return repl
        if not args:
            return repl
        raise ValueError(f"cannot substitute applied symbol {e.fn} with {repl}")
    if isinstance(e, Lam):
        inner = {k: v for k, v in env.items() if k not in e.params}
        clash = [p for p in e.params if any(p in expr_free_vars(v) for v in inner.values())]
        params = list(e.params)
        if clash:
            ren = {p: Var(fresh_name(p)) for p in clash}
            params = [ren[p].name if p in ren else p for p in params]
            body = subst_expr(e.body, ren)
        else:
            body = e.body
        return Lam(tuple(params), subst_expr(body, inner))
    if isinstance(e, Ptr):
        idxs = tuple(subst_expr(a, env) for a in e.idxs)
        repl = env.get(e.base)
        if repl is None:
            return Ptr(e.base, idxs)
        if isinstance(repl, Var):
            return Ptr(repl.name, idxs)
        if isinstance(repl, Ptr):
            return Ptr(repl.base, repl.idxs + idxs)
        raise ValueError(f"cannot substitute pointer base {e.base} with {repl}")
    if isinstance(e, Access):
        idxs = tuple(subst_expr(a, env) for a in e.idxs)
        repl = env.get(e.base)
        if repl is None:
            return Access(e.base, idxs)
        if isinstance(repl, Var):
            return Access(repl.name, idxs)
        if isinstance(repl, Ptr):
            return Access(repl.base, repl.idxs + idxs)
        raise ValueError(f"cannot substitute access base {e.base} with {repl}")
    raise TypeError(e)


def apply_lam(f: Lam, args: tuple[Expr, ...]) -> Expr:
    if len(f.params) != len(args):
        raise ValueError("lambda arity mismatch")
    return subst_expr(f.body, dict(zip(f.params, args)))


def subst_loc(loc: Loc, env: dict[str, Expr]) -> Loc:
    idxs = tuple(subst_expr(i, env) for i in loc.idxs)
    repl = env.get(loc.base)
    if repl is None:
        return Loc(loc.base, idxs)
    if isinstance(repl, Var):
        return Loc(repl.name, idxs)
    if isinstance(repl, Ptr):
        return Loc(repl.base, repl.idxs + idxs)
    raise ValueError(f"cannot substitute location base {loc.base} with {repl}")


def subst_range(r: Range, env: dict[str, Expr]) -> Range:
    return Range(subst_expr(r.start, env), subst_expr(r.stop, env))


# ---------------------------------------------------------------------------
# Statements

SEQ_MODE = "seq"
PAR_MODE = "parallel"
THREAD_MODE = "thread"
MAGIC_MODE = "magic_thread"

_nid_counter = itertools.count(1)


def next_nid() -> int:
    return next(_nid_counter)


@dataclass
class Stmt:
    nid: int = field(default_factory=next_nid, init=False, compare=False)
    loc_info: tuple[int, int] | None = field(default=None, init=False, compare=False)


@dataclass
class Decl(Stmt):
    """Variable declaration.

    Scalars: dims == () and init is the initializer expression.
    Arrays: alloc names the allocator (MALLOC, gmem_malloc, __smem_malloc,
    __treg_malloc) and dims its dimension expressions.
    """

    name: str = ""
    ctype: str = FLOAT
    init: Expr | None = None
    alloc: str | None = None
    dims: tuple[Expr, ...] = ()


@dataclass
class Assign(Stmt):
    target: Loc = None
    op: str = "="  # "=" or "+="
    value: Expr = None


@dataclass
class CallStmt(Stmt):
    fn: str = ""
    args: tuple[Expr, ...] = ()
    ghost: bool = False
    ghost_args: tuple = ()  # parsed ghost argument items (see parser)


@dataclass
class Seq(Stmt):
    stmts: list[Stmt] = field(default_factory=list)
    scope: bool = False
    attrs: set[str] = field(default_factory=set)


@dataclass
class For(Stmt):
    index: str = "i"
    range: Range = None
    mode: str = SEQ_MODE
    contract: "LoopAnnots" = None
    body: Seq = None


@dataclass
class If(Stmt):
    cond: Expr = None
    then: Seq = None
    els: Seq | None = None


@dataclass
class Return(Stmt):
    value: Expr = None


@dataclass
class LoopAnnots:
    """Loop contract in annotation form; desugared by the typechecker.

    Each entry is (name, payload): payload is a ResExpr for linear clauses
    and a (name, pure-item) pair list for pure clauses (see resources.py).
    """

    spreserves: list = field(default_factory=list)
    sreads: list = field(default_factory=list)
    xconsumes: list = field(default_factory=list)
    xproduces: list = field(default_factory=list)
    xwrites: list = field(default_factory=list)
    xreads: list = field(default_factory=list)
    xrequires: list = field(default_factory=list)
    xensures: list = field(default_factory=list)

    CLAUSES = (
        "spreserves",
        "sreads",
        "xconsumes",
        "xproduces",
        "xwrites",
        "xreads",
        "xrequires",
        "xensures",
    )

    def is_empty(self) -> bool:
        return not any(getattr(self, c) for c in self.CLAUSES)

    def clone(self) -> "LoopAnnots":
        out = LoopAnnots()
        for c in self.CLAUSES:
            setattr(out, c, list(getattr(self, c)))
        return out


@dataclass
class FnAnnots:
    """Function contract in annotation form (Table-style clauses)."""

    requires: list = field(default_factory=list)
    ensures: list = field(default_factory=list)
    consumes: list = field(default_factory=list)
    produces: list = field(default_factory=list)
    preserves: list = field(default_factory=list)
    writes: list = field(default_factory=list)
    reads: list = field(default_factory=list)

    CLAUSES = ("requires", "ensures", "consumes", "produces", "preserves", "writes", "reads")

    def clone(self) -> "FnAnnots":
        out = FnAnnots()
        for c in self.CLAUSES:
            setattr(out, c, list(getattr(self, c)))
        return out


@dataclass
class FnDef:
    name: str
    params: list[tuple[str, str]]  # (name, ctype); ctype in {int, float, float*, int*}
    annots: FnAnnots
    body: Seq | None
    admitted: bool = False
    ghost: bool = False
    ret: str = "void"


@dataclass
class Axiom:
    """Named pure implication: typed params (prop-typed params are
    hypotheses) and an equation conclusion."""

    name: str
    params: list[tuple[str, object]]  # (name, PureType or Prop formula Expr)
    lhs: Expr = None
    rhs: Expr = None


@dataclass
class Program:
    pures: list[tuple[str, object]] = field(default_factory=list)  # uninterpreted symbols
    axioms: list[Axiom] = field(default_factory=list)
    fns: list[FnDef] = field(default_factory=list)
    source: str = "<mem>"

    def fn(self, name: str) -> FnDef:
        for f in self.fns:
            if f.name == name:
                return f
        raise KeyError(name)

    def entry(self) -> FnDef:
        for f in reversed(self.fns):
            if not f.admitted and not f.ghost and f.body is not None:
                return f
        raise ValueError("program has no entry function")


# ---------------------------------------------------------------------------
# Statement traversal / cloning


def iter_stmts(s: Stmt):
    """Pre-order traversal of a statement subtree."""
    yield s
    if isinstance(s, Seq):
        for c in s.stmts:
            yield from iter_stmts(c)
    elif isinstance(s, For):
        yield from iter_stmts(s.body)
    elif isinstance(s, If):
        yield from iter_stmts(s.then)
        if s.els is not None:
            yield from iter_stmts(s.els)


def clone_stmt(s: Stmt) -> Stmt:
    """Deep copy with fresh node ids. Expressions are shared (immutable)."""
    if isinstance(s, Decl):
        c = Decl(name=s.name, ctype=s.ctype, init=s.init, alloc=s.alloc, dims=s.dims)
    elif isinstance(s, Assign):
        c = Assign(target=s.target, op=s.op, value=s.value)
    elif isinstance(s, CallStmt):
        c = CallStmt(fn=s.fn, args=s.args, ghost=s.ghost, ghost_args=s.ghost_args)
    elif isinstance(s, Seq):
        c = Seq(stmts=[clone_stmt(x) for x in s.stmts], scope=s.scope, attrs=set(s.attrs))
    elif isinstance(s, For):
        c = For(index=s.index, range=s.range, mode=s.mode,
                contract=s.contract.clone() if s.contract else LoopAnnots(),
                body=clone_stmt(s.body))
    elif isinstance(s, If):
        c = If(cond=s.cond, then=clone_stmt(s.then),
               els=clone_stmt(s.els) if s.els is not None else None)
    elif isinstance(s, Return):
        c = Return(value=s.value)
    else:
        raise TypeError(s)
    c.loc_info = s.loc_info
    return c


def is_ghost_stmt(s: Stmt) -> bool:
    return isinstance(s, CallStmt) and s.ghost


def strip_ghosts(s: Stmt) -> Stmt:
    """Copy of the subtree with all ghost calls removed."""
    c = clone_stmt(s)

    def walk(t: Stmt):
        if isinstance(t, Seq):
            t.stmts = [x for x in t.stmts if not is_ghost_stmt(x)]
            for x in t.stmts:
                walk(x)
        elif isinstance(t, For):
            walk(t.body)
        elif isinstance(t, If):
            walk(t.then)
            if t.els is not None:
                walk(t.els)

    walk(c)
    return c
