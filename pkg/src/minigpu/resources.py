"""Resource formulas: points-to permissions, groups, execution contexts.

Linear resources follow separation-logic discipline: a ResSet's linear part
is a named multiset consumed exactly once. Fractions attach to leaf atoms
(a scaled group is stored with the fraction distributed onto its leaves).
Groups and desynchronized groups share one node with a `desync` flag.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import arith
from .ast import (
    UNINIT,
    BinOp,
    Call,
    Expr,
    IntLit,
    Lam,
    Loc,
    Range,
    Var,
    fresh_name,
    subst_expr,
    subst_loc,
    subst_range,
)

# ---------------------------------------------------------------------------
# Memory types and barrier predicates

ANY = "Any"
GMEM = "GMem"
SMEM = "SMem"
TREG = "TReg"
MEM_TYPES = (ANY, GMEM, SMEM, TREG)

# barrier predicate name -> set of memory types it can re-synchronize
MEM_PREDS: dict[str, frozenset[str]] = {
    "block_sync_mem": frozenset({GMEM, SMEM}),
    "magic_mem": frozenset(MEM_TYPES),
}


# ---------------------------------------------------------------------------
# Fractions


@dataclass(frozen=True)
class Frac:
    """1/2^k (atom None) or alpha/2^k for a symbolic atom alpha."""

    atom: str | None = None
    k: int = 0

    def is_full(self) -> bool:
        return self.atom is None and self.k == 0

    def half(self) -> "Frac":
        return Frac(self.atom, self.k + 1)


ONE = Frac()


def frac_merge(a: Frac, b: Frac) -> Frac | None:
    """alpha/2^k + alpha/2^k = alpha/2^(k-1); distinct atoms never merge."""
    if a == b and a.k >= 1:
        return Frac(a.atom, a.k - 1)
    return None


def frac_pieces(a: Frac, k: int) -> list[Frac]:
    """Split a = alpha/2^j into one piece of each exponent j+1..k plus one
    extra of exponent k; the first list entry is the piece to hand out."""
    assert k >= a.k
    if k == a.k:
        return [a]
    return [Frac(a.atom, k)] + [Frac(a.atom, m) for m in range(a.k + 1, k + 1)]


# ---------------------------------------------------------------------------
# Resource expressions


@dataclass(frozen=True)
class ResExpr:
    pass


@dataclass(frozen=True)
class PointsTo(ResExpr):
    loc: Loc
    mem: str = ANY
    frac: Frac = ONE
    val: Expr = UNINIT  # UNINIT marks an uninitialized cell


@dataclass(frozen=True)
class Group(ResExpr):
    binder: str
    range: Range
    body: ResExpr
    desync: bool = False
    excluded: tuple[Expr, ...] = ()  # focus remainders carve indices out


@dataclass(frozen=True)
class HostCtx(ResExpr):
    frac: Frac = ONE


@dataclass(frozen=True)
class KernelSetupCtx(ResExpr):
    frac: Frac = ONE


@dataclass(frozen=True)
class KernelTeardownCtx(ResExpr):
    frac: Frac = ONE


@dataclass(frozen=True)
class ThreadsCtx(ResExpr):
    range: Range
    frac: Frac = ONE


@dataclass(frozen=True)
class KernelParams(ResExpr):
    bpg: Expr
    tpb: Expr
    smem: Expr
    frac: Frac = ONE


@dataclass(frozen=True)
class SMemAllowance(ResExpr):
    bytes: Expr


@dataclass(frozen=True)
class FreeTok(ResExpr):
    base: str
    inner: ResExpr | None = None  # uninitialized footprint, None for smem


@dataclass(frozen=True)
class SyncRes(ResExpr):
    pred: str
    inner: ResExpr


CTX_ATOMS = (HostCtx, KernelSetupCtx, KernelTeardownCtx, ThreadsCtx, KernelParams,
             SMemAllowance)


# ---------------------------------------------------------------------------
# Pure items


@dataclass(frozen=True)
class PureType:
    """int | float | Frac | Prop | arrow types."""

    kind: str  # "int", "float", "Frac", "Prop", "fn"
    args: tuple = ()

    def __str__(self):
        if self.kind != "fn":
            return self.kind
        dom = [str(a) for a in self.args[:-1]]
        ret = str(self.args[-1])
        parts = [f"({d})" if "->" in d else d for d in dom]
        return " -> ".join(parts + [ret])


T_INT = PureType("int")
T_FLOAT = PureType("float")
T_FRAC = PureType("Frac")
T_PROP = PureType("Prop")


@dataclass(frozen=True)
class PureItem:
    """Either a typed declaration (typ set) or a proposition (prop set)."""

    typ: PureType | None = None
    prop: Expr | None = None


# ---------------------------------------------------------------------------
# Resource sets


class ResSet:
    """Named pure facts plus a named multiset of linear resources."""

    def __init__(self, pure=None, linear=None):
        self.pure: list[tuple[str, PureItem]] = list(pure or [])
        self.linear: list[tuple[str, ResExpr]] = list(linear or [])

    def clone(self) -> "ResSet":
        return ResSet(self.pure, self.linear)

    def add_pure(self, name: str | None, item: PureItem) -> str:
        name = name or fresh_name("#p")
        self.pure.append((name, item))
        return name

    def add_linear(self, name: str | None, r: ResExpr) -> str:
        name = name or fresh_name("#l")
        self.linear.append((name, r))
        return name

    def extend(self, other: "ResSet"):
        self.pure.extend(other.pure)
        self.linear.extend(other.linear)

    def linear_res(self) -> list[ResExpr]:
        return [r for _, r in self.linear]

    def is_linear_empty(self) -> bool:
        return not self.linear

    def __repr__(self):
        from .printer import format_resset  # local import to avoid a cycle
        return f"ResSet({format_resset(self)})"


# ---------------------------------------------------------------------------
# Structural helpers


def subst_res(r: ResExpr, env: dict[str, Expr]) -> ResExpr:
    """Capture-avoiding substitution through a resource expression."""
    if not env:
        return r
    if isinstance(r, PointsTo):
        val = r.val if r.val is UNINIT else subst_expr(r.val, env)
        return PointsTo(subst_loc(r.loc, env), r.mem, r.frac, val)
    if isinstance(r, Group):
        inner_env = {k: v for k, v in env.items() if k != r.binder}
        binder = r.binder
        body = r.body
        from .ast import expr_free_vars
        if any(binder in expr_free_vars(v) for v in inner_env.values()):
            nb = fresh_name(binder)
            body = subst_res(body, {binder: Var(nb)})
            binder = nb
        return Group(binder, subst_range(r.range, env), subst_res(body, inner_env),
                     r.desync, tuple(subst_expr(e, env) for e in r.excluded))
    if isinstance(r, ThreadsCtx):
        return ThreadsCtx(subst_range(r.range, env), r.frac)
    if isinstance(r, KernelParams):
        return KernelParams(subst_expr(r.bpg, env), subst_expr(r.tpb, env),
                            subst_expr(r.smem, env), r.frac)
    if isinstance(r, SMemAllowance):
        return SMemAllowance(subst_expr(r.bytes, env))
    if isinstance(r, FreeTok):
        base = r.base
        repl = env.get(base)
        if isinstance(repl, Var):
            base = repl.name
        return FreeTok(base, subst_res(r.inner, env) if r.inner else None)
    if isinstance(r, SyncRes):
        return SyncRes(r.pred, subst_res(r.inner, env))
    return r


def res_free_vars(r: ResExpr) -> set[str]:
    from .ast import expr_free_vars
    if isinstance(r, PointsTo):
        out = {r.loc.base}
        for i in r.loc.idxs:
            out |= expr_free_vars(i)
        if r.val is not UNINIT:
            out |= expr_free_vars(r.val)
        if r.frac.atom:
            out.add(r.frac.atom)
        return out
    if isinstance(r, Group):
        out = res_free_vars(r.body) - {r.binder}
        out |= expr_free_vars(r.range.start) | expr_free_vars(r.range.stop)
        for e in r.excluded:
            out |= expr_free_vars(e)
        return out
    if isinstance(r, ThreadsCtx):
        return expr_free_vars(r.range.start) | expr_free_vars(r.range.stop)
    if isinstance(r, KernelParams):
        return expr_free_vars(r.bpg) | expr_free_vars(r.tpb) | expr_free_vars(r.smem)
    if isinstance(r, SMemAllowance):
        return expr_free_vars(r.bytes)
    if isinstance(r, FreeTok):
        return {r.base} | (res_free_vars(r.inner) if r.inner else set())
    if isinstance(r, SyncRes):
        return res_free_vars(r.inner)
    return set()


def scale_res(r: ResExpr, f: Frac) -> ResExpr:
    """Distribute a fraction onto every leaf of a resource."""
    if f.is_full():
        return r
    if isinstance(r, PointsTo):
        assert r.frac.is_full(), "cannot scale an already-fractional permission"
        return replace(r, frac=f)
    if isinstance(r, Group):
        return replace(r, body=scale_res(r.body, f))
    if isinstance(r, (HostCtx, KernelSetupCtx, KernelTeardownCtx, ThreadsCtx, KernelParams)):
        assert r.frac.is_full()
        return replace(r, frac=f)
    raise ValueError(f"cannot scale {type(r).__name__}")


def halve_res(r: ResExpr) -> tuple[ResExpr, ResExpr]:
    """Split every leaf fraction in half; returns the two halves."""
    if isinstance(r, PointsTo):
        h = r.frac.half()
        return replace(r, frac=h), replace(r, frac=h)
    if isinstance(r, Group):
        a, b = halve_res(r.body)
        return replace(r, body=a), replace(r, body=b)
    if isinstance(r, (HostCtx, KernelSetupCtx, KernelTeardownCtx, ThreadsCtx, KernelParams)):
        h = r.frac.half()
        return replace(r, frac=h), replace(r, frac=h)
    raise ValueError(f"cannot halve {type(r).__name__}")


def leaf_mems(r: ResExpr) -> set[str]:
    """Memory types of all points-to leaves under r."""
    if isinstance(r, PointsTo):
        return {r.mem}
    if isinstance(r, (Group, SyncRes)):
        return leaf_mems(r.body if isinstance(r, Group) else r.inner)
    return set()


def contains_desync(r: ResExpr) -> bool:
    if isinstance(r, Group):
        return r.desync or contains_desync(r.body)
    if isinstance(r, SyncRes):
        return contains_desync(r.inner)
    return False


def desync_leaf_mems(r: ResExpr, under_desync: bool = False) -> set[str]:
    """Memory types of leaves that sit under at least one DesyncGroup."""
    if isinstance(r, PointsTo):
        return {r.mem} if under_desync else set()
    if isinstance(r, Group):
        return desync_leaf_mems(r.body, under_desync or r.desync)
    if isinstance(r, SyncRes):
        return desync_leaf_mems(r.inner, under_desync)
    return set()


# ---------------------------------------------------------------------------
# Sync normalization (in-depth conversion of DesyncGroup to Group)


def sync_normalize(r: ResExpr) -> ResExpr:
    """Push a Sync permission through groups, converting desync groups to
    plain groups; stuck on leaves whose memory type the predicate rejects."""
    if not isinstance(r, SyncRes):
        return r
    pred = MEM_PREDS[r.pred]
    inner = r.inner
    if isinstance(inner, SyncRes):
        inner = sync_normalize(inner)
        if isinstance(inner, SyncRes):
            return SyncRes(r.pred, inner)  # stuck below; stay stuck
        return sync_normalize(SyncRes(r.pred, inner))
    if isinstance(inner, PointsTo):
        if inner.mem in pred:
            return inner
        return r  # stuck
    if isinstance(inner, Group):
        body = sync_normalize(SyncRes(r.pred, inner.body))
        return Group(inner.binder, inner.range, body, desync=False,
                     excluded=inner.excluded)
    return r  # stuck on anything else


def is_stuck_sync(r: ResExpr) -> bool:
    if isinstance(r, SyncRes):
        return True
    if isinstance(r, Group):
        return is_stuck_sync(r.body)
    return False


# ---------------------------------------------------------------------------
# Thread-interval chunking


class ChunkError(Exception):
    pass


def chunk(i: Expr, n: Expr, r: Range, facts: arith.Facts) -> Range:
    """Evenly split r into n chunks and return the i-th:
    chunk(i, n, t0..+M) = t0 + i*(M/n) ..+ (M/n). Requires n | M."""
    extent = BinOp("-", r.stop, r.start)
    if not arith.prove_divides(n, extent, facts):
        raise ChunkError("cannot prove chunk divisibility")
    size = Call("exact_div", (extent, n))
    start = BinOp("+", r.start, BinOp("*", i, size))
    return Range(start, BinOp("+", start, size))


def range_extent_poly(r: Range, facts: arith.Facts) -> arith.Poly:
    return arith.norm(r.stop, facts) - arith.norm(r.start, facts)


def range_empty(r: Range, facts: arith.Facts) -> bool:
    p = range_extent_poly(r, facts)
    return p.is_const() and p.const_value() <= 0


def ranges_equal(a: Range, b: Range, facts: arith.Facts) -> bool:
    return (arith.prove_eq(a.start, b.start, facts)
            and arith.prove_eq(a.stop, b.stop, facts))
