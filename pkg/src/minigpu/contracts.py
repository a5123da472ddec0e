"""Contract desugaring: annotation clauses to pre/post resource sets.

Function clauses map exactly as:
    __requires  pure fact into the precondition
    __ensures   pure fact into the postcondition
    __consumes  linear into pre          __produces  linear into post
    __preserves linear into pre and post
    __writes    Uninit(H) into pre, H into post (uninit applied in depth)
    __reads     fresh fraction a: Frac, a*H into pre and post

Loop clauses reuse the same shapes per iteration; exclusive clauses wrap in
groups outside the loop, the sequential invariant threads through indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .ast import Expr, FnAnnots, IntLit, LoopAnnots, Range, UNINIT, Var, fresh_name
from .resources import (
    Frac,
    Group,
    PointsTo,
    PureItem,
    PureType,
    ResExpr,
    ResSet,
    T_FRAC,
    scale_res,
)


class ContractError(Exception):
    pass


def uninit_res(r: ResExpr) -> ResExpr:
    """Convert a permission to its uninitialized form, in depth."""
    if isinstance(r, PointsTo):
        if not r.frac.is_full():
            raise ContractError("__writes needs a full permission")
        return PointsTo(r.loc, r.mem, r.frac, UNINIT)
    if isinstance(r, Group):
        return Group(r.binder, r.range, uninit_res(r.body), r.desync, r.excluded)
    raise ContractError(f"cannot uninitialize {type(r).__name__}")


@dataclass
class Contract:
    pre: ResSet
    post: ResSet
    quantified: list[tuple[str, PureItem]] = field(default_factory=list)


def desugar_contract(annots: FnAnnots) -> Contract:
    pre, post = ResSet(), ResSet()
    quantified: list[tuple[str, PureItem]] = []
    seen: set[str] = set()

    def named(name, prefix):
        n = name or fresh_name(prefix)
        if n in seen:
            raise ContractError(f"duplicate resource name {n!r}")
        seen.add(n)
        return n

    for name, item in annots.requires:
        n = named(name, "#r")
        pre.add_pure(n, item)
        if item.typ is not None:
            quantified.append((n, item))
    for name, item in annots.ensures:
        post.add_pure(named(name, "#e"), item)
    for name, r in annots.consumes:
        pre.add_linear(named(name, "#c"), r)
    for name, r in annots.produces:
        post.add_linear(named(name, "#o"), r)
    for name, r in annots.preserves:
        n = named(name, "#p")
        pre.add_linear(n, r)
        post.add_linear(n, r)
    for name, r in annots.writes:
        n = named(name, "#w")
        pre.add_linear(n, uninit_res(r))
        post.add_linear(n, r)
    for name, r in annots.reads:
        n = named(name, "#rd")
        a = fresh_name("al")
        pre.add_pure(a, PureItem(typ=T_FRAC))
        quantified.append((a, PureItem(typ=T_FRAC)))
        fr = Frac(a, 0)
        pre.add_linear(n, scale_res(r, fr))
        post.add_linear(n, scale_res(r, fr))
    return Contract(pre, post, quantified)


@dataclass
class LoopContract:
    invariant: list[tuple[str, ResExpr]] = field(default_factory=list)
    shared: list[tuple[str, str, ResExpr]] = field(default_factory=list)  # (name, frac atom, H)
    xpre: list[tuple[str, ResExpr]] = field(default_factory=list)
    xpost: list[tuple[str, ResExpr]] = field(default_factory=list)
    xpure_pre: list[tuple[str, PureItem]] = field(default_factory=list)
    xpure_post: list[tuple[str, PureItem]] = field(default_factory=list)

    def parallelizable(self) -> bool:
        return not self.invariant


def desugar_loop_contract(annots: LoopAnnots) -> LoopContract:
    lc = LoopContract()
    seen: set[str] = set()

    def named(name, prefix):
        n = name or fresh_name(prefix)
        if n in seen:
            raise ContractError(f"duplicate loop resource name {n!r}")
        seen.add(n)
        return n

    for name, r in annots.spreserves:
        lc.invariant.append((named(name, "#inv"), r))
    for name, r in annots.sreads:
        lc.shared.append((named(name, "#sh"), fresh_name("al"), r))
    for name, r in annots.xconsumes:
        lc.xpre.append((named(name, "#xc"), r))
    for name, r in annots.xproduces:
        lc.xpost.append((named(name, "#xo"), r))
    for name, r in annots.xwrites:
        n = named(name, "#xw")
        lc.xpre.append((n, uninit_res(r)))
        lc.xpost.append((n, r))
    for name, r in annots.xreads:
        n = named(name, "#xr")
        fr = Frac(fresh_name("al"), 0)
        lc.xpre.append((n, scale_res(r, fr)))
        lc.xpost.append((n, scale_res(r, fr)))
    for name, it in annots.xrequires:
        lc.xpure_pre.append((named(name, "#xq"), it))
    for name, it in annots.xensures:
        lc.xpure_post.append((named(name, "#xe"), it))
    return lc


def group_outside(entries, index: str, rng: Range, desync: bool):
    """Wrap per-iteration resources in groups for the outer view."""
    return [(n, Group(index, rng, r, desync=desync)) for n, r in entries]
