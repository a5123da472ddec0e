"""Target resolution: match selector chains against the AST.

A resolved hit names a statement plus its position in the enclosing
sequence, so transformations can splice neighbours. Targets resolve to
exactly one node unless nth=<k> disambiguates.
"""

from __future__ import annotations

from dataclasses import dataclass

from .ast import Assign, CallStmt, Decl, FnDef, For, If, Program, Seq, Stmt
from .errors import CheckError
from .parser import TargetSpec


@dataclass
class Hit:
    parent: Seq
    index: int
    stmt: Stmt
    position: str | None = None  # before | after | body-of


def _scope_fn(program: Program, spec: TargetSpec) -> tuple[FnDef, TargetSpec | None]:
    """Peel a trailing fn:<name> constraint; default scope is the entry."""
    chain = []
    cur = spec
    while cur is not None:
        chain.append(cur)
        cur = cur.within
    if chain and chain[-1].kind == "fn":
        fn = program.fn(chain[-1].name)
        if len(chain) >= 2:
            chain[-2].within = None
            return fn, spec
        return fn, None
    return program.entry(), spec


def _matches(spec: TargetSpec, s: Stmt) -> bool:
    if spec.kind == "for":
        return isinstance(s, For) and s.index == spec.name
    if spec.kind == "vardef":
        return isinstance(s, Decl) and s.name == spec.name
    if spec.kind == "call":
        return isinstance(s, CallStmt) and s.fn == spec.name
    if spec.kind == "write":
        return isinstance(s, Assign) and s.target.base == spec.name
    return False


def _search(seq: Seq, spec: TargetSpec, out: list[Hit]):
    for i, s in enumerate(seq.stmts):
        if _matches(spec, s):
            out.append(Hit(seq, i, s, spec.position))
        if isinstance(s, Seq):
            _search(s, spec, out)
        elif isinstance(s, For):
            _search(s.body, spec, out)
        elif isinstance(s, If):
            _search(s.then, spec, out)
            if s.els is not None:
                _search(s.els, spec, out)


def resolve(program: Program, spec: TargetSpec, multiple: bool = False):
    fn, spec = _scope_fn(program, spec)
    if spec is None:
        raise CheckError("E-TARGET", "a bare fn: target is not a statement")
    # resolve the innermost `in` scope first
    scopes: list[Seq] = [fn.body]
    chain: list[TargetSpec] = []
    cur = spec
    while cur is not None:
        chain.append(cur)
        cur = cur.within
    for outer in reversed(chain[1:]):
        hits: list[Hit] = []
        for sc in scopes:
            _search(sc, outer, hits)
        hits = _pick(hits, outer, multiple=False)
        node = hits[0].stmt
        if isinstance(node, For):
            scopes = [node.body]
        elif isinstance(node, Seq):
            scopes = [node]
        else:
            raise CheckError("E-TARGET",
                             f"target scope {outer} is not a container")
    head = chain[0]
    hits = []
    for sc in scopes:
        _search(sc, head, hits)
    return _pick(hits, head, multiple)


def _pick(hits: list[Hit], spec: TargetSpec, multiple: bool):
    if spec.nth is not None:
        if not (1 <= spec.nth <= len(hits)):
            raise CheckError("E-TARGET",
                             f"target {spec} has {len(hits)} matches, "
                             f"nth={spec.nth} is out of range")
        return [hits[spec.nth - 1]]
    if multiple:
        if not hits:
            raise CheckError("E-TARGET", f"target {spec} matches nothing")
        return hits
    if len(hits) != 1:
        raise CheckError("E-TARGET",
                         f"target {spec} must match exactly one node, "
                         f"found {len(hits)}")
    return hits


def resolve_one(program: Program, spec: TargetSpec) -> Hit:
    return resolve(program, spec, multiple=False)[0]


def enclosing_loop(program: Program, node: Stmt) -> For | None:
    """The innermost For whose body (transitively, through plain nesting)
    contains `node` as a direct child statement."""
    fn = _owning_fn(program, node)
    result: list[For | None] = [None]

    def walk(seq: Seq, loop: For | None) -> bool:
        for s in seq.stmts:
            if s is node:
                result[0] = loop
                return True
            if isinstance(s, Seq):
                if walk(s, loop):
                    return True
            elif isinstance(s, For):
                if s is node:
                    result[0] = loop
                    return True
                if walk(s.body, s):
                    return True
            elif isinstance(s, If):
                if walk(s.then, loop) or (s.els and walk(s.els, loop)):
                    return True
        return False

    walk(fn.body, None)
    return result[0]


def _owning_fn(program: Program, node: Stmt) -> FnDef:
    from .ast import iter_stmts
    for fn in program.fns:
        if fn.body is None:
            continue
        for s in iter_stmts(fn.body):
            if s is node:
                return fn
    raise CheckError("E-TARGET", "node is not part of the program")


def find_parent(program: Program, node: Stmt) -> tuple[Seq, int]:
    fn = _owning_fn(program, node)

    def walk(seq: Seq):
        for i, s in enumerate(seq.stmts):
            if s is node:
                return seq, i
            sub = None
            if isinstance(s, Seq):
                sub = walk(s)
            elif isinstance(s, For):
                sub = walk(s.body)
            elif isinstance(s, If):
                sub = walk(s.then) or (walk(s.els) if s.els else None)
            if sub:
                return sub
        return None

    hit = walk(fn.body)
    if hit is None:
        raise CheckError("E-TARGET", "node is not part of the program")
    return hit
