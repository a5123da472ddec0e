"""Parsers: the C-like surface grammar (.optc), the resource sub-grammar
embedded in annotation strings, ghost argument lists, and the script DSL
(.xfm). See docs/grammar.md for the published grammar.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .ast import (
    UNINIT,
    Access,
    Assign,
    Axiom,
    BinOp,
    Call,
    CallStmt,
    Decl,
    Expr,
    FloatLit,
    FnAnnots,
    FnDef,
    For,
    If,
    IntLit,
    Lam,
    Loc,
    LoopAnnots,
    MAGIC_MODE,
    PAR_MODE,
    Program,
    Ptr,
    Range,
    Return,
    SEQ_MODE,
    Seq,
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
    ONE,
    PointsTo,
    PureItem,
    PureType,
    ResExpr,
    SMemAllowance,
    SyncRes,
    T_FLOAT,
    T_FRAC,
    T_INT,
    T_PROP,
    ThreadsCtx,
)


class ParseError(Exception):
    def __init__(self, msg: str, line: int = 0, col: int = 0, filename: str = "<mem>"):
        super().__init__(f"{filename}:{line}:{col}: {msg}")
        self.line, self.col, self.filename, self.msg = line, col, filename, msg


_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>//[^\n]*)
  | (?P<string>"(?:[^"\\]|\\.)*")
  | (?P<float>\d+\.\d+f?|\d+\.(?!\.)f?)
  | (?P<int>\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>\.\.\+|\.\.|\+\+|\+=|->|~>|:=|==|!=|<=|>=|[-+*/%<>=(){}\[\],;:.&|\\])
""", re.VERBOSE)


@dataclass
class Tok:
    kind: str
    val: str
    line: int
    col: int


def tokenize(text: str, filename: str = "<mem>", line0: int = 1, col0: int = 1):
    toks: list[Tok] = []
    line, col = line0, col0
    i = 0
    while i < len(text):
        m = _TOKEN_RE.match(text, i)
        if not m:
            raise ParseError(f"unexpected character {text[i]!r}", line, col, filename)
        kind = m.lastgroup
        val = m.group()
        if kind not in ("ws", "comment"):
            toks.append(Tok(kind, val, line, col))
        nl = val.count("\n")
        if nl:
            line += nl
            col = len(val) - val.rfind("\n")
        else:
            col += len(val)
        i = m.end()
    toks.append(Tok("eof", "", line, col))
    return toks


class TokStream:
    def __init__(self, toks: list[Tok], filename: str = "<mem>"):
        self.toks = toks
        self.pos = 0
        self.filename = filename

    def peek(self, k: int = 0) -> Tok:
        return self.toks[min(self.pos + k, len(self.toks) - 1)]

    def next(self) -> Tok:
        t = self.peek()
        self.pos += 1
        return t

    def at(self, val: str) -> bool:
        return self.peek().val == val and self.peek().kind != "string"

    def accept(self, val: str) -> bool:
        if self.at(val):
            self.pos += 1
            return True
        return False

    def expect(self, val: str) -> Tok:
        t = self.peek()
        if t.val != val or t.kind == "string":
            raise ParseError(f"expected {val!r}, found {t.val!r}", t.line, t.col,
                             self.filename)
        return self.next()

    def expect_kind(self, kind: str) -> Tok:
        t = self.peek()
        if t.kind != kind:
            raise ParseError(f"expected {kind}, found {t.val!r}", t.line, t.col,
                             self.filename)
        return self.next()

    def error(self, msg: str):
        t = self.peek()
        raise ParseError(msg, t.line, t.col, self.filename)


# ---------------------------------------------------------------------------
# Expressions (pure / executable)

_CMP_OPS = ("==", "!=", "<=", ">=", "<", ">")


def _parse_expr(ts: TokStream, allow_access: bool) -> Expr:
    return _parse_cmp(ts, allow_access)


def _parse_cmp(ts: TokStream, acc: bool) -> Expr:
    lhs = _parse_add(ts, acc)
    if ts.peek().val in _CMP_OPS and ts.peek().kind == "op":
        op = ts.next().val
        rhs = _parse_add(ts, acc)
        return BinOp(op, lhs, rhs)
    if ts.at("|"):  # d | e  divisibility sugar
        ts.next()
        rhs = _parse_add(ts, acc)
        return Call("divides", (lhs, rhs))
    return lhs


def _parse_add(ts: TokStream, acc: bool) -> Expr:
    e = _parse_mul(ts, acc)
    while ts.peek().kind == "op" and ts.peek().val in ("+", "-"):
        op = ts.next().val
        e = BinOp(op, e, _parse_mul(ts, acc))
    return e


def _parse_mul(ts: TokStream, acc: bool) -> Expr:
    e = _parse_unary(ts, acc)
    while ts.peek().kind == "op" and ts.peek().val in ("*", "/", "%"):
        op = ts.next().val
        rhs = _parse_unary(ts, acc)
        if op == "/":
            e = Call("exact_div", (e, rhs))
        else:
            e = BinOp(op, e, rhs)
    return e


def _parse_unary(ts: TokStream, acc: bool) -> Expr:
    if ts.accept("-"):
        return BinOp("-", IntLit(0), _parse_unary(ts, acc))
    return _parse_atom(ts, acc)


def _parse_atom(ts: TokStream, acc: bool) -> Expr:
    t = ts.peek()
    if t.kind == "int":
        ts.next()
        return IntLit(int(t.val))
    if t.kind == "float":
        ts.next()
        return FloatLit(float(t.val.rstrip("f")))
    if t.val == "(":
        ts.next()
        e = _parse_expr(ts, acc)
        ts.expect(")")
        return e
    if t.val == "&":
        ts.next()
        base = ts.expect_kind("ident").val
        idxs = []
        while ts.at("["):
            ts.next()
            idxs.append(_parse_expr(ts, acc))
            ts.expect("]")
        return Ptr(base, tuple(idxs))
    if t.val == "fun":
        ts.next()
        params = [ts.expect_kind("ident").val]
        while ts.peek().kind == "ident" and not ts.at("->"):
            params.append(ts.next().val)
        ts.expect("->")
        body = _parse_expr(ts, acc)
        return Lam(tuple(params), body)
    if t.kind == "ident":
        ts.next()
        name = t.val
        if name == "UninitCell":
            return UNINIT
        if ts.at("("):
            ts.next()
            args = []
            if not ts.at(")"):
                args.append(_parse_expr(ts, acc))
                while ts.accept(","):
                    args.append(_parse_expr(ts, acc))
            ts.expect(")")
            return Call(name, tuple(args))
        if ts.at("[") and acc:
            idxs = []
            while ts.at("["):
                ts.next()
                idxs.append(_parse_expr(ts, acc))
                ts.expect("]")
            return Access(name, tuple(idxs))
        return Var(name)
    ts.error(f"unexpected token {t.val!r} in expression")


def parse_expr_str(s: str, allow_access: bool = False, filename: str = "<arg>") -> Expr:
    ts = TokStream(tokenize(s, filename), filename)
    e = _parse_expr(ts, allow_access)
    if ts.peek().kind != "eof":
        ts.error("trailing input after expression")
    return e


# ---------------------------------------------------------------------------
# Resource sub-grammar

_CTX_NAMES = {"HostCtx", "KernelSetupCtx", "KernelTeardownCtx", "ThreadsCtx",
              "KernelParams", "SMemAllowance", "FreeTok", "Sync"}
_PURE_BASE = {"int": T_INT, "float": T_FLOAT, "Frac": T_FRAC, "Prop": T_PROP,
              "HProp": PureType("HProp")}


def _parse_range(ts: TokStream) -> Range:
    a = _parse_expr(ts, False)
    if ts.accept("..+"):
        b = _parse_expr(ts, False)
        return Range(a, BinOp("+", a, b))
    ts.expect("..")
    b = _parse_expr(ts, False)
    return Range(a, b)


def _parse_linear(ts: TokStream) -> ResExpr:
    t = ts.peek()
    if t.val in ("for", "desync_for"):
        ts.next()
        binder = ts.expect_kind("ident").val
        ts.expect("in")
        rng = _parse_range(ts)
        excluded = []
        if ts.accept("\\"):
            ts.expect("{")
            excluded.append(_parse_expr(ts, False))
            while ts.accept(";"):
                excluded.append(_parse_expr(ts, False))
            ts.expect("}")
        ts.expect("->")
        body = _parse_linear(ts)
        return Group(binder, rng, body, desync=(t.val == "desync_for"),
                     excluded=tuple(excluded))
    if t.val == "Sync":
        ts.next()
        ts.expect("(")
        pred = ts.expect_kind("ident").val
        ts.expect(",")
        inner = _parse_linear(ts)
        ts.expect(")")
        return SyncRes(pred, inner)
    if t.val == "FreeTok":
        ts.next()
        ts.expect("(")
        base = ts.expect_kind("ident").val
        inner = None
        if ts.accept(","):
            inner = _parse_linear(ts)
        ts.expect(")")
        return FreeTok(base, inner)
    if t.val in ("HostCtx", "KernelSetupCtx", "KernelTeardownCtx"):
        ts.next()
        cls = {"HostCtx": HostCtx, "KernelSetupCtx": KernelSetupCtx,
               "KernelTeardownCtx": KernelTeardownCtx}[t.val]
        return cls()
    if t.val == "ThreadsCtx":
        ts.next()
        ts.expect("(")
        rng = _parse_range(ts)
        ts.expect(")")
        return ThreadsCtx(rng)
    if t.val == "KernelParams":
        ts.next()
        ts.expect("(")
        args = [_parse_kp_arg(ts)]
        while ts.accept(","):
            args.append(_parse_kp_arg(ts))
        ts.expect(")")
        if len(args) != 3:
            ts.error("KernelParams takes 3 arguments")
        return KernelParams(*args)
    if t.val == "SMemAllowance":
        ts.next()
        ts.expect("(")
        e = _parse_expr(ts, False)
        ts.expect(")")
        return SMemAllowance(e)
    # fraction prefix: IDENT[/INT] * ( ... )  or  1/INT * ( ... )
    frac = _try_parse_frac_prefix(ts)
    if frac is not None:
        ts.expect("(")
        inner = _parse_linear(ts)
        ts.expect(")")
        from .resources import scale_res
        return scale_res(inner, frac)
    # points-to: [&]base[idx]* ~> [mem] value | Matrix sugar
    return _parse_points_to(ts)


def _parse_kp_arg(ts: TokStream) -> Expr:
    if ts.at("_"):
        # wildcard: fresh quantified-looking name; the checker treats names
        # starting with "_w" as dont-care reads
        from .ast import fresh_name
        ts.next()
        return Var(fresh_name("_w"))
    return _parse_expr(ts, False)


def _try_parse_frac_prefix(ts: TokStream) -> Frac | None:
    p = ts.pos
    t = ts.peek()
    atom = None
    k = 0
    if t.kind == "int" and t.val == "1":
        ts.next()
    elif t.kind == "ident":
        atom = ts.next().val
    else:
        return None
    if ts.accept("/"):
        d = ts.peek()
        if d.kind != "int" or int(d.val) < 1 or (int(d.val) & (int(d.val) - 1)):
            ts.pos = p
            return None
        ts.next()
        k = int(d.val).bit_length() - 1
    if ts.at("*") and ts.peek(1).val == "(":
        ts.next()
        return Frac(atom, k)
    ts.pos = p
    return None


def _parse_points_to(ts: TokStream) -> ResExpr:
    ts.accept("&")
    base = ts.expect_kind("ident").val
    idxs = []
    while ts.at("["):
        ts.next()
        idxs.append(_parse_expr(ts, False))
        ts.expect("]")
    ts.expect("~>")
    mem = "Any"
    if ts.accept("["):
        mem = ts.expect_kind("ident").val
        ts.expect("]")
    # Matrix sugar
    t = ts.peek()
    if t.kind == "ident" and re.fullmatch(r"Matrix[123]", t.val):
        ts.next()
        k = int(t.val[-1])
        ts.expect("(")
        dims = []
        for i in range(k):
            dims.append(_parse_expr(ts, False))
            ts.expect(",")
        fn = _parse_expr(ts, False)
        ts.expect(")")
        from .ast import fresh_name
        binders = [Var(fresh_name("i")) for _ in range(k)]
        if isinstance(fn, Var):
            val: Expr = Call(fn.name, tuple(binders))
        elif isinstance(fn, Lam):
            from .ast import apply_lam
            val = apply_lam(fn, tuple(binders))
        else:
            ts.error("Matrix sugar needs a model function")
        body: ResExpr = PointsTo(Loc(base, tuple(idxs) + tuple(binders)), mem, ONE, val)
        for b, d in zip(reversed(binders), reversed(dims)):
            body = Group(b.name, Range(IntLit(0), d), body)
        return body
    if ts.at("UninitCell"):
        ts.next()
        val = UNINIT
    else:
        val = _parse_expr(ts, False)
    return PointsTo(Loc(base, tuple(idxs)), mem, ONE, val)


def _parse_pure_type(ts: TokStream) -> PureType | None:
    p = ts.pos

    def base() -> PureType | None:
        if ts.at("("):
            ts.next()
            t = _parse_pure_type(ts)
            if t is None or not ts.accept(")"):
                return None
            return t
        tk = ts.peek()
        if tk.kind == "ident" and tk.val in _PURE_BASE:
            ts.next()
            return _PURE_BASE[tk.val]
        return None

    parts = []
    t = base()
    if t is None:
        ts.pos = p
        return None
    parts.append(t)
    while ts.accept("->"):
        t = base()
        if t is None:
            ts.pos = p
            return None
        parts.append(t)
    if len(parts) == 1:
        return parts[0]
    return PureType("fn", tuple(parts))


def _parse_pure_item(ts: TokStream) -> PureItem:
    p = ts.pos
    t = _parse_pure_type(ts)
    if t is not None and ts.peek().val in (",", "") and ts.peek().kind in ("op", "eof"):
        return PureItem(typ=t)
    ts.pos = p
    return PureItem(prop=_parse_expr(ts, False))


_LINEAR_CLAUSES = {"consumes", "produces", "preserves", "writes", "reads",
                   "spreserves", "sreads", "xconsumes", "xproduces",
                   "xwrites", "xreads"}
_PURE_CLAUSES = {"requires", "ensures", "xrequires", "xensures"}


def parse_annot_items(s: str, pure: bool, filename: str = "<annot>",
                      line: int = 1) -> list:
    """Parse a comma-separated, optionally named annotation payload."""
    ts = TokStream(tokenize(s, filename, line0=line), filename)
    items = []
    if ts.peek().kind == "eof":
        return items
    while True:
        name = None
        if (ts.peek().kind == "ident" and ts.peek(1).val == ":"
                and ts.peek(2).val != "="):
            # a name requires something parseable after the colon
            name = ts.next().val
            ts.next()
        if pure:
            items.append((name, _parse_pure_item(ts)))
        else:
            items.append((name, _parse_linear(ts)))
        if not ts.accept(","):
            break
    if ts.peek().kind != "eof":
        ts.error("trailing input in annotation")
    return items


def parse_linear_str(s: str, filename: str = "<res>") -> ResExpr:
    ts = TokStream(tokenize(s, filename), filename)
    r = _parse_linear(ts)
    if ts.peek().kind != "eof":
        ts.error("trailing input after resource")
    return r


# ---------------------------------------------------------------------------
# Ghost arguments

# item := key ':=' value | expr
# value := 'fun' IDENT '->' <linear formula with the hole variable>
#        | <linear formula> | expr


def parse_ghost_args(s: str, filename: str = "<ghost>", line: int = 1) -> tuple:
    ts = TokStream(tokenize(s, filename, line0=line), filename)
    items = []
    if ts.peek().kind == "eof":
        return tuple(items)
    while True:
        if ts.peek().kind == "ident" and ts.peek(1).val == ":=":
            key = ts.next().val
            ts.next()
            if ts.at("fun") or (ts.at("(") and ts.peek(1).val == "fun"):
                paren = ts.accept("(")
                ts.expect("fun")
                hole = ts.expect_kind("ident").val
                ts.expect("->")
                body = _parse_linear(ts)
                if paren:
                    ts.expect(")")
                items.append(("hole", key, hole, body))
            elif ts.peek().val in ("for", "desync_for", "&", "Sync", "FreeTok") \
                    or ts.peek().val in _CTX_NAMES:
                items.append(("res", key, _parse_linear(ts)))
            else:
                items.append(("kw", key, _parse_expr(ts, False)))
        else:
            items.append(("pos", _parse_expr(ts, False)))
        if not ts.accept(","):
            break
    if ts.peek().kind != "eof":
        ts.error("trailing input in ghost arguments")
    return tuple(items)


def format_ghost_args(items) -> str:
    from .printer import format_expr, format_res
    out = []
    for it in items:
        if it[0] == "pos":
            out.append(format_expr(it[1]))
        elif it[0] == "kw":
            out.append(f"{it[1]} := {format_expr(it[2])}")
        elif it[0] == "res":
            out.append(f"{it[1]} := {format_res(it[2])}")
        elif it[0] == "hole":
            out.append(f"{it[1]} := (fun {it[2]} -> {format_res(it[3])})")
    return ", ".join(out)


# ---------------------------------------------------------------------------
# Program parser

_ALLOC_RE = re.compile(r"(MALLOC|gmem_malloc|__smem_malloc|__treg_malloc)(\d)")
_MODE_START = {"for", "parallel", "thread", "magic"}


class _ProgParser:
    def __init__(self, text: str, filename: str):
        self.ts = TokStream(tokenize(text, filename), filename)
        self.filename = filename

    def parse(self) -> Program:
        p = Program(source=self.filename)
        while self.ts.peek().kind != "eof":
            t = self.ts.peek()
            if t.val == "__pure":
                self.ts.next()
                self.ts.expect("(")
                s = self._string()
                self.ts.expect(")")
                self.ts.expect(";")
                name, _, typ = s.partition(":")
                sub = TokStream(tokenize(typ.strip(), self.filename), self.filename)
                pt = _parse_pure_type(sub)
                if pt is None:
                    raise ParseError(f"bad pure declaration {s!r}", t.line, t.col,
                                     self.filename)
                p.pures.append((name.strip(), pt))
            elif t.val == "__axiom":
                p.axioms.append(self._axiom())
            else:
                p.fns.append(self._fn())
        names = [f.name for f in p.fns] + [n for n, _ in p.pures] + \
                [a.name for a in p.axioms]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise ParseError(f"duplicate top-level names: {sorted(dup)}", 1, 1,
                             self.filename)
        return p

    def _string(self) -> str:
        t = self.ts.expect_kind("string")
        return t.val[1:-1].replace('\\"', '"')

    def _string_tok(self) -> tuple[str, int]:
        t = self.ts.expect_kind("string")
        return t.val[1:-1].replace('\\"', '"'), t.line

    def _axiom(self) -> Axiom:
        self.ts.expect("__axiom")
        self.ts.expect("(")
        name = self.ts.expect_kind("ident").val
        self.ts.expect(",")
        s, line = self._string_tok()
        self.ts.expect(")")
        self.ts.expect(";")
        sub = TokStream(tokenize(s, self.filename, line0=line), self.filename)
        params: list = []
        while not sub.at("."):
            pname = sub.expect_kind("ident").val
            sub.expect(":")
            pt = _parse_pure_type(sub)
            if pt is not None:
                params.append((pname, pt))
            else:
                params.append((pname, _parse_expr(sub, False)))
            if not sub.accept(","):
                break
        sub.expect(".")
        concl = _parse_expr(sub, False)
        if sub.peek().kind != "eof":
            sub.error("trailing input in axiom")
        if not (isinstance(concl, BinOp) and concl.op == "=="):
            sub.error("axiom conclusion must be an equation")
        return Axiom(name, params, concl.lhs, concl.rhs)

    def _type(self) -> str:
        t = self.ts.next()
        if t.val not in ("float", "int", "void"):
            raise ParseError(f"expected a type, found {t.val!r}", t.line, t.col,
                             self.filename)
        typ = t.val
        if self.ts.accept("*"):
            typ += "*"
        return typ

    def _fn(self) -> FnDef:
        ret = self._type()
        name = self.ts.expect_kind("ident").val
        self.ts.expect("(")
        params = []
        if not self.ts.at(")"):
            while True:
                pt = self._type()
                pn = self.ts.expect_kind("ident").val
                params.append((pn, pt))
                if not self.ts.accept(","):
                    break
        self.ts.expect(")")
        self.ts.expect("{")
        annots = FnAnnots()
        admitted = ghost = False
        while True:
            t = self.ts.peek()
            if t.val == "__admitted":
                self.ts.next(); self.ts.expect("("); self.ts.expect(")")
                self.ts.expect(";")
                admitted = True
            elif t.val == "__ghost_fn":
                self.ts.next(); self.ts.expect("("); self.ts.expect(")")
                self.ts.expect(";")
                ghost = True
            elif t.val.startswith("__") and t.val[2:] in (set(FnAnnots.CLAUSES)):
                clause = t.val[2:]
                self.ts.next()
                self.ts.expect("(")
                s, line = self._string_tok()
                self.ts.expect(")")
                self.ts.expect(";")
                items = parse_annot_items(s, pure=clause in _PURE_CLAUSES,
                                          filename=self.filename, line=line)
                getattr(annots, clause).extend(items)
            else:
                break
        body = self._stmts_until_brace()
        fn = FnDef(name, params, annots, None if admitted else body,
                   admitted=admitted, ghost=ghost, ret=ret)
        return fn

    def _stmts_until_brace(self) -> Seq:
        seq = Seq(scope=True)
        while not self.ts.at("}"):
            if self.ts.peek().kind == "eof":
                self.ts.error("unexpected end of input, missing '}'")
            seq.stmts.append(self._stmt())
        self.ts.expect("}")
        return seq

    def _stmt(self):
        t = self.ts.peek()
        line, col = t.line, t.col
        s = self._stmt_inner()
        s.loc_info = (line, col)
        return s

    def _stmt_inner(self):
        ts = self.ts
        t = ts.peek()
        if t.val == "{":
            ts.next()
            seq = Seq(scope=True)
            while ts.at("__block_attr"):
                ts.next(); ts.expect("(")
                seq.attrs.add(self._string())
                ts.expect(")"); ts.expect(";")
            while not ts.at("}"):
                if ts.peek().kind == "eof":
                    ts.error("unexpected end of input, missing '}'")
                seq.stmts.append(self._stmt())
            ts.expect("}")
            return seq
        if t.val in _MODE_START and self._looks_like_loop():
            return self._for()
        if t.val == "if":
            ts.next()
            ts.expect("(")
            cond = _parse_expr(ts, True)
            ts.expect(")")
            ts.expect("{")
            then = self._stmts_until_brace()
            els = None
            if ts.accept("else"):
                ts.expect("{")
                els = self._stmts_until_brace()
            return If(cond=cond, then=then, els=els)
        if t.val == "return":
            ts.next()
            e = _parse_expr(ts, True)
            ts.expect(";")
            return Return(value=e)
        if t.val == "__ghost":
            ts.next()
            ts.expect("(")
            name = ts.expect_kind("ident").val
            gargs: tuple = ()
            if ts.accept(","):
                s, line = self._string_tok()
                gargs = parse_ghost_args(s, self.filename, line)
            ts.expect(")")
            ts.expect(";")
            return CallStmt(fn=name, ghost=True, ghost_args=gargs)
        if t.val in ("float", "int") and ts.peek(1).kind == "ident" \
                and ts.peek(1).val not in _MODE_START:
            return self._decl()
        if t.val in ("float", "int") and ts.peek(1).val == "*":
            return self._decl()
        if t.kind == "ident":
            # call or assignment
            if ts.peek(1).val == "(":
                name = ts.next().val
                ts.expect("(")
                args = []
                if not ts.at(")"):
                    args.append(_parse_expr(ts, True))
                    while ts.accept(","):
                        args.append(_parse_expr(ts, True))
                ts.expect(")")
                ts.expect(";")
                return CallStmt(fn=name, args=tuple(args))
            base = ts.next().val
            idxs = []
            while ts.at("["):
                ts.next()
                idxs.append(_parse_expr(ts, True))
                ts.expect("]")
            op = ts.next().val
            if op not in ("=", "+="):
                ts.error(f"expected assignment, found {op!r}")
            val = _parse_expr(ts, True)
            ts.expect(";")
            return Assign(target=Loc(base, tuple(idxs)), op=op, value=val)
        ts.error(f"unexpected token {t.val!r} at statement start")

    def _looks_like_loop(self) -> bool:
        t = self.ts.peek()
        if t.val == "for":
            return self.ts.peek(1).val == "("
        if t.val == "parallel":
            return self.ts.peek(1).val == "for"
        if t.val == "thread":
            return self.ts.peek(1).val == "for"
        if t.val == "magic":
            return self.ts.peek(1).val == "thread" and self.ts.peek(2).val == "for"
        return False

    def _for(self) -> For:
        ts = self.ts
        mode = SEQ_MODE
        if ts.accept("parallel"):
            mode = PAR_MODE
        elif ts.accept("thread"):
            mode = THREAD_MODE
        elif ts.accept("magic"):
            ts.expect("thread")
            mode = MAGIC_MODE
        ts.expect("for")
        ts.expect("(")
        ts.expect("int")
        idx = ts.expect_kind("ident").val
        ts.expect("=")
        start = _parse_expr(ts, True)
        ts.expect(";")
        n2 = ts.expect_kind("ident").val
        if n2 != idx:
            ts.error(f"loop condition must test index {idx!r}")
        ts.expect("<")
        stop = _parse_expr(ts, True)
        ts.expect(";")
        n3 = ts.expect_kind("ident").val
        if n3 != idx:
            ts.error(f"loop increment must update index {idx!r}")
        ts.expect("++")
        ts.expect(")")
        ts.expect("{")
        contract = LoopAnnots()
        while self.ts.peek().val.startswith("__") and \
                self.ts.peek().val[2:] in LoopAnnots.CLAUSES:
            clause = ts.next().val[2:]
            ts.expect("(")
            s, line = self._string_tok()
            ts.expect(")")
            ts.expect(";")
            items = parse_annot_items(s, pure=clause in _PURE_CLAUSES,
                                      filename=self.filename, line=line)
            getattr(contract, clause).extend(items)
        body = self._stmts_until_brace()
        for st in body.stmts:
            if isinstance(st, For) and st.index == idx:
                raise ParseError(f"loop index {idx!r} shadowed by nested loop",
                                 0, 0, self.filename)
        return For(index=idx, range=Range(start, stop), mode=mode,
                   contract=contract, body=body)

    def _decl(self) -> Decl:
        ts = self.ts
        ctype = ts.next().val
        if ts.accept("*"):
            ts.accept("const")
            name = ts.expect_kind("ident").val
            ts.expect("=")
            at = ts.expect_kind("ident")
            m = _ALLOC_RE.fullmatch(at.val)
            if not m:
                ts.error(f"expected an allocator, found {at.val!r}")
            alloc, k = m.group(1), int(m.group(2))
            ts.expect("<")
            elem = ts.next().val
            ts.expect(">")
            ts.expect("(")
            dims = []
            if not ts.at(")"):
                dims.append(_parse_expr(ts, True))
                while ts.accept(","):
                    dims.append(_parse_expr(ts, True))
            ts.expect(")")
            ts.expect(";")
            if len(dims) != k:
                ts.error(f"{at.val} takes {k} dimensions, got {len(dims)}")
            return Decl(name=name, ctype=elem, alloc=alloc, dims=tuple(dims))
        name = ts.expect_kind("ident").val
        ts.expect("=")
        init = _parse_expr(ts, True)
        ts.expect(";")
        return Decl(name=name, ctype=ctype, init=init)


def parse_program(text: str, filename: str = "<mem>") -> Program:
    return _ProgParser(text, filename).parse()


# ---------------------------------------------------------------------------
# Script DSL (.xfm)


@dataclass
class TargetSpec:
    kind: str  # for | vardef | call | write | fn
    name: str
    position: str | None = None  # before | after | body-of
    within: "TargetSpec | None" = None
    nth: int | None = None

    def __str__(self):
        s = f"{self.kind}:{self.name}"
        if self.position:
            s = f"{self.position} {s}"
        if self.within:
            s += f" in {self.within}"
        if self.nth is not None:
            s += f" nth={self.nth}"
        return s


@dataclass
class Command:
    name: str
    args: dict[str, str]
    target: TargetSpec | None
    line: int
    text: str


_PRIMARY_KINDS = ("for", "vardef", "call", "write", "fn")


def parse_target(s: str, filename: str = "<script>", line: int = 0) -> TargetSpec:
    words = s.split()
    position = None
    i = 0
    if words and words[0] in ("before", "after", "body-of"):
        position = words[0]
        i = 1
    if i >= len(words) or ":" not in words[i]:
        raise ParseError(f"bad target {s!r}", line, 1, filename)
    kind, _, name = words[i].partition(":")
    if kind not in _PRIMARY_KINDS:
        raise ParseError(f"unknown target kind {kind!r}", line, 1, filename)
    spec = TargetSpec(kind, name, position)
    i += 1
    while i < len(words):
        if words[i] == "in":
            spec.within = parse_target(" ".join(words[i + 1:]), filename, line)
            return spec
        m = re.fullmatch(r"nth=(\d+)", words[i])
        if m:
            spec.nth = int(m.group(1))
            i += 1
            continue
        raise ParseError(f"bad target component {words[i]!r}", line, 1, filename)
    return spec


def _split_command(line: str) -> list[str]:
    """Split on whitespace, honoring double quotes."""
    out, cur, q = [], "", False
    for ch in line:
        if ch == '"':
            q = not q
            continue
        if ch.isspace() and not q:
            if cur:
                out.append(cur)
                cur = ""
        else:
            cur += ch
    if cur:
        out.append(cur)
    return out


def parse_script(text: str, filename: str = "<script>") -> list[Command]:
    cmds: list[Command] = []
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "@" in line:
            head, _, tgt = line.partition("@")
            target = parse_target(tgt.strip(), filename, i)
        else:
            head, target = line, None
        words = _split_command(head.strip())
        if not words:
            raise ParseError("empty command", i, 1, filename)
        name = words[0]
        args: dict[str, str] = {}
        if name == "phase":
            if len(words) == 2 and "=" not in words[1]:
                args["name"] = words[1]
                cmds.append(Command(name, args, target, i, raw.strip()))
                continue
        for w in words[1:]:
            if "=" not in w:
                raise ParseError(f"bad argument {w!r} (expected key=value)", i, 1,
                                 filename)
            k, _, v = w.partition("=")
            args[k] = v
        cmds.append(Command(name, args, target, i, raw.strip()))
    return cmds
