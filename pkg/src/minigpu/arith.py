"""Linear-arithmetic normalization and the closed-world micro-prover.

Expressions are normalized to polynomials over atoms. Atoms are canonical
encodings of irreducible subterms (variables, uninterpreted applications,
lambdas in de Bruijn form, pointers, and three interpreted forms):

  exact_div(a, b)   folded away whenever divisibility lets it
  pow2(e)           constant-folded; pow2(e+c) = 2^c * pow2(e) when e >= 0
  DMINDEXk(...)     canonicalized to (total size, row-major linear index)

The prover answers equality, ordering, nonnegativity and divisibility
queries against a Facts environment (divisibility facts, equalities, known
nonnegative terms and binder bounds). It is deliberately closed-world:
anything it cannot see syntactically, it refuses to prove.
"""

from __future__ import annotations

from fractions import Fraction

from .ast import (
    UNINIT,
    BinOp,
    Call,
    Expr,
    FloatLit,
    IntLit,
    Lam,
    Ptr,
    Var,
)

# A polynomial is {monomial: coeff}; a monomial is a tuple of (atom, power)
# pairs sorted by atom. CPoly is the frozen, hashable image of a polynomial.

Mono = tuple
CPoly = tuple


def _mono_mul(a: Mono, b: Mono) -> Mono:
    d = {}
    for at, p in a:
        d[at] = d.get(at, 0) + p
    for at, p in b:
        d[at] = d.get(at, 0) + p
    return tuple(sorted((at, p) for at, p in d.items() if p))


class Poly:
    __slots__ = ("terms",)

    def __init__(self, terms=None):
        self.terms: dict[Mono, object] = dict(terms or {})
        self._clean()

    def _clean(self):
        for m in [m for m, c in self.terms.items() if c == 0]:
            del self.terms[m]

    @staticmethod
    def const(c) -> "Poly":
        return Poly({(): c} if c != 0 else {})

    @staticmethod
    def atom(a, coeff=1) -> "Poly":
        return Poly({((a, 1),): coeff})

    def __add__(self, o: "Poly") -> "Poly":
        t = dict(self.terms)
        for m, c in o.terms.items():
            t[m] = t.get(m, 0) + c
        return Poly(t)

    def __sub__(self, o: "Poly") -> "Poly":
        t = dict(self.terms)
        for m, c in o.terms.items():
            t[m] = t.get(m, 0) - c
        return Poly(t)

    def __neg__(self) -> "Poly":
        return Poly({m: -c for m, c in self.terms.items()})

    def scale(self, k) -> "Poly":
        return Poly({m: c * k for m, c in self.terms.items()})

    def mul(self, o: "Poly") -> "Poly":
        t = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in o.terms.items():
                m = _mono_mul(m1, m2)
                t[m] = t.get(m, 0) + c1 * c2
        return Poly(t)

    def is_const(self) -> bool:
        return not self.terms or (len(self.terms) == 1 and () in self.terms)

    def const_value(self):
        return self.terms.get((), 0)

    def freeze(self) -> CPoly:
        return tuple(sorted(self.terms.items()))

    def __eq__(self, o):
        return isinstance(o, Poly) and self.terms == o.terms

    def __hash__(self):
        return hash(self.freeze())

    def __repr__(self):
        return f"Poly({self.terms!r})"


def thaw(cp: CPoly) -> Poly:
    return Poly(dict(cp))


def _atom_vars(a, out: set):
    tag = a[0]
    if tag == "var":
        out.add(a[1])
    elif tag in ("app", "ptr"):
        for cp in a[2]:
            _cpoly_vars(cp, out)
    elif tag in ("pow2",):
        _cpoly_vars(a[1], out)
    elif tag in ("dm", "ediv", "div", "mod"):
        _cpoly_vars(a[1], out)
        _cpoly_vars(a[2], out)
    elif tag == "lam":
        _cpoly_vars(a[2], out)


def _cpoly_vars(cp: CPoly, out: set):
    for m, _ in cp:
        for a, _p in m:
            _atom_vars(a, out)


def poly_vars(p: Poly) -> set[str]:
    out: set[str] = set()
    _cpoly_vars(p.freeze(), out)
    return out


class Facts:
    """Prover environment: what is currently known to be true."""

    def __init__(self, parent: "Facts | None" = None):
        self.parent = parent
        self.divs: list[tuple[CPoly, CPoly]] = []  # d | e
        self.eqs: list[tuple[Poly, Poly]] = []
        self.nonneg: list[CPoly] = []
        self.bounds: dict[str, tuple[Expr, Expr]] = {}  # v in [lo, hi)
        self.props: list[tuple] = []  # canonical opaque propositions
        self._norm_cache: dict = {}

    def child(self) -> "Facts":
        return Facts(self)

    # -- iteration over the chain ------------------------------------------
    def _chain(self):
        f = self
        while f is not None:
            yield f
            f = f.parent

    def all_divs(self):
        for f in self._chain():
            yield from f.divs

    def all_eqs(self):
        for f in self._chain():
            yield from f.eqs

    def all_nonneg(self):
        for f in self._chain():
            yield from f.nonneg

    def all_bounds(self):
        seen = set()
        for f in self._chain():
            for v, b in f.bounds.items():
                if v not in seen:
                    seen.add(v)
                    yield v, b

    def all_props(self):
        for f in self._chain():
            yield from f.props

    # -- recording ----------------------------------------------------------
    def add_div(self, d: Expr, e: Expr):
        self.divs.append((norm(d, self).freeze(), norm(e, self).freeze()))

    def add_eq(self, a: Expr, b: Expr):
        self.eqs.append((norm(a, self), norm(b, self)))

    def add_nonneg(self, e: Expr):
        self.nonneg.append(norm(e, self).freeze())

    def add_bound(self, v: str, lo: Expr, hi: Expr):
        self.bounds[v] = (lo, hi)

    def add_prop(self, formula: Expr):
        rec = canon_prop(formula, self)
        if rec is not None:
            kind = rec[0]
            if kind == "eq":
                self.eqs.append((thaw(rec[1]), Poly()))
            elif kind == "le":  # rec[1] = canon(b - a) >= 0
                self.nonneg.append(rec[1])
            elif kind == "div":
                self.divs.append((rec[1], rec[2]))
            else:
                self.props.append(rec)


# ---------------------------------------------------------------------------
# Normalization


def norm(e: Expr, facts: Facts | None = None, _benv=None) -> Poly:
    facts = facts or Facts()
    if _benv is None and e in facts._norm_cache:
        return facts._norm_cache[e]
    p = _norm(e, facts, _benv or {})
    if _benv is None:
        facts._norm_cache[e] = p
    return p


def _norm(e: Expr, facts: Facts, benv: dict) -> Poly:
    if isinstance(e, IntLit):
        return Poly.const(e.value)
    if isinstance(e, FloatLit):
        return Poly.const(e.value)
    if isinstance(e, Var):
        if e is UNINIT:
            return Poly.atom(("uninit",))
        if e.name in benv:
            return Poly.atom(("db", benv[e.name]))
        return Poly.atom(("var", e.name))
    if isinstance(e, BinOp):
        if e.op == "+":
            return _norm(e.lhs, facts, benv) + _norm(e.rhs, facts, benv)
        if e.op == "-":
            return _norm(e.lhs, facts, benv) - _norm(e.rhs, facts, benv)
        if e.op == "*":
            p = _norm(e.lhs, facts, benv).mul(_norm(e.rhs, facts, benv))
            return _fold_poly(p, facts)
        if e.op == "/":
            a = _norm(e.lhs, facts, benv)
            b = _norm(e.rhs, facts, benv)
            q = _try_exact_div(a, b, facts)
            if q is not None:
                return q
            return Poly.atom(("div", a.freeze(), b.freeze()))
        if e.op == "%":
            a = _norm(e.lhs, facts, benv)
            b = _norm(e.rhs, facts, benv)
            return Poly.atom(("mod", a.freeze(), b.freeze()))
        # comparisons are propositions, not arithmetic
        return Poly.atom(("app", f"__cmp{e.op}",
                          (_norm(e.lhs, facts, benv).freeze(),
                           _norm(e.rhs, facts, benv).freeze())))
    if isinstance(e, Call):
        if e.fn == "exact_div" and len(e.args) == 2:
            a = _norm(e.args[0], facts, benv)
            b = _norm(e.args[1], facts, benv)
            return mk_ediv(a, b, facts)
        if e.fn == "pow2" and len(e.args) == 1:
            return mk_pow2(_norm(e.args[0], facts, benv), facts)
        if e.fn.startswith("DMINDEX"):
            k = len(e.args) // 2
            dims = [_norm(a, facts, benv) for a in e.args[:k]]
            idxs = [_norm(a, facts, benv) for a in e.args[k:]]
            return mk_dm(dims, idxs, facts)
        return Poly.atom(("app", e.fn, tuple(_norm(a, facts, benv).freeze() for a in e.args)))
    if isinstance(e, Lam):
        inner = dict(benv)
        depth = len(benv)
        for i, p in enumerate(e.params):
            inner[p] = depth + i
        return Poly.atom(("lam", len(e.params), _norm(e.body, facts, inner).freeze()))
    if isinstance(e, Ptr):
        return Poly.atom(("ptr", e.base, tuple(_norm(i, facts, benv).freeze() for i in e.idxs)))
    raise TypeError(f"cannot normalize {e!r}")


def mk_ediv(a: Poly, b: Poly, facts: Facts) -> Poly:
    q = _try_exact_div(a, b, facts)
    if q is not None:
        return q
    return Poly.atom(("ediv", a.freeze(), b.freeze()))


def _try_exact_div(a: Poly, b: Poly, facts: Facts) -> Poly | None:
    """a / b when the quotient is syntactically exact."""
    if b.is_const():
        c = b.const_value()
        if c == 0:
            return None
        if all(isinstance(v, int) and v % c == 0 for v in a.terms.values()):
            return Poly({m: v // c for m, v in a.terms.items()})
        # pow2(x) / 2^j = pow2(x - j) if x >= j
        if len(a.terms) == 1 and isinstance(c, int) and c > 0 and (c & (c - 1)) == 0:
            (m, cf), = a.terms.items()
            j = c.bit_length() - 1
            if len(m) == 1 and m[0][0][0] == "pow2" and m[0][1] == 1 and cf % 1 == 0:
                x = thaw(m[0][0][1])
                if prove_nonneg_poly(x - Poly.const(j), facts) and isinstance(cf, int) and cf % 1 == 0:
                    return mk_pow2(x - Poly.const(j), facts).scale(cf)
        return None
    if len(b.terms) == 1:
        # divide monomial-wise when every monomial of a contains b's monomial
        (bm, bc), = b.terms.items()
        out = {}
        for m, c in a.terms.items():
            md = dict(m)
            for at, p in bm:
                if md.get(at, 0) < p:
                    return None
                md[at] -= p
            if isinstance(c, int) and isinstance(bc, int) and c % bc == 0:
                cq = c // bc
            else:
                fr = Fraction(c) / Fraction(bc) if isinstance(c, int) and isinstance(bc, int) else None
                if fr is None or fr.denominator != 1:
                    return None
                cq = int(fr)
            out[tuple(sorted((at, p) for at, p in md.items() if p))] = cq
        return Poly(out)
    return None


def mk_pow2(p: Poly, facts: Facts) -> Poly:
    if p.is_const():
        c = p.const_value()
        if isinstance(c, int) and 0 <= c <= 62:
            return Poly.const(1 << c)
    c = p.const_value()
    if isinstance(c, int) and c > 0:
        # strip provably-safe +1 units: pow2(e+1) = 2*pow2(e) needs e >= 0
        m = 0
        while m < c and prove_nonneg_poly(p - Poly.const(m + 1), facts):
            m += 1
        if m > 0:
            return Poly.atom(("pow2", (p - Poly.const(m)).freeze()), coeff=1 << m)
    return Poly.atom(("pow2", p.freeze()))


def mk_dm(dims: list[Poly], idxs: list[Poly], facts: Facts) -> Poly:
    size = Poly.const(1)
    for d in dims:
        size = _fold_poly(size.mul(d), facts)
    lin = Poly()
    for i, ix in enumerate(idxs):
        stride = Poly.const(1)
        for d in dims[i + 1:]:
            stride = _fold_poly(stride.mul(d), facts)
        lin = lin + _fold_poly(ix.mul(stride), facts)
    return Poly.atom(("dm", size.freeze(), lin.freeze()))


def _fold_poly(p: Poly, facts: Facts) -> Poly:
    """Apply exact_div folding: b * exact_div(a, b) -> a when b | a."""
    out = Poly()
    for m, c in p.terms.items():
        out = out + _fold_mono(dict(m), c, facts)
    return out


def _fold_mono(mono: dict, coeff, facts: Facts) -> Poly:
    for at, p in list(mono.items()):
        if at[0] != "ediv" or p <= 0:
            continue
        a, b = thaw(at[1]), thaw(at[2])
        if not _divides_known(b, a, facts):
            continue
        if b.is_const():
            c = b.const_value()
            if isinstance(coeff, int) and isinstance(c, int) and c != 0 and coeff % c == 0:
                mono = dict(mono)
                mono[at] -= 1
                if not mono[at]:
                    del mono[at]
                rest = Poly({tuple(sorted(mono.items())): coeff // c})
                return _fold_poly(rest.mul(a), facts)
        elif len(b.terms) == 1:
            (bm, bc), = b.terms.items()
            if bc == 1 and len(bm) == 1 and bm[0][1] == 1:
                back = bm[0][0]
                if mono.get(back, 0) >= 1:
                    mono = dict(mono)
                    mono[back] -= 1
                    if not mono[back]:
                        del mono[back]
                    mono[at] -= 1
                    if not mono[at]:
                        del mono[at]
                    rest = Poly({tuple(sorted(mono.items())): coeff})
                    return _fold_poly(rest.mul(a), facts)
    return Poly({tuple(sorted(mono.items())): coeff})


def _divides_known(d: Poly, e: Poly, facts: Facts) -> bool:
    if d.is_const():
        c = d.const_value()
        if c in (1, -1):
            return True
        if e.is_const() and isinstance(e.const_value(), int) and c and e.const_value() % c == 0:
            return True
    key = (d.freeze(), e.freeze())
    for kd, ke in facts.all_divs():
        if key == (kd, ke):
            return True
    return False


# ---------------------------------------------------------------------------
# Proving


def canon(e: Expr, facts: Facts | None = None) -> CPoly:
    return norm(e, facts).freeze()


def prove_eq(a: Expr, b: Expr, facts: Facts | None = None) -> bool:
    facts = facts or Facts()
    return prove_eq_poly(norm(a, facts) - norm(b, facts), facts)


def prove_eq_poly(p: Poly, facts: Facts) -> bool:
    p = _subst_eq_vars(p, facts)
    if not p.terms:
        return True
    for l, r in facts.all_eqs():
        d = l - r
        if p == d or p == -d:
            return True
    return False


def _subst_eq_vars(p: Poly, facts: Facts) -> Poly:
    """Use var = poly equalities as rewrite rules (bounded fixpoint)."""
    for _ in range(4):
        changed = False
        for l, r in facts.all_eqs():
            sub = None
            if len(l.terms) == 1:
                (m, c), = l.terms.items()
                if c == 1 and len(m) == 1 and m[0][0][0] == "var" and m[0][1] == 1:
                    sub = (m[0][0], r)
            if sub is None and len(r.terms) == 1:
                (m, c), = r.terms.items()
                if c == 1 and len(m) == 1 and m[0][0][0] == "var" and m[0][1] == 1:
                    sub = (m[0][0], l)
            if sub is None:
                continue
            q = _subst_atom(p, sub[0], sub[1])
            if q is not None and q != p:
                p = q
                changed = True
        if not changed:
            break
    return p


def _subst_atom(p: Poly, atom, repl: Poly) -> Poly | None:
    out = Poly()
    for m, c in p.terms.items():
        part = Poly({(): c})
        for at, pw in m:
            if at == atom:
                for _ in range(pw):
                    part = part.mul(repl)
            else:
                part = part.mul(Poly.atom(at))
        out = out + part
    return out


_NONNEG_DEPTH = 0


def prove_nonneg_poly(p: Poly, facts: Facts) -> bool:
    global _NONNEG_DEPTH
    if _NONNEG_DEPTH > 24:
        return False
    _NONNEG_DEPTH += 1
    try:
        return _prove_nonneg(p, facts, set())
    finally:
        _NONNEG_DEPTH -= 1


def _prove_nonneg(p: Poly, facts: Facts, skip: frozenset | set) -> bool:
    if not p.terms:
        return True
    if p.is_const():
        return p.const_value() >= 0
    # known facts, directly or by difference
    fp = p.freeze()
    for nn in facts.all_nonneg():
        if fp == nn:
            return True
        d = p - thaw(nn)
        if d.is_const() and d.const_value() >= 0:
            return True
    # eliminate a bounded variable occurring linearly
    for v, (lo, hi) in facts.all_bounds():
        if v in skip:
            continue
        occ = _linear_coeff(p, v)
        if occ is None:
            continue
        coeff, rest = occ
        if not coeff.terms:
            continue
        lo_p = norm(lo, facts)
        hi_p = norm(hi, facts)
        new_skip = set(skip) | {v}
        if _sign_nonneg(coeff, facts, new_skip):
            cand = rest + coeff.mul(lo_p)
        elif _sign_nonneg(-coeff, facts, new_skip):
            cand = rest + coeff.mul(hi_p - Poly.const(1))
        else:
            continue
        if _prove_nonneg(cand, facts, new_skip):
            return True
    # pairwise pow2 difference: c*pow2(a) - c*pow2(b) >= 0 if a >= b
    mono = [(m, c) for m, c in p.terms.items() if m]
    if len(mono) == 2 and not p.const_value():
        (m1, c1), (m2, c2) = mono
        if c1 == -c2 and len(m1) == 1 and len(m2) == 1:
            a1, a2 = m1[0][0], m2[0][0]
            if a1[0] == "pow2" and a2[0] == "pow2" and m1[0][1] == m2[0][1] == 1:
                hi_at, lo_at = (a1, a2) if c1 > 0 else (a2, a1)
                if _prove_nonneg(thaw(hi_at[1]) - thaw(lo_at[1]), facts, skip):
                    return True
    # lower-bound estimate: all monomials individually nonnegative
    lb = Poly.const(p.const_value())
    ok = True
    for m, c in p.terms.items():
        if not m:
            continue
        if c > 0 and all(_atom_nonneg(at, facts, skip) for at, _ in m):
            continue  # contributes >= 0
        ok = False
        break
    if ok and lb.const_value() >= 0:
        return True
    return False


def _sign_nonneg(coeff: Poly, facts: Facts, skip) -> bool:
    if coeff.is_const():
        return coeff.const_value() >= 0
    return _prove_nonneg(coeff, facts, skip)


def _atom_nonneg(at, facts: Facts, skip) -> bool:
    if at[0] == "pow2":
        return True
    if at[0] == "var":
        v = at[1]
        for w, (lo, _hi) in facts.all_bounds():
            if w == v and _prove_nonneg(norm(lo, facts), facts, set(skip) | {v}):
                return True
        return Poly.atom(at).freeze() in set(facts.all_nonneg())
    if at[0] == "ediv":
        return _prove_nonneg(thaw(at[1]), facts, skip) and _prove_nonneg(thaw(at[2]), facts, skip)
    return Poly.atom(at).freeze() in set(facts.all_nonneg())


def _linear_coeff(p: Poly, v: str):
    """Split p = coeff*v + rest when v occurs only linearly and only as a
    direct factor (never inside atoms). Returns (coeff, rest) or None."""
    vat = ("var", v)
    coeff = Poly()
    rest = Poly()
    for m, c in p.terms.items():
        inside = False
        for at, _pw in m:
            s: set = set()
            if at != vat:
                _atom_vars(at, s)
                if v in s:
                    inside = True
        if inside:
            return None
        md = dict(m)
        if vat in md:
            if md[vat] != 1:
                return None
            del md[vat]
            coeff = coeff + Poly({tuple(sorted(md.items())): c})
        else:
            rest = rest + Poly({m: c})
    return coeff, rest


def prove_le(a: Expr, b: Expr, facts: Facts | None = None) -> bool:
    facts = facts or Facts()
    return prove_nonneg_poly(norm(b, facts) - norm(a, facts), facts)


def prove_lt(a: Expr, b: Expr, facts: Facts | None = None) -> bool:
    facts = facts or Facts()
    return prove_nonneg_poly(norm(b, facts) - norm(a, facts) - Poly.const(1), facts)


def prove_divides(d: Expr | Poly, e: Expr | Poly, facts: Facts | None = None,
                  _depth: int = 0) -> bool:
    facts = facts or Facts()
    dp = d if isinstance(d, Poly) else norm(d, facts)
    ep = e if isinstance(e, Poly) else norm(e, facts)
    return _prove_divides(dp, ep, facts, _depth)


def _prove_divides(dp: Poly, ep: Poly, facts: Facts, depth: int) -> bool:
    if depth > 4:
        return False
    dp = _subst_eq_vars(dp, facts)
    ep = _subst_eq_vars(ep, facts)
    if _divides_known(dp, ep, facts):
        return True
    if dp.is_const():
        c = dp.const_value()
        if isinstance(c, int) and c != 0 and all(
                isinstance(v, int) and v % c == 0 for v in ep.terms.values()):
            return True
    if len(dp.terms) == 1:
        (dm, dc), = dp.terms.items()
        # power-of-two reasoning: fold constant 2^j into a pow2 exponent
        d_exp, d_odd, d_atoms = _pow2_split(dm, dc)
        if d_odd is not None and all(
                _mono_divides(d_odd, d_atoms, d_exp, m, c, facts) for m, c in ep.terms.items()):
            if d_exp is None or prove_nonneg_poly(d_exp, facts):
                return True
        # exact_div unfolding: (a/b) | e  <=  a | e*b
        for at, pw in dm:
            if at[0] == "ediv" and pw == 1:
                a, b = thaw(at[1]), thaw(at[2])
                rest = dict(dm)
                rest[at] -= 1
                if not rest[at]:
                    del rest[at]
                d2 = Poly({tuple(sorted(rest.items())): dc}).mul(a)
                if _prove_divides(_fold_poly(d2, facts), _fold_poly(ep.mul(b), facts),
                                  facts, depth + 1):
                    return True
    return False


def _pow2_split(m: Mono, c):
    """Split a monomial into (pow2 exponent poly or None, odd coeff, other atoms)."""
    if not isinstance(c, int) or c == 0:
        return None, None, None
    exp = Poly()
    j = 0
    cc = abs(c)
    while cc % 2 == 0:
        cc //= 2
        j += 1
    exp = exp + Poly.const(j)
    atoms = {}
    has_pow2 = j > 0
    for at, p in m:
        if at[0] == "pow2":
            for _ in range(p):
                exp = exp + thaw(at[1])
            has_pow2 = True
        else:
            atoms[at] = atoms.get(at, 0) + p
    return (exp if has_pow2 else None), (cc if c > 0 else -cc), atoms


def _mono_divides(d_odd, d_atoms, d_exp, m: Mono, c, facts: Facts) -> bool:
    e_exp, e_odd, e_atoms = _pow2_split(m, c)
    if e_odd is None or e_odd % d_odd != 0:
        return False
    for at, p in d_atoms.items():
        if e_atoms.get(at, 0) < p:
            return False
    if d_exp is not None:
        ee = e_exp if e_exp is not None else Poly()
        return prove_nonneg_poly(ee - d_exp, facts)
    return True


# ---------------------------------------------------------------------------
# Propositions


def canon_prop(f: Expr, facts: Facts):
    """Canonical record of a proposition, or None for opaque terms."""
    if isinstance(f, BinOp):
        a, b = f.lhs, f.rhs
        if f.op == "==":
            return ("eq", (norm(a, facts) - norm(b, facts)).freeze())
        if f.op == "<=":
            return ("le", (norm(b, facts) - norm(a, facts)).freeze())
        if f.op == "<":
            return ("le", (norm(b, facts) - norm(a, facts) - Poly.const(1)).freeze())
        if f.op == ">=":
            return ("le", (norm(a, facts) - norm(b, facts)).freeze())
        if f.op == ">":
            return ("le", (norm(a, facts) - norm(b, facts) - Poly.const(1)).freeze())
        if f.op == "!=":
            return ("ne", (norm(a, facts) - norm(b, facts)).freeze())
    if isinstance(f, Call) and f.fn == "divides" and len(f.args) == 2:
        return ("div", canon(f.args[0], facts), canon(f.args[1], facts))
    return ("opaque", canon(f, facts))


def prove_prop(f: Expr, facts: Facts) -> bool:
    rec = canon_prop(f, facts)
    kind = rec[0]
    if kind == "eq":
        return prove_eq_poly(thaw(rec[1]), facts)
    if kind == "le":
        return prove_nonneg_poly(thaw(rec[1]), facts)
    if kind == "div":
        return _prove_divides(thaw(rec[1]), thaw(rec[2]), facts, 0)
    if kind == "ne":
        p = _subst_eq_vars(thaw(rec[1]), facts)
        return p.is_const() and p.const_value() != 0
    return rec in set(facts.all_props())


def props_equal(a: Expr, b: Expr, facts: Facts) -> bool:
    return canon_prop(a, facts) == canon_prop(b, facts)


# ---------------------------------------------------------------------------
# Reconstruction (poly -> readable Expr), used by simplification passes


def poly_to_expr(p: Poly, float_ctx: bool = False) -> Expr:
    if not p.terms:
        return FloatLit(0.0) if float_ctx else IntLit(0)
    parts = []
    for m, c in sorted(p.terms.items()):
        parts.append((_mono_to_expr(m, c)))
    out = None
    for sign, e in parts:
        if out is None:
            out = e if sign > 0 else BinOp("-", IntLit(0), e)
        else:
            out = BinOp("+" if sign > 0 else "-", out, e)
    return out


def _mono_to_expr(m: Mono, c):
    sign = 1 if (c > 0 if not isinstance(c, complex) else True) else -1
    mag = c if sign > 0 else -c
    factors = []
    if mag != 1 or not m:
        factors.append(FloatLit(mag) if isinstance(mag, float) else IntLit(mag))
    for at, pw in m:
        for _ in range(pw):
            factors.append(atom_to_expr(at))
    out = factors[0]
    for f in factors[1:]:
        out = BinOp("*", out, f)
    return sign, out


def atom_to_expr(at) -> Expr:
    tag = at[0]
    if tag == "var":
        return Var(at[1])
    if tag == "uninit":
        return UNINIT
    if tag == "app":
        return Call(at[1], tuple(poly_to_expr(thaw(cp)) for cp in at[2]))
    if tag == "ediv":
        return Call("exact_div", (poly_to_expr(thaw(at[1])), poly_to_expr(thaw(at[2]))))
    if tag == "pow2":
        return Call("pow2", (poly_to_expr(thaw(at[1])),))
    if tag == "dm":
        return Call("DMINDEX1", (poly_to_expr(thaw(at[1])), poly_to_expr(thaw(at[2]))))
    if tag == "div":
        return BinOp("/", poly_to_expr(thaw(at[1])), poly_to_expr(thaw(at[2])))
    if tag == "mod":
        return BinOp("%", poly_to_expr(thaw(at[1])), poly_to_expr(thaw(at[2])))
    if tag == "ptr":
        return Ptr(at[1], tuple(poly_to_expr(thaw(cp)) for cp in at[2]))
    raise ValueError(f"cannot reconstruct atom {at!r}")


def simplify(e: Expr, facts: Facts | None = None) -> Expr:
    """Best-effort arithmetic simplification preserving meaning."""
    facts = facts or Facts()
    try:
        p = norm(e, facts)
    except (TypeError, ValueError):
        return e
    if any(at[0] == "lam" for m, _ in p.terms.items() for at, _p in m):
        return e
    float_ctx = any(isinstance(c, float) for c in p.terms.values())
    try:
        return poly_to_expr(p, float_ctx)
    except ValueError:
        return e
