"""Admitted intrinsic functions: kernel transitions, typed memory
operations, barriers, and the ghost library.

Each intrinsic carries a contract in template form; value parameters are
substituted with call arguments, `quantified` names are solved by frame
matching (or by a requires-equation with one unknown), `props` are proof
obligations. Barriers and allocators need bespoke handling and carry a
`special` tag the checker dispatches on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .ast import BinOp, Call, Expr, IntLit, Loc, Range, Var, range_plus
from .resources import (
    FreeTok,
    Group,
    GMEM,
    HostCtx,
    KernelParams,
    KernelSetupCtx,
    KernelTeardownCtx,
    PointsTo,
    PureType,
    ResExpr,
    SMEM,
    SMemAllowance,
    T_INT,
    TREG,
    ThreadsCtx,
)
from .frame import ResVar

CELL_BYTES = 4  # both float and int cells occupy four bytes


@dataclass
class Intrinsic:
    name: str
    params: list[str] = field(default_factory=list)
    quantified: list[tuple[str, PureType]] = field(default_factory=list)
    props: list[Expr] = field(default_factory=list)
    consumes: list[ResExpr] = field(default_factory=list)
    produces: list[ResExpr] = field(default_factory=list)
    reads: list[ResExpr] = field(default_factory=list)       # fractional, restored
    preserves: list[ResExpr] = field(default_factory=list)   # full, restored
    special: str | None = None


def _v(n: str) -> Var:
    return Var(n)


def _prod(exprs, unit=IntLit(1)):
    out = None
    for e in exprs:
        out = e if out is None else BinOp("*", out, e)
    return out if out is not None else unit


def build_registry() -> dict[str, Intrinsic]:
    reg: dict[str, Intrinsic] = {}

    def add(i: Intrinsic):
        reg[i.name] = i

    grid = BinOp("*", _v("__bpg"), _v("__tpb"))

    add(Intrinsic(
        "kernel_launch", params=["bpg", "tpb", "smem_sz"],
        consumes=[HostCtx()],
        produces=[KernelSetupCtx(), KernelParams(_v("bpg"), _v("tpb"), _v("smem_sz")),
                  SMemAllowance(_v("smem_sz"))]))

    add(Intrinsic(
        "kernel_setup_end",
        quantified=[("__bpg", T_INT), ("__tpb", T_INT), ("__smem", T_INT),
                    ("__grid", T_INT)],
        props=[BinOp("==", BinOp("*", _v("__bpg"), _v("__tpb")), _v("__grid"))],
        consumes=[KernelSetupCtx()],
        preserves=[KernelParams(_v("__bpg"), _v("__tpb"), _v("__smem")),
                   SMemAllowance(IntLit(0))],
        produces=[ThreadsCtx(range_plus(IntLit(0), _v("__grid")))]))

    add(Intrinsic(
        "kernel_teardown_begin",
        quantified=[("__bpg", T_INT), ("__tpb", T_INT), ("__smem", T_INT),
                    ("__grid", T_INT)],
        props=[BinOp("==", BinOp("*", _v("__bpg"), _v("__tpb")), _v("__grid"))],
        consumes=[ThreadsCtx(range_plus(IntLit(0), _v("__grid")))],
        preserves=[KernelParams(_v("__bpg"), _v("__tpb"), _v("__smem")),
                   SMemAllowance(IntLit(0))],
        produces=[KernelTeardownCtx()]))

    add(Intrinsic(
        "kernel_kill",
        quantified=[("__bpg", T_INT), ("__tpb", T_INT), ("__smem", T_INT)],
        consumes=[KernelParams(_v("__bpg"), _v("__tpb"), _v("__smem")),
                  KernelTeardownCtx(), SMemAllowance(_v("__smem"))],
        produces=[HostCtx()]))

    add(Intrinsic("blocksync", special="barrier_block"))
    add(Intrinsic("magic_barrier", special="barrier_magic"))
    add(Intrinsic("kernel_teardown_sync", special="barrier_teardown"))

    add(Intrinsic(
        "free", params=["p"],
        quantified=[("__H", PureType("HProp"))],
        consumes=[FreeTok("p", ResVar("__H")), ResVar("__H")]))
    add(Intrinsic(
        "gmem_free", params=["p"],
        quantified=[("__H", PureType("HProp"))],
        preserves=[HostCtx()],
        consumes=[FreeTok("p", ResVar("__H")), ResVar("__H")]))

    for k in (1, 2, 3):
        dims = [f"N{j}" for j in range(1, k + 1)]
        bytes_expr = _prod([IntLit(CELL_BYTES)] + [_v(d) for d in dims])
        add(Intrinsic(
            f"__smem_free{k}", params=["p"] + dims,
            quantified=[("__bpg", T_INT), ("__t2", T_INT), ("__s2", T_INT),
                        ("__sz", T_INT)],
            preserves=[KernelTeardownCtx()],
            reads=[KernelParams(_v("__bpg"), _v("__t2"), _v("__s2"))],
            consumes=[FreeTok("p"),
                      Group("__b", Range(IntLit(0), _v("__bpg")),
                            _smem_cells("p", dims), desync=True),
                      SMemAllowance(_v("__sz"))],
            produces=[SMemAllowance(BinOp("+", _v("__sz"), bytes_expr))]))

        fn_t = PureType("fn", tuple([T_INT] * k + [PureType("float")]))
        binders = [f"__i{j}" for j in range(k)]
        src_any = _pt_group("src", binders, dims, "Any", "__A")
        dst_gmem = _pt_group("dest", binders, dims, GMEM, "__A")
        add(Intrinsic(
            f"memcpy_host_to_device{k}", params=["dest", "src"] + dims,
            quantified=[("__A", fn_t)],
            preserves=[HostCtx()],
            reads=[src_any],
            consumes=[_uninit_group("dest", binders, dims, GMEM)],
            produces=[dst_gmem]))
        src_gmem = _pt_group("src", binders, dims, GMEM, "__A")
        dst_any = _pt_group("dest", binders, dims, "Any", "__A")
        add(Intrinsic(
            f"memcpy_device_to_host{k}", params=["dest", "src"] + dims,
            quantified=[("__A", fn_t)],
            preserves=[HostCtx()],
            reads=[src_gmem],
            consumes=[_uninit_group("dest", binders, dims, "Any")],
            produces=[dst_any]))

    # allocation intrinsics are applied at declaration sites; registered here
    # so the registry is the single source of their contracts
    for k in (0, 1, 2, 3):
        if k:
            add(Intrinsic(f"MALLOC{k}", special="alloc"))
            add(Intrinsic(f"gmem_malloc{k}", special="alloc"))
            add(Intrinsic(f"__smem_malloc{k}", special="alloc"))
        if k <= 2:
            add(Intrinsic(f"__treg_malloc{k}", special="alloc"))

    for n in ("__gmem_get", "__gmem_set", "__smem_get", "__smem_set"):
        add(Intrinsic(n, special="mem_op"))

    return reg


def _smem_cells(base: str, dims: list[str]) -> ResExpr:
    from .ast import UNINIT
    binders = [f"__j{j}" for j in range(len(dims))]
    dm = Call("DMINDEX1", (_v("__bpg"), _v("__b")))
    body: ResExpr = PointsTo(Loc(base, (dm,) + tuple(Var(b) for b in binders)),
                             SMEM, val=UNINIT)
    for b, d in zip(reversed(binders), reversed(dims)):
        body = Group(b, Range(IntLit(0), _v(d)), body)
    return body


def _pt_group(base: str, binders: list[str], dims: list[str], mem: str,
              model: str) -> ResExpr:
    body: ResExpr = PointsTo(Loc(base, tuple(Var(b) for b in binders)), mem,
                             val=Call(model, tuple(Var(b) for b in binders)))
    for b, d in zip(reversed(binders), reversed(dims)):
        body = Group(b, Range(IntLit(0), _v(d)), body)
    return body


def _uninit_group(base: str, binders: list[str], dims: list[str], mem: str) -> ResExpr:
    from .ast import UNINIT
    body: ResExpr = PointsTo(Loc(base, tuple(Var(b) for b in binders)), mem, val=UNINIT)
    for b, d in zip(reversed(binders), reversed(dims)):
        body = Group(b, Range(IntLit(0), _v(d)), body)
    return body


GHOST_NAMES = {
    "rewrite_linear", "in_range_bounds", "eq_refl", "tile_group", "untile_group",
    "shift_group", "swap_group", "split_group", "join_group", "focus", "unfocus",
    "weaken_to_desync", "forget_init",
}

BARRIER_PREDS = {
    "barrier_block": "block_sync_mem",
    "barrier_magic": "magic_mem",
    "barrier_teardown": "block_sync_mem",
}
