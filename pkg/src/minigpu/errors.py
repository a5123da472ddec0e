"""Typed diagnostics. Every check failure carries a stable error code, the
offending node id, and a source location when one is known."""

from __future__ import annotations


class CheckError(Exception):
    def __init__(self, code: str, message: str, nid: int | None = None,
                 loc: tuple[int, int] | None = None, source: str = "<mem>"):
        self.code = code
        self.message = message
        self.nid = nid
        self.loc = loc
        self.source = source
        super().__init__(self.render())

    def render(self) -> str:
        line, col = self.loc if self.loc else (0, 0)
        return f"{self.source}:{line}:{col}: {self.code}: {self.message}"


# Stable codes (exit-status relevant; see cli.py)
E_NOMATCH = "E-NOMATCH"
E_AMBIG = "E-AMBIG"
E_LEAK = "E-LEAK"
E_POST = "E-POST"
E_DESYNC = "E-DESYNC"
E_THREADS_CTX = "E-THREADS-CTX"
E_DIV = "E-DIV"
E_RANGE = "E-RANGE"
E_SMEM = "E-SMEM"
E_READ = "E-READ"
E_WRITE = "E-WRITE"
E_CALL = "E-CALL"
E_GHOST = "E-GHOST"
E_INVARIANT = "E-INVARIANT"
E_SCOPE = "E-SCOPE"
E_PROP = "E-PROP"
E_PHASE = "E-PHASE"
E_TARGET = "E-TARGET"
E_INTERNAL = "E-INTERNAL"
