"""Syscall trace parsing.

Turns the line-oriented output of a follow-forks file tracer (strace -f
style) into the set of absolute container paths the workload accessed.
The accepted grammar is documented in docs/trace-format.md. Parsing keeps
per-PID state: a current working directory maintained from chdir/fchdir
and inherited across fork/clone, and a table of file descriptors returned
by successful opens (used to resolve fchdir and dirfd-relative calls).
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from os import PathLike, fspath
from typing import IO, Iterable

log = logging.getLogger(__name__)

# Syscalls whose path argument marks the file as accessed. The value is the
# index of the path argument; *at-family calls take a dirfd first.
EMITTING_SYSCALLS = {
    "open": 0,
    "creat": 0,
    "execve": 0,
    "stat": 0,
    "lstat": 0,
    "access": 0,
    "readlink": 0,
    "openat": 1,
    "openat2": 1,
    "execveat": 1,
    "newfstatat": 1,
    "faccessat": 1,
    "faccessat2": 1,
    "readlinkat": 1,
}

# Calls tracked for state only; they never emit an accessed path themselves.
STATE_SYSCALLS = {"chdir", "fchdir", "fork", "vfork", "clone", "clone3", "close"}

# Open-family calls whose successful return value is a descriptor worth
# remembering (fchdir and dirfd resolution look these up later).
FD_RETURNING = {"open", "openat", "openat2", "creat"}

_LINE_RE = re.compile(r"^\s*(?P<pid>\d+)\s+(?P<rest>.*)$")
_CALL_RE = re.compile(r"^(?P<name>[a-zA-Z0-9_]+)\((?P<body>.*)$", re.DOTALL)
_NOISE_RE = re.compile(r"^(---\s.*---|\+\+\+\s.*\+\+\+)$")
_UNFINISHED_RE = re.compile(r"^(?P<name>[a-zA-Z0-9_]+)\((?P<args>.*)<unfinished \.\.\.>$")
_RESUMED_RE = re.compile(r"^<\.\.\. (?P<name>[a-zA-Z0-9_]+) resumed>(?P<rest>.*)$", re.DOTALL)
_DIRFD_RE = re.compile(r"^(?P<fd>\d+)(<(?P<path>[^>]*)>)?$")


@dataclass
class TraceStats:
    """Counters describing how a trace was parsed."""

    lines: int = 0
    parsed: int = 0
    unparsed: int = 0
    matched: int = 0
    failed_excluded: int = 0
    unresolvable: int = 0
    outside_root: int = 0


@dataclass(frozen=True)
class AccessSet:
    """Absolute normalized container paths a workload touched, plus stats."""

    paths: frozenset[str]
    stats: TraceStats = field(default_factory=TraceStats)

    def __post_init__(self):
        for p in self.paths:
            if not p.startswith("/"):
                raise ValueError(f"access path must be absolute: {p!r}")

    def __or__(self, other: "AccessSet") -> "AccessSet":
        return AccessSet(self.paths | other.paths)


def normalize_path(cwd: str, raw: str) -> str:
    """Lexically resolve ``raw`` against ``cwd``.

    Joins relative paths onto cwd and collapses '.' and '..' segments
    without consulting any real filesystem. '..' escaping above the root
    clamps at '/' (a diagnostic is logged).
    """
    path, escaped = _normalize(cwd, raw)
    if escaped:
        log.debug("path %r escapes above root; clamped", raw)
    return path


def _normalize(cwd: str, raw: str) -> tuple[str, bool]:
    if not cwd.startswith("/"):
        raise ValueError(f"cwd must be absolute: {cwd!r}")
    if not raw.startswith("/"):
        raw = cwd.rstrip("/") + "/" + raw
    stack: list[str] = []
    escaped = False
    for seg in raw.split("/"):
        if seg in ("", "."):
            continue
        if seg == "..":
            if stack:
                stack.pop()
            else:
                escaped = True
        else:
            stack.append(seg)
    return "/" + "/".join(stack), escaped


def _split_args(body: str) -> list[str]:
    """Split a syscall argument list at top-level commas.

    Quotes (with backslash escapes) and bracket nesting are respected, so
    struct arguments like {st_mode=...} stay in one piece.
    """
    args: list[str] = []
    depth = 0
    in_str = False
    esc = False
    cur: list[str] = []
    for ch in body:
        if in_str:
            cur.append(ch)
            if esc:
                esc = False
            elif ch == "\\":
                esc = True
            elif ch == '"':
                in_str = False
            continue
        if ch == '"':
            in_str = True
            cur.append(ch)
        elif ch in "([{":
            depth += 1
            cur.append(ch)
        elif ch in ")]}":
            depth -= 1
            cur.append(ch)
        elif ch == "," and depth == 0:
            args.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    if cur:
        args.append("".join(cur).strip())
    return args


def _unquote(arg: str) -> tuple[str | None, bool]:
    """Decode a C-quoted string argument.

    Returns (value, truncated). Truncated strings (strace's trailing '...'
    outside the closing quote) cannot be trusted as full paths.
    """
    if not arg.startswith('"'):
        return None, False
    out: list[str] = []
    i = 1
    while i < len(arg):
        ch = arg[i]
        if ch == "\\":
            nxt = arg[i + 1 : i + 2]
            if nxt in ('"', "\\"):
                out.append(nxt)
                i += 2
            elif nxt == "n":
                out.append("\n")
                i += 2
            elif nxt == "t":
                out.append("\t")
                i += 2
            elif nxt == "x":
                out.append(chr(int(arg[i + 2 : i + 4], 16)))
                i += 4
            elif nxt.isdigit():
                j = i + 1
                while j < len(arg) and j < i + 4 and arg[j].isdigit():
                    j += 1
                out.append(chr(int(arg[i + 1 : j], 8)))
                i = j
            else:
                out.append(nxt)
                i += 2
        elif ch == '"':
            truncated = arg[i + 1 :].startswith("...")
            return "".join(out), truncated
        else:
            out.append(ch)
            i += 1
    return "".join(out), True


def _split_ret(body: str) -> tuple[str, str] | None:
    """Split 'args...) = ret ...' at the last top-level ') = '."""
    idx = body.rfind(") = ")
    if idx < 0:
        return None
    return body[:idx], body[idx + 4 :].strip()


class _PidState:
    __slots__ = ("cwd", "fds")

    def __init__(self, cwd: str | None):
        self.cwd = cwd
        self.fds: dict[int, str] = {}

    def clone(self) -> "_PidState":
        child = _PidState(self.cwd)
        child.fds = dict(self.fds)
        return child


def _iter_lines(log_input) -> Iterable[str]:
    if isinstance(log_input, (str, PathLike)):
        with open(fspath(log_input), "r", encoding="utf-8", errors="replace") as f:
            yield from f
    else:
        yield from log_input


def parse_trace(log_input: str | PathLike | IO[str] | Iterable[str],
                root_prefix: str = "/",
                include_failed: bool = False) -> AccessSet:
    """Extract the accessed-file set from a multi-process trace log.

    ``root_prefix`` is the container root as seen by the tracer; resolved
    paths are rebased under it and paths outside it are dropped with a
    diagnostic. Failed calls are excluded unless ``include_failed`` is set.
    Unparseable lines are counted and skipped, never fatal.
    """
    root = "/" + root_prefix.strip("/") if root_prefix.strip("/") else "/"
    stats = TraceStats()
    paths: set[str] = set()
    states: dict[int, _PidState] = {}
    pending: dict[int, tuple[str, str]] = {}

    def state_for(pid: int) -> _PidState:
        if pid not in states:
            # Root process of the trace: assume it starts at the container
            # root, the common case for container entrypoints.
            states[pid] = _PidState(root)
        return states[pid]

    def resolve(pid: int, raw: str, dirfd: str | None) -> str | None:
        """Resolve a path argument to an absolute trace-namespace path."""
        if raw.startswith("/"):
            return _normalize("/", raw)[0]
        st = state_for(pid)
        base: str | None
        if dirfd is None or dirfd == "AT_FDCWD":
            base = st.cwd
        else:
            m = _DIRFD_RE.match(dirfd)
            if not m:
                return None
            if m.group("path"):
                base = m.group("path")
            else:
                base = st.fds.get(int(m.group("fd")))
        if base is None:
            return None
        return _normalize(base, raw)[0]

    def rebase(path: str) -> str | None:
        if root == "/":
            return path
        if path == root:
            return "/"
        if path.startswith(root + "/"):
            return path[len(root):]
        return None

    for line in _iter_lines(log_input):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        stats.lines += 1
        m = _LINE_RE.match(line)
        if not m:
            stats.unparsed += 1
            continue
        pid = int(m.group("pid"))
        rest = m.group("rest").strip()

        if _NOISE_RE.match(rest):
            stats.parsed += 1
            continue

        um = _UNFINISHED_RE.match(rest)
        if um:
            pending[pid] = (um.group("name"), um.group("args"))
            stats.parsed += 1
            continue
        rm = _RESUMED_RE.match(rest)
        if rm:
            prev = pending.pop(pid, None)
            if prev is None or prev[0] != rm.group("name"):
                stats.unparsed += 1
                continue
            rest = f"{prev[0]}({prev[1]}{rm.group('rest').lstrip()}"

        cm = _CALL_RE.match(rest)
        if not cm:
            stats.unparsed += 1
            continue
        split = _split_ret(cm.group("body"))
        if split is None:
            stats.unparsed += 1
            continue
        argbody, retpart = split
        name = cm.group("name")
        rettok = retpart.split(None, 1)[0] if retpart else ""
        # Tracers run with fd annotation print returns like "3</opt/app>".
        rettok = rettok.split("<", 1)[0]
        try:
            retval = int(rettok)
        except ValueError:
            retval = None  # "?" or garbage; treat as failure
        failed = retval is None or retval < 0
        stats.parsed += 1

        if name in ("fork", "vfork", "clone", "clone3"):
            if not failed and retval > 0:
                states[retval] = state_for(pid).clone()
            continue

        if name == "chdir":
            if failed:
                continue
            args = _split_args(argbody)
            target, truncated = _unquote(args[0]) if args else (None, False)
            st = state_for(pid)
            if target is None or truncated:
                st.cwd = None
                stats.unresolvable += 1
            elif target.startswith("/"):
                st.cwd = _normalize("/", target)[0]
            elif st.cwd is None:
                stats.unresolvable += 1
            else:
                st.cwd = _normalize(st.cwd, target)[0]
            continue

        if name == "fchdir":
            if failed:
                continue
            args = _split_args(argbody)
            st = state_for(pid)
            fd_path = None
            if args:
                dm = _DIRFD_RE.match(args[0])
                if dm:
                    fd_path = dm.group("path") or st.fds.get(int(dm.group("fd")))
            if fd_path is None:
                st.cwd = None
                stats.unresolvable += 1
            else:
                st.cwd = fd_path
            continue

        if name == "close":
            if not failed:
                args = _split_args(argbody)
                if args and args[0].split("<")[0].isdigit():
                    state_for(pid).fds.pop(int(args[0].split("<")[0]), None)
            continue

        if name not in EMITTING_SYSCALLS:
            continue  # recognized grammar, uninteresting syscall

        stats.matched += 1
        if failed and not include_failed:
            stats.failed_excluded += 1
            continue
        arg_idx = EMITTING_SYSCALLS[name]
        args = _split_args(argbody)
        if len(args) <= arg_idx:
            stats.unresolvable += 1
            continue
        raw, truncated = _unquote(args[arg_idx])
        if raw is None or truncated:
            stats.unresolvable += 1
            continue
        dirfd = args[0] if arg_idx == 1 else None
        resolved = resolve(pid, raw, dirfd)
        if resolved is None:
            stats.unresolvable += 1
            continue
        if name in FD_RETURNING and not failed and retval is not None and retval >= 0:
            state_for(pid).fds[retval] = resolved
        container_path = rebase(resolved)
        if container_path is None:
            stats.outside_root += 1
            log.debug("dropping path outside container root: %s", resolved)
            continue
        paths.add(container_path)

    if pending:
        stats.unparsed += len(pending)
    return AccessSet(frozenset(paths), stats)
