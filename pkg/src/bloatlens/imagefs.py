"""Container filesystem ingestion.

Builds an immutable file inventory (:class:`FileSet`) from one of three
sources: an extracted rootfs directory, a single flat tar, or an ordered
stack of image layer tars with OCI whiteout handling. The inventory records
paths, kinds and apparent sizes only; file content stays in the source and
is read back through a :class:`ContentSource` when needed.
"""

from __future__ import annotations

import logging
import os
import stat
import tarfile
from dataclasses import dataclass
from types import MappingProxyType
from typing import IO, Iterable, Iterator, Mapping

from .errors import IngestError, MaterializeError

log = logging.getLogger(__name__)

REGULAR = "regular"
DIRECTORY = "directory"
SYMLINK = "symlink"
OTHER = "other"

KINDS = (REGULAR, DIRECTORY, SYMLINK, OTHER)

# Origin labels for FileSet provenance.
ORIGIN_ROOTFS = "rootfs-dir"
ORIGIN_FLAT_TAR = "flat-tar"
ORIGIN_LAYERED = "layered"

WHITEOUT_PREFIX = ".wh."
OPAQUE_MARKER = ".wh..wh..opq"


def _validate_path(path: str) -> None:
    if path == "/":
        return
    if not path.startswith("/") or path.endswith("/"):
        raise ValueError(f"path must be absolute without trailing slash: {path!r}")
    for seg in path.split("/")[1:]:
        if seg in ("", ".", ".."):
            raise ValueError(f"path contains empty or dot segment: {path!r}")


def parent_of(path: str) -> str:
    """Parent directory path; the parent of '/' is '/'."""
    if path == "/":
        return "/"
    head = path.rsplit("/", 1)[0]
    return head if head else "/"


@dataclass(frozen=True)
class FileEntry:
    """One filesystem object: an absolute normalized path plus kind and size.

    Only regular files carry a size; directories, symlinks and special files
    count zero bytes. ``link_target`` is the raw (possibly relative) target
    string and is present exactly for symlinks.
    """

    path: str
    kind: str
    size: int = 0
    link_target: str | None = None

    def __post_init__(self):
        _validate_path(self.path)
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r} for {self.path!r}")
        if self.size < 0:
            raise ValueError(f"negative size for {self.path!r}")
        if self.kind != REGULAR and self.size != 0:
            raise ValueError(f"non-regular entry {self.path!r} must have size 0")
        if (self.kind == SYMLINK) != (self.link_target is not None):
            raise ValueError(f"link_target is required iff kind=symlink: {self.path!r}")


class FileSet:
    """Immutable map of path -> FileEntry with a provenance label.

    Equality compares entries only (paths, kinds, sizes, link targets);
    origin is metadata. Loaders guarantee that every non-root entry's parent
    is present as a directory; derived sets such as the bloat complement do
    not (see :func:`check_parent_closure`).
    """

    __slots__ = ("entries", "origin")

    def __init__(self, entries: Mapping[str, FileEntry] | Iterable[FileEntry], origin: str):
        if isinstance(entries, Mapping):
            items = dict(entries)
        else:
            items = {}
            for e in entries:
                if e.path in items:
                    raise ValueError(f"duplicate path {e.path!r}")
                items[e.path] = e
        for path, entry in items.items():
            if path != entry.path:
                raise ValueError(f"key {path!r} does not match entry path {entry.path!r}")
        object.__setattr__(self, "entries", MappingProxyType(items))
        object.__setattr__(self, "origin", origin)

    def __setattr__(self, name, value):
        raise AttributeError("FileSet is immutable")

    def __contains__(self, path: str) -> bool:
        return path in self.entries

    def __getitem__(self, path: str) -> FileEntry:
        return self.entries[path]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FileSet):
            return NotImplemented
        return dict(self.entries) == dict(other.entries)

    def __ne__(self, other) -> bool:
        eq = self.__eq__(other)
        return eq if eq is NotImplemented else not eq

    def __repr__(self) -> str:
        return f"FileSet({len(self.entries)} entries, origin={self.origin!r})"


def check_parent_closure(fs: FileSet) -> list[str]:
    """Paths whose parent is missing or not a directory (empty when closed)."""
    bad = []
    for path in fs.entries:
        if path == "/":
            continue
        parent = parent_of(path)
        entry = fs.entries.get(parent)
        if entry is None or entry.kind != DIRECTORY:
            bad.append(path)
    return sorted(bad)


def total_size(fs: FileSet) -> int:
    """Total apparent size in bytes: the sum over regular files only."""
    return sum(e.size for e in fs.entries.values() if e.kind == REGULAR)


class _Builder:
    """Accumulates entries and inserts implied parent directories."""

    def __init__(self):
        self.items: dict[str, FileEntry] = {"/": FileEntry("/", DIRECTORY)}

    def ensure_parents(self, path: str) -> None:
        parent = parent_of(path)
        missing = []
        while parent not in self.items:
            missing.append(parent)
            parent = parent_of(parent)
        for p in reversed(missing):
            self.items[p] = FileEntry(p, DIRECTORY)

    def add(self, entry: FileEntry) -> None:
        if entry.path == "/":
            return
        self.ensure_parents(entry.path)
        self.items[entry.path] = entry

    def build(self, origin: str) -> FileSet:
        return FileSet(self.items, origin)


def load_rootfs(dir_path: str | os.PathLike) -> FileSet:
    """Inventory a rootfs directory, rebasing it onto '/'.

    Symlinks are recorded, never followed. Objects that cannot be
    classified or statted degrade to kind=other with a warning instead of
    aborting; real images contain sockets and device nodes.
    """
    root = os.fspath(dir_path)
    if not os.path.isdir(root):
        raise IngestError(f"rootfs is not a readable directory: {root}")
    builder = _Builder()

    def rebase(full: str) -> str:
        rel = os.path.relpath(full, root)
        return "/" if rel == "." else "/" + rel.replace(os.sep, "/")

    def walk(dirfull: str) -> None:
        try:
            with os.scandir(dirfull) as it:
                children = sorted(it, key=lambda d: d.name)
        except OSError as exc:
            if dirfull == root:
                raise IngestError(f"cannot read rootfs root: {exc}") from exc
            log.warning("unreadable directory %s: %s", dirfull, exc)
            return
        for child in children:
            path = rebase(child.path)
            try:
                st = child.stat(follow_symlinks=False)
                if stat.S_ISLNK(st.st_mode):
                    target = os.readlink(child.path)
                    builder.add(FileEntry(path, SYMLINK, 0, target))
                elif stat.S_ISDIR(st.st_mode):
                    builder.add(FileEntry(path, DIRECTORY))
                    walk(child.path)
                elif stat.S_ISREG(st.st_mode):
                    builder.add(FileEntry(path, REGULAR, st.st_size))
                else:
                    builder.add(FileEntry(path, OTHER))
            except OSError as exc:
                log.warning("unreadable entry %s: %s", child.path, exc)
                builder.add(FileEntry(path, OTHER))

    walk(root)
    return builder.build(ORIGIN_ROOTFS)


def _tar_member_path(name: str) -> str | None:
    """Normalize a tar member name to an absolute path; None for the root."""
    name = name.strip("/")
    if name.startswith("./"):
        name = name[2:]
    if name in ("", "."):
        return None
    parts = [p for p in name.split("/") if p not in ("", ".")]
    if not parts or ".." in parts:
        return None
    return "/" + "/".join(parts)


def _entry_from_member(member: tarfile.TarInfo, path: str,
                       sizes: Mapping[str, FileEntry]) -> FileEntry:
    if member.isdir():
        return FileEntry(path, DIRECTORY)
    if member.issym():
        return FileEntry(path, SYMLINK, 0, member.linkname)
    if member.islnk():
        # Hardlink: record an independent regular entry carrying the full
        # size of the link target (tar stores the bytes once, size 0 here).
        target = _tar_member_path(member.linkname)
        target_entry = sizes.get(target) if target else None
        if target_entry is None:
            log.warning("hardlink %s points outside archive (%s)", path, member.linkname)
            return FileEntry(path, REGULAR, 0)
        return FileEntry(path, REGULAR, target_entry.size)
    if member.isfile():
        return FileEntry(path, REGULAR, member.size)
    return FileEntry(path, OTHER)


def _iter_tar(source, label: str):
    """Yield (tarfile, member) pairs, wrapping parse failures as IngestError."""
    try:
        if isinstance(source, (str, os.PathLike)):
            tf = tarfile.open(os.fspath(source), mode="r:*")
        else:
            tf = tarfile.open(fileobj=source, mode="r:*")
    except (tarfile.TarError, OSError) as exc:
        raise IngestError(
            f"{label}: malformed tar at byte offset 0: cannot open: {exc}"
        ) from exc
    with tf:
        while True:
            try:
                member = tf.next()
            except tarfile.TarError as exc:
                offset = getattr(tf, "offset", "?")
                raise IngestError(
                    f"{label}: malformed tar header at byte offset {offset}: {exc}"
                ) from exc
            if member is None:
                # tarfile quietly stops at the first invalid mid-archive
                # header; a legitimate end of archive leaves only zero
                # padding behind.
                try:
                    tf.fileobj.seek(tf.offset)
                    tail = tf.fileobj.read()
                except (OSError, ValueError, AttributeError):
                    tail = b""
                if tail.strip(b"\x00"):
                    raise IngestError(
                        f"{label}: malformed tar header at byte offset {tf.offset}"
                    )
                break
            yield tf, member


def load_flat_tar(source: str | os.PathLike | IO[bytes]) -> FileSet:
    """Inventory a flat (non-layered) tar; gzip wrapping is auto-detected."""
    entries: dict[str, FileEntry] = {}
    for _, member in _iter_tar(source, "flat tar"):
        path = _tar_member_path(member.name)
        if path is None:
            continue
        entries[path] = _entry_from_member(member, path, entries)
    builder = _Builder()
    for path in entries:
        builder.add(entries[path])
    return builder.build(ORIGIN_FLAT_TAR)


def _apply_whiteouts(union: dict[str, FileEntry], members: list[tarfile.TarInfo]) -> None:
    opaque_dirs = []
    whiteouts = []
    for member in members:
        path = _tar_member_path(member.name)
        if path is None:
            continue
        base = path.rsplit("/", 1)[-1]
        if base == OPAQUE_MARKER:
            opaque_dirs.append(parent_of(path))
        elif base.startswith(WHITEOUT_PREFIX):
            parent = parent_of(path)
            prefix = "" if parent == "/" else parent
            whiteouts.append(prefix + "/" + base[len(WHITEOUT_PREFIX):])
    for d in opaque_dirs:
        prefix = "/" if d == "/" else d + "/"
        for p in [p for p in union if p != d and p.startswith(prefix)]:
            del union[p]
    for w in whiteouts:
        union.pop(w, None)
        prefix = w + "/"
        for p in [p for p in union if p.startswith(prefix)]:
            del union[p]


def load_layers(layer_tars: Iterable[str | os.PathLike | IO[bytes]]) -> FileSet:
    """Union an ordered (base-first) stack of layer tars.

    Whiteout entries follow the OCI image layer spec: '.wh.<name>' deletes
    <name> from the union of the lower layers, '.wh..wh..opq' hides all
    prior contents of its directory. Whiteouts act on lower layers only,
    so the layer's own additions are applied after its deletions. Later
    layers replace earlier entries at the same path; replacing a directory
    with a non-directory drops the old subtree.
    """
    layers = list(layer_tars)
    if not layers:
        raise IngestError("no layers given")
    union: dict[str, FileEntry] = {}
    for i, layer in enumerate(layers):
        members = [m for _, m in _iter_tar(layer, f"layer {i}")]
        _apply_whiteouts(union, members)
        for member in members:
            path = _tar_member_path(member.name)
            if path is None:
                continue
            base = path.rsplit("/", 1)[-1]
            if base.startswith(WHITEOUT_PREFIX):
                continue
            entry = _entry_from_member(member, path, union)
            old = union.get(path)
            if old is not None and old.kind == DIRECTORY and entry.kind != DIRECTORY:
                prefix = path + "/"
                for p in [p for p in union if p.startswith(prefix)]:
                    del union[p]
            union[path] = entry
    builder = _Builder()
    for path in union:
        builder.add(union[path])
    return builder.build(ORIGIN_LAYERED)


class ContentSource:
    """Reads file bytes and modes back out of the image a FileSet came from."""

    def read(self, path: str) -> bytes:
        raise NotImplementedError

    def mode(self, path: str) -> int | None:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class RootfsSource(ContentSource):
    def __init__(self, root: str | os.PathLike):
        self.root = os.fspath(root)

    def _full(self, path: str) -> str:
        return os.path.join(self.root, path.lstrip("/"))

    def read(self, path: str) -> bytes:
        try:
            with open(self._full(path), "rb") as f:
                return f.read()
        except OSError as exc:
            raise MaterializeError(f"cannot read {path}: {exc}") from exc

    def mode(self, path: str) -> int | None:
        try:
            return stat.S_IMODE(os.lstat(self._full(path)).st_mode)
        except OSError:
            return None


class _TarIndexSource(ContentSource):
    """Shared path->member index over one or more open tarfiles."""

    def __init__(self):
        self._tars: list[tarfile.TarFile] = []
        self._index: dict[str, tuple[tarfile.TarFile, tarfile.TarInfo]] = {}

    def _add_tar(self, source, label: str) -> None:
        try:
            if isinstance(source, (str, os.PathLike)):
                tf = tarfile.open(os.fspath(source), mode="r:*")
            else:
                tf = tarfile.open(fileobj=source, mode="r:*")
            members = tf.getmembers()
        except (tarfile.TarError, OSError) as exc:
            raise IngestError(f"{label}: cannot index tar: {exc}") from exc
        self._tars.append(tf)
        for member in members:
            path = _tar_member_path(member.name)
            if path is not None:
                self._index[path] = (tf, member)

    def read(self, path: str) -> bytes:
        hit = self._index.get(path)
        if hit is None:
            raise MaterializeError(f"cannot read {path}: not present in source tar")
        tf, member = hit
        if member.islnk():
            target = _tar_member_path(member.linkname)
            if target is None or target not in self._index:
                raise MaterializeError(f"cannot read {path}: dangling hardlink")
            tf, member = self._index[target]
        fobj = tf.extractfile(member)
        if fobj is None:
            raise MaterializeError(f"cannot read {path}: not a regular member")
        with fobj:
            return fobj.read()

    def mode(self, path: str) -> int | None:
        hit = self._index.get(path)
        return hit[1].mode if hit else None

    def close(self) -> None:
        for tf in self._tars:
            try:
                tf.close()
            except OSError:
                pass


class FlatTarSource(_TarIndexSource):
    def __init__(self, source: str | os.PathLike | IO[bytes]):
        super().__init__()
        self._add_tar(source, "flat tar")


class LayeredSource(_TarIndexSource):
    """Content source over a layer stack: the last definition of a path wins."""

    def __init__(self, layer_tars: Iterable[str | os.PathLike | IO[bytes]]):
        super().__init__()
        for i, layer in enumerate(layer_tars):
            self._add_tar(layer, f"layer {i}")
