"""Append-only workspace manifest linking artifacts to digests, seeds and configs."""

from __future__ import annotations

import json
import os
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

from .errors import ValidationError
from .store import file_digest

MANIFEST_NAME = "manifest.json"
LOCK_NAME = "manifest.lock"


class WorkspaceManifest:
    """Record of every artifact produced in a workspace directory.

    Entries are only ever appended.  Each write goes to a temporary file and
    is renamed into place; a lock file created with ``O_EXCL`` detects a
    concurrent writer.
    """

    def __init__(self, root, tool_version: str = ""):
        self.root = Path(root)
        self.path = self.root / MANIFEST_NAME
        self.tool_version = tool_version

    def load(self) -> dict:
        if not self.path.exists():
            return {"entries": []}
        with open(self.path) as fh:
            try:
                return json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{self.path}: {exc}") from exc

    @property
    def entries(self) -> list:
        return self.load()["entries"]

    def _relative(self, path) -> str:
        path = Path(path).resolve()
        try:
            return str(path.relative_to(self.root.resolve()))
        except ValueError:
            return str(path)

    @contextmanager
    def _lock(self):
        lock = self.root / LOCK_NAME
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ValidationError(f"workspace {self.root} is locked by another writer ({lock})") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            os.unlink(lock)

    def append(
        self,
        kind: str,
        path,
        command: str,
        seed: Optional[int] = None,
        config: Optional[dict] = None,
        inputs: Optional[dict] = None,
        digest: Optional[str] = None,
    ) -> dict:
        """Add one artifact entry; ``inputs`` maps input paths to their digests."""
        self.root.mkdir(parents=True, exist_ok=True)
        entry = {
            "kind": kind,
            "path": self._relative(path),
            "digest": digest or file_digest(path),
            "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "tool_version": self.tool_version,
            "command": command,
            "seed": seed,
            "config": config or {},
            "inputs": {self._relative(p): d for p, d in (inputs or {}).items()},
        }
        with self._lock():
            doc = self.load()
            doc["entries"].append(entry)
            tmp = self.path.with_name(self.path.name + ".tmp")
            with open(tmp, "w") as fh:
                json.dump(doc, fh, indent=2, sort_keys=True)
            os.replace(tmp, self.path)
        return entry

    def lookup(self, path) -> Optional[dict]:
        rel = self._relative(path)
        found = [e for e in self.entries if e["path"] == rel]
        return found[-1] if found else None

    def verify(self, path) -> Optional[str]:
        """Check a recorded artifact's digest; returns it (None if unrecorded)."""
        entry = self.lookup(path)
        if entry is None:
            return None
        digest = file_digest(path)
        if digest != entry["digest"]:
            raise ValidationError(f"{path}: digest differs from the workspace manifest")
        return digest

    def verify_all(self) -> list:
        """Paths whose current digest no longer matches (missing files included)."""
        bad = []
        for e in self.entries:
            p = Path(e["path"])
            p = p if p.is_absolute() else self.root / p
            if not p.exists() or file_digest(p) != e["digest"]:
                bad.append(e["path"])
        return bad
