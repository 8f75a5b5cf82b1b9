"""Run manifests: every command records its resolved configuration, input
hashes, and outputs, so a run can be audited and replayed byte for byte.

Manifests are immutable once written; a replay writes a sibling manifest
rather than touching the original. Output comparisons exclude manifest
files themselves, which carry timestamps and run ids by design.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .container import atomic_write_bytes
from .errors import ConfigurationError

MANIFEST_NAME = "manifest.json"


def hash_path(path: str | Path) -> str:
    """sha256 of a file's bytes, or of a directory's sorted relative file
    names and bytes (commonly reported as sha256:<hex>)."""
    path = Path(path)
    digest = hashlib.sha256()
    if path.is_file():
        digest.update(path.read_bytes())
    elif path.is_dir():
        files = sorted(p for p in path.rglob("*") if p.is_file())
        for p in files:
            digest.update(str(p.relative_to(path)).encode())
            digest.update(b"\0")
            digest.update(p.read_bytes())
            digest.update(b"\0")
    else:
        raise FileNotFoundError(f"cannot hash missing path {path}")
    return "sha256:" + digest.hexdigest()


def new_run_id(command: str) -> str:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
    return f"{command}-{stamp}-{os.urandom(3).hex()}"


def enumerate_outputs(out_dir: str | Path) -> list[str]:
    """Sorted relative paths of all files under out_dir, manifests excluded."""
    out_dir = Path(out_dir)
    paths = []
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and not p.name.startswith("manifest"):
            paths.append(str(p.relative_to(out_dir)))
    return paths


@dataclass(frozen=True)
class RunManifest:
    run_id: str
    command: str
    created_at: str
    package_version: str
    effective_config: dict
    input_hashes: dict = field(default_factory=dict)
    output_paths: list = field(default_factory=list)

    def write(self, out_dir: str | Path) -> Path:
        """Write into out_dir without clobbering an existing manifest."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / MANIFEST_NAME
        if path.exists():
            path = out_dir / f"manifest_{self.run_id}.json"
        payload = {
            "run_id": self.run_id,
            "command": self.command,
            "created_at": self.created_at,
            "package_version": self.package_version,
            "effective_config": self.effective_config,
            "input_hashes": self.input_hashes,
            "output_paths": self.output_paths,
        }
        atomic_write_bytes(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode())
        return path

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        row = json.loads(Path(path).read_text())
        missing = {f for f in cls.__dataclass_fields__} - set(row)
        if missing:
            raise ConfigurationError(f"manifest {path} is missing fields {sorted(missing)}")
        return cls(**{f: row[f] for f in cls.__dataclass_fields__})

    def verify_inputs(self) -> list[str]:
        """Paths whose current hash differs from the recorded one."""
        stale = []
        for path, recorded in self.input_hashes.items():
            try:
                current = hash_path(path)
            except FileNotFoundError:
                stale.append(path)
                continue
            if current != recorded:
                stale.append(path)
        return stale


def build_manifest(
    command: str,
    effective_config: dict,
    input_paths: dict[str, str | Path],
    out_dir: str | Path,
    package_version: str,
) -> RunManifest:
    input_hashes = {str(path): hash_path(path) for path in input_paths.values() if path}
    return RunManifest(
        run_id=new_run_id(command),
        command=command,
        created_at=datetime.now(timezone.utc).isoformat(),
        package_version=package_version,
        effective_config=effective_config,
        input_hashes=input_hashes,
        output_paths=enumerate_outputs(out_dir),
    )
