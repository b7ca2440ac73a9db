"""Run manifests: config snapshots, input hashes, and artifact digests.

Every CLI run drops a manifest next to its artifacts. A manifest plus the
original inputs is enough to re-execute the run and check the outputs
byte for byte, which is what the `replay` subcommand does.
"""

from __future__ import annotations

import dataclasses
import datetime
import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__

MANIFEST_FORMAT = "run-manifest v1"
MANIFEST_NAME = "manifest.json"


class ManifestError(ValueError):
    pass


def _coerce(obj):
    if isinstance(obj, enum.Enum):
        return obj.value
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return dataclasses.asdict(obj)
    if hasattr(obj, "tolist"):          # numpy scalars and arrays
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON-serializable: {type(obj).__name__}")


def canonical_json(obj) -> str:
    """One rendering for every JSON we emit, so interfaces agree byte-wise."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      allow_nan=False, default=_coerce)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_dir(root: str | Path) -> str:
    """Digest of a directory: sorted relative paths and their file digests."""
    rootp = Path(root)
    if not rootp.is_dir():
        raise ManifestError(f"{root}: not a directory")
    h = hashlib.sha256()
    for p in sorted(rootp.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(rootp)).encode("utf-8"))
            h.update(b"\0")
            h.update(bytes.fromhex(sha256_file(p)))
    return h.hexdigest()


def hash_path(path: str | Path) -> str:
    p = Path(path)
    return sha256_dir(p) if p.is_dir() else sha256_file(p)


@dataclass
class RunManifest:
    """What a run consumed and produced, pinned tightly enough to replay."""

    command: str
    config: dict
    inputs: dict[str, str] = field(default_factory=dict)     # name -> digest
    artifacts: dict[str, str] = field(default_factory=dict)  # relpath -> digest
    seeds: dict[str, int] = field(default_factory=dict)
    versions: dict[str, str] = field(default_factory=dict)
    created: str = ""

    def __post_init__(self):
        if not self.command:
            raise ManifestError("command must be non-empty")
        self.versions.setdefault("package", __version__)
        self.versions.setdefault("manifest", MANIFEST_FORMAT)
        if not self.created:
            now = datetime.datetime.now(datetime.timezone.utc)
            self.created = now.isoformat(timespec="seconds")


def record_artifacts(out_dir: str | Path,
                     skip: tuple[str, ...] = (MANIFEST_NAME,)) -> dict[str, str]:
    """Digest every file under out_dir except the manifest itself."""
    outp = Path(out_dir)
    artifacts: dict[str, str] = {}
    for p in sorted(outp.rglob("*")):
        if not p.is_file():
            continue
        rel = str(p.relative_to(outp))
        if rel in skip:
            continue
        artifacts[rel] = sha256_file(p)
    return artifacts


def save_manifest(m: RunManifest, out_dir: str | Path) -> Path:
    path = Path(out_dir) / MANIFEST_NAME
    payload = {
        "format": MANIFEST_FORMAT,
        "command": m.command,
        "config": m.config,
        "inputs": m.inputs,
        "artifacts": m.artifacts,
        "seeds": m.seeds,
        "versions": m.versions,
        "created": m.created,
    }
    path.write_text(canonical_json(payload) + "\n", encoding="utf-8")
    return path


def load_manifest(path: str | Path) -> RunManifest:
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    try:
        payload = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ManifestError(f"{p}: manifest not found") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{p}: not valid JSON: {exc}") from exc
    if payload.get("format") != MANIFEST_FORMAT:
        raise ManifestError(
            f"{p}: unsupported manifest format {payload.get('format')!r}")
    for key in ("command", "config"):
        if key not in payload:
            raise ManifestError(f"{p}: missing field {key!r}")
    return RunManifest(
        command=payload["command"],
        config=payload["config"],
        inputs=payload.get("inputs", {}),
        artifacts=payload.get("artifacts", {}),
        seeds=payload.get("seeds", {}),
        versions=payload.get("versions", {}),
        created=payload.get("created", ""),
    )


def diff_artifacts(a: dict[str, str], b: dict[str, str]) -> list[str]:
    """Human-readable mismatch lines; empty means bit-identical."""
    lines = []
    for rel in sorted(set(a) | set(b)):
        if rel not in b:
            lines.append(f"missing in replay: {rel}")
        elif rel not in a:
            lines.append(f"extra in replay: {rel}")
        elif a[rel] != b[rel]:
            lines.append(f"differs: {rel}")
    return lines
