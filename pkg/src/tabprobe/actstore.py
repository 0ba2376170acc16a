"""On-disk activation store.

Layout under the store root::

    {run_id}/manifest.json
    {run_id}/{fit_digest}/L{layer:02d}_{tokensel}.f32   raw little-endian float32
    {run_id}/{fit_digest}/L{layer:02d}_{tokensel}.json  shape, roles, checksum

Keys are the relative paths without suffix. One writer per run directory;
every file is written to a temporary name and renamed into place.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .checksum import fnv1a_hex
from .errors import ConfigurationError, CorruptionError, NotFoundError

TOKEN_SELECTIONS = ("all", "answer_only")


@dataclass
class ActivationRecord:
    run_id: str
    fit_digest: str
    layer: int
    token_roles: tuple[str, ...]
    row_roles: tuple[str, ...]
    values: np.ndarray  # float32, (n, t, k)
    tokensel: str = "all"

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        self.token_roles = tuple(self.token_roles)
        self.row_roles = tuple(self.row_roles)
        if self.values.ndim != 3:
            raise ConfigurationError(f"activation values must be 3-d, got shape {self.values.shape}")
        n, t, _ = self.values.shape
        if len(self.token_roles) != t:
            raise ConfigurationError(f"{len(self.token_roles)} token roles for {t} tokens")
        if len(self.row_roles) != n:
            raise ConfigurationError(f"{len(self.row_roles)} row roles for {n} rows")
        if self.tokensel not in TOKEN_SELECTIONS:
            raise ConfigurationError(f"unknown token selection {self.tokensel!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def key(self) -> str:
        return f"{self.run_id}/{self.fit_digest}/L{self.layer:02d}_{self.tokensel}"

    def payload(self) -> bytes:
        return self.values.astype("<f4", copy=False).tobytes(order="C")


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


class ActivationStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    # -- writing --------------------------------------------------------------

    def open_run(self, run_id: str, model: str = "", spec_digests: list[str] | None = None) -> None:
        run_dir = self.root / run_id
        run_dir.mkdir(parents=True, exist_ok=True)
        path = run_dir / "manifest.json"
        if path.exists():
            manifest = json.loads(path.read_text())
        else:
            manifest = {
                "run_id": run_id,
                "model": model,
                "spec_digests": [],
                "keys": [],
                "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
                "tool_version": __version__,
            }
        merged = set(manifest["spec_digests"]) | set(spec_digests or [])
        manifest["spec_digests"] = sorted(merged)
        _atomic_write(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())

    def manifest(self, run_id: str) -> dict:
        path = self.root / run_id / "manifest.json"
        if not path.exists():
            raise NotFoundError(f"no manifest for run {run_id!r}")
        return json.loads(path.read_text())

    def put(self, record: ActivationRecord) -> str:
        manifest_path = self.root / record.run_id / "manifest.json"
        if not manifest_path.exists():
            raise ConfigurationError(f"run {record.run_id!r} is not open for writing")
        payload = record.payload()
        base = self.root / record.key
        base.parent.mkdir(parents=True, exist_ok=True)
        sidecar = {
            "run_id": record.run_id,
            "fit_digest": record.fit_digest,
            "layer": record.layer,
            "tokensel": record.tokensel,
            "shape": list(record.shape),
            "token_roles": list(record.token_roles),
            "row_roles": list(record.row_roles),
            "dtype": "<f4",
            "checksum": fnv1a_hex(payload),
        }
        _atomic_write(base.with_suffix(".f32"), payload)
        _atomic_write(base.with_suffix(".json"), (json.dumps(sidecar, sort_keys=True) + "\n").encode())
        manifest = json.loads(manifest_path.read_text())
        manifest["keys"] = sorted(set(manifest["keys"]) | {record.key})
        _atomic_write(manifest_path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
        return record.key

    # -- reading --------------------------------------------------------------

    def exists(self, key: str) -> bool:
        base = self.root / key
        return base.with_suffix(".json").exists() and base.with_suffix(".f32").exists()

    def get(self, key: str) -> ActivationRecord:
        base = self.root / key
        if not self.exists(key):
            raise NotFoundError(f"no activation record at {key!r}")
        meta = json.loads(base.with_suffix(".json").read_text())
        payload = base.with_suffix(".f32").read_bytes()
        shape = tuple(meta["shape"])
        if len(payload) != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CorruptionError(f"{key}: payload length {len(payload)} does not match shape {shape}")
        if fnv1a_hex(payload) != meta["checksum"]:
            raise CorruptionError(f"{key}: checksum mismatch")
        values = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        return ActivationRecord(
            meta["run_id"],
            meta["fit_digest"],
            int(meta["layer"]),
            tuple(meta["token_roles"]),
            tuple(meta["row_roles"]),
            values,
            meta["tokensel"],
        )

    def list(self, run_id: str, prefix: str = "") -> list[str]:
        """Keys of a run, lexicographically sorted, optionally filtered by a
        key prefix relative to the run (e.g. a fit digest)."""
        keys = self.manifest(run_id)["keys"]
        full = f"{run_id}/{prefix}"
        return sorted(k for k in keys if k.startswith(full))
