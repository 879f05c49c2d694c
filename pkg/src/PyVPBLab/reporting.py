"""
Run artifacts: manifests, CSV time series and JSON summaries.
Numbers are written with 17 significant digits and JSON keys sorted, so equal runs give equal bytes.
Wall-clock times and cache hits vary between runs and go to timing.json, never into the manifest.
"""
import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence

import numpy as np

from PyVPBLab.nonlinear_1d import DESK_DEVIATION

logger = logging.getLogger(__name__)

TOOL_VERSION = "0.1.0"
MANIFEST_NAME = "manifest.json"
SUMMARY_NAME = "summary.json"
TIMING_NAME = "timing.json"


def _plain(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {str(k): _plain(v) for (k, v) in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if np.isfinite(value) else repr(value)
    if isinstance(value, Path):
        return str(value)
    return value


def canonical_json(value: Any) -> str:
    return json.dumps(_plain(value), sort_keys=True, separators=(",", ":"))


def config_hash(config) -> str:
    return hashlib.sha256(canonical_json(config.as_dict()).encode("utf-8")).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    config: Dict[str, Any]
    seed: int
    tool_version: str = TOOL_VERSION
    deviation: str = DESK_DEVIATION
    constants: Dict[str, Any] = field(default_factory=dict)
    results: Dict[str, Any] = field(default_factory=dict)
    artifacts: Dict[str, str] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, Any]:
        return _plain(asdict(self))


def write_json(path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_plain(payload), f, sort_keys=True, indent=2)
        f.write("\n")
    logger.info("Wrote %s", path)
    return path


def read_json(path) -> Dict[str, Any]:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def write_csv(path, columns: Mapping[str, Sequence[float]]) -> Path:
    """One column per key; all columns must have the same length."""
    path = Path(path)
    lengths = {len(v) for v in columns.values()}
    if len(lengths) > 1:
        raise ValueError("CSV columns differ in length: {}.".format(
            {k: len(v) for (k, v) in columns.items()}))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(list(columns))
        for row in zip(*columns.values()):
            writer.writerow(["%.17g" % float(np.real(v)) for v in row])
    logger.info("Wrote %s", path)
    return path


def write_manifest(manifest: RunManifest, directory) -> Path:
    path = write_json(Path(directory) / MANIFEST_NAME, manifest.as_dict())
    manifest.artifacts.setdefault("manifest", str(path))
    return path


def collect_manifests(root) -> List[Dict[str, Any]]:
    return [read_json(p) for p in sorted(Path(root).glob("*/" + MANIFEST_NAME))]


def merge_summary(root) -> Dict[str, Any]:
    manifests = collect_manifests(root)
    hashes = sorted({m.get("config_hash", "") for m in manifests})
    if len(hashes) > 1:
        logger.warning("Merging manifests produced with %d different configurations.", len(hashes))
    return {
        "tool_version": TOOL_VERSION,
        "deviation": DESK_DEVIATION,
        "config_hashes": hashes,
        "runs": {m["command"]: {k: m.get(k) for k in ("results", "constants", "artifacts")} for m in manifests},
    }
