"""Per-run manifest: what ran, with which config, on which code."""

import hashlib
import json
import platform
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import torch

import src
from src.config import ExperimentConfig
from src.entities import ClippingEstimate

MANIFEST_FILE = "manifest.json"
MANIFEST_FORMAT_VERSION = 1


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    root = Path(src.__file__).parent
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*.py")):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(path.read_bytes())
    return f"{src.__version__}+{digest.hexdigest()[:12]}"


def clipping_summary(trace: Sequence[ClippingEstimate]) -> Optional[Dict[str, Any]]:
    if not trace:
        return None
    sigmas = [c.sigma_min for c in trace]
    return {
        "refreshes": len(trace),
        "first": sigmas[0],
        "last": sigmas[-1],
        "min": min(sigmas),
        "max": max(sigmas),
    }


def write_manifest(
    out_dir: Path,
    command: str,
    config: ExperimentConfig,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "command": command,
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "code_version": code_version(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "config": config.to_dict(),
    }
    manifest.update(extra or {})
    path = out_dir / MANIFEST_FILE
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path
