import hashlib
import logging
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import polars as pl

logger = logging.getLogger(__name__)

__all__ = ["RunOutput", "package_versions", "write_manifest"]

MANIFEST_NAME = "manifest.txt"
VERSIONED_PACKAGES = ("MultiscaleLDP", "numpy", "scipy", "polars", "pyyaml")


def package_versions(packages: Sequence[str] = VERSIONED_PACKAGES) -> Dict[str, str]:
    versions = {}
    for name in packages:
        try:
            versions[name] = version(name)
        except PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def write_manifest(
    out_dir: Path,
    subcommand: str,
    config_bytes: bytes,
    seed: int,
    artifacts: Sequence[str],
    findings: Sequence[str] = (),
) -> Path:
    """
    manifest.txt: config sha256, seed, package versions, subcommand, artifacts and
    findings as `key: value` lines. No timestamps, so identical runs give identical bytes.
    """
    lines = [
        f"subcommand: {subcommand}",
        f"config_sha256: {hashlib.sha256(config_bytes).hexdigest()}",
        f"seed: {seed}",
    ]
    lines += [f"version.{name}: {v}" for name, v in package_versions().items()]
    lines += [f"artifact: {name}" for name in artifacts]
    lines += [f"finding: {finding}" for finding in findings]
    path = Path(out_dir) / MANIFEST_NAME
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


class RunOutput:
    """Collects the CSV artifacts and findings of one subcommand run in an output directory."""

    def __init__(self, out_dir: Path, subcommand: str):
        self.out_dir = Path(out_dir)
        self.subcommand = subcommand
        self.artifacts: List[str] = []
        self.findings: List[str] = []
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def write_csv(self, name: str, frame: pl.DataFrame) -> Path:
        path = self.out_dir / name
        frame.write_csv(path, float_precision=12)
        self.artifacts.append(name)
        logger.info(f"Wrote {path} ({frame.height} rows).")
        return path

    def add_findings(self, findings: Optional[Sequence[str]]):
        self.findings.extend(findings or [])

    def finish(self, config_bytes: bytes, seed: int) -> Path:
        return write_manifest(self.out_dir, self.subcommand, config_bytes, seed, self.artifacts, self.findings)
