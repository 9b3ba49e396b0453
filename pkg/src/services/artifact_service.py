"""
Artifact Service Module

Tracks the files a run reads and writes, records them in a manifest and
removes partial outputs when the run fails.
"""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

from src.errors import InvalidInputError

MANIFEST_NAME = "manifest.json"


def blob_hash(data: bytes) -> str:
    """Git-style blob id: sha1 of ``blob <len>\\0`` followed by the bytes"""
    digest = hashlib.sha1()
    digest.update(b"blob %d\0" % len(data))
    digest.update(data)
    return digest.hexdigest()


def _hash_path(path: Path) -> Dict[str, str]:
    """Hashes of a file, or of every file below a directory keyed by relative path"""
    if path.is_dir():
        return {
            file.relative_to(path).as_posix(): blob_hash(file.read_bytes())
            for file in sorted(path.rglob("*"))
            if file.is_file()
        }
    return {path.name: blob_hash(path.read_bytes())}


def _relative(path: Path, directory: Path) -> str:
    return Path(os.path.relpath(path, directory)).as_posix()


class ArtifactService:
    """Output bookkeeping of one command-line run"""

    def __init__(self, command: str, out_dir: Optional[Path] = None):
        self.command = command
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.inputs: List[Path] = []
        self.outputs: List[Path] = []
        self._created_dirs: List[Path] = []

    def prepare_dir(self, path: Path) -> Path:
        """Create an output directory, remembering it if this run created it"""
        path = Path(path)
        missing = []
        probe = path
        while not probe.exists():
            missing.append(probe)
            probe = probe.parent
        self._created_dirs.extend(missing)
        try:
            path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise InvalidInputError(f"cannot create {path}: {exc.strerror or exc}") from exc
        return path

    def add_input(self, path: Optional[Path]) -> None:
        if path is not None:
            self.inputs.append(Path(path))

    def track(self, paths: Iterable[Path]) -> List[Path]:
        paths = [Path(p) for p in paths]
        self.outputs.extend(paths)
        return paths

    def write_text(self, path: Path, text: str) -> Path:
        path = Path(path)
        self.prepare_dir(path.parent)
        try:
            path.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise InvalidInputError(f"cannot write {path}: {exc.strerror or exc}") from exc
        self.outputs.append(path)
        logging.info(f"Wrote {path}")
        return path

    def manifest(self, config: Dict[str, Any], seed: Optional[int], directory: Path = Path(".")) -> Dict[str, Any]:
        """Outputs are keyed relative to the manifest directory"""
        return {
            "command": self.command,
            "config": config,
            "seed": seed,
            "inputs": {str(p): _hash_path(p) for p in self.inputs if p.exists()},
            "outputs": {_relative(p, directory): blob_hash(p.read_bytes()) for p in self.outputs if p.is_file()},
        }

    def write_manifest(self, config: Dict[str, Any], seed: Optional[int], directory: Optional[Path] = None) -> Path:
        """Write manifest.json beside the outputs; sorted keys and no timestamps"""
        directory = Path(directory) if directory is not None else self.out_dir
        if directory is None:
            directory = self.outputs[0].parent if self.outputs else Path(".")
        payload = self.manifest(config, seed, directory)
        return self.write_text(directory / MANIFEST_NAME, json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def cleanup(self) -> None:
        """Remove every tracked output and the directories this run created"""
        removed = 0
        for path in reversed(self.outputs):
            if path.is_file():
                path.unlink()
                removed += 1
        for directory in sorted(self._created_dirs, key=lambda p: len(p.parts), reverse=True):
            if directory.is_dir() and not any(directory.iterdir()):
                directory.rmdir()
        if removed:
            logging.warning(f"Removed {removed} partial outputs of {self.command}")
        self.outputs.clear()
