"""
Line-delimited JSON corpora: one ``{"src": [...], "tgt": [...]}`` record per line,
with an optional ``lang`` field for multilingual tasks.
"""

import hashlib
import json
from pathlib import Path
from typing import Dict, List, Sequence

from src.entities import Example
from src.errors import MissingFileError

SPLITS = ("train", "valid", "test")
VOCAB_FILE = "vocab.json"
CHECKSUM_FILE = "checksums.json"


def split_path(data_dir: Path, split: str) -> Path:
    return Path(data_dir) / f"{split}.jsonl"


def write_jsonl(path: Path, examples: Sequence[Example]) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            record = {"src": list(ex.src), "tgt": list(ex.tgt)}
            if ex.lang is not None:
                record["lang"] = ex.lang
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def read_jsonl(path: Path) -> List[Example]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"corpus file not found: {path}")
    examples = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            record = json.loads(line)
            examples.append(Example(
                src=tuple(record["src"]),
                tgt=tuple(record["tgt"]),
                lang=record.get("lang"),
                index=i,
            ))
    return examples


def load_split(data_dir: Path, split: str) -> List[Example]:
    return read_jsonl(split_path(data_dir, split))


def file_checksum(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def directory_checksums(data_dir: Path) -> Dict[str, str]:
    """sha256 of every split file and the vocabulary that exist in ``data_dir``."""
    data_dir = Path(data_dir)
    names = [f"{s}.jsonl" for s in SPLITS] + [VOCAB_FILE]
    return {name: file_checksum(data_dir / name) for name in names if (data_dir / name).exists()}


def write_tokens(path: Path, sequences: Sequence[Sequence[int]]) -> None:
    """One space-separated id sequence per line."""
    Path(path).write_text("".join(" ".join(str(t) for t in seq) + "\n" for seq in sequences))


def read_tokens(path: Path) -> List[List[int]]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"token file not found: {path}")
    return [[int(t) for t in line.split()] for line in path.read_text().splitlines()]
