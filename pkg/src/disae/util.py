"""Shared plumbing: seed derivation, stable CSV output, run manifests."""

import csv
import hashlib
import json
import os
from pathlib import Path

import numpy as np

FORMAT_VERSION = "1"


def derive_seed(master: int, *parts) -> int:
    """Derive a child seed from a master seed and a sequence of keys.

    Keys may be ints or strings; strings are hashed so the derivation is
    stable across processes and platforms. Distinct key tuples give
    independent streams.
    """
    ints = [int(master) & 0xFFFFFFFF]
    for part in parts:
        if isinstance(part, (int, np.integer)):
            ints.append(int(part) & 0xFFFFFFFF)
        else:
            digest = hashlib.sha256(str(part).encode("utf-8")).digest()
            ints.append(int.from_bytes(digest[:4], "little"))
    seq = np.random.SeedSequence(ints)
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def rng_from(master: int, *parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *parts))


def fmt_float(x) -> str:
    """Shortest round-trip decimal form; byte-stable for reports."""
    return repr(float(x))


def format_cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return fmt_float(value)
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_csv(path, fieldnames, rows) -> None:
    """Write rows (dicts) as CSV with deterministic float formatting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([format_cell(row[k]) for k in fieldnames])


def read_csv_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def to_jsonable(obj):
    """Recursively convert numpy scalars/arrays so json.dumps accepts them."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    return obj


def dump_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_manifest(out_dir, command: str, config: dict, seeds: dict) -> Path:
    """Record resolved configuration and seeds for a run directory."""
    manifest = {
        "format_version": FORMAT_VERSION,
        "command": command,
        "config": config,
        "seeds": seeds,
        "notes": {
            "accuracy_probe": "built-in single-hidden-layer softmax classifier",
        },
    }
    path = Path(out_dir) / "run_manifest.json"
    dump_json(path, manifest)
    return path


def default_output_root() -> Path:
    return Path(os.environ.get("DISAE_OUTPUT_ROOT", "runs"))
