"""Line-delimited run reports and the human-readable summary table.

A report is a list of flat records, each tagged by ``"type"``:

``meta``        config hash, seed, package version, subcommand
``metrics``     accuracy, per-kind row counts, op counts, throughput / latency
``assignment``  one row: layer, row, lambda_max, variance, scheme, bits
``sweep``       one ratio grid point of the hardware model
``profile``     a (calibrated) hardware profile

Records are written one canonical JSON object per line, so write -> read ->
write reproduces the file byte for byte.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

from . import __version__
from .errors import ConfigError
from .fileio import atomic_write_bytes, canonical_json

RECORD_TYPES = ("meta", "metrics", "assignment", "sweep", "profile")

SUMMARY_COLUMNS = ("Method", "PoT-4:Fixed-4:Fixed-8", "First/Last", "Top-1 (%)", "Top-5 (%)",
                   "Throughput (GOP/s)", "Latency (ms)")


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def meta_record(command: str, config: dict, seed: int) -> dict:
    return {"type": "meta", "command": command, "config_hash": config_hash(config),
            "seed": seed, "version": __version__}


def assignment_records(sensitivities, assignments) -> list[dict]:
    """One record per ranked row, in (layer, row) order."""
    out = []
    for s in sorted(sensitivities, key=lambda s: (s.layer, s.row)):
        kind = assignments[s.layer][s.row]
        out.append({"type": "assignment", "layer": s.layer, "row": s.row,
                    "lambda_max": float(s.lambda_max), "variance": float(s.variance),
                    "scheme": kind.scheme.value, "bits": kind.bits})
    return out


def encode_report(records) -> bytes:
    lines = []
    for rec in records:
        if rec.get("type") not in RECORD_TYPES:
            raise ConfigError(f"unknown report record type {rec.get('type')!r}")
        lines.append(canonical_json(rec))
    return ("\n".join(lines) + "\n").encode() if lines else b""


def decode_report(data: bytes) -> list[dict]:
    out = []
    for n, line in enumerate(data.decode().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ConfigError(f"report line {n}: {e.msg}") from None
        if not isinstance(rec, dict) or rec.get("type") not in RECORD_TYPES:
            raise ConfigError(f"report line {n}: not a report record")
        out.append(rec)
    return out


def write_report(path, records) -> None:
    atomic_write_bytes(path, encode_report(records))


def read_report(path) -> list[dict]:
    return decode_report(Path(path).read_bytes())


def _fmt(value, spec: str) -> str:
    return "-" if value is None else format(value, spec)


def summary_table(records) -> str:
    """Plain-text table with one line per ``metrics`` record."""
    rows = [SUMMARY_COLUMNS]
    for rec in records:
        if rec["type"] != "metrics":
            continue
        top1, top5 = rec.get("top1"), rec.get("top5")
        fl = rec.get("first_last_fixed8")
        rows.append((
            str(rec.get("method", "-")),
            str(rec.get("ratio", "-")),
            "-" if fl is None else ("8-bit" if fl else "mixed"),
            _fmt(None if top1 is None else 100 * top1, ".2f"),
            _fmt(None if top5 is None else 100 * top5, ".2f"),
            _fmt(rec.get("throughput_gops"), ".2f"),
            _fmt(rec.get("latency_ms"), ".2f"),
        ))
    widths = [max(len(r[i]) for r in rows) for i in range(len(SUMMARY_COLUMNS))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_summary(path, records) -> None:
    atomic_write_bytes(path, summary_table(records).encode())
