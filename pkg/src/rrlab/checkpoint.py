"""Versioned plain-text checkpoint container.

Layout::

    RRLAB-CKPT v1
    meta <key> <value>          (one line per metadata field)
    array <name> <dim> [<dim>]  (followed by one line per row, %.17g values)
    end

Seventeen significant digits make every float64 round-trip exactly. The
trailing ``end`` line lets truncation be detected even at an array boundary.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, VersionError
from .fileio import atomic_write_text
from .model import Architecture, TwoHeadParams

MAGIC = "RRLAB-CKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    params: TwoHeadParams
    config_digest: str = ""
    seed: int = 0
    epoch: int = 0
    version: int = FORMAT_VERSION

    @property
    def arch(self) -> Architecture:
        return self.params.arch


def _fmt(v: float) -> str:
    return "%.17g" % v


def dumps(ckpt: Checkpoint) -> str:
    arch = ckpt.arch
    lines = [f"{MAGIC} v{ckpt.version}"]
    meta = [
        ("input_dim", arch.input_dim),
        ("widths", ",".join(str(w) for w in arch.widths) or "-"),
        ("n_classes", arch.n_classes),
        ("aux_hidden", arch.aux_hidden),
        ("activation", arch.activation),
        ("config_digest", ckpt.config_digest or "-"),
        ("seed", ckpt.seed),
        ("epoch", ckpt.epoch),
    ]
    lines += [f"meta {k} {v}" for k, v in meta]
    for name, arr in ckpt.params.tensors.items():
        lines.append(f"array {name} {' '.join(str(d) for d in arr.shape)}")
        rows = arr.reshape(arr.shape[0], -1) if arr.ndim == 2 else arr.reshape(1, -1)
        for row in rows:
            lines.append(" ".join(_fmt(v) for v in row))
    lines.append("end")
    return "\n".join(lines) + "\n"


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    return atomic_write_text(path, dumps(ckpt))


def _lines_with_offsets(text: str):
    offset = 0
    for line in text.split("\n"):
        yield offset, line
        offset += len(line.encode("utf-8")) + 1


def loads(text: str) -> Checkpoint:
    it = _lines_with_offsets(text)

    def take(what: str):
        try:
            return next(it)
        except StopIteration:
            raise ParseError(f"unexpected end of file while reading {what}",
                             len(text.encode("utf-8"))) from None

    off, header = take("header")
    parts = header.split()
    if len(parts) != 2 or parts[0] != MAGIC or not parts[1].startswith("v"):
        raise ParseError(f"bad header {header!r} at byte {off}", off)
    try:
        version = int(parts[1][1:])
    except ValueError:
        raise ParseError(f"bad version token {parts[1]!r} at byte {off}", off) from None
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")

    meta: dict[str, str] = {}
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    while True:
        off, line = take("record")
        if line == "end":
            break
        parts = line.split()
        if not parts:
            raise ParseError(f"blank line at byte {off}", off)
        if parts[0] == "meta" and len(parts) == 3 and not arrays:
            meta[parts[1]] = parts[2]
        elif parts[0] == "array" and len(parts) in (3, 4):
            name = parts[1]
            try:
                shape = tuple(int(d) for d in parts[2:])
            except ValueError:
                raise ParseError(f"bad array dims at byte {off}", off) from None
            n_rows = shape[0] if len(shape) == 2 else 1
            n_cols = shape[1] if len(shape) == 2 else shape[0]
            rows = []
            for _ in range(n_rows):
                roff, rline = take(f"array {name}")
                toks = rline.split()
                if len(toks) != n_cols:
                    raise ParseError(f"array {name}: expected {n_cols} values at byte {roff}, got {len(toks)}", roff)
                try:
                    rows.append([float(t) for t in toks])
                except ValueError:
                    raise ParseError(f"array {name}: non-numeric value at byte {roff}", roff) from None
            arrays[name] = np.array(rows, dtype=np.float64).reshape(shape)
        else:
            raise ParseError(f"unrecognized record {line[:40]!r} at byte {off}", off)

    try:
        widths = () if meta["widths"] == "-" else tuple(int(w) for w in meta["widths"].split(","))
        arch = Architecture(int(meta["input_dim"]), widths, int(meta["n_classes"]),
                            int(meta["aux_hidden"]), meta.get("activation", "relu"))
        params = TwoHeadParams(arch, arrays)
        digest = meta.get("config_digest", "-")
        return Checkpoint(params, "" if digest == "-" else digest, int(meta["seed"]),
                          int(meta["epoch"]), version)
    except KeyError as exc:
        raise ParseError(f"missing metadata field {exc.args[0]}", 0) from None
    except ValueError as exc:
        raise ParseError(f"inconsistent checkpoint: {exc}", 0) from None


def load_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_text(encoding="utf-8"))
