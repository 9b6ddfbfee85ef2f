"""On-disk formats: the MILASC01 array container and key=value run configs.

Container layout::

    b"MILASC01"                      8-byte magic
    <uint64 little-endian>           header length in bytes
    header (UTF-8 text)
        [meta]                       key=value lines
        [arrays]                     name<TAB>d1,d2,...<TAB>byte-offset
    blob                             little-endian float64 data

Checkpoints and feature stores share this layout; a checkpoint's ``[meta]``
section is the fully resolved run config.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

MAGIC = b"MILASC01"


class FormatError(ValueError):
    """File is not a valid container or config."""


def write_container(path, arrays: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    lines = ["[meta]"]
    for key, value in (meta or {}).items():
        if "\n" in str(value) or "=" in key:
            raise FormatError(f"meta entry {key!r} cannot be serialised")
        lines.append(f"{key}={value}")
    lines.append("[arrays]")
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        if "\t" in name or "\n" in name:
            raise FormatError(f"array name {name!r} contains tab/newline")
        a = np.array(arr, dtype="<f8", order="C")  # keeps 0-d shapes
        shape = ",".join(str(s) for s in a.shape)
        lines.append(f"{name}\t{shape}\t{offset}")
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = ("\n".join(lines) + "\n").encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def read_container(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise FormatError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = raw[16:16 + hlen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: header is not UTF-8") from exc
    blob = memoryview(raw)[16 + hlen:]
    meta: dict[str, str] = {}
    arrays: dict[str, np.ndarray] = {}
    section = None
    for line in header.splitlines():
        if line in ("[meta]", "[arrays]"):
            section = line
        elif section == "[meta]":
            key, _, value = line.partition("=")
            meta[key] = value
        elif section == "[arrays]":
            try:
                name, shape_s, off_s = line.split("\t")
                shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
                off = int(off_s)
            except ValueError as exc:
                raise FormatError(f"{path}: bad array entry {line!r}") from exc
            count = int(np.prod(shape, dtype=np.int64))
            if off + 8 * count > len(blob):
                raise FormatError(f"{path}: array {name!r} runs past end of file")
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=count,
                                         offset=off).reshape(shape).astype(np.float64)
        else:
            raise FormatError(f"{path}: unexpected header line {line!r}")
    return arrays, meta


@dataclass
class RunConfig:
    """Every knob of a run. Serialised as ``key = value`` lines."""

    # model
    head: str = "SD"
    mts: bool = False
    k: int = 4
    channels: tuple = (32, 64, 128)
    instance_dim: int = 256
    bands: int = 40
    frames: int = 500
    # optimisation
    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 0.001
    lr_decay: float = 0.5
    lr_patience: int = 3
    alpha: str = "auto"
    loss: str = "wbce"
    seed: int = 0
    # data
    dataset: str = ""
    train_fold: str = "train"
    val_fold: str = "test"
    out: str = "runs/default"
    # filled in by training
    classes: tuple = ()

    def alpha_value(self, n_classes: int) -> float:
        return float(n_classes - 1) if self.alpha == "auto" else float(self.alpha)

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out.append(f"{f.name} = {v}")
        return "\n".join(out) + "\n"

    def to_meta(self) -> dict[str, str]:
        return dict(line.split(" = ", 1) for line in self.to_text().splitlines())

    @classmethod
    def from_pairs(cls, pairs: dict[str, str], source: str = "<config>") -> "RunConfig":
        kinds = {f.name: f.default for f in fields(cls)}
        values = {}
        for key, raw in pairs.items():
            if key not in kinds:
                raise FormatError(f"{source}: unknown key {key!r}")
            default = kinds[key]
            try:
                if isinstance(default, bool):
                    low = raw.lower()
                    if low not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(raw)
                    values[key] = low in ("true", "1", "yes")
                elif isinstance(default, int):
                    values[key] = int(raw)
                elif isinstance(default, float):
                    values[key] = float(raw)
                elif isinstance(default, tuple):
                    items = [s.strip() for s in raw.split(",") if s.strip()]
                    values[key] = tuple(int(s) for s in items) if key == "channels" else tuple(items)
                else:
                    values[key] = raw
            except ValueError as exc:
                raise FormatError(f"{source}: bad value for {key}: {raw!r}") from exc
        return cls(**values)

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        pairs = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{source}:{lineno}: expected key = value")
            key, _, value = line.partition("=")
            pairs[key.strip()] = value.strip()
        return cls.from_pairs(pairs, source)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"), str(path))


def save_checkpoint(path, state: dict[str, np.ndarray], config: RunConfig) -> None:
    write_container(path, state, config.to_meta())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], RunConfig]:
    arrays, meta = read_container(path)
    return arrays, RunConfig.from_pairs(meta, str(path))
