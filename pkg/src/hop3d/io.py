"""On-disk formats: text checkpoints and flat binary scene files.

Checkpoint (UTF-8 text)::

    HOP3D-CHECKPOINT 1
    phase <1|2>
    config f_in=.. hidden=.. feat_dim=.. head_hidden=.. k_base=.. k_novel=..
    manifest <count>
    <name> <offset> <length> <dim> [<dim> ...]      (one line per tensor)
    tensor <name> <dim> [<dim> ...]
    <values, %.17g, whitespace separated, row-major>
    ...
    basis <d> <r>                                   (optional)
    <r lines of d values: one basis column per line>
    end

Scene file (little endian)::

    8 bytes magic b"HOP3DSC1", int32 N, int32 F_in,
    then N rows of float64: x y z, F_in features, label
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .data import Scene
from .hop_rep import PrototypeSet, Role
from .linalg import OrthoBasis
from .model import HopModel, ModelConfig, _mlp_from_named
from .net import IndexEntry, ParamIndex

CHECKPOINT_MAGIC = "HOP3D-CHECKPOINT"
CHECKPOINT_VERSION = 1
SCENE_MAGIC = b"HOP3DSC1"
_CFG_KEYS = ("f_in", "hidden", "feat_dim", "head_hidden", "k_base", "k_novel")


class FormatError(ValueError):
    pass


def _fmt(values: np.ndarray) -> str:
    return " ".join("%.17g" % v for v in np.ravel(values))


def checkpoint_text(model: HopModel, basis: OrthoBasis | None = None) -> str:
    named = model.named_tensors()
    index = ParamIndex.build(list(named.items()))
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}", f"phase {model.phase}",
             "config " + " ".join(f"{k}={getattr(model.cfg, k)}" for k in _CFG_KEYS),
             f"manifest {len(index.entries)}"]
    for e in index.entries:
        lines.append(" ".join([e.name, str(e.offset), str(e.length), *map(str, e.shape)]))
    for name, t in named.items():
        lines.append(" ".join(["tensor", name, *map(str, t.shape)]))
        lines.append(_fmt(t))
    if basis is not None:
        lines.append(f"basis {basis.d} {basis.r}")
        lines.extend(_fmt(basis.b[:, j]) for j in range(basis.r))
    lines.append("end")
    return "\n".join(lines) + "\n"


def save_checkpoint(path, model: HopModel, basis: OrthoBasis | None = None) -> None:
    Path(path).write_text(checkpoint_text(model, basis), encoding="utf-8")


def parse_checkpoint(text: str) -> tuple[HopModel, OrthoBasis | None]:
    lines = text.splitlines()
    pos = 0

    def take() -> list[str]:
        nonlocal pos
        if pos >= len(lines):
            raise FormatError("truncated checkpoint")
        pos += 1
        return lines[pos - 1].split()

    head = take()
    if len(head) != 2 or head[0] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file")
    if head[1] != str(CHECKPOINT_VERSION):
        raise FormatError(f"checkpoint version {head[1]} is not supported (expected {CHECKPOINT_VERSION})")
    tok = take()
    phase = int(tok[1])
    tok = take()
    if tok[0] != "config":
        raise FormatError("missing config line")
    kv = dict(item.split("=", 1) for item in tok[1:])
    cfg = ModelConfig(**{k: int(kv[k]) for k in _CFG_KEYS})
    tok = take()
    entries = []
    for _ in range(int(tok[1])):
        e = take()
        entries.append(IndexEntry(e[0], int(e[1]), int(e[2]), tuple(int(s) for s in e[3:])))
    index = ParamIndex(tuple(entries))

    named = {}
    for _ in entries:
        tok = take()
        if tok[0] != "tensor":
            raise FormatError(f"expected tensor block, got {tok[:1]}")
        shape = tuple(int(s) for s in tok[2:])
        vals = np.array([float(v) for v in take()], dtype=np.float64)
        if vals.size != int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"tensor {tok[1]} has {vals.size} values for shape {shape}")
        named[tok[1]] = vals.reshape(shape)
    if [e.name for e in entries] != list(named):
        raise FormatError("tensor blocks do not follow the manifest")
    for e in entries:
        if named[e.name].shape != e.shape:
            raise FormatError(f"tensor {e.name} shape disagrees with manifest")

    basis = None
    tok = take()
    if tok[0] == "basis":
        d, r = int(tok[1]), int(tok[2])
        cols = [np.array([float(v) for v in take()]) for _ in range(r)]
        b = np.column_stack(cols) if r else np.zeros((d, 0))
        if b.shape != (d, r):
            raise FormatError("basis block has the wrong size")
        basis = OrthoBasis(b)
        tok = take()
    if tok != ["end"]:
        raise FormatError("missing end marker")

    backbone = _mlp_from_named(named, "backbone", 2)
    base = PrototypeSet(named["protos.base"], Role.BASE)
    if phase == 1:
        model = HopModel(cfg, backbone, base, shared_head=_mlp_from_named(named, "head", 2))
    else:
        model = HopModel(cfg, backbone, base, novel=PrototypeSet(named["protos.novel"], Role.NOVEL),
                         h_b=_mlp_from_named(named, "h_b", 2), h_n=_mlp_from_named(named, "h_n", 2))
    if ParamIndex.build(list(model.named_tensors().items())).entries != index.entries:
        raise FormatError("manifest does not match the model layout")
    return model, basis


def load_checkpoint(path) -> tuple[HopModel, OrthoBasis | None]:
    return parse_checkpoint(Path(path).read_text(encoding="utf-8"))


def scene_bytes(scene: Scene) -> bytes:
    n, f = scene.feats.shape
    table = np.hstack([scene.coords, scene.feats, scene.labels[:, None].astype(np.float64)])
    return SCENE_MAGIC + struct.pack("<ii", n, f) + table.astype("<f8").tobytes()


def save_scene(path, scene: Scene) -> None:
    Path(path).write_bytes(scene_bytes(scene))


def load_scene(path) -> Scene:
    raw = Path(path).read_bytes()
    if raw[:8] != SCENE_MAGIC:
        raise FormatError(f"{path}: not a scene file")
    n, f = struct.unpack("<ii", raw[8:16])
    table = np.frombuffer(raw[16:], dtype="<f8")
    if table.size != n * (f + 4):
        raise FormatError(f"{path}: expected {n} rows of {f + 4} values")
    table = table.reshape(n, f + 4).astype(np.float64)
    return Scene(table[:, :3].copy(), table[:, 3:3 + f].copy(), table[:, -1].astype(np.int64))
