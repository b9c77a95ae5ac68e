"""Readers and writers for clouds, split files and auxiliary feature files.

Cloud files (``.ncdpc``)::

    ncdpc v1 <n_points> <has_color> <D_a_or_0>
    x y z [r g b] label novel_flag

Auxiliary feature files (``.ncdaux``)::

    ncdaux v1 <n_points> <D_a> <cloud_id>
    f_1 ... f_Da

Split files (``.split``) are ``key = value`` lines; lists are comma separated
and the class table is ``class_ids = name:id, name:id, ...``.
"""
from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .data_model import UNLABELED, LabeledCloud, NcdTaskSpec
from .errors import (
    CountMismatch,
    DisjointnessViolation,
    EmptyCloud,
    ParseError,
    UnknownClassName,
)

CLOUD_SUFFIX = ".ncdpc"
AUX_SUFFIX = ".ncdaux"
SPLIT_SUFFIX = ".split"
DATA_ROOT_ENV = "NCD_DATA_ROOT"


def fmt(v: float) -> str:
    return "%.9g" % v


def quantize(a) -> np.ndarray:
    """Round values to what the text formats store, so writes round-trip exactly."""
    a = np.asarray(a, dtype=np.float64)
    flat = np.fromiter((float(fmt(v)) for v in a.ravel()), dtype=np.float64, count=a.size)
    return flat.reshape(a.shape)


def data_root() -> Optional[Path]:
    root = os.environ.get(DATA_ROOT_ENV)
    return Path(root) if root else None


def resolve_path(path) -> Path:
    """Resolve ``path`` directly, falling back to ``$NCD_DATA_ROOT/path``."""
    p = Path(path)
    if p.exists() or p.is_absolute():
        return p
    root = data_root()
    if root is not None and (root / p).exists():
        return root / p
    return p


def _atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- clouds -------------------------------------------------------------------


def _parse_float(tok: str, where: str) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"{where}: not a number: {tok!r}") from None
    if not math.isfinite(v):
        raise ParseError(f"{where}: non-finite value {tok!r}")
    return v


def _parse_int(tok: str, where: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise ParseError(f"{where}: not an integer: {tok!r}") from None


def parse_cloud(text: str, name: str = "") -> LabeledCloud:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise EmptyCloud(f"{name or 'cloud'}: no points")
    header = lines[0].split()
    declared_n = None
    if header[0] == "ncdpc":
        if len(header) != 5 or header[1] != "v1":
            raise ParseError(f"{name}: bad header {lines[0]!r}")
        declared_n = _parse_int(header[2], "header")
        has_color = _parse_int(header[3], "header") != 0
        rows = lines[1:]
        width = 8 if has_color else 5
    else:
        # Headerless files: the first row fixes the layout.
        rows = lines
        width = len(header)
        if width not in (5, 8):
            raise ParseError(f"{name}: rows must have 5 or 8 fields, got {width}")
        has_color = width == 8
    if declared_n == 0 or not rows:
        raise EmptyCloud(f"{name or 'cloud'}: no points")
    if declared_n is not None and declared_n != len(rows):
        raise ParseError(f"{name}: header declares {declared_n} points, found {len(rows)}")

    n = len(rows)
    coords = np.empty((n, 3))
    colors = np.empty((n, 3)) if has_color else None
    labels = np.empty(n, dtype=np.int64)
    mask = np.empty(n, dtype=bool)
    for i, row in enumerate(rows):
        toks = row.split()
        where = f"{name}:row {i + 1}"
        if len(toks) != width:
            raise ParseError(f"{where}: expected {width} fields, got {len(toks)}")
        coords[i] = [_parse_float(t, where) for t in toks[:3]]
        if has_color:
            colors[i] = [_parse_float(t, where) for t in toks[3:6]]
        labels[i] = _parse_int(toks[-2], where)
        flag = _parse_int(toks[-1], where)
        if flag not in (0, 1):
            raise ParseError(f"{where}: novel flag must be 0 or 1")
        mask[i] = bool(flag)
    if (labels < UNLABELED).any():
        raise ParseError(f"{name}: class ids must be >= 0 or {UNLABELED}")
    return LabeledCloud(coords, labels, mask, colors, name=name)


def format_cloud(cloud: LabeledCloud, aux_dim: int = 0) -> str:
    # Written from the evaluation view: files carry the full ground truth.
    labels = cloud.evaluation_labels()
    out = [f"ncdpc v1 {len(cloud)} {int(cloud.has_color)} {int(aux_dim)}"]
    for i in range(len(cloud)):
        fields = [fmt(v) for v in cloud.coords[i]]
        if cloud.has_color:
            fields += [fmt(v) for v in cloud.colors[i]]
        fields += [str(int(labels[i])), str(int(cloud.novel_mask[i]))]
        out.append(" ".join(fields))
    return "\n".join(out) + "\n"


def load_cloud(path) -> LabeledCloud:
    path = resolve_path(path)
    text = Path(path).read_text(encoding="utf-8")
    return parse_cloud(text, name=Path(path).stem)


def save_cloud(path, cloud: LabeledCloud, aux_dim: int = 0):
    _atomic_write(path, format_cloud(cloud, aux_dim))


# -- auxiliary features -------------------------------------------------------


def parse_aux(text: str, n_points: Optional[int] = None, name: str = "") -> np.ndarray:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParseError(f"{name}: empty feature file")
    header = lines[0].split()
    if len(header) < 4 or header[0] != "ncdaux" or header[1] != "v1":
        raise ParseError(f"{name}: bad header {lines[0]!r}")
    declared = _parse_int(header[2], "header")
    dim = _parse_int(header[3], "header")
    rows = lines[1:]
    if declared != len(rows):
        raise CountMismatch(f"{name}: header declares {declared} rows, found {len(rows)}")
    if n_points is not None and len(rows) != n_points:
        raise CountMismatch(f"{name}: {len(rows)} feature rows for a {n_points}-point cloud")
    out = np.empty((len(rows), dim))
    for i, row in enumerate(rows):
        toks = row.split()
        if len(toks) != dim:
            raise ParseError(f"{name}:row {i + 1}: expected {dim} values, got {len(toks)}")
        out[i] = [_parse_float(t, f"{name}:row {i + 1}") for t in toks]
    return out


def format_aux(features: np.ndarray, cloud_id: str = "-") -> str:
    features = np.asarray(features, dtype=np.float64)
    if not np.isfinite(features).all():
        raise ParseError("auxiliary features must be finite")
    n, d = features.shape
    out = [f"ncdaux v1 {n} {d} {cloud_id or '-'}"]
    out.extend(" ".join(fmt(v) for v in row) for row in features)
    return "\n".join(out) + "\n"


def load_aux_features(path, cloud: Optional[LabeledCloud] = None) -> np.ndarray:
    """Load an ``(n_points, D_a)`` feature block aligned with ``cloud``."""
    path = resolve_path(path)
    text = Path(path).read_text(encoding="utf-8")
    return parse_aux(text, None if cloud is None else len(cloud), name=Path(path).stem)


def save_aux_features(path, features: np.ndarray, cloud_id: str = "-"):
    _atomic_write(path, format_aux(features, cloud_id))


# -- split configurations -----------------------------------------------------


@dataclass(frozen=True)
class SplitConfigFile:
    dataset: str
    split_name: str
    base: tuple
    novel: tuple
    class_ids: dict

    def to_task(self) -> NcdTaskSpec:
        for name in self.base + self.novel:
            if name not in self.class_ids:
                raise UnknownClassName(name)
        both = set(self.base) & set(self.novel)
        if both:
            raise DisjointnessViolation(f"listed as both base and novel: {sorted(both)}")
        covered = set(self.base) | set(self.novel)
        missing = set(self.class_ids) - covered
        if missing:
            raise ParseError(f"classes neither base nor novel: {sorted(missing)}")
        return NcdTaskSpec(
            base_classes=tuple(self.class_ids[n] for n in self.base),
            novel_classes=tuple(self.class_ids[n] for n in self.novel),
            class_names={v: k for k, v in self.class_ids.items()},
            split_name=self.split_name,
            dataset=self.dataset,
        )


def _split_list(value: str) -> tuple:
    return tuple(v.strip() for v in value.split(",") if v.strip())


def parse_split(text: str) -> SplitConfigFile:
    kv = {}
    for i, line in enumerate(text.splitlines()):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"split line {i + 1}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        kv[key] = value
    for key in ("base", "novel", "class_ids"):
        if key not in kv:
            raise ParseError(f"split file lacks '{key}'")
    class_ids = {}
    for item in _split_list(kv["class_ids"]):
        if ":" not in item:
            raise ParseError(f"bad class_ids entry {item!r}")
        name, cid = item.rsplit(":", 1)
        class_ids[name.strip()] = _parse_int(cid.strip(), "class_ids")
    if len(set(class_ids.values())) != len(class_ids):
        raise ParseError("class ids must be unique")
    return SplitConfigFile(
        dataset=kv.get("dataset", ""),
        split_name=kv.get("split_name", ""),
        base=_split_list(kv["base"]),
        novel=_split_list(kv["novel"]),
        class_ids=class_ids,
    )


def format_split(cfg: SplitConfigFile) -> str:
    ids = ", ".join(f"{n}:{i}" for n, i in sorted(cfg.class_ids.items(), key=lambda t: t[1]))
    return (
        f"dataset = {cfg.dataset}\n"
        f"split_name = {cfg.split_name}\n"
        f"class_ids = {ids}\n"
        f"base = {', '.join(cfg.base)}\n"
        f"novel = {', '.join(cfg.novel)}\n"
    )


def split_file_from_task(task: NcdTaskSpec) -> SplitConfigFile:
    ids = {task.name_of(c): c for c in task.all_classes}
    return SplitConfigFile(
        dataset=task.dataset,
        split_name=task.split_name,
        base=tuple(task.name_of(c) for c in task.base_classes),
        novel=tuple(task.name_of(c) for c in task.novel_classes),
        class_ids=ids,
    )


def builtin_splits() -> list:
    files = resources.files("ncdseg") / "splits"
    return sorted(p.name[: -len(SPLIT_SUFFIX)] for p in files.iterdir() if p.name.endswith(SPLIT_SUFFIX))


def load_split(path) -> NcdTaskSpec:
    """Load a split file by path, or a shipped split by name (e.g. ``poss-3_3``)."""
    p = resolve_path(path)
    if p.exists():
        text = p.read_text(encoding="utf-8")
    else:
        res = resources.files("ncdseg") / "splits" / (str(path) + SPLIT_SUFFIX)
        if not res.is_file():
            raise FileNotFoundError(f"no split file or shipped split named {path}")
        text = res.read_text(encoding="utf-8")
    return parse_split(text).to_task()


def save_split(path, task: NcdTaskSpec):
    _atomic_write(path, format_split(split_file_from_task(task)))


# -- dataset directories ------------------------------------------------------


def load_dataset(directory) -> list:
    """All clouds in ``directory`` (sorted by name) with their aux features or None."""
    directory = resolve_path(directory)
    if not Path(directory).is_dir():
        raise FileNotFoundError(f"data directory not found: {directory}")
    out = []
    for path in sorted(Path(directory).glob("*" + CLOUD_SUFFIX)):
        cloud = load_cloud(path)
        aux_path = path.with_suffix(AUX_SUFFIX)
        aux = load_aux_features(aux_path, cloud) if aux_path.exists() else None
        out.append((cloud, aux))
    if not out:
        raise FileNotFoundError(f"no {CLOUD_SUFFIX} files in {directory}")
    return out


def save_dataset(directory, scenes, task: Optional[NcdTaskSpec] = None, prefix: str = "scene"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(len(scenes) - 1)))
    for i, (cloud, aux) in enumerate(scenes):
        stem = f"{prefix}_{i:0{width}d}"
        save_cloud(directory / (stem + CLOUD_SUFFIX), cloud, 0 if aux is None else aux.shape[1])
        if aux is not None:
            save_aux_features(directory / (stem + AUX_SUFFIX), aux, stem)
    if task is not None:
        save_split(directory / ("task" + SPLIT_SUFFIX), task)
