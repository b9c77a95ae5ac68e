"""Zero-shot segmentation by cosine matching against class embedding ensembles.

Bank files (``.ncdbank``)::

    ncdbank v1 <n_classes> <D_a>
    class <id> <n_vectors> <synonym|synonym|...>
    v_1 ... v_Da            (n_vectors rows)
    ...
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_model import NcdTaskSpec
from .dataset_io import _atomic_write, _parse_float, _parse_int, fmt, resolve_path
from .errors import DimensionMismatch, ParseError, UnknownClass, ZeroEnsemble
from .evaluation import MiouReport, accumulate, new_confusion, report_from_confusion

BANK_SUFFIX = ".ncdbank"


@dataclass
class ClassEmbeddingBank:
    vectors: dict                               # class id -> (n_vectors, D_a), unit rows
    synonyms: dict = field(default_factory=dict)  # class id -> tuple of names

    def __post_init__(self):
        dims = set()
        for cid, v in list(self.vectors.items()):
            v = np.atleast_2d(np.asarray(v, dtype=np.float64))
            if v.shape[0] == 0:
                raise ValueError(f"class {cid} has no embedding vectors")
            if not np.allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-6):
                raise ValueError(f"class {cid} has embedding vectors that are not unit-norm")
            self.vectors[cid] = v
            dims.add(v.shape[1])
        if len(dims) > 1:
            raise DimensionMismatch(f"mixed embedding dims {sorted(dims)}")
        self.synonyms = {c: tuple(self.synonyms.get(c, ())) for c in self.vectors}

    @property
    def class_ids(self) -> list:
        return sorted(self.vectors)

    @property
    def dim(self) -> int:
        return next(iter(self.vectors.values())).shape[1]


def ensemble_embed(bank: ClassEmbeddingBank, class_id: int) -> np.ndarray:
    """Mean of the class's vectors, renormalised once."""
    if class_id not in bank.vectors:
        raise UnknownClass(f"class {class_id} is not in the bank")
    mean = bank.vectors[class_id].mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-8:
        raise ZeroEnsemble(f"class {class_id}: embeddings cancel out")
    return mean / norm


def ensemble_matrix(bank: ClassEmbeddingBank) -> np.ndarray:
    return np.stack([ensemble_embed(bank, c) for c in bank.class_ids])


def match_points(features, bank: ClassEmbeddingBank):
    """Per point ``(class id, cosine)`` of the best-matching ensemble; ties go to the lowest id."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != bank.dim:
        raise DimensionMismatch(f"features {f.shape} vs embedding dim {bank.dim}")
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    unit = np.divide(f, norms, out=np.zeros_like(f), where=norms > 0)
    sims = unit @ ensemble_matrix(bank).T
    best = sims.argmax(axis=1)
    ids = np.asarray(bank.class_ids, dtype=np.int64)
    return ids[best], sims[np.arange(len(f)), best]


def zeroshot_report(features_list, gt_list, bank: ClassEmbeddingBank, task: NcdTaskSpec) -> MiouReport:
    """mIoU of direct class predictions (no prototype mapping needed)."""
    conf = new_confusion(task.num_classes)
    for feats, gt in zip(features_list, gt_list):
        pred, _ = match_points(feats, bank)
        keep = gt >= 0
        conf = accumulate(conf, gt[keep], pred[keep])
    return report_from_confusion(conf, task, {}, head=0)


def synthetic_bank(anchors: np.ndarray, class_ids, n_synonyms: int = 5, sigma: float = 0.1,
                   seed: int = 0, names: dict = None) -> ClassEmbeddingBank:
    """Bank whose vectors are the class anchors plus noise, one per synonym."""
    rng = np.random.default_rng(seed)
    vectors, syn = {}, {}
    for cid in class_ids:
        v = anchors[cid] + sigma * rng.standard_normal((n_synonyms, anchors.shape[1]))
        vectors[cid] = v / np.linalg.norm(v, axis=1, keepdims=True)
        base = (names or {}).get(cid, f"class{cid}")
        syn[cid] = tuple(base if i == 0 else f"{base}-{i}" for i in range(n_synonyms))
    return ClassEmbeddingBank(vectors, syn)


# -- files -------------------------------------------------------------------


def format_bank(bank: ClassEmbeddingBank) -> str:
    out = [f"ncdbank v1 {len(bank.vectors)} {bank.dim}"]
    for cid in bank.class_ids:
        v = bank.vectors[cid]
        names = "|".join(bank.synonyms.get(cid, ())) or "-"
        out.append(f"class {cid} {v.shape[0]} {names}")
        out.extend(" ".join(fmt(x) for x in row) for row in v)
    return "\n".join(out) + "\n"


def parse_bank(text: str, name: str = "bank") -> ClassEmbeddingBank:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParseError(f"{name}: empty bank file")
    head = lines[0].split()
    if len(head) != 4 or head[:2] != ["ncdbank", "v1"]:
        raise ParseError(f"{name}: bad header {lines[0]!r}")
    n_classes, dim = _parse_int(head[2], "header"), _parse_int(head[3], "header")
    vectors, syn = {}, {}
    pos = 1
    for _ in range(n_classes):
        if pos >= len(lines):
            raise ParseError(f"{name}: file ends before all {n_classes} classes")
        toks = lines[pos].split(maxsplit=3)
        if len(toks) < 3 or toks[0] != "class":
            raise ParseError(f"{name}:line {pos + 1}: expected a class record")
        cid, count = _parse_int(toks[1], "class id"), _parse_int(toks[2], "vector count")
        names = toks[3] if len(toks) > 3 else "-"
        rows = lines[pos + 1:pos + 1 + count]
        if len(rows) != count:
            raise ParseError(f"{name}: class {cid} declares {count} vectors, found {len(rows)}")
        v = np.empty((count, dim))
        for i, row in enumerate(rows):
            vals = row.split()
            if len(vals) != dim:
                raise ParseError(f"{name}: class {cid} vector {i}: expected {dim} values")
            v[i] = [_parse_float(t, f"{name}: class {cid}") for t in vals]
        vectors[cid] = v / np.linalg.norm(v, axis=1, keepdims=True)
        syn[cid] = () if names == "-" else tuple(names.split("|"))
        pos += 1 + count
    if pos != len(lines):
        raise ParseError(f"{name}: trailing lines after {n_classes} classes")
    return ClassEmbeddingBank(vectors, syn)


def load_bank(path) -> ClassEmbeddingBank:
    path = resolve_path(path)
    return parse_bank(Path(path).read_text(encoding="utf-8"), name=Path(path).name)


def save_bank(path, bank: ClassEmbeddingBank):
    _atomic_write(path, format_bank(bank))
