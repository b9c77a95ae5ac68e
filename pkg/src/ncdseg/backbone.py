"""Small point-wise segmentation network with hand-written gradients.

Layout: per-point MLP, k-NN mean pooling, second linear map to ``D``-dim
features ``F``. ``Z = F / |F|`` feeds every segmentation head; the novel
heads are bias-free so their weight columns are the class prototypes. The
projection head maps ``F`` to the auxiliary feature space and is only used
for the alignment loss.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .data_model import normalize_rows
from .errors import CheckpointError, ShapeMismatch, TraceMismatch


@dataclass(frozen=True)
class NetworkConfig:
    n_base: int
    n_novel: int
    input_dim: int = 3
    hidden_dims: tuple = (64, 64)
    feature_dim: int = 32
    n_novel_heads: int = 5
    overcluster_factor: int = 3
    n_overcluster_heads: Optional[int] = None
    projection_dim: int = 16
    projection_hidden: int = 32
    neighborhood_k: int = 16

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.n_overcluster_heads is None:
            object.__setattr__(self, "n_overcluster_heads", self.n_novel_heads)
        dims = (self.input_dim, self.feature_dim, self.projection_dim,
                self.projection_hidden, self.neighborhood_k) + self.hidden_dims
        if min(dims) <= 0 or not self.hidden_dims:
            raise ValueError("all network dimensions must be positive")
        if self.n_novel_heads < 1 or self.overcluster_factor < 1 or self.n_overcluster_heads < 0:
            raise ValueError("need n_novel_heads >= 1, overcluster_factor >= 1")
        if self.n_base < 0 or self.n_novel < 1:
            raise ValueError("need n_base >= 0 and n_novel >= 1")

    @property
    def n_overcluster(self) -> int:
        return self.overcluster_factor * self.n_novel

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**{**d, "hidden_dims": tuple(d["hidden_dims"])})

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


def param_shapes(cfg: NetworkConfig) -> dict:
    """Parameter names and shapes in checkpoint order."""
    shapes = {}
    prev = cfg.input_dim
    for i, h in enumerate(cfg.hidden_dims):
        shapes[f"pre.{i}.w"] = (prev, h)
        shapes[f"pre.{i}.b"] = (h,)
        prev = h
    shapes["post.w"] = (prev, cfg.feature_dim)
    shapes["post.b"] = (cfg.feature_dim,)
    shapes["base.w"] = (cfg.feature_dim, cfg.n_base)
    shapes["base.b"] = (cfg.n_base,)
    for h in range(cfg.n_novel_heads):
        shapes[f"novel.{h}.w"] = (cfg.feature_dim, cfg.n_novel)
    for h in range(cfg.n_overcluster_heads):
        shapes[f"over.{h}.w"] = (cfg.feature_dim, cfg.n_overcluster)
    shapes["proj.0.w"] = (cfg.feature_dim, cfg.projection_hidden)
    shapes["proj.0.b"] = (cfg.projection_hidden,)
    shapes["proj.1.w"] = (cfg.projection_hidden, cfg.projection_dim)
    shapes["proj.1.b"] = (cfg.projection_dim,)
    return shapes


def init_params(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> dict:
    """Fan-in scaled uniform initialisation; biases start at zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = shape[0]
        relu_input = name.startswith("pre.") or name == "proj.0.w"
        bound = np.sqrt(6.0 / fan_in) if relu_input else np.sqrt(3.0 / fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def zeros_like_params(params: dict) -> dict:
    return {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}


def _fingerprint(params: dict) -> str:
    h = hashlib.sha1()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


SHAPE_DIM = 4


def local_shape(coords: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """Rotation-invariant neighbourhood descriptors, ``(n, 4)``.

    Square roots of the local covariance eigenvalues (largest first, scaled
    by 10) and the absolute vertical component of the surface normal.
    """
    pts = np.asarray(coords, dtype=np.float64)[neighbors]
    off = pts - pts.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", off, off) / neighbors.shape[1]
    vals, vecs = np.linalg.eigh(cov)
    spread = 10.0 * np.sqrt(np.clip(vals[:, ::-1], 0.0, None))
    return np.column_stack([spread, np.abs(vecs[:, 2, 0])])


def point_inputs(coords: np.ndarray, colors: Optional[np.ndarray], neighbors: np.ndarray) -> np.ndarray:
    """Per-point network input: horizontally centred xyz, local shape, then rgb if present."""
    x = np.array(coords, dtype=np.float64)
    x[:, :2] -= x[:, :2].mean(axis=0)
    parts = [x, local_shape(coords, neighbors)]
    if colors is not None:
        parts.append(colors)
    return np.concatenate(parts, axis=1)


def pooling_matrix(neighbors: np.ndarray) -> sp.csr_matrix:
    n, k = neighbors.shape
    rows = np.repeat(np.arange(n), k)
    return sp.csr_matrix((np.full(n * k, 1.0 / k), (rows, neighbors.ravel())), shape=(n, n))


@dataclass
class ForwardTrace:
    config: NetworkConfig
    fingerprint: str
    inputs: np.ndarray
    pool: sp.csr_matrix
    pre_acts: list                  # post-ReLU activations, inputs first
    pre_lin: list                   # pre-ReLU values
    pooled: np.ndarray
    features: np.ndarray            # F
    norms: np.ndarray
    z: np.ndarray                   # F / |F|
    base_logits: np.ndarray
    novel_logits: list
    over_logits: list
    proj_hidden: Optional[np.ndarray] = None
    proj_out: Optional[np.ndarray] = None
    params64: dict = field(default_factory=dict, repr=False)

    @property
    def n_points(self) -> int:
        return self.inputs.shape[0]


def forward(params: dict, cfg: NetworkConfig, inputs: np.ndarray, neighbors: np.ndarray,
            heads: str = "train") -> ForwardTrace:
    """Run the network on ``(n, input_dim)`` inputs with ``(n, k)`` neighbour indices.

    ``heads="inference"`` evaluates only the base and discovery heads.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != cfg.input_dim:
        raise ShapeMismatch(f"expected (n, {cfg.input_dim}) inputs, got {inputs.shape}")
    if neighbors.shape[0] != inputs.shape[0]:
        raise ShapeMismatch("neighbour table and inputs disagree on point count")
    p = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    training = heads == "train"

    acts, lins = [inputs], []
    a = inputs
    for i in range(len(cfg.hidden_dims)):
        zl = a @ p[f"pre.{i}.w"] + p[f"pre.{i}.b"]
        lins.append(zl)
        a = np.maximum(zl, 0.0)
        acts.append(a)
    pool = pooling_matrix(neighbors)
    pooled = pool @ a
    feats = pooled @ p["post.w"] + p["post.b"]
    z = normalize_rows(feats)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)

    trace = ForwardTrace(
        config=cfg,
        fingerprint=_fingerprint(params),
        inputs=inputs,
        pool=pool,
        pre_acts=acts,
        pre_lin=lins,
        pooled=pooled,
        features=feats,
        norms=norms,
        z=z,
        base_logits=z @ p["base.w"] + p["base.b"],
        novel_logits=[z @ p[f"novel.{h}.w"] for h in range(cfg.n_novel_heads)],
        over_logits=[],
        params64=p,
    )
    if training:
        trace.over_logits = [z @ p[f"over.{h}.w"] for h in range(cfg.n_overcluster_heads)]
        trace.proj_hidden = feats @ p["proj.0.w"] + p["proj.0.b"]
        trace.proj_out = np.maximum(trace.proj_hidden, 0.0) @ p["proj.1.w"] + p["proj.1.b"]
    return trace


def backward(trace: ForwardTrace, params: dict, grad_base=None, grad_novel=None,
             grad_over=None, grad_proj=None) -> dict:
    """Exact parameter gradients given upstream gradients at the outputs.

    ``grad_novel`` / ``grad_over`` are lists aligned with the heads; ``None``
    entries (or a ``None`` list) mean zero gradient.
    """
    if _fingerprint(params) != trace.fingerprint:
        raise TraceMismatch("trace was produced with different parameters")
    cfg, p = trace.config, trace.params64
    n = trace.n_points
    grads = zeros_like_params(params)
    z = trace.z
    dz = np.zeros_like(z)
    dfeat = np.zeros_like(trace.features)

    if grad_base is not None:
        grad_base = np.asarray(grad_base, dtype=np.float64)
        if grad_base.shape != (n, cfg.n_base):
            raise ShapeMismatch("base gradient shape mismatch")
        grads["base.w"] = z.T @ grad_base
        grads["base.b"] = grad_base.sum(axis=0)
        dz += grad_base @ p["base.w"].T
    for h, g in enumerate(grad_novel or []):
        if g is None:
            continue
        grads[f"novel.{h}.w"] = z.T @ g
        dz += g @ p[f"novel.{h}.w"].T
    for h, g in enumerate(grad_over or []):
        if g is None:
            continue
        if not trace.over_logits:
            raise TraceMismatch("over-clustering heads were not evaluated in this trace")
        grads[f"over.{h}.w"] = z.T @ g
        dz += g @ p[f"over.{h}.w"].T
    if grad_proj is not None:
        if trace.proj_out is None:
            raise TraceMismatch("projection head was not evaluated in this trace")
        r = np.maximum(trace.proj_hidden, 0.0)
        grads["proj.1.w"] = r.T @ grad_proj
        grads["proj.1.b"] = grad_proj.sum(axis=0)
        du = (grad_proj @ p["proj.1.w"].T) * (trace.proj_hidden > 0)
        grads["proj.0.w"] = trace.features.T @ du
        grads["proj.0.b"] = du.sum(axis=0)
        dfeat += du @ p["proj.0.w"].T

    # d(F/|F|) = (dZ - Z <Z, dZ>) / |F|
    dfeat += (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / trace.norms
    grads["post.w"] = trace.pooled.T @ dfeat
    grads["post.b"] = dfeat.sum(axis=0)
    da = trace.pool.T @ (dfeat @ p["post.w"].T)
    for i in reversed(range(len(cfg.hidden_dims))):
        dl = da * (trace.pre_lin[i] > 0)
        grads[f"pre.{i}.w"] = trace.pre_acts[i].T @ dl
        grads[f"pre.{i}.b"] = dl.sum(axis=0)
        if i:
            da = dl @ p[f"pre.{i}.w"].T
    return grads


def concat_logits(base_logits: np.ndarray, novel_logits: np.ndarray) -> np.ndarray:
    """Per point, base-class logits followed by one head's novel logits."""
    base_logits = np.asarray(base_logits)
    novel_logits = np.asarray(novel_logits)
    if base_logits.ndim != 2 or novel_logits.ndim != 2:
        raise ShapeMismatch("logits must be 2-D (points x classes)")
    if base_logits.shape[0] != novel_logits.shape[0]:
        raise ShapeMismatch(
            f"point counts differ: {base_logits.shape[0]} vs {novel_logits.shape[0]}"
        )
    return np.concatenate([base_logits, novel_logits], axis=1)


# -- checkpoints -------------------------------------------------------------

MAGIC = b"NCDCKPT\0"
VERSION = 1


def save_checkpoint(path, cfg: NetworkConfig, params: dict, meta: Optional[dict] = None):
    """Header (magic, version, config hash, JSON metadata) then float32 LE params."""
    shapes = param_shapes(cfg)
    header = json.dumps({"config": cfg.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    body = []
    for name, shape in shapes.items():
        arr = np.asarray(params[name])
        if arr.shape != shape:
            raise ShapeMismatch(f"{name}: expected {shape}, got {arr.shape}")
        body.append(arr.astype("<f4").tobytes())
    count = sum(int(np.prod(s)) for s in shapes.values())
    blob = b"".join([
        MAGIC,
        struct.pack("<I", VERSION),
        cfg.digest(),
        struct.pack("<I", len(header)),
        header,
        struct.pack("<Q", count),
        *body,
    ])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_checkpoint(path):
    """Returns ``(config, params, meta)``; params are float32 arrays."""
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    digest = blob[12:44]
    (hlen,) = struct.unpack_from("<I", blob, 44)
    header = json.loads(blob[48:48 + hlen].decode())
    cfg = NetworkConfig.from_dict(header["config"])
    if cfg.digest() != digest:
        raise CheckpointError(f"{path}: config hash mismatch")
    off = 48 + hlen
    (count,) = struct.unpack_from("<Q", blob, off)
    off += 8
    if off + 4 * count != len(blob):
        raise CheckpointError(f"{path}: truncated or oversized parameter block")
    flat = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
    params, pos = {}, 0
    for name, shape in param_shapes(cfg).items():
        size = int(np.prod(shape))
        params[name] = flat[pos:pos + size].reshape(shape).astype(np.float32)
        pos += size
    if pos != count:
        raise CheckpointError(f"{path}: parameter count mismatch")
    return cfg, params, header.get("meta", {})
