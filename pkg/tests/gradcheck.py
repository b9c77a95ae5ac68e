"""Finite-difference checks of the network's hand-written backward pass."""
import numpy as np

from ncdseg import backbone as bb
from ncdseg.geometry import knn_indices


def setup(seed=0, n_points=64, k=8):
    rng = np.random.default_rng(seed)
    cfg = bb.NetworkConfig(n_base=4, n_novel=3, input_dim=3 + bb.SHAPE_DIM, hidden_dims=(16, 16),
                           feature_dim=8, n_novel_heads=2, projection_dim=5, projection_hidden=6,
                           neighborhood_k=k)
    xyz = rng.uniform(-1, 1, (n_points, 3))
    nbr = knn_indices(xyz, k)
    inputs = bb.point_inputs(xyz, None, nbr)
    params = {n: v.astype(np.float64) for n, v in bb.init_params(cfg, seed).items()}
    for n in params:
        if n.endswith(".b"):
            params[n] = rng.normal(0, 0.1, params[n].shape)
    trace = bb.forward(params, cfg, inputs, nbr)
    # A fixed random linear functional of every output.
    w = {
        "base": rng.standard_normal(trace.base_logits.shape),
        "novel": [rng.standard_normal(a.shape) for a in trace.novel_logits],
        "over": [rng.standard_normal(a.shape) for a in trace.over_logits],
        "proj": rng.standard_normal(trace.proj_out.shape),
    }

    def loss():
        t = bb.forward(params, cfg, inputs, nbr)
        s = np.sum(w["base"] * t.base_logits) + np.sum(w["proj"] * t.proj_out)
        s += sum(np.sum(a * b) for a, b in zip(w["novel"], t.novel_logits))
        s += sum(np.sum(a * b) for a, b in zip(w["over"], t.over_logits))
        return s

    grads = bb.backward(trace, params, w["base"], w["novel"], w["over"], w["proj"])
    return params, grads, loss


def rel_err(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def central(loss, params, name, idx, h):
    old = params[name][idx]
    params[name][idx] = old + h
    fp = loss()
    params[name][idx] = old - h
    fm = loss()
    params[name][idx] = old
    return (fp - fm) / (2 * h)


def full_network(n_samples=30, seed=0, h=1e-6):
    """Max relative error over ``n_samples`` parameters drawn across all groups."""
    params, grads, loss = setup(seed)
    rng = np.random.default_rng(seed + 100)
    names = sorted(params)
    worst = 0.0
    for _ in range(n_samples):
        name = names[rng.integers(len(names))]
        idx = tuple(int(rng.integers(s)) for s in params[name].shape)
        worst = max(worst, rel_err(grads[name][idx], central(loss, params, name, idx, h)))
    return worst


def per_layer(per_group=4, seed=1, h=1e-5):
    """Max relative error per parameter group."""
    params, grads, loss = setup(seed)
    rng = np.random.default_rng(seed + 200)
    out = {}
    for name in sorted(params):
        errs = []
        for _ in range(per_group):
            idx = tuple(int(rng.integers(s)) for s in params[name].shape)
            errs.append(rel_err(grads[name][idx], central(loss, params, name, idx, h)))
        out[name] = max(errs)
    return out
