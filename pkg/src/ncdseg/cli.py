"""Command-line entry point: ``ncdseg <subcommand> [options]``.

Training options resolve as command-line flag > ``--config`` JSON file >
built-in default. Every subcommand writes a run manifest (resolved
configuration, seeds, input file hashes, tool version) next to its output.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import backbone as bb
from .data_model import NcdTaskSpec, validate_task
from .dataset_io import (
    AUX_SUFFIX,
    _atomic_write,
    load_dataset,
    load_split,
    resolve_path,
    save_aux_features,
    save_cloud,
    save_dataset,
)
from .errors import NcdError
from .evaluation import evaluate, infer_cloud
from .sinkhorn import pseudo_labels, solve_assignment
from .trainer import TrainConfig, load_state, save_state, train

# flag, TrainConfig field, parser, help
CONFIG_KEYS = [
    ("aug.rot-z", "rot_z", "range", "yaw augmentation range 'lo,hi' in radians (default 0,2pi)"),
    ("aug.scale", "scale", "range", "isotropic scale range 'lo,hi' (default 0.95,1.05)"),
    ("aug.flip-prob", "flip_prob", float, "probability of mirroring x and, separately, y (default 0.5)"),
    ("aug.jitter", "jitter", float, "std of per-point Gaussian jitter (default 0.01)"),
    ("voxel-size", "voxel_size", float, "voxel edge length (default 0.05)"),
    ("sk.iters", "sk_iters", int, "Sinkhorn iterations per assignment (default 3)"),
    ("sk.eps-start", "eps_start", float, "entropy weight at the first step (default 0.3)"),
    ("sk.eps-end", "eps_end", float, "entropy weight at the last step (default 0.05)"),
    ("queue.capacity", "queue_capacity", int, "feature queue capacity (default 4096)"),
    ("queue.fraction", "queue_fraction", float, "fraction of confident features enqueued per step (default 0.1)"),
    ("queue.enabled", "use_queue", "bool", "use the class-balanced queue (default true)"),
    ("select.p", "select_p", float, "percentile for per-class confidence thresholds (default 0.3)"),
    ("select.enabled", "use_selection", "bool", "apply uncertainty-aware selection (default true)"),
    ("loss.gamma", "gamma", float, "weight of the alignment loss (default 7.0)"),
    ("loss.base-weight-rule", "base_weight_rule", str, "'inverse-log' or 'uniform' (default inverse-log)"),
    ("loss.align-base", "align_base_points", "bool", "also align base points (default false)"),
    ("pseudo-labels", "pseudo_labels", str, "'sinkhorn' or 'argmax' (default sinkhorn)"),
    ("epochs", "epochs", int, "training epochs (default 10)"),
    ("batch-size", "batch_size", int, "scenes per step (default 4)"),
    ("lr-max", "lr_max", float, "peak learning rate (default 1e-2)"),
    ("lr-min", "lr_min", float, "final learning rate (default 1e-5)"),
    ("warmup", "warmup_fraction", float, "fraction of steps spent warming up (default 0.1)"),
    ("momentum", "momentum", float, "SGD momentum (default 0.9)"),
    ("weight-decay", "weight_decay", float, "decoupled weight decay (default 1e-4)"),
    ("heads", "n_heads", int, "discovery heads (default 5)"),
    ("overcluster", "overcluster", int, "over-clustering factor o (default 3)"),
    ("neighbors", "neighborhood_k", int, "k of the k-NN pooling (default 16)"),
]
_FIELD_OF = {flag: name for flag, name, _, _ in CONFIG_KEYS}


class UsageError(Exception):
    pass


def _range(text: str) -> tuple:
    try:
        lo, hi = (float(eval_number(t)) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}") from None
    return lo, hi


def eval_number(tok: str) -> float:
    """A float, also accepting ``pi`` multiples such as ``2pi``."""
    tok = tok.strip()
    if tok.endswith("pi"):
        head = tok[:-2]
        return (float(head) if head else 1.0) * math.pi
    return float(tok)


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


_PARSERS = {"range": _range, "bool": _bool}


def _add_config_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("training configuration")
    for flag, name, kind, help_text in CONFIG_KEYS:
        g.add_argument(f"--{flag}", dest=f"cfg_{name}", type=_PARSERS.get(kind, kind),
                       default=None, metavar=name.upper(), help=help_text)
    g.add_argument("--config", type=Path, help="JSON file of configuration keys (flag names or field names)")


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for numeric kernels (default 1)")
    p.add_argument("--manifest", type=Path, help="manifest path (default: next to the main output)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ncdseg", description="Novel class discovery for point-cloud segmentation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--train", required=True, help="directory of training clouds")
    p.add_argument("--split", help="split file or shipped split name (default: <train>/task.split)")
    p.add_argument("--out", required=True, type=Path, help="checkpoint path")
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")
    _add_config_flags(p)
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint; prints the report")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--val", required=True, help="directory of evaluation clouds")
    p.add_argument("--split", help="split file or name (default: the one stored in the checkpoint)")
    p.add_argument("--head", type=int, help="discovery head (default: lowest pseudo-label entropy)")
    p.add_argument("--voxel-size", type=float, help="voxel size (default: the training value)")
    p.add_argument("--plot-data", type=Path, help="write class<TAB>iou rows here and a bar chart beside it")
    _add_common(p)

    p = sub.add_parser("pseudo-label", help="dump soft assignments of a batch's novel points")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--clouds", required=True, nargs="+", help="cloud files forming the batch")
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--eps", type=float, default=0.05, help="entropy weight (default 0.05)")
    p.add_argument("--sk-iters", type=int, default=3)
    p.add_argument("--out", required=True, type=Path, help="tab-separated output")
    _add_common(p)

    p = sub.add_parser("baseline-eums", help="offline clustering baseline")
    p.add_argument("--train", required=True)
    p.add_argument("--val", help="evaluation directory (report printed when given)")
    p.add_argument("--split")
    p.add_argument("--out", required=True, type=Path, help="checkpoint path of the fine-tuned model")
    p.add_argument("--subsample-ratio", type=float, default=0.3)
    p.add_argument("--cap", type=int, default=1000)
    p.add_argument("--eums-overcluster", type=int, default=3)
    p.add_argument("--keep-fraction", type=float, default=0.7)
    p.add_argument("--pretrain-epochs", type=int, default=10)
    p.add_argument("--finetune-epochs", type=int, default=10)
    _add_config_flags(p)
    _add_common(p)

    p = sub.add_parser("zeroshot", help="match auxiliary features against a class embedding bank")
    p.add_argument("--bank", required=True)
    p.add_argument("--val", required=True, help="directory of clouds with auxiliary features")
    p.add_argument("--split")
    p.add_argument("--out", type=Path, help="per-point predictions (one file, cloud<TAB>index<TAB>class)")
    _add_common(p)

    p = sub.add_parser("gen-synth", help="write a synthetic scene or a whole scenario")
    p.add_argument("--out", type=Path, help="single scene cloud file")
    p.add_argument("--dataset", type=Path, help="directory for a full scenario (train/ and val/)")
    p.add_argument("--scenario", default="separable", help="separable, four-novel or longtail")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    _add_common(p)
    return parser


# -- configuration -----------------------------------------------------------


def resolve_config(args, base: dict = None) -> TrainConfig:
    """Defaults, then ``base``, then the config file, then explicit flags."""
    values = dict(base or {})
    if getattr(args, "config", None) is not None:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise FileNotFoundError(f"config file not found: {args.config}") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"{args.config}: expected a JSON object")
        for key, v in loaded.items():
            values[_FIELD_OF.get(key, key)] = v
    for _, name, _, _ in CONFIG_KEYS:
        v = getattr(args, f"cfg_{name}", None)
        if v is not None:
            values[name] = v
    values["seed"] = args.seed
    try:
        return TrainConfig.from_dict(values)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


# -- manifests ---------------------------------------------------------------


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def input_hashes(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.iterdir() if q.is_file()) if p.is_dir() else [p]
        for f in files:
            if f.exists():
                out[str(f)] = file_digest(f)
    return out


def write_manifest(path, command: str, config: dict, seeds: dict, inputs) -> Path:
    manifest = {
        "tool": "ncdseg",
        "version": __version__,
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": input_hashes(inputs),
    }
    path = Path(path)
    _atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def manifest_path(args, default: Path) -> Path:
    return args.manifest if args.manifest is not None else Path(str(default) + ".manifest.json")


# -- subcommands -------------------------------------------------------------


def _load_task(split, data_dir) -> tuple:
    if split is None:
        split_path = resolve_path(data_dir) / "task.split"
        if not split_path.exists():
            raise FileNotFoundError(f"no --split given and {split_path} does not exist")
        return load_split(split_path), split_path
    task = load_split(split)
    p = resolve_path(split)
    return task, (p if p.exists() else None)


def _check(scenes, task: NcdTaskSpec):
    for cloud, _ in scenes:
        validate_task(cloud, task)


def cmd_train(args) -> int:
    scenes = load_dataset(args.train)
    task, split_path = _load_task(args.split, args.train)
    _check(scenes, task)
    state = None
    if args.resume is not None:
        _, state, meta = load_state(args.resume)
        cfg = resolve_config(args, meta["train_config"])
    else:
        cfg = resolve_config(args)
    res = train(cfg, scenes, task, state=state)
    save_state(args.out, res)
    inputs = [resolve_path(args.train)] + ([split_path] if split_path else [])
    inputs += [args.config] if args.config else []
    inputs += [args.resume] if args.resume else []
    write_manifest(manifest_path(args, args.out), "train", cfg.to_dict(), {"seed": args.seed}, inputs)
    last = res.state.log[-1] if res.state.log else {}
    print(f"trained {res.state.step} steps; final loss {last.get('total', float('nan')):.4f}; wrote {args.out}")
    return 0


def _task_from_checkpoint(meta: dict, split, val) -> NcdTaskSpec:
    if split is not None:
        return load_split(split)
    if "task" in meta:
        return NcdTaskSpec.from_dict(meta["task"])
    return _load_task(None, val)[0]


def cmd_eval(args) -> int:
    net_cfg, params, meta = bb.load_checkpoint(args.checkpoint)
    task = _task_from_checkpoint(meta, args.split, args.val)
    scenes = load_dataset(args.val)
    _check(scenes, task)
    voxel = args.voxel_size if args.voxel_size is not None else meta.get("train_config", {}).get("voxel_size", 0.05)
    report = evaluate(params, net_cfg, [c for c, _ in scenes], task, head=args.head, voxel_size=voxel)
    print(report.format())
    out_default = Path(str(args.checkpoint) + ".eval")
    if args.plot_data is not None:
        from .plotting import iou_bar_chart

        _atomic_write(args.plot_data, report.plot_data())
        iou_bar_chart(report, args.plot_data.with_suffix(".png"), title=task.split_name)
        out_default = args.plot_data
    write_manifest(manifest_path(args, out_default), "eval",
                   {"head": report.head, "voxel_size": voxel}, {"seed": args.seed},
                   [args.checkpoint, resolve_path(args.val)])
    return 0


def cmd_pseudo_label(args) -> int:
    from .dataset_io import load_cloud

    net_cfg, params, meta = bb.load_checkpoint(args.checkpoint)
    voxel = meta.get("train_config", {}).get("voxel_size", 0.05)
    if not 0 <= args.head < net_cfg.n_novel_heads:
        raise UsageError(f"--head must lie in [0, {net_cfg.n_novel_heads})")
    rows, zs = [], []
    for path in args.clouds:
        cloud = load_cloud(path)
        tr, grid = infer_cloud(params, net_cfg, cloud, voxel)
        idx = np.flatnonzero(cloud.novel_mask)
        zs.append(grid.broadcast(tr.z)[idx])
        rows.extend((Path(path).name, int(i)) for i in idx)
    z = np.concatenate(zs)
    if not len(z):
        raise NcdError("the batch has no novel points")
    protos = params[f"novel.{args.head}.w"].astype(np.float64)
    pl = pseudo_labels(solve_assignment(protos.T @ z.T, args.eps, args.sk_iters))
    lines = ["cloud\tpoint\t" + "\t".join(f"q{j}" for j in range(pl.shape[1]))]
    for (name, i), q in zip(rows, pl):
        lines.append(f"{name}\t{i}\t" + "\t".join("%.9g" % v for v in q))
    _atomic_write(args.out, "\n".join(lines) + "\n")
    write_manifest(manifest_path(args, args.out), "pseudo-label",
                   {"head": args.head, "eps": args.eps, "sk_iters": args.sk_iters}, {"seed": args.seed},
                   [args.checkpoint] + list(args.clouds))
    return 0


def cmd_eums(args) -> int:
    from .eums import EumsConfig, run_eums

    scenes = load_dataset(args.train)
    task, split_path = _load_task(args.split, args.train)
    _check(scenes, task)
    cfg = resolve_config(args)
    try:
        ecfg = EumsConfig(args.subsample_ratio, args.cap, args.eums_overcluster, args.keep_fraction,
                          args.pretrain_epochs, args.finetune_epochs, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    val = [c for c, _ in load_dataset(args.val)] if args.val else None
    out = run_eums(scenes, task, cfg, ecfg, val)
    save_state(args.out, out.finetuned)
    if out.report is not None:
        print(out.report.format())
    config = dict(cfg.to_dict(), eums=asdict(ecfg))
    inputs = [resolve_path(args.train)] + ([resolve_path(args.val)] if args.val else [])
    inputs += [split_path] if split_path else []
    write_manifest(manifest_path(args, args.out), "baseline-eums", config, {"seed": args.seed}, inputs)
    return 0


def cmd_zeroshot(args) -> int:
    from .zeroshot import load_bank, match_points, zeroshot_report

    bank = load_bank(args.bank)
    scenes = load_dataset(args.val)
    task, _ = _load_task(args.split, args.val)
    if any(a is None for _, a in scenes):
        raise FileNotFoundError(f"every cloud in {args.val} needs a {AUX_SUFFIX} feature file")
    report = zeroshot_report([a for _, a in scenes], [c.evaluation_labels() for c, _ in scenes], bank, task)
    print(report.format())
    if args.out is not None:
        lines = ["cloud\tpoint\tclass\tscore"]
        for cloud, aux in scenes:
            pred, score = match_points(aux, bank)
            lines.extend(f"{cloud.name}\t{i}\t{p}\t{s:.6f}" for i, (p, s) in enumerate(zip(pred, score)))
        _atomic_write(args.out, "\n".join(lines) + "\n")
    default = args.out if args.out is not None else Path(str(resolve_path(args.bank)) + ".zeroshot")
    write_manifest(manifest_path(args, default), "zeroshot", {}, {"seed": args.seed},
                   [resolve_path(args.bank), resolve_path(args.val)])
    return 0


def cmd_gen_synth(args) -> int:
    from .synth import SCENARIOS, SynthClass, SynthSceneSpec, class_anchors, make_scenario
    from .zeroshot import save_bank, synthetic_bank

    if (args.out is None) == (args.dataset is None):
        raise UsageError("give exactly one of --out or --dataset")
    if args.scenario not in SCENARIOS:
        raise UsageError(f"unknown scenario {args.scenario!r}; choose from {sorted(SCENARIOS)}")
    config = {"scenario": args.scenario}
    if args.out is not None:
        sc = make_scenario(args.scenario, n_train=1, n_val=0, seed=args.seed)
        cloud, aux = sc.train[0]
        save_cloud(args.out, cloud, aux.shape[1])
        aux_path = args.out.with_suffix(AUX_SUFFIX)
        save_aux_features(aux_path, aux, args.out.stem)
        target = args.out
    else:
        kw = {k: v for k, v in (("n_train", args.n_train), ("n_val", args.n_val)) if v is not None}
        sc = make_scenario(args.scenario, seed=args.seed, **kw)
        save_dataset(args.dataset / "train", sc.train, sc.task)
        save_dataset(args.dataset / "val", sc.val, sc.task)
        # Scenario-sized training options, usable as `train --config`.
        _atomic_write(args.dataset / "train_config.json",
                      json.dumps(sc.train_overrides, indent=2, sort_keys=True) + "\n")
        spec = SynthSceneSpec((SynthClass(0, "plane", 1),))
        anchors = class_anchors(max(sc.task.all_classes) + 1, spec.aux_dim, spec.anchor_seed)
        save_bank(args.dataset / "bank.ncdbank",
                  synthetic_bank(anchors, sc.task.all_classes, seed=args.seed, names=sc.task.class_names))
        config.update(n_train=len(sc.train), n_val=len(sc.val), train_overrides=sc.train_overrides)
        target = args.dataset / "scenario"
    write_manifest(manifest_path(args, target), "gen-synth", config, {"seed": args.seed}, [])
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "pseudo-label": cmd_pseudo_label,
    "baseline-eums": cmd_eums,
    "zeroshot": cmd_zeroshot,
    "gen-synth": cmd_gen_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads < 1:
        parser.print_usage(sys.stderr)
        print("ncdseg: error: --threads must be >= 1", file=sys.stderr)
        return 2
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"ncdseg {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (NcdError, OSError, ValueError, KeyError) as exc:
        print(f"ncdseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
