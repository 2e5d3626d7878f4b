"""``vamos-octa`` command line: phantom | split | corrupt | train | infer | project | eval | sweep | losscheck.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 check failure.
Every subcommand writes the fully resolved configuration next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from . import metrics
from .corruption import CorruptionConfig, apply_mask, generate_fixed_masks
from .errors import CapacityError, ConfigError, DataError, ShapeError
from .experiments import derive_seed, fold_split, severity_sweep
from .loss import GRADCHECK_OPS, LossConfig, grad_check
from .network import (ModelConfig, TrainConfig, build_model, infer_volume, load_checkpoint,
                      set_deterministic, train)
from .projection import enface_mip, write_image
from .volume import (PhantomConfig, generate_phantom, load_mask, load_volume, save_mask,
                     save_volume)

log = logging.getLogger("vamos_octa")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECK = 0, 2, 3, 4

DEFAULT_EVAL = {"events": 6, "mask_seed": 1234, "lengths": list(range(1, 11))}
SECTIONS = ("phantom", "corruption", "model", "train", "loss", "eval")


# --------------------------------------------------------------------------
# configuration


def _plain(obj):
    if isinstance(obj, tuple):
        return [_plain(x) for x in obj]
    if isinstance(obj, list):
        return [_plain(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def default_config() -> dict:
    train_cfg = asdict(TrainConfig())
    train_cfg.pop("corruption")
    return _plain({
        "phantom": asdict(PhantomConfig()),
        "corruption": asdict(CorruptionConfig()),
        "model": asdict(ModelConfig()),
        "train": train_cfg,
        "loss": LossConfig().to_dict(),
        "eval": dict(DEFAULT_EVAL),
    })


def resolve_config(path=None, seed=None, deterministic=False, overrides=None) -> dict:
    """Defaults, then the JSON file, then ``--seed``/``--deterministic``, then flag overrides."""
    cfg = default_config()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section, values in user.items():
            if section == "phantom_seed":
                cfg["phantom_seed"] = int(values)
                continue
            if section not in cfg or not isinstance(values, dict):
                raise ConfigError(f"unknown config section {section!r}")
            unknown = set(values) - set(cfg[section])
            if unknown:
                raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
            cfg[section].update(_plain(values))
    if seed is not None:
        cfg["phantom_seed"] = seed
        cfg["corruption"]["seed"] = seed
        cfg["model"]["seed"] = seed
        cfg["train"]["seed"] = seed
    if deterministic:
        cfg["train"]["deterministic"] = True
    for (section, key), value in (overrides or {}).items():
        if value is not None:
            cfg[section][key] = _plain(value)
    cfg.setdefault("phantom_seed", 0)
    return cfg


def _tuples(d: dict, cls) -> dict:
    names = {f.name for f in fields(cls)}
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in names}


def typed(cfg: dict):
    """Typed config objects ``(phantom, corruption, model, train, loss)``."""
    try:
        phantom = PhantomConfig(**_tuples(cfg["phantom"], PhantomConfig))
        phantom.validate()
        corruption = CorruptionConfig(**cfg["corruption"])
        model = ModelConfig(**cfg["model"])
        train_cfg = TrainConfig(**_tuples(cfg["train"], TrainConfig),
                                corruption=replace(corruption, mode="dynamic"))
        loss = LossConfig.from_dict(_tuples(cfg["loss"], LossConfig))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return phantom, corruption, model, train_cfg, loss


def write_resolved(cfg: dict, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(json.dumps(cfg, indent=2) + "\n")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _out_dir(args) -> Path:
    if args.out is None:
        raise ConfigError("--out is required")
    return Path(args.out)


# --------------------------------------------------------------------------
# subcommands


def cmd_phantom(args, cfg):
    out = _out_dir(args)
    phantom, *_ = typed(cfg)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(args.count):
        vseed = derive_seed(cfg["phantom_seed"], i)
        name = f"phantom_{i:02d}.octav"
        save_volume(generate_phantom(phantom, vseed), out / name)
        entries.append({"id": f"phantom_{i:02d}", "file": name, "seed": vseed,
                        "sha256": _sha256(out / name)})
    manifest = {"seed": cfg["phantom_seed"], "phantom": cfg["phantom"], "volumes": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    write_resolved(cfg, out)
    return EXIT_OK


def cmd_split(args, cfg):
    manifest_path = Path(args.manifest)
    manifest = json.loads(manifest_path.read_text())
    vols = manifest["volumes"]
    split = fold_split(len(vols), args.fold)
    base = manifest_path.parent
    doc = {"fold": args.fold, "n_volumes": len(vols)}
    for part, idx in split.items():
        doc[part] = [str(base / vols[i]["file"]) for i in idx]
    out = _out_dir(args)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=2) + "\n")
    write_resolved(cfg, out.parent)
    return EXIT_OK


def cmd_corrupt(args, cfg):
    out = _out_dir(args)
    _, corruption, *_ = typed(cfg)
    v = load_volume(args.volume)
    mask = generate_fixed_masks(replace(corruption, mode="fixed"), v.n_slices, cfg["eval"]["events"])
    out.mkdir(parents=True, exist_ok=True)
    save_volume(apply_mask(v, mask), out / "corrupted.octav")
    save_mask(mask, out / "corrupted.mask.json")
    write_resolved(cfg, out)
    return EXIT_OK


def cmd_train(args, cfg):
    out = _out_dir(args)
    _, _, model_cfg, train_cfg, loss_cfg = typed(cfg)
    if args.split:
        files = json.loads(Path(args.split).read_text())["train"]
    else:
        files = args.volumes or []
    if not files:
        raise ConfigError("train needs --split or --volumes")
    volumes = [load_volume(f) for f in files]
    write_resolved(cfg, out)
    model = build_model(model_cfg)
    train(model, volumes, train_cfg, loss_cfg, out_dir=out)
    return EXIT_OK


def cmd_infer(args, cfg):
    out = _out_dir(args)
    if train_deterministic(cfg):
        set_deterministic(True)
    model, _ = load_checkpoint(args.checkpoint)
    restored = infer_volume(model, load_volume(args.volume), load_mask(args.mask))
    out.parent.mkdir(parents=True, exist_ok=True)
    save_volume(restored, out)
    write_resolved(cfg, out.parent)
    return EXIT_OK


def cmd_project(args, cfg):
    out = _out_dir(args)
    if args.kind != "enface-mip":
        raise ConfigError(f"unsupported projection kind {args.kind!r}")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_image(enface_mip(load_volume(args.volume)), out)
    return EXIT_OK


def cmd_eval(args, cfg):
    out = _out_dir(args)
    mask = load_mask(args.mask)
    report = metrics.evaluate_pair(
        load_volume(args.restored), load_volume(args.gt), mask,
        volume_id=args.volume_id or Path(args.gt).stem,
        mask_seed=cfg["corruption"]["seed"], config=cfg,
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.dumps())
    return EXIT_OK


def cmd_sweep(args, cfg):
    out = _out_dir(args)
    if train_deterministic(cfg):
        set_deterministic(True)
    model, _ = load_checkpoint(args.checkpoint)
    lengths = args.lengths if args.lengths is not None else cfg["eval"]["lengths"]
    rows = severity_sweep(model, load_volume(args.volume), lengths)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["block_length", "mie_corrupted", "mie_restored"],
                                lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
    write_resolved(cfg, out)
    return EXIT_OK


def cmd_losscheck(args, cfg):
    ops = sorted(GRADCHECK_OPS) if args.op == "all" else [args.op]
    seed = args.seed if args.seed is not None else 0
    ok = True
    for op in ops:
        if op not in GRADCHECK_OPS:
            raise ConfigError(f"unknown op {op!r}; choose from {sorted(GRADCHECK_OPS)}")
        report = grad_check(op, trials=args.trials, seed=seed, threshold=args.threshold)
        print(report.summary())
        for f in report.failures[:5]:
            print(f"  trial {f[0]} pixel ({f[1]}, {f[2]}): rel_err={f[3]:.3e}")
        ok &= report.passed
    return EXIT_OK if ok else EXIT_CHECK


def train_deterministic(cfg) -> bool:
    return bool(cfg["train"].get("deterministic", False))


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--deterministic", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vamos-octa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="generate phantom volumes")
    p.add_argument("--count", type=int, default=7)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("split", parents=[common], help="fold rotation of a phantom manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("corrupt", parents=[common], help="apply a fixed corruption mask")
    p.add_argument("--volume", required=True)
    p.add_argument("--p", type=float)
    p.add_argument("--max-block", type=int)
    p.add_argument("--events", type=int)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--split")
    p.add_argument("--volumes", nargs="+")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int, dest="max_steps")
    p.add_argument("--lambda-proj", type=float)
    p.add_argument("--axes", nargs="+", choices=["axial", "lateral"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="restore corrupted slices")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--mask", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("project", parents=[common], help="export an en face projection")
    p.add_argument("--kind", default="enface-mip")
    p.add_argument("--volume", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("eval", parents=[common], help="metric report for a restored volume")
    p.add_argument("--restored", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--volume-id")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="MIE versus corruption block length")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--lengths", type=int, nargs="+")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("losscheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--op", default="all", help=f"one of {sorted(GRADCHECK_OPS)} or 'all'")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.set_defaults(func=cmd_losscheck)
    return parser


def _overrides(args) -> dict:
    ov = {}
    for flag, key in (("p", ("corruption", "p")), ("max_block", ("corruption", "max_block")),
                      ("events", ("eval", "events")), ("epochs", ("train", "epochs")),
                      ("max_steps", ("train", "max_steps")),
                      ("lambda_proj", ("loss", "lambda_proj")), ("axes", ("loss", "projection_axes"))):
        if getattr(args, flag, None) is not None:
            ov[key] = getattr(args, flag)
    return ov


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, args.seed, args.deterministic, _overrides(args))
        return args.func(args, cfg)
    except (ConfigError, CapacityError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError, FileNotFoundError, IndexError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
