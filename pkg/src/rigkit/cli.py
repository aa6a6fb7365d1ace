"""Command-line interface: rigkit synth|train|rig|finetune|eval|animate.

Exit codes: 0 success, 2 configuration error, 3 input error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import pipeline
from .errors import ConfigError, InputError, NumericalError
from .sampling import read_obj, write_obj
from .skeleton import tree_to_dict
from .synthdata import generate_character


def _add_config_arg(p):
    p.add_argument("--config", type=Path, default=None,
                   help="TOML run configuration ([run]/[model]/[synth]/[lambdas])")


def _load_config(args, **overrides) -> pipeline.RunConfig:
    if args.config is not None:
        return pipeline.config_from_toml(args.config, overrides)
    return pipeline.config_from_dict({}, overrides)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rigkit",
                                 description="auto-rigging toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic characters")
    _add_config_arg(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train the coarse or fine stage")
    _add_config_arg(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--stage", choices=["coarse", "fine"], default=None)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("rig", help="rig a mesh with trained checkpoints")
    p.add_argument("--mesh", type=Path, required=True)
    p.add_argument("--coarse", type=Path, required=True)
    p.add_argument("--fine", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dense-weights", action="store_true")
    p.add_argument("--no-hierarchical", action="store_true")

    p = sub.add_parser("finetune", help="extra-bone fine-tuning")
    _add_config_arg(p)
    p.add_argument("--base", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate checkpoints on validation data")
    _add_config_arg(p)
    p.add_argument("--coarse", type=Path, required=True)
    p.add_argument("--fine", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--no-hierarchical", action="store_true")
    p.add_argument("--gt-canonical", action="store_true")

    p = sub.add_parser("animate", help="export an OBJ sequence from a rig")
    p.add_argument("--rig", type=Path, required=True)
    p.add_argument("--mesh", type=Path, required=True)
    p.add_argument("--clip", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mode", choices=["linear", "dq"], default="linear")
    return ap


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"config": asdict(cfg.synth), "count": args.count,
                "seed0": args.seed, "characters": []}
    for i in range(args.count):
        seed = args.seed + i
        char = generate_character(cfg.synth, seed)
        rigged = char.character
        stem = f"char_{seed:05d}"
        write_obj(out / f"{stem}.obj", rigged.mesh)
        doc = {
            "tree": tree_to_dict(rigged.tree),
            "rest_joints": rigged.skeleton.joints.tolist(),
            "weights_dense": rigged.weights.w.tolist(),
            "seed": seed,
        }
        (out / f"{stem}.rig.json").write_text(json.dumps(doc, sort_keys=True))
        manifest["characters"].append(stem)
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True,
                                                  indent=1))
    print(f"wrote {args.count} characters to {out}")
    return 0


def cmd_train(args) -> int:
    overrides = {"seed": args.seed}
    if args.steps is not None:
        overrides["total_steps"] = args.steps
    if args.stage is not None:
        overrides["stage"] = args.stage
    cfg = _load_config(args, **overrides)
    if args.stage is not None and cfg.model.stage != args.stage:
        from dataclasses import replace
        cfg = replace(cfg, model=replace(cfg.model, stage=args.stage))
        cfg.validate()
    path = pipeline.train(cfg, args.out)
    print(str(path))
    return 0


def cmd_rig(args) -> int:
    pipeline.rig(args.mesh, args.coarse, args.fine, out_path=args.out,
                 seed=args.seed, hierarchical=not args.no_hierarchical,
                 dense_weights=args.dense_weights)
    print(str(args.out))
    return 0


def cmd_finetune(args) -> int:
    overrides = {"seed": args.seed, "stage": "finetune_extra"}
    if args.steps is not None:
        overrides["total_steps"] = args.steps
    cfg = _load_config(args, **overrides)
    path = pipeline.finetune_extra(args.base, cfg, args.out)
    print(str(path))
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    if args.no_hierarchical:
        from dataclasses import replace
        cfg = replace(cfg, hierarchical=False)
    mean, _ = pipeline.evaluate(cfg, args.coarse, args.fine,
                                out_path=args.out,
                                gt_canonical=args.gt_canonical)
    print(mean.table())
    return 0


def cmd_animate(args) -> int:
    rig_doc = pipeline.load_rigfile(args.rig)
    mesh = read_obj(args.mesh)
    _, frames = pipeline.load_clip(args.clip)
    paths = pipeline.export_animation(rig_doc, mesh, frames, args.out,
                                      mode=args.mode)
    print(f"wrote {len(paths)} frames to {args.out}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "rig": cmd_rig,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "animate": cmd_animate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (InputError, OSError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
