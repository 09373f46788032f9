"""Command-line entry point: ``voxinit <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
``--config FILE`` reads ``key=value`` lines that act as defaults under
explicit flags. ``VOXINIT_SEED`` is the seed fallback.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from voxinit import checkpoint as ckpt_io
from voxinit import dataio, initzoo, pipeline
from voxinit.model import SSL_HEADS, HybridSegModel, ModelConfig
from voxinit.optim import NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in str(text).split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def read_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _add_model_flags(p):
    p.add_argument("--feature-size", type=int, default=4)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--attn-heads", type=int, default=4)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voxinit", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key=value defaults file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--dims", type=_ints, default=(32, 32, 32))
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("pretrain", help="step 1: self-supervised initialization")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--mask-ratio", type=float, default=0.40)
    p.add_argument("--mask-patch", type=int, default=4)
    p.add_argument("--heads", type=_ints, default=(1, 2, 3, 4), help="order heads used, e.g. 1,2,3,4")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--init", default="unetr-default", help="init scheme before step 1")
    p.add_argument("--seed", type=int)
    _add_model_flags(p)

    p = sub.add_parser("finetune", help="step 2: supervised segmentation")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", default="unetr-default", help="checkpoint path or init scheme")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--optimizer", choices=("adamw", "sgd"), default="adamw")
    p.add_argument("--val-every", type=int, default=10)
    p.add_argument("--dice-denominator", choices=("squared", "plain"), default="squared")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--seed", type=int)
    _add_model_flags(p)

    p = sub.add_parser("evaluate", help="Dice of a checkpoint on a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("val", "train", "all"), default="val")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--overlap", type=float, default=0.5)

    p = sub.add_parser("infer", help="sliding-window segmentation of one volume")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overlap", type=float, default=0.5)

    p = sub.add_parser("init-stats", help="sample an initializer and report moments")
    p.add_argument("--scheme", required=True)
    p.add_argument("--fan-in", type=int, required=True)
    p.add_argument("--fan-out", type=int, default=1)
    p.add_argument("--gain", type=float, default=1.0)
    p.add_argument("--kernel", type=_ints, default=None)
    p.add_argument("--layer-kind", choices=("conv", "linear"), default="linear")
    p.add_argument("--trunc-sigma", type=float, default=0.02)
    p.add_argument("--paper-literal-xavier", action="store_true")
    p.add_argument("--samples", type=int, default=100000)
    p.add_argument("--seed", type=int)
    return parser


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(os.environ.get("VOXINIT_SEED", "0"))


def _model_config(args, sample: dataio.VolumeSample, J: int) -> ModelConfig:
    return ModelConfig(in_channels=sample.image.shape[0], dims=sample.image.shape[1:],
                       embed_dim=args.embed_dim, depth=args.depth, heads=args.attn_heads,
                       num_classes=J, feature_size=args.feature_size)


def _num_classes(samples) -> int:
    return int(max(int(s.labels.max()) for s in samples)) + 1


def cmd_gen_data(args) -> int:
    spec = dataio.SynthSpec.for_classes(dims=args.dims, num_classes=args.classes, seed=_seed(args))
    paths = dataio.write_dataset(args.out, dataio.generate_dataset(spec, args.n))
    meta = {"dims": list(args.dims), "classes": args.classes, "n": args.n, "seed": _seed(args)}
    Path(args.out, "dataset.json").write_text(json.dumps(meta, indent=2))
    print(f"wrote {len(paths)} volumes to {args.out}")
    return EXIT_OK


def _load_split(args) -> tuple[list, list, int]:
    samples = dataio.read_dataset(args.data)
    J = _num_classes(samples)
    meta = Path(args.data, "dataset.json")
    if meta.exists():
        J = max(J, int(json.loads(meta.read_text()).get("classes", J)))
    train, val = dataio.train_val_split(samples, args.train_fraction)
    if not train:
        raise dataio.FormatError("training split is empty", 0)
    return train, val, J


def cmd_pretrain(args) -> int:
    train, _, J = _load_split(args)
    seed = _seed(args)
    mcfg = _model_config(args, train[0], J)
    model = HybridSegModel(mcfg, SSL_HEADS, initzoo.InitSpec(args.init), seed=seed)
    cfg = pipeline.Step1Config(epochs=args.epochs, lr=args.lr, mask_ratio=args.mask_ratio,
                               mask_patch=args.mask_patch, heads_used=args.heads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = pipeline.train_step1(train, model, cfg, seed=seed, csv_path=out / "step1_metrics.csv")
    ckpt_io.save(out / "step1.ckpt", res.checkpoint)
    last = res.history[-1]
    print(f"step 1 done: L_cls={last.L_cls:.4f} L_rec={last.L_rec:.4f} -> {out / 'step1.ckpt'}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    train, val, J = _load_split(args)
    seed = _seed(args)
    mcfg = _model_config(args, train[0], J)
    cfg = pipeline.Step2Config(epochs=args.epochs, lr=args.lr, init_source=args.init,
                               optimizer=args.optimizer, val_every=args.val_every,
                               dice_denominator=args.dice_denominator)
    model, report = pipeline.build_seg_model(mcfg, cfg, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if report is not None:
        Path(out, "transfer.json").write_text(json.dumps(
            {"copied": report.copied, "skipped": report.skipped, "new": report.new}, indent=2))
    res = pipeline.train_step2(train, model, cfg, seed=seed, val=val,
                               csv_path=out / "step2_metrics.csv", loss_csv_path=out / "step2_loss.csv")
    ckpt_io.save(out / "step2.ckpt", res.checkpoint)
    msg = f"step 2 done: loss={res.losses[-1]:.4f}"
    if res.final_dice is not None:
        msg += f" val mean dice={res.final_dice.mean:.2f}"
    print(msg)
    return EXIT_OK


def _load_seg_model(path) -> HybridSegModel:
    ck = ckpt_io.load(path)
    if "heads.seg.weight" not in ck.tensors:
        raise dataio.FormatError(f"{path} has no segmentation head", 0)
    model = HybridSegModel(ModelConfig.from_dict(ck.model_config))
    model.load_state_dict(ck.tensors)
    return model


def cmd_evaluate(args) -> int:
    samples = dataio.read_dataset(args.data)
    train, val = dataio.train_val_split(samples, args.train_fraction)
    chosen = {"val": val, "train": train, "all": samples}[args.split]
    if not chosen:
        raise dataio.FormatError(f"split {args.split!r} is empty", 0)
    model = _load_seg_model(args.ckpt)
    res = pipeline.evaluate(chosen, model, overlap=args.overlap)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res.write(out / "eval.csv", out / "eval.json", model.cfg.num_classes)
    print(f"mean dice {res.mean.mean:.2f} over {len(chosen)} volumes")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = _load_seg_model(args.ckpt)
    sample = dataio.read_volume(args.input)
    labels = pipeline.sliding_window_infer(dataio.normalize(sample.image), model,
                                           model.cfg.dims, args.overlap)
    dataio.write_volume(args.out, dataio.VolumeSample(sample.image, labels, sample.id))
    print(f"wrote labels to {args.out}")
    return EXIT_OK


def cmd_init_stats(args) -> int:
    ks = tuple(args.kernel) if args.kernel else None
    spec = initzoo.InitSpec(args.scheme, gain=args.gain, fan_in=args.fan_in, fan_out=args.fan_out,
                            kernel_sizes=ks, trunc_sigma=args.trunc_sigma,
                            paper_literal_xavier=args.paper_literal_xavier, seed=_seed(args))
    w = initzoo.sample(spec, (args.samples,), args.layer_kind).data
    stats = {"scheme": spec.scheme, "n": int(w.size), "mean": float(w.mean()), "std": float(w.std()),
             "min": float(w.min()), "max": float(w.max())}
    print(json.dumps(stats))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "evaluate": cmd_evaluate, "infer": cmd_infer, "init-stats": cmd_init_stats}


def _apply_config(parser: argparse.ArgumentParser, command: str, path) -> None:
    defaults = read_config_file(path)
    sub = parser._subparsers._group_actions[0].choices[command]
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(defaults) - known)
    if unknown:
        raise UsageError(f"{path}: unknown keys {', '.join(unknown)}")
    # values go through each flag's own type; required flags become optional
    converted = {}
    for action in sub._actions:
        if action.dest in defaults:
            raw = defaults[action.dest]
            if action.type is not None:
                converted[action.dest] = action.type(raw)
            elif isinstance(action, argparse._StoreTrueAction):
                converted[action.dest] = raw.lower() in ("1", "true", "yes")
            else:
                converted[action.dest] = raw
            action.required = False
    sub.set_defaults(**converted)


def _parse(argv) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if known.config and command:
        _apply_config(parser, command, known.config)
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError(parser.format_help())
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _parse(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (argparse.ArgumentTypeError, OSError) as exc:
        print(f"voxinit: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"voxinit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (dataio.FormatError, FileNotFoundError, dataio.SynthSpecError) as exc:
        print(f"voxinit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, initzoo.InitSpecError) as exc:
        print(f"voxinit: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
