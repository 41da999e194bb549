"""Command-line entry point: ``anyface-lab <command> [options]``.

Exit codes: 0 success, 2 usage or validation, 3 encoder pretraining shortfall,
4 training divergence, 5 inversion failure, 6 gradient check failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import tns
from .dataset import load_dataset, write_dataset
from .encoders import EncoderPair, contrastive_pretrain
from .errors import (
    AnyFaceError, ConfigError, DivergenceError, InputError, PretrainingError, RangeError,
    SplitError, VocabularyError,
)
from .metrics import EvalSet, ablation_report, default_variants
from .ppm import read_ppm, write_ppm
from .trainer import RECONSTRUCTION_TERMS, SYNTHESIS_TERMS, SynthesisModel, TrainConfig, Trainer, read_checkpoint
from .world import World, WorldConfig, build_vocabulary

log = logging.getLogger("anyface_lab")

EXIT_OK, EXIT_USAGE, EXIT_PRETRAIN, EXIT_DIVERGED, EXIT_INVERSION, EXIT_GRADCHECK = 0, 2, 3, 4, 5, 6
MAX_CAPTIONS = 10


class UsageError(Exception):
    """Bad flags or inputs detected after argparse; maps to exit 2."""


# -- helpers ---------------------------------------------------------------------------


def parse_caption(text: str, vocabulary: list[str]) -> list[int]:
    """Tokens separated by commas or spaces; each is an id or a vocabulary word."""
    index = {word: i for i, word in enumerate(vocabulary)}
    tokens = []
    for raw in text.replace(",", " ").split():
        if raw.lstrip("-").isdigit():
            tok = int(raw)
            if not 0 <= tok < len(vocabulary):
                raise VocabularyError(f"token id {tok} outside vocabulary of size {len(vocabulary)}")
        elif raw in index:
            tok = index[raw]
        else:
            raise VocabularyError(f"unknown token {raw!r}; see `anyface-lab list-vocab`")
        tokens.append(tok)
    if not tokens:
        raise UsageError("empty caption")
    return tokens


def load_config(path) -> TrainConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    return TrainConfig.from_dict(data)


def load_model(checkpoint, encoders_path=None) -> SynthesisModel:
    if not Path(checkpoint).is_file():
        raise UsageError(f"checkpoint {checkpoint} not found")
    header, _ = read_checkpoint(checkpoint)
    world = World(WorldConfig(**header["world"]))
    enc_path = encoders_path or header["config"].get("encoders")
    if not enc_path or not Path(enc_path).is_file():
        raise UsageError(f"encoder checkpoint {enc_path!r} not found; pass --encoders")
    encoders = EncoderPair.load(enc_path, world)
    return SynthesisModel.from_checkpoint(checkpoint, world, encoders)


def read_captions(args, vocabulary) -> list[list[int]]:
    captions = args.caption or []
    if not 1 <= len(captions) <= MAX_CAPTIONS:
        raise UsageError(f"between 1 and {MAX_CAPTIONS} --caption flags are required, got {len(captions)}")
    return [parse_caption(c, vocabulary) for c in captions]


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"source image {path} not found")
    if path.suffix == ".tns":
        # dataset samples store [latent, image, tokens]; take the first image-shaped block
        images = [b for b in tns.read_blocks(path) if b.ndim == 3]
        if not images:
            raise UsageError(f"{path} holds no [H, W, C] image block")
        return images[0]
    return read_ppm(path)


# -- commands --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.count <= 0:
        raise UsageError("count must be positive")
    try:
        write_dataset(World(WorldConfig(seed=args.seed)), args.count, args.out, first_id=args.first_id)
    except OSError as exc:
        raise UsageError(f"cannot write dataset to {args.out}: {exc}") from None
    print(f"wrote {args.count} samples to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    if not Path(args.data).is_dir():
        raise UsageError(f"dataset directory {args.data} not found")
    world, samples = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"held_out_ids": [s.id for s in samples[-args.held_out:]], "dataset": str(args.data)}
    try:
        pair = contrastive_pretrain(world, samples, epochs=args.epochs, seed=args.seed,
                                    held_out=args.held_out, log=log.info)
    except PretrainingError as exc:
        print(f"pretraining failed: accuracy {exc.accuracy:.4f} < 0.90", file=sys.stderr)
        return EXIT_PRETRAIN
    pair.save(out / "encoders.tns", extra=extra)
    print(f"held-out retrieval accuracy {pair.accuracy:.4f}; wrote {out / 'encoders.tns'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    for key in ("dataset", "encoders"):
        value = getattr(cfg, key)
        if not value or not Path(value).exists():
            raise UsageError(f"config '{key}' path {value!r} does not exist")
    out = Path(cfg.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    world, samples = load_dataset(cfg.dataset)
    encoders = EncoderPair.load(cfg.encoders, world)
    trainer = Trainer(cfg, world, encoders, samples)
    trainer.train()
    path = trainer.save_checkpoint(out / f"model_step{trainer.step_count}.ckpt")
    columns = ["step", "L_S", "L_T", *SYNTHESIS_TERMS, *RECONSTRUCTION_TERMS]
    with open(out / "losses.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in trainer.history:
            writer.writerow({k: repr(row[k]) if k != "step" else row[k] for k in columns})
    print(f"trained {trainer.step_count} steps; wrote {path}")
    return EXIT_OK


def cmd_synth(args) -> int:
    model = load_model(args.checkpoint, args.encoders)
    captions = read_captions(args, model.world.vocabulary)
    image, latent = model.synthesize(captions, args.style_seed)
    out = Path(args.out)
    write_ppm(out, image)
    tns.write_blocks(out.with_suffix(".tns"), [latent])
    print(f"wrote {out}")
    return EXIT_OK


def cmd_manipulate(args) -> int:
    model = load_model(args.checkpoint, args.encoders)
    captions = read_captions(args, model.world.vocabulary)
    L = model.world.config.n_layers
    source = read_image(args.source)
    out = Path(args.out)
    if args.sweep:
        out.mkdir(parents=True, exist_ok=True)
        for m in range(L + 1):
            write_ppm(out / f"m_split_{m}.ppm", model.manipulate(source, captions, m))
        print(f"wrote {L + 1} images to {out}")
        return EXIT_OK
    if args.m_split is None:
        raise UsageError("--m-split or --sweep is required")
    if not 0 <= args.m_split <= L:
        raise UsageError(f"--m-split must lie in [0, {L}], got {args.m_split}")
    write_ppm(out, model.manipulate(source, captions, args.m_split))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint, args.encoders)
    _, samples = load_dataset(args.data)
    samples = samples[: args.limit]
    if len(samples) < model.encoders.dim + 1:
        raise UsageError(f"eval needs at least {model.encoders.dim + 1} samples, got {len(samples)}")
    metrics = EvalSet.build(model.encoders, samples).evaluate(model)
    report = {"fid": metrics["fid"], "rfrr": metrics["rfrr"], "diversity": metrics["diversity"],
              "cos_w_bar": metrics["cos_w_bar"], "checkpoint": str(args.checkpoint), "samples": len(samples)}
    Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True))
    print(json.dumps({k: report[k] for k in ("fid", "rfrr", "diversity")}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    try:
        spec = json.loads(Path(args.configs).read_text())
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read ablation file {args.configs}: {exc}") from None
    base = TrainConfig.from_dict(spec.get("base", {}))
    if "variants" in spec:
        variants = {name: TrainConfig.from_dict({**spec.get("base", {}), **over})
                    for name, over in spec["variants"].items()}
    else:
        variants = default_variants(base)
    for key in ("dataset", "encoders"):
        if not getattr(base, key) or not Path(getattr(base, key)).exists():
            raise UsageError(f"ablation base '{key}' path {getattr(base, key)!r} does not exist")
    if not spec.get("eval_data") or not Path(spec["eval_data"]).is_dir():
        raise UsageError("ablation file needs an existing 'eval_data' dataset directory")
    world, samples = load_dataset(base.dataset)
    encoders = EncoderPair.load(base.encoders, world)
    _, eval_samples = load_dataset(spec["eval_data"])
    eval_set = EvalSet.build(encoders, eval_samples[: spec.get("eval_limit", 256)])
    report = ablation_report(variants, spec.get("seeds", [0, 1, 2]), world, encoders, samples, eval_set,
                             out_dir=args.out, curve_every=spec.get("curve_every", 100))
    print(json.dumps(report["comparisons"]))
    failed = [r for r in report["rows"] if not r["ok"]]
    for row in failed:
        print(f"variant {row['variant']} seed {row['seed']} failed: {row['error']}", file=sys.stderr)
    return EXIT_DIVERGED if failed else EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import run_suite

    results = run_suite(points=args.points, seed=args.seed)
    failed = [r for r in results if not r.passed(args.tol)]
    for r in results:
        status = "ok" if r.passed(args.tol) else "FAIL"
        print(f"{status:4s} {r.name:28s} max_rel_error={r.max_rel_error:.3e} points={r.points} flagged={r.flagged}")
    if failed:
        for r in failed:
            print(f"gradcheck failed: {r.name} max rel. error {r.max_rel_error:.3e}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_list_vocab(args) -> int:
    for i, word in enumerate(build_vocabulary(args.attributes)):
        print(f"{i}\t{word}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anyface-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument("--list-vocab", action="store_true", help="print the caption vocabulary and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--first-id", type=int, default=0, help="id of the first sample (use for held-out sets)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-encoders", help="contrastively pretrain the text/image encoders")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="directory receiving encoders.tns and encoders.json")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--held-out", type=int, default=200)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train both streams from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--steps", type=int, help="override the config step count")
    p.add_argument("--out", help="override the config out_dir")
    p.set_defaults(func=cmd_train)

    for name, func, text in (("synth", cmd_synth, "synthesize an image from captions"),
                             ("manipulate", cmd_manipulate, "edit a source image with captions")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--encoders", help="encoder checkpoint (defaults to the path stored in the checkpoint)")
        p.add_argument("--caption", action="append", help="token ids or words, comma/space separated; repeatable")
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)
        if name == "synth":
            p.add_argument("--style-seed", type=int, default=0)
        else:
            p.add_argument("--source", required=True, help="source image (.ppm or .tns)")
            p.add_argument("--m-split", type=int)
            p.add_argument("--sweep", action="store_true", help="write one image per split value 0..L into --out")

    p = sub.add_parser("eval", help="toy-FID, RFRR and diversity of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--encoders")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--limit", type=int, default=256, help="use at most this many samples")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare ablation variants over seeds")
    p.add_argument("--configs", required=True, help="JSON file with base, variants, seeds, eval_data")
    p.add_argument("--out", default="ablation")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss and forward")
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("list-vocab", help="print the caption vocabulary")
    p.add_argument("--attributes", type=int, default=12)
    p.set_defaults(func=cmd_list_vocab)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.list_vocab:
        args.attributes = 12
        return cmd_list_vocab(args)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RangeError as exc:
        print(f"error: source cannot be inverted: {exc}", file=sys.stderr)
        return EXIT_INVERSION
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, InputError, SplitError, VocabularyError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except AnyFaceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
