"""``condattn`` command line: gen-data, train, eval, caption, visualize, grad-check.

Machine-readable CSV goes to stdout, prose to stderr. Exit status is 0 on
success, 1 on a usage error and 2 on a runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import os
import sys

import numpy as np

from . import dataset as ds
from .attention import AttentionMap, export_map, min_max_scale, write_pgm
from .autodiff import Tensor
from .backbone import layer_shapes
from .decode import beam_search, evaluate, greedy_caption
from .models import RecognitionModel
from .trainer import TrainConfig, check_task, checkpoint_load, checkpoint_save, fit, new_run

log = logging.getLogger("condattn")

TRAIN_TASKS = {"recognition": "recognition", "glyphs": "recognition", "caption": "caption", "captions": "caption"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _seed(value: int | None) -> int | None:
    if value is not None:
        return value
    env = os.environ.get("CATN_SEED")
    return int(env) if env else None


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    seed = _seed(args.seed) or 0
    if args.task == "glyphs":
        kw = {"n_samples": args.n, "max_digits": args.max_digits}
        if args.noise is not None:
            kw["noise"] = args.noise
        if args.clutter is not None:
            kw["clutter"] = args.clutter
        data = ds.synth_glyphs(seed, ds.GlyphConfig(**kw))
    else:
        if args.clutter:
            log.warning("--clutter has no effect on caption scenes")
        kw = {"n_samples": args.n}
        if args.noise is not None:
            kw["noise"] = args.noise
        data, _ = ds.synth_captions(seed, ds.CaptionConfig(**kw))
    ds.save(data, args.out)
    print("n,sha256")
    print(f"{len(data)},{sha256_file(args.out)}")
    log.info("wrote %d %s samples to %s", len(data), args.task, args.out)
    return 0


def _train_config(args) -> TrainConfig:
    """Flags override the config file, which overrides the built-in defaults."""
    values = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            values = TrainConfig.parse_kv(fh.read())
    if "seed" not in values and _seed(None) is not None:
        values["seed"] = _seed(None)
    flags = {
        "task": TRAIN_TASKS[args.task] if args.task else None,
        "scales": args.scales,
        "lr": args.lr,
        "batch_size": args.batch,
        "epochs": args.epochs,
        "lam": args.lam,
        "seed": args.seed,
        "preset": args.preset,
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    return TrainConfig(**values)


def _fit_to_data(config: TrainConfig, data) -> TrainConfig:
    """Input geometry and vocabulary follow the dataset."""
    if config.task == "recognition":
        return dataclasses.replace(config, in_channels=1, input_hw=ds.CROP)
    c, h = data.images.shape[1], data.images.shape[2]
    return dataclasses.replace(config, in_channels=int(c), input_hw=int(h), vocab_size=len(data.vocab))


def cmd_train(args) -> int:
    data = ds.load(args.data)
    if args.resume:
        ck = checkpoint_load(args.resume)
        config = ck.config
        if args.epochs is not None:
            config = dataclasses.replace(config, epochs=args.epochs)
        model, adam, rng, start = ck.model, ck.adam, ck.rng, ck.epoch
        log.info("resuming %s at epoch %d", args.resume, start)
    else:
        config = _fit_to_data(_train_config(args), data)
        model, adam, rng = new_run(config)
        start = 0
    check_task(model, data)
    if start == 0:
        checkpoint_save(args.ckpt, model, config, adam, rng, 0)
    print("epoch,loss,acc", flush=True)

    def report(m):
        print(f"{m['epoch']},{m['loss']!r},{m['acc']!r}", flush=True)

    fit(model, data, config, adam, rng, start_epoch=start, ckpt_path=args.ckpt, on_epoch=report)
    return 0


def _load_pair(args):
    ck = checkpoint_load(args.ckpt)
    data = ds.load(args.data)
    check_task(ck.model, data)
    return ck, data


def cmd_eval(args) -> int:
    ck, data = _load_pair(args)
    if len(data) == 0:
        raise ValueError("empty dataset")
    beam = args.beam
    if isinstance(ck.model, RecognitionModel):
        if beam is not None:
            log.warning("--beam ignored: recognition decodes greedily")
        beam = 1
    elif beam is None:
        beam = 3
    sys.stdout.write(evaluate(ck.model, data, beam=beam).to_csv())
    return 0


def _check_index(data, index: int) -> None:
    if not 0 <= index < len(data):
        raise IndexError(f"index {index} out of range for {len(data)} samples")


def cmd_caption(args) -> int:
    ck, data = _load_pair(args)
    model = ck.model
    indices = range(len(data)) if args.index is None else [args.index]
    print("index,caption")
    for i in indices:
        _check_index(data, i)
        img = data.images[i].astype(np.float64)
        hyp = beam_search(model, img, args.beam) if args.beam > 1 else greedy_caption(model, img)
        print(f"{i},{data.vocab.decode(hyp.tokens)}")
    return 0


def _write_maps(maps: list[AttentionMap], out_dir: str) -> int:
    for amap in maps:
        total = float(amap.weights.data.sum())
        assert abs(total - 1.0) < 1e-9, f"map step {amap.step} scale {amap.scale_id} sums to {total}"
        log.info("step %d scale %d: weight sum %.12f", amap.step, amap.scale_id, total)
        export_map(amap, out_dir)
    return len(maps)


def cmd_visualize(args) -> int:
    ck, data = _load_pair(args)
    _check_index(data, args.index)
    os.makedirs(args.out, exist_ok=True)
    model = ck.model
    lines = []
    if isinstance(model, RecognitionModel):
        image = ds.crop_batch(data.images[args.index : args.index + 1], None, train=False)
        pred, steps = model.predict(image)
        maps = [AttentionMap(Tensor(m.weights.data[0]), m.scale_id, m.step, m.hw) for s in steps for m in s.maps]
        for t, s in enumerate(steps, start=1):
            label = int(pred[0, t - 1])
            lines.append(f"{t},{label},{float(s.probs.data[0, label])!r}")
    else:
        image = data.images[args.index : args.index + 1].astype(np.float64)
        hyp = beam_search(model, image[0], 3)
        tokens = np.array([hyp.tokens], dtype=np.int64)
        probs, alphas, _ = model.teacher_forced(model.constants(), image, tokens)
        shapes = {ls.name: ls.hw for ls in layer_shapes(model.config.backbone)}
        taps = model.config.backbone.taps
        scale_ids = [2] if model.config.scales == "att1" else [1, 2]
        maps = []
        for stack, sid in zip(alphas, scale_ids):
            hw = shapes[taps[sid - 1]]
            for t in range(tokens.shape[1]):
                maps.append(AttentionMap(Tensor(stack.data[0, t]), sid, t + 1, (hw, hw)))
        for t, tok in enumerate(hyp.tokens, start=1):
            lines.append(f"{t},{data.vocab.words[tok]},{float(probs.data[0, t - 1, tok])!r}")
    n = _write_maps(maps, args.out)
    write_pgm(os.path.join(args.out, "input.pgm"), min_max_scale(image[0].mean(axis=0)))
    with open(os.path.join(args.out, "prediction.txt"), "w", encoding="utf-8") as fh:
        fh.write("step,prediction,probability\n" + "\n".join(lines) + "\n")
    log.info("wrote %d attention maps to %s", n, args.out)
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import main_check

    ok, report, elapsed = main_check(_seed(args.seed) or 0)
    sys.stdout.write(report)
    log.info("grad-check %s in %.1f s", "passed" if ok else "FAILED", elapsed)
    return 0 if ok else 2


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="condattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset file")
    g.add_argument("--task", choices=("glyphs", "captions"), required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--seed", type=int)
    g.add_argument("--clutter", type=float)
    g.add_argument("--noise", type=float)
    g.add_argument("--max-digits", type=int, default=5)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model, checkpointing every epoch")
    t.add_argument("--task", choices=sorted(TRAIN_TASKS))
    t.add_argument("--data", required=True)
    t.add_argument("--scales", choices=("att1", "att2", "none"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--preset", choices=("desk", "tiny", "full", "caption"))
    t.add_argument("--ckpt", required=True)
    t.add_argument("--resume")
    t.add_argument("--config", help="key=value file; flags take precedence")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="print an evaluation report as CSV")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--beam", type=int)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("caption", help="decode captions")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--index", type=int)
    c.add_argument("--beam", type=int, default=3)
    c.set_defaults(fn=cmd_caption)

    v = sub.add_parser("visualize", help="export attention maps as PGM images")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--index", type=int, required=True)
    v.add_argument("--out", required=True)
    v.set_defaults(fn=cmd_visualize)

    k = sub.add_parser("grad-check", help="finite-difference gradient suite")
    k.add_argument("--seed", type=int)
    k.set_defaults(fn=cmd_grad_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except (OSError, ValueError, KeyError, IndexError, RuntimeError, AssertionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
