"""Command line: gen-data, train, infer, eval, grad-check."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .config import ConfigError, TrainConfig, parse_flat
from .numerics import deterministic, deterministic_requested

log = logging.getLogger("ldmseg")

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_DATA = 5
EXIT_CHECK = 6


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ldmseg", description="In-context segmentation with latent diffusion.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--spec", help="JSON file with dataset fields")
    g.add_argument("--samples", type=int, help="samples per category")
    g.add_argument("--categories", help="comma-separated shapes")
    g.add_argument("--texture", choices=D.TEXTURES)
    g.add_argument("--video", action="store_true")

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--data", required=True, help="training manifest.jsonl")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--iters", type=int)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--resume", help="checkpoint to continue from")

    i = sub.add_parser("infer", help="segment a query image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--query", required=True, help="query image PNG")
    i.add_argument("--prompt", nargs=2, action="append", required=True, metavar=("IMAGE", "MASK"))
    i.add_argument("--out", required=True)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--n-steps", type=int)
    i.add_argument("--dump-steps", action="store_true", help="write the decoded pseudo mask of every step")

    e = sub.add_parser("eval", help="evaluate a checkpoint or a directory of predictions")
    e.add_argument("--data", required=True, help="evaluation manifest.jsonl")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--pred-dir", help="label-map PNGs named <record id>.png")
    e.add_argument("--episodes", type=int, default=96)
    e.add_argument("--seed", type=int, default=1234)
    e.add_argument("--k", type=int, default=1)
    e.add_argument("--n-steps", type=int)
    e.add_argument("--out", help="also write the report here")

    c = sub.add_parser("grad-check", help="finite-difference check of every kernel")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--kernels-only", action="store_true")
    return ap


def _need(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}", EXIT_MISSING)
    return p


def _load_dataset(path: str) -> D.SegDataset:
    _need(path, "manifest")
    try:
        return D.SegDataset.load(path)
    except FileNotFoundError as e:
        raise CliError(str(e), EXIT_MISSING) from None
    except ValueError as e:
        raise CliError(f"bad dataset: {e}", EXIT_DATA) from None


def _load_state(path: str):
    from .training import CheckpointError, load_checkpoint
    _need(path, "checkpoint")
    try:
        return load_checkpoint(path)
    except CheckpointError as e:
        raise CliError(f"cannot load checkpoint: {e}", EXIT_DATA) from None


def cmd_gen_data(args) -> int:
    fields = {}
    if args.spec:
        fields = json.loads(_need(args.spec, "dataset spec").read_text())
    fields["seed"] = args.seed
    if args.samples is not None:
        fields["samples_per_category"] = args.samples
    if args.categories:
        fields["categories"] = [c.strip() for c in args.categories.split(",")]
    if args.texture:
        fields["texture"] = args.texture
    if args.video:
        fields["video"] = True
    try:
        spec = D.SyntheticDatasetSpec.from_dict(fields)
    except (TypeError, ValueError) as e:
        raise CliError(f"bad dataset spec: {e}", EXIT_CONFIG) from None
    records = D.generate_dataset(spec, args.out)
    h = hashlib.sha256()
    for r in records:
        for rel in (r.image, r.mask):
            h.update((Path(args.out) / rel).read_bytes())
    print(f"wrote {len(records)} samples to {args.out} sha256={h.hexdigest()}")
    return 0


def _train_config(args) -> TrainConfig:
    fields: dict = {}
    if args.config:
        fields.update(parse_flat(_need(args.config, "config").read_text()))
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        fields[k.strip()] = v.strip()
    if args.iters is not None:
        fields["iters"] = str(args.iters)
    return TrainConfig.from_dict(fields)


def cmd_train(args) -> int:
    from .training import init_state, save_checkpoint, train
    dataset = _load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        state = _load_state(args.resume)
        if args.iters is not None and args.iters != state.cfg.iters:
            raise CliError("cannot change iters when resuming", EXIT_CONFIG)
    else:
        state = init_state(_train_config(args))
    (out / "config.txt").write_text(state.cfg.to_text())
    with deterministic(deterministic_requested()):
        train(state, dataset, ckpt_dir=out)
    save_checkpoint(state, out / "final.ckpt")
    with open(out / "loss.csv", "w") as fh:
        fh.write("step,loss\n")
        fh.writelines(f"{i + 1},{v:.8g}\n" for i, v in enumerate(state.losses))
    print(f"trained {state.step} steps, final loss {state.losses[-1]:.5f}; checkpoint {out / 'final.ckpt'}")
    return 0


def _read_image(path: str, res: int) -> np.ndarray:
    img = D.png_to_image(_need(path, "image"))
    if img.shape != (3, res, res):
        raise CliError(f"{path}: expected {res}x{res} image, got {img.shape[1]}x{img.shape[2]}", EXIT_DATA)
    return img


def cmd_infer(args) -> int:
    from .inference import predict
    state = _load_state(args.ckpt)
    res = state.cfg.resolution
    query = _read_image(args.query, res)
    prompts = [(_read_image(i, res), D.png_to_labels(_need(m, "mask")) > 0) for i, m in args.prompt]
    g = state.cfg.guidance()
    if args.n_steps is not None:
        g = state.cfg.replace(n_steps=args.n_steps).guidance()
    pred = predict(state, query[None], [prompts], g, seed=args.seed, snapshots=args.dump_steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    D.binary_to_png(pred.masks[0], out / "mask.png")
    np.save(out / "pseudo_mask.npy", pred.pseudo_masks[0])
    if args.dump_steps:
        steps = np.stack([s[0] for s in pred.snapshots])
        np.save(out / "steps.npy", steps)
        for j, s in enumerate(steps):
            D.image_to_png(np.clip(s, -1, 1), out / f"step_{j:03d}.png")
    print(f"wrote {out / 'mask.png'} ({int(pred.masks[0].sum())} foreground pixels)")
    return 0


def cmd_eval(args) -> int:
    from .metrics import label_report
    dataset = _load_dataset(args.data)
    if args.pred_dir:
        pdir = _need(args.pred_dir, "prediction directory")
        preds = []
        for r in dataset.records:
            preds.append(D.png_to_labels(_need(pdir / f"{r.id}.png", "prediction")))
        report = label_report(preds, list(dataset.labels), dataset.num_categories)
    else:
        from .evaluation import evaluate
        state = _load_state(args.ckpt)
        g = state.cfg.replace(n_steps=args.n_steps).guidance() if args.n_steps else None
        episodes = D.make_eval_episodes(dataset, args.episodes, args.seed, args.k)
        report = evaluate(state, dataset, episodes, k=args.k, g=g)
    text = report.to_text()
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return 0


def cmd_grad_check(args) -> int:
    from .gradsuite import run_suite
    worst = run_suite(range(args.seeds), include_model=not args.kernels_only)
    bad = 0
    for name, err in worst.items():
        ok = err < args.tol
        bad += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {name:22s} max rel err {err:.3e}")
    print(f"{len(worst) - bad}/{len(worst)} within {args.tol:g}")
    return EXIT_CHECK if bad else 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer,
            "eval": cmd_eval, "grad-check": cmd_grad_check}


def main(argv: list[str] | None = None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except CliError as e:
        print(f"ldmseg {args.cmd}: error: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"ldmseg {args.cmd}: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"ldmseg {args.cmd}: missing file: {e}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
