"""Command-line harness: data generation, training, evaluation, rendering.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure. Every
subcommand writes a resolved-config echo (key=value lines) into its output
directory; re-running from that echo reproduces the artifacts exactly.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _read_config_file(path: str) -> dict[str, str]:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"bad config line: {line!r}")
            k, _, v = line.partition("=")
            values[k.strip()] = v.strip()
    return values


def _coerce(parser: _Parser, values: dict[str, str]) -> dict:
    """Map key=value strings onto parser defaults with the action's type."""
    out = {}
    by_dest = {a.dest: a for a in parser._actions}
    for k, v in values.items():
        dest = k.replace("-", "_")
        if dest not in by_dest:
            raise UsageError(f"unknown config key {k!r}")
        action = by_dest[dest]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            out[dest] = v.lower() in ("1", "true", "yes")
        elif action.type is not None:
            out[dest] = action.type(v)
        else:
            out[dest] = v
    return out


def _write_echo(out_dir: str, args: argparse.Namespace, skip=("config", "set")) -> None:
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for k in sorted(vars(args)):
        if k in skip or k == "func":
            continue
        v = getattr(args, k)
        if v is None:
            continue
        lines.append(f"{k.replace('_', '-')}={v}")
    with open(os.path.join(out_dir, "resolved_config.txt"), "w",
              encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _resolve_seed(value) -> int:
    if value is not None:
        return int(value)
    return int(os.environ.get("PINLAB_SEED", "0"))


def _add_common(p: _Parser) -> None:
    p.add_argument("--config", help="key=value config file; flags override")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="inline config overrides")
    p.add_argument("--seed", type=int, default=None,
                   help="global seed (fallback: PINLAB_SEED env, then 0)")
    p.add_argument("--out", required=True, help="output directory")


SPLIT_NAMES = ("captions", "train", "eval-heldout", "eval-heldin-single",
               "referral", "referral-eval")
DEFAULT_SPLITS = "captions,train,eval-heldout,referral"


def cmd_gen_data(args) -> int:
    from .codec import GridSpec, Vocabulary
    from .scene import (DatasetConfig, build_asset_bank, constraints_for,
                        generate_dataset, write_dataset)

    seed = _resolve_seed(args.seed)
    grid = GridSpec(args.image_side, args.grid_n)
    bank = build_asset_bank(args.n_train_categories, args.n_heldout_categories,
                            seed=args.bank_seed)
    vocab = Vocabulary(list(bank.all_categories), grid)
    os.makedirs(args.out, exist_ok=True)
    vocab.save(os.path.join(args.out, "vocab.txt"))
    constraints = constraints_for(args.a_max, o_max=args.o_max)
    base = dict(image_side=args.image_side, grid_n=args.grid_n,
                constraints=constraints, background=args.background,
                coord_factor=args.coord_factor)
    split_cfgs = {
        "captions": dict(n_samples=args.n_captions, seed=seed + 1,
                         categories="all", captions=True),
        "train": dict(n_samples=args.n_train, seed=seed + 2, categories="train"),
        "eval-heldout": dict(n_samples=args.n_eval, seed=seed + 3,
                             categories="heldout"),
        "eval-heldin-single": dict(n_samples=args.n_eval, seed=seed + 4,
                                   categories="train",
                                   constraints=constraints_for(1, o_max=args.o_max)),
        "referral": dict(n_samples=args.n_referral, seed=seed + 5,
                         categories="train", duplicate_prob=0.7,
                         referral=True, min_objects=2),
        "referral-eval": dict(n_samples=args.n_eval, seed=seed + 6,
                              categories="heldout", duplicate_prob=0.7,
                              referral=True, min_objects=2),
    }
    for split in args.splits.split(","):
        split = split.strip()
        if split not in SPLIT_NAMES:
            raise UsageError(f"unknown split {split!r}")
        cfg = DatasetConfig(**{**base, **split_cfgs[split]})
        samples = generate_dataset(bank, cfg)
        write_dataset(samples, args.out, split.replace("-", "_"))
        print(f"{split}: {len(samples)} samples")
    _write_echo(args.out, args)
    return 0


def cmd_pretrain(args) -> int:
    from .codec import GridSpec, Vocabulary
    from .scene import read_manifest
    from .trainer import save_vlm
    from .vlm import VLMConfig, pretrain_captions

    seed = _resolve_seed(args.seed)
    grid = GridSpec(args.image_side, args.grid_n)
    vocab = Vocabulary.load(os.path.join(args.data, "vocab.txt"), grid)
    manifest = os.path.join(args.data, "manifest_captions.tsv")
    if not os.path.exists(manifest):
        raise UsageError(f"missing captions manifest: {manifest}")
    records = read_manifest(manifest)
    config = VLMConfig(vocab_size=len(vocab), image_side=args.image_side,
                       patch_size=args.patch_size, d_vision=args.d_vision,
                       d_text=args.d_text, n_layers=args.n_layers,
                       n_heads=args.n_heads)
    params, losses = pretrain_captions(records, vocab, config, seed,
                                       steps=args.steps, batch_size=args.batch,
                                       lr=args.lr)
    os.makedirs(args.out, exist_ok=True)
    save_vlm(params, os.path.join(args.out, "vlm.ckpt"))
    with open(os.path.join(args.out, "pretrain_loss.tsv"), "w",
              encoding="utf-8") as fh:
        for i, v in enumerate(losses):
            fh.write(f"{i}\t{v:.6f}\n")
    _write_echo(args.out, args)
    print(f"pretrained VLM: fingerprint {params.fingerprint[:16]}... "
          f"final loss {losses[-1]:.4f}")
    return 0


def cmd_train(args) -> int:
    from .codec import GridSpec, Vocabulary
    from .trainer import TrainConfig, load_vlm, train

    seed = _resolve_seed(args.seed)
    vlm_path = os.path.join(args.vlm, "vlm.ckpt") if os.path.isdir(args.vlm) \
        else args.vlm
    if not os.path.exists(vlm_path):
        raise UsageError(f"missing pretrained VLM checkpoint: {vlm_path}")
    vlm = load_vlm(vlm_path)
    manifest = os.path.join(args.data, f"manifest_{args.manifest.replace('-', '_')}.tsv")
    if not os.path.exists(manifest):
        raise UsageError(f"missing manifest: {manifest}")
    vocab_path = os.path.join(args.data, "vocab.txt")
    cfg = TrainConfig(
        method=args.method, manifest_path=manifest, vocab_path=vocab_path,
        steps=args.steps, batch_size=args.batch, lr=args.lr, seed=seed,
        image_side=args.image_side, grid_n=args.grid_n,
        clip_norm=None if args.no_clip else args.clip_norm,
        pin_d_model=args.pin_d_model, pin_depth=args.pin_depth,
        pin_hidden=args.pin_hidden, pin_variant=args.pin_variant,
        coop_tokens=args.tokens if args.method == "coop" else 16,
        vpt_tokens=args.tokens if args.method.startswith("vpt") else 100,
        lora_rank=args.lora_rank, lora_alpha=args.lora_alpha)
    vocab = Vocabulary.load(vocab_path, GridSpec(args.image_side, args.grid_n))
    result = train(vlm, cfg, vocab=vocab)
    os.makedirs(args.out, exist_ok=True)
    result.checkpoint.save(os.path.join(args.out, f"{args.method}.ckpt"))
    with open(os.path.join(args.out, "loss.tsv"), "w", encoding="utf-8") as fh:
        for i, v in enumerate(result.losses):
            fh.write(f"{i}\t{v:.6f}\n")
    if result.clip_events:
        print(f"gradient clipping triggered at {len(result.clip_events)} steps")
    _write_echo(args.out, args)
    print(f"method={args.method} steps={args.steps} "
          f"final loss {result.losses[-1]:.4f}")
    return 0


def _draw_box(image: np.ndarray, box, color, dashed: bool = False) -> None:
    """Burn a 1-px outline; dashed draws a 2-on/2-off pattern."""
    x0, y0, x1, y1 = box
    h, w = image.shape[:2]
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(w, x1), min(h, y1)

    def on(i):
        return True if not dashed else (i % 4) < 2

    for x in range(x0, x1):
        if on(x - x0):
            image[y0, x] = color
            image[y1 - 1, x] = color
    for y in range(y0, y1):
        if on(y - y0):
            image[y, x0] = color
            image[y, x1 - 1] = color


def cmd_eval(args) -> int:
    from .codec import GridSpec, Vocabulary
    from .eval_harness import evaluate, precision_at, write_report
    from .scene import read_manifest, read_ppm, write_ppm
    from .trainer import load_checkpoint, load_vlm, make_predictor

    seed = _resolve_seed(args.seed)
    grid = GridSpec(args.image_side, args.grid_n)
    vocab = Vocabulary.load(os.path.join(args.data, "vocab.txt"), grid)
    manifest = os.path.join(args.data, f"manifest_{args.manifest.replace('-', '_')}.tsv")
    records = read_manifest(manifest)

    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        vlm, method = ckpt.vlm, ckpt.method
        method_name = ckpt.config.method
    else:
        if not args.vlm:
            raise UsageError("eval needs either --ckpt or --vlm")
        vlm_path = os.path.join(args.vlm, "vlm.ckpt") if os.path.isdir(args.vlm) \
            else args.vlm
        vlm = load_vlm(vlm_path)
        if args.method not in ("raw", "random", "oracle"):
            raise UsageError("--method must be raw, random, or oracle without --ckpt")
        method = None if args.method == "raw" else args.method
        method_name = args.method
    predictor = make_predictor(vlm, vocab, grid, method=method, seed=seed)
    report = evaluate(predictor, records, grid, method=method_name,
                      dataset_id=args.manifest, box_scale=args.box_scale)
    write_report(report, args.out, f"eval_{method_name}_{args.manifest}")
    line = (f"method={method_name} dataset={args.manifest} n={report.n_samples} "
            f"mIoU={report.miou:.3f} mIoU_M={report.miou_m:.3f} "
            f"mIoU_L={report.miou_l:.3f} failures={report.parse_failures}")
    if args.p_at is not None:
        line += f" P@{args.p_at:g}={precision_at(report, args.p_at):.3f}"
    print(line)
    if args.overlay:
        overlay_dir = os.path.join(args.out, "overlays")
        os.makedirs(overlay_dir, exist_ok=True)
        for rec, per in zip(records, report.per_sample):
            img = read_ppm(rec.image_path).copy()
            _draw_box(img, per.gt, (0, 255, 0), dashed=True)
            if per.predicted is not None:
                _draw_box(img, per.predicted, (255, 0, 0), dashed=False)
            write_ppm(os.path.join(overlay_dir, os.path.basename(rec.image_path)),
                      img)
    _write_echo(args.out, args)
    return 0


def _similarity_raster(sims: np.ndarray) -> np.ndarray:
    """Per-cell layout: cell i shows patch i's similarity to every patch."""
    n = sims.shape[0]
    g = int(round(np.sqrt(n)))
    canvas = np.zeros((g * g, g * g), dtype=np.uint8)
    levels = np.clip((sims + 1.0) * 0.5 * 255.0, 0, 255).astype(np.uint8)
    for i in range(n):
        r, c = divmod(i, g)
        canvas[r * g:(r + 1) * g, c * g:(c + 1) * g] = levels[i].reshape(g, g)
    return np.repeat(canvas[..., None], 3, axis=2)


def cmd_viz(args) -> int:
    from .pin import build_sinusoid, pin_forward, save_raw, similarity_map
    from .scene import write_ppm
    from .trainer import load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    if ckpt.config.method != "pin":
        raise UsageError("viz requires a PIN checkpoint")
    pin = ckpt.method.pin
    pi = pin_forward(pin).data
    os.makedirs(args.out, exist_ok=True)
    save_raw(os.path.join(args.out, "pi.raw"), pi)
    sims = similarity_map(pi)
    save_raw(os.path.join(args.out, "pi_similarity.raw"), sims)
    write_ppm(os.path.join(args.out, "pi_similarity.ppm"), _similarity_raster(sims))
    s_raw = build_sinusoid(pin.n_positions, pin.config.d_model)
    write_ppm(os.path.join(args.out, "sinusoid_similarity.ppm"),
              _similarity_raster(similarity_map(s_raw)))
    _write_echo(args.out, args)
    print(f"similarity rasters written to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    from .codec import GridSpec, Vocabulary
    from .eval_harness import SweepBudget, ablation_sweep, sweep_table
    from .scene import build_asset_bank
    from .trainer import load_vlm

    seed = _resolve_seed(args.seed)
    vlm_path = os.path.join(args.vlm, "vlm.ckpt") if os.path.isdir(args.vlm) \
        else args.vlm
    vlm = load_vlm(vlm_path)
    grid = GridSpec(args.image_side, args.grid_n)
    vocab = Vocabulary.load(os.path.join(args.data, "vocab.txt"), grid)
    bank = build_asset_bank(args.n_train_categories, args.n_heldout_categories,
                            seed=args.bank_seed)
    budget = SweepBudget(steps=args.steps, n_train=args.n_train,
                         n_eval=args.n_eval, batch_size=args.batch)
    rows = ablation_sweep(args.axis, vlm, vocab, bank, args.out, budget=budget,
                          seed=seed, image_side=args.image_side,
                          grid_n=args.grid_n)
    table = sweep_table(rows)
    with open(os.path.join(args.out, f"sweep_{args.axis}.tsv"), "w",
              encoding="utf-8") as fh:
        fh.write(table + "\n")
    print(table)
    _write_echo(args.out, args)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="pinlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="compose synthetic datasets")
    _add_common(p)
    p.add_argument("--n-captions", type=int, default=4096)
    p.add_argument("--n-train", type=int, default=4096)
    p.add_argument("--n-eval", type=int, default=512)
    p.add_argument("--n-referral", type=int, default=4096)
    p.add_argument("--image-side", type=int, default=64)
    p.add_argument("--grid-n", type=int, default=16)
    p.add_argument("--a-max", type=int, default=3)
    p.add_argument("--o-max", type=float, default=0.5)
    p.add_argument("--background", default="textured",
                   choices=("textured", "plain-white"))
    p.add_argument("--n-train-categories", type=int, default=8)
    p.add_argument("--n-heldout-categories", type=int, default=4)
    p.add_argument("--bank-seed", type=int, default=7)
    p.add_argument("--coord-factor", type=int, default=1)
    p.add_argument("--splits", default=DEFAULT_SPLITS)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="caption-pretrain and freeze the VLM")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--image-side", type=int, default=64)
    p.add_argument("--grid-n", type=int, default=16)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--d-vision", type=int, default=32)
    p.add_argument("--d-text", type=int, default=64)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--n-heads", type=int, default=4)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train PIN or a PEFT baseline")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--vlm", required=True, help="pretrain output dir or vlm.ckpt")
    p.add_argument("--method", required=True,
                   choices=("pin", "coop", "vpt-encoder", "vpt-fusion",
                            "lora-encoder"))
    p.add_argument("--manifest", default="train")
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--image-side", type=int, default=64)
    p.add_argument("--grid-n", type=int, default=16)
    p.add_argument("--clip-norm", type=float, default=10.0)
    p.add_argument("--no-clip", action="store_true")
    p.add_argument("--pin-d-model", type=int, default=16)
    p.add_argument("--pin-depth", type=int, default=2)
    p.add_argument("--pin-hidden", type=int, default=32)
    p.add_argument("--pin-variant", default="sinusoidal",
                   choices=("sinusoidal", "learned-S"))
    p.add_argument("--tokens", type=int, default=None,
                   help="prompt token count (coop default 16, vpt default 100)")
    p.add_argument("--lora-rank", type=int, default=16)
    p.add_argument("--lora-alpha", type=int, default=16)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or baseline")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", default="eval-heldout")
    p.add_argument("--ckpt", help="training checkpoint")
    p.add_argument("--vlm", help="frozen VLM (for raw/random/oracle)")
    p.add_argument("--method", default="raw")
    p.add_argument("--image-side", type=int, default=64)
    p.add_argument("--grid-n", type=int, default=16)
    p.add_argument("--box-scale", type=int, default=1)
    p.add_argument("--p-at", type=float, default=None)
    p.add_argument("--overlay", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="render insert similarity maps")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("ablate", help="run an ablation sweep")
    _add_common(p)
    p.add_argument("--axis", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vlm", required=True)
    p.add_argument("--steps", type=int, default=1200)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--n-train", type=int, default=1024)
    p.add_argument("--n-eval", type=int, default=192)
    p.add_argument("--image-side", type=int, default=64)
    p.add_argument("--grid-n", type=int, default=16)
    p.add_argument("--n-train-categories", type=int, default=8)
    p.add_argument("--n-heldout-categories", type=int, default=4)
    p.add_argument("--bank-seed", type=int, default=7)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        # two-pass parse so --config/--set become defaults that flags override
        pre, _ = parser.parse_known_args(argv)
        overrides = {}
        if getattr(pre, "config", None):
            overrides.update(_read_config_file(pre.config))
        for item in getattr(pre, "set", []):
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            k, _, v = item.partition("=")
            overrides[k] = v
        if overrides:
            sub_cmd = (argv if argv is not None else sys.argv[1:])[0]
            sub_parser = None
            for action in parser._actions:
                if isinstance(action, argparse._SubParsersAction):
                    sub_parser = action.choices.get(sub_cmd)
            if sub_parser is not None:
                sub_parser.set_defaults(**_coerce(sub_parser, overrides))
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
