"""Command-line interface: synth, augment, train, score, eval.

Configuration is a single flat key/value namespace. Values resolve in order
defaults -> --config file -> command-line flags, every run writes its fully
resolved configuration into the run directory, and all commands are
deterministic under --seed. Artifacts land in <out>/<run-id>/ where the
run id is a hash of the resolved configuration, so a rerun with identical
settings reproduces identical bytes in the same place.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .augment import _draw_pair, generate_cutpaste_pool, generate_pseudo_pool, saliency_cut
from .errors import ConfigError, SaliencyCutError
from .evaluate import ProtocolSpec, run_protocol
from .loss import DeviationConfig
from .model import ArchConfig, init_model, inference_heads, load_model, save_model
from .saliency import (
    SaliencyConfig,
    SaliencyMask,
    bspline_smooth,
    channel_l2,
    downsample_to_grid,
    input_gradients,
    normalize_minmax,
    threshold_mask,
)
from .train import TrainConfig, train

# One flat registry: key -> (type, default, help). Defaults follow the
# hyperparameters the package is calibrated around (grid 18, threshold 0.4,
# margin 5, top-K 10%, 30 epochs x 20 iterations, batch 48).
CONFIG_KEYS = {
    "seed": (int, 0, "master seed; every command is deterministic under it"),
    "image_size": (int, 64, "square image/model input size"),
    "channels": (str, "16,32,64,64", "backbone conv channels per stage"),
    "mlp_hidden": (int, 64, "hidden width of the normal-head MLP"),
    "k_fraction": (float, 0.1, "top-K fraction of scored locations (K=10%)"),
    "grid_size": (int, 18, "saliency downsampling grid size (g=18)"),
    "threshold": (float, 0.4, "saliency mask threshold (0.4)"),
    "spline_order": (int, 3, "B-spline smoothing order"),
    "margin": (float, 5.0, "deviation-loss Z-score margin (a=5)"),
    "prior_count": (int, 5000, "Gaussian reference draws per refresh"),
    "prior_refresh": (str, "iteration", "reference refresh: iteration|epoch"),
    "epochs": (int, 30, "training epochs (30)"),
    "iterations_per_epoch": (int, 20, "optimizer steps per epoch (20)"),
    "batch_size": (int, 48, "training batch size (48, stratified halves)"),
    "learning_rate": (float, 1e-3, "Adam learning rate"),
    "weight_decay": (float, 0.0, "L2 weight decay"),
    "augmentation": (str, "saliencycut",
                     "pseudo-anomaly mode: saliencycut|random_cut_paste|none"),
    "texture": (str, "stripes", "corpus texture: stripes|checker|noise"),
    "defects": (str, "blotch,scratch,hole", "corpus defect types"),
    "normals": (int, 200, "normal samples to synthesize"),
    "per_defect": (str, "20", "anomalies per defect type (int or comma list)"),
    "setting": (str, "general", "protocol: general|hard|anomaly_free"),
    "budget": (int, 10, "seen-anomaly budget (0, 1, or 10)"),
    "seen_type": (str, "", "seen anomaly type for the hard setting"),
    "trials": (int, 3, "independent trials per protocol run"),
    "count": (int, 0, "pseudo samples to generate (0 = one per normal)"),
}

_COMMAND_KEYS = {
    "synth": ("seed", "image_size", "texture", "defects", "normals", "per_defect"),
    "augment": ("seed", "image_size", "channels", "mlp_hidden", "k_fraction",
                "grid_size", "threshold", "spline_order", "margin", "prior_count",
                "augmentation", "count"),
    "train": ("seed", "image_size", "channels", "mlp_hidden", "k_fraction",
              "grid_size", "threshold", "spline_order", "margin", "prior_count",
              "prior_refresh", "epochs", "iterations_per_epoch", "batch_size",
              "learning_rate", "weight_decay", "augmentation"),
    "score": ("seed",),
    "eval": ("seed", "image_size", "channels", "mlp_hidden", "k_fraction",
             "grid_size", "threshold", "spline_order", "margin", "prior_count",
             "prior_refresh", "epochs", "iterations_per_epoch", "batch_size",
             "learning_rate", "weight_decay", "augmentation", "setting",
             "budget", "seen_type", "trials"),
}


def _config_epilog():
    lines = ["configuration keys (file `key = value`, flags override):"]
    for key, (_, default, help_text) in CONFIG_KEYS.items():
        lines.append(f"  {key} = {default}  -- {help_text}")
    return "\n".join(lines)


def load_config_file(path):
    """Parse a flat `key = value` file with # comments; reject unknown keys."""
    values = {}
    bad = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            bad.append(f"line {lineno}: '{raw.strip()}'")
            continue
        if key not in CONFIG_KEYS:
            bad.append(f"line {lineno}: unknown key '{key}'")
            continue
        try:
            values[key] = CONFIG_KEYS[key][0](value)
        except ValueError:
            bad.append(f"line {lineno}: bad value for '{key}': '{value}'")
    if bad:
        raise ConfigError("config file rejected: " + "; ".join(bad))
    return values


def _build_parser(file_values):
    parser = argparse.ArgumentParser(
        prog="saliencycut",
        description="Saliency-guided pseudo-anomaly augmentation and "
                    "two-head deviation scoring.",
        epilog=_config_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--config", help="flat key=value configuration file")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_command(name, help_text, need_data=False, need_out=True):
        p = sub.add_parser(
            name, help=help_text, epilog=_config_epilog(),
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        p.add_argument("--config", help="flat key=value configuration file")
        if need_data:
            p.add_argument("--data", required=True, help="dataset root directory")
        if need_out:
            p.add_argument("--out", required=True,
                           help="output root; artifacts go to <out>/<run-id>/")
        for key in _COMMAND_KEYS[name]:
            ktype, default, help_text_k = CONFIG_KEYS[key]
            resolved = file_values.get(key, default)
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=ktype,
                           default=resolved, help=f"{help_text_k} (default {resolved})")
        return p

    add_command("synth", "synthesize a defect-texture corpus")

    p_aug = add_command("augment", "generate pseudo anomalies from a corpus",
                        need_data=True)
    p_aug.add_argument("--checkpoint", help="model checkpoint; omitted = fresh seeded init")
    p_aug.add_argument("--dump-saliency", action="store_true",
                       help="also write saliency maps/masks as PGM")
    p_aug.add_argument("--force-mask", choices=("ones", "zeros"),
                       help="(testing) bypass saliency with a constant mask")
    p_aug.add_argument("--format", choices=("ppm", "png"), default="ppm",
                       help="pseudo-sample image format")

    p_train = add_command("train", "train a scoring model on a corpus", need_data=True)
    p_train.add_argument("--validate-with", help="optional dataset root scored per epoch")

    p_score = add_command("score", "score images with a checkpoint", need_out=False)
    p_score.add_argument("--checkpoint", required=True)
    p_score.add_argument("--out", help="write the CSV here instead of stdout")
    p_score.add_argument("images", nargs="+", help="image files to score")

    add_command("eval", "run an open-set protocol end to end", need_data=True)
    return parser


def _resolved_config(args, command):
    return {key: getattr(args, key) for key in _COMMAND_KEYS[command]}


def _run_dir(out, command, resolved, extras=()):
    payload = json.dumps([command, sorted(resolved.items()), sorted(extras)],
                         default=str)
    run_id = hashlib.sha256(payload.encode()).hexdigest()[:12]
    run_dir = Path(out) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"command = {command}"]
    lines += [f"{k} = {v}" for k, v in sorted(resolved.items())]
    lines += [f"{k} = {v}" for k, v in sorted(extras)]
    (run_dir / "resolved.cfg").write_text("\n".join(lines) + "\n")
    print(f"run_dir={run_dir}")
    return run_dir


def _parse_defects(text):
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _parse_counts(text, n_defects):
    parts = [int(t) for t in str(text).split(",") if t.strip()]
    if len(parts) == 1:
        return (parts[0],) * n_defects
    return tuple(parts)


def _arch_from(args):
    return ArchConfig(
        input_size=args.image_size,
        channels=tuple(int(c) for c in args.channels.split(",")),
        mlp_hidden=args.mlp_hidden,
        topk_fraction=args.k_fraction,
    )


def _sal_cfg_from(args):
    return SaliencyConfig(grid_size=args.grid_size, threshold=args.threshold,
                          spline_order=args.spline_order)


def _dev_cfg_from(args):
    refresh = getattr(args, "prior_refresh", "iteration")
    return DeviationConfig(margin=args.margin, prior_count=args.prior_count,
                           prior_refresh=refresh)


def _train_cfg_from(args):
    return TrainConfig(
        epochs=args.epochs,
        iterations_per_epoch=args.iterations_per_epoch,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        weight_decay=args.weight_decay,
        seed=args.seed,
        augmentation=args.augmentation,
    )


def cmd_synth(args):
    spec = D.CorpusSpec(
        texture=args.texture,
        defects=_parse_defects(args.defects),
        n_normal=args.normals,
        per_defect=_parse_counts(args.per_defect, len(_parse_defects(args.defects))),
        size=args.image_size,
    )
    run_dir = _run_dir(args.out, "synth", _resolved_config(args, "synth"))
    corpus_dir = run_dir / "corpus"
    D.synth_corpus(spec, args.seed, corpus_dir)
    print(f"corpus_dir={corpus_dir}")
    return 0


def _load_or_init_model(args):
    if getattr(args, "checkpoint", None):
        return load_model(args.checkpoint)
    state = init_model(_arch_from(args),
                       np.random.default_rng(np.random.SeedSequence([args.seed, 0])))
    print("model=fresh-init (no --checkpoint given)")
    return state


def cmd_augment(args):
    dataset = D.load_dataset(args.data, input_size=args.image_size)
    state = _load_or_init_model(args)
    dev_cfg = _dev_cfg_from(args)
    sal_cfg = _sal_cfg_from(args)
    count = args.count or min(len(dataset.normals), 512)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 1, 0]))
    extras = [("data", args.data), ("checkpoint", getattr(args, "checkpoint", None)),
              ("force_mask", args.force_mask), ("format", args.format),
              ("dump_saliency", args.dump_saliency)]
    run_dir = _run_dir(args.out, "augment", _resolved_config(args, "augment"), extras)

    if args.force_mask:
        size = dataset.normals[0].image.shape[1:]
        bits = (np.ones if args.force_mask == "ones" else np.zeros)(size, dtype=np.uint8)
        mask = SaliencyMask(bits, float(bits.mean()))
        pool = []
        for _ in range(count):
            ia, ib = _draw_pair(len(dataset.normals), rng)
            pool.append(saliency_cut(dataset.normals[ia], mask, dataset.normals[ib]))
    elif args.augmentation == "random_cut_paste":
        pool = generate_cutpaste_pool(dataset, count, rng)
    else:
        pool = generate_pseudo_pool(dataset, state, sal_cfg, count, rng, dev_cfg)

    pseudo_dir = run_dir / "pseudo"
    pseudo_dir.mkdir(exist_ok=True)
    manifest = [("path", "source_a", "source_b", "salient_fraction", "seed")]
    for i, sample in enumerate(pool):
        rel = f"pseudo/pseudo_{i:04d}.{args.format}"
        D.write_image(run_dir / rel, sample.image)
        manifest.append((rel, sample.provenance.source_a, sample.provenance.source_b,
                         repr(sample.provenance.salient_fraction), args.seed))
    (run_dir / "manifest.csv").write_text(
        "\n".join(",".join(str(c) for c in row) for row in manifest) + "\n"
    )

    if args.dump_saliency and not args.force_mask:
        dump_dir = run_dir / "saliency"
        dump_dir.mkdir(exist_ok=True)
        for sid in sorted({p.provenance.source_a for p in pool}):
            sample = next(s for s in dataset.normals if s.id == sid)
            grad = input_gradients(state, sample, dev_cfg)
            field = channel_l2(grad)
            smooth = bspline_smooth(downsample_to_grid(field, sal_cfg.grid_size),
                                    field.shape[0], field.shape[1],
                                    sal_cfg.spline_order)
            smap = normalize_minmax(smooth)
            mask = threshold_mask(smap, sal_cfg.threshold)
            stem = sid.replace("/", "_")
            D.write_pgm(dump_dir / f"{stem}_map.pgm", smap.values)
            D.write_pgm(dump_dir / f"{stem}_mask.pgm", mask.bits, maxval=1)

    print(f"pseudo_count={len(pool)}")
    print(f"manifest={run_dir / 'manifest.csv'}")
    return 0


def cmd_train(args):
    dataset = D.load_dataset(args.data, input_size=args.image_size)
    val_set = None
    if getattr(args, "validate_with", None):
        val_set = D.load_dataset(args.validate_with, input_size=args.image_size)
    extras = [("data", args.data), ("validate_with", getattr(args, "validate_with", None))]
    run_dir = _run_dir(args.out, "train", _resolved_config(args, "train"), extras)
    state, log = train(dataset, _train_cfg_from(args), dev_cfg=_dev_cfg_from(args),
                       sal_cfg=_sal_cfg_from(args), arch=_arch_from(args),
                       val_set=val_set)
    ckpt = run_dir / "checkpoint.bin"
    save_model(state, ckpt)
    log.write_csv(run_dir / "train_log.csv")
    if log.val_auc:
        (run_dir / "val_auc.csv").write_text(
            "epoch,auc\n" + "".join(f"{e},{a!r}\n" for e, a in log.val_auc)
        )
    print(f"checkpoint={ckpt}")
    print(f"train_log={run_dir / 'train_log.csv'}")
    return 0


def cmd_score(args):
    state = load_model(args.checkpoint)
    rows = ["path,phi1,phi2,score"]
    for path in args.images:
        img = D.resize_nearest(D.read_image(path), state.arch.input_size)
        if img.shape[0] == 1:
            img = np.repeat(img, state.arch.in_channels, axis=0)
        phi1, phi2, score = inference_heads(img, state)
        rows.append(f"{path},{phi1!r},{phi2!r},{score!r}")
    text = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(args):
    dataset = D.load_dataset(args.data, input_size=args.image_size)
    spec = ProtocolSpec(setting=args.setting, budget=args.budget,
                        seen_type=args.seen_type or None, trials=args.trials)
    run_dir = _run_dir(args.out, "eval", _resolved_config(args, "eval"),
                       [("data", args.data)])
    report = run_protocol(dataset, spec, _train_cfg_from(args),
                          dev_cfg=_dev_cfg_from(args), sal_cfg=_sal_cfg_from(args),
                          arch=_arch_from(args), out_dir=run_dir)
    print(f"report={run_dir / 'report.json'}")
    print(f"mean_auc={report.mean_auc!r}")
    print(f"std_auc={report.std_auc!r}")
    return 0


_HANDLERS = {
    "synth": cmd_synth,
    "augment": cmd_augment,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    # two-phase parse: config file values become parser defaults, flags win
    file_values = {}
    if "--config" in argv:
        cfg_path = argv[argv.index("--config") + 1]
        try:
            file_values = load_config_file(cfg_path)
        except (OSError, ConfigError) as exc:
            print(json.dumps({"error": "config", "message": str(exc)}),
                  file=sys.stderr)
            return 2
    parser = _build_parser(file_values)
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return 2
    except (SaliencyCutError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
