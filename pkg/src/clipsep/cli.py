"""Command line interface.

Exit codes: 0 ok, 2 usage/config error, 3 numeric failure, 4 missing data.
"""

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from . import data, dsp, querybank
from .errors import ClipSepError, InvalidInputError, MissingEmbeddingError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4
DEFAULT_GAMMAS = (0.0, 0.1, 0.25, 0.5, 1.0)

log = logging.getLogger("clipsep")


def load_config_file(path):
    """Read a TOML or JSON config file into a flat dict."""
    path = Path(path)
    text = path.read_bytes()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        cfg = tomllib.loads(text.decode("utf-8"))
    else:
        cfg = json.loads(text)
    flat = {}
    for key, value in cfg.items():
        if isinstance(value, dict):  # allow [train] / [model] tables
            flat.update(value)
        else:
            flat[key] = value
    if "lambda" in flat:
        flat["lambda_"] = flat.pop("lambda")
    return flat


def resolve_configs(args):
    """defaults < desk overlay < config file < command-line flags."""
    from .model import SeparatorConfig
    from .train import TrainConfig, desk_configs

    file_cfg = load_config_file(args.config) if args.config else {}
    flag_cfg = {k: v for k, v in vars(args).items() if v is not None and k in _TRAIN_FLAGS}
    merged = {**file_cfg, **flag_cfg}
    tnames = set(TrainConfig.field_names())
    mnames = set(SeparatorConfig().to_dict())
    unknown = set(merged) - tnames - mnames
    if unknown:
        raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
    variant = merged.pop("variant", "clipsep")
    if args.desk:
        steps = merged.pop("steps", 2000)
        return desk_configs(variant, steps=steps, **merged)
    train_cfg = TrainConfig(variant=variant, **{k: v for k, v in merged.items() if k in tnames})
    model_cfg = SeparatorConfig(variant=train_cfg.variant,
                                **{k: v for k, v in merged.items() if k in mnames})
    return train_cfg, model_cfg


_TRAIN_FLAGS = {
    "variant", "steps", "batch_size", "seed", "gamma", "lambda_", "query_modality", "crop_len",
    "validate_every", "lr_peak", "lr_floor", "lr_warmup_steps", "lr_decay_end", "clip_norm",
    "k", "n", "unet_depth", "base_channels", "val_size",
}


def _load_corpus(args):
    corpus = Path(args.corpus)
    manifest = Path(args.manifest) if getattr(args, "manifest", None) else corpus / "manifest.jsonl"
    bank_path = Path(args.bank) if getattr(args, "bank", None) else corpus / "bank.qemb"
    bank = querybank.load_bank(bank_path) if bank_path.exists() else None
    entries = data.read_manifest(manifest, bank)
    return entries, bank


def cmd_synth_corpus(args):
    spec = data.CorpusSpec(
        classes=args.classes,
        clips_per_class=args.clips,
        seed=args.seed,
        clip_seconds=args.clip_seconds,
        noisy=args.noisy,
        gap_degrees=args.gap_degrees,
    )
    corpus = data.make_synthetic_corpus(spec, args.out, force=args.force)
    print(f"wrote {len(corpus.entries)} clips to {corpus.root}")
    return EXIT_OK


def cmd_bank_convert(args):
    count = querybank.convert_jsonl(args.input, args.output)
    print(f"wrote {count} embeddings to {args.output}")
    return EXIT_OK


def cmd_train(args):
    from .train import fit

    train_cfg, model_cfg = resolve_configs(args)
    entries, bank = _load_corpus(args)
    if train_cfg.variant == "pit" and (args.bank or args.query_modality):
        warnings.warn("PIT has no query path; bank and modality flags are ignored")
    if train_cfg.variant != "pit" and train_cfg.variant != "labelsep" and bank is None:
        raise MissingEmbeddingError(["<embedding bank>"])
    state = fit(train_cfg, model_cfg, entries, bank, args.out, resume=args.resume)
    print(f"trained to step {state.step}; checkpoints in {args.out}")
    return EXIT_OK


def cmd_separate(args):
    from .checkpoint import load_model
    from .model import separate

    model, _, _ = load_model(args.checkpoint)
    clip = dsp.read_wav(args.input)
    embedding = None
    if not args.all_ones_mask:
        if args.query_text is None and args.query_id is None:
            raise InvalidInputError("give --query-text or --query-id")
        bank = querybank.load_bank(args.bank)
        if args.query_text is not None:
            embedding = querybank.text_query(bank, args.query_text)
        else:
            embedding = querybank.QueryEmbedding(bank[args.query_id], "image", args.query_id)
    out = separate(model, clip, embedding, mask_override="ones" if args.all_ones_mask else None)
    dsp.write_wav(args.output, out)
    print(f"wrote {args.output}")
    return EXIT_OK


def _eval_pairs(entries, bank, crop_len, count, seed, interference_manifest=None):
    targets = data.split_entries(entries, "test")
    interf = targets
    if interference_manifest:
        interf = data.split_entries(data.read_manifest(interference_manifest), "test")
    return data.eval_pairing(targets, interf, count, seed, bank=bank, crop_len=crop_len)


def cmd_evaluate(args):
    from .checkpoint import load_model
    from .evaluate import evaluate_model

    model, header, _ = load_model(args.checkpoint)
    entries, bank = _load_corpus(args)
    crop_len = args.crop_len or header["meta"].get("train_config", {}).get("crop_len", data.TRAIN_CROP)
    pairs = _eval_pairs(entries, bank, crop_len, args.pairs, args.seed, args.interference)
    class_index = data.class_index_for(entries) if model.variant == "labelsep" else None
    modality = "label" if model.variant == "labelsep" else args.modality
    report = evaluate_model(model, pairs, modality, bank, class_index, dump_dir=args.spectrograms)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write(out)
    print(report.table(), end="")
    return EXIT_OK


def cmd_gamma_sweep(args):
    from .checkpoint import load_model
    from .evaluate import evaluate_model, noise_activation_report
    from .train import build_validation_set, fit

    entries, bank = _load_corpus(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for gamma in args.gammas:
        args.gamma, args.variant = gamma, "clipsep_nit"
        train_cfg, model_cfg = resolve_configs(args)
        run_dir = out / f"gamma_{gamma:g}"
        ckpt = run_dir / "last.ckpt"
        if not ckpt.exists():
            fit(train_cfg, model_cfg, entries, bank, run_dir)
        model, _, _ = load_model(ckpt)
        pairs = _eval_pairs(entries, bank, train_cfg.crop_len, args.pairs, train_cfg.seed, args.interference)
        report = evaluate_model(model, pairs, args.modality, bank)
        report.write(run_dir / "report.json")
        val_set = build_validation_set(entries, train_cfg, bank)
        st = report.stats
        rows.append({
            "gamma": gamma,
            "mean_sdr": st["mean"],
            "std_error": st["std_error"],
            "mean_sdr_improvement": report.sdri_stats["mean"],
            "noise_activation": noise_activation_report(model, val_set),
        })
    with open(out / "sweep.json", "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2)
        fh.write("\n")
    lines = [f"{'gamma':>6}{'mean SDR':>12}{'SE':>8}{'SDRi':>8}{'noise act.':>12}"]
    for r in rows:
        lines.append(f"{r['gamma']:>6g}{r['mean_sdr']:>12.2f}{r['std_error']:>8.2f}"
                     f"{r['mean_sdr_improvement']:>8.2f}{r['noise_activation']:>12.3f}")
    table = "\n".join(lines) + "\n"
    (out / "sweep.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def _add_train_flags(p):
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--desk", action=argparse.BooleanOptionalAction, default=True,
                   help="desk-scale defaults (short crops, small U-Net); --no-desk for full size")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--lambda", dest="lambda_", type=float)
    p.add_argument("--query-modality", choices=["image", "text", "hybrid", "label"])
    p.add_argument("--crop-len", type=int)
    p.add_argument("--validate-every", type=int)
    p.add_argument("--lr-peak", type=float)
    p.add_argument("--lr-floor", type=float)
    p.add_argument("--lr-warmup-steps", type=int)
    p.add_argument("--lr-decay-end", type=int)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--val-size", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--unet-depth", type=int)
    p.add_argument("--base-channels", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="clipsep", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", help="generate a synthetic desk-scale corpus")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--clips", type=int, default=10, help="clips per class")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clip-seconds", type=float, default=1.0)
    p.add_argument("--noisy", action="store_true", help="add a background track to every clip")
    p.add_argument("--gap-degrees", type=float, default=15.0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth_corpus)

    p = sub.add_parser("bank-convert", help="convert JSON-lines embeddings to a QEMBANK1 file")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_bank_convert)

    p = sub.add_parser("train", help="train a separator")
    p.add_argument("--corpus", required=True)
    p.add_argument("--manifest")
    p.add_argument("--bank")
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=["clipsep", "clipsep-nit", "clipsep_nit", "pit", "labelsep"])
    p.add_argument("--resume", help="resume from a checkpoint written by train")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("separate", help="separate one wav file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--bank")
    q = p.add_mutually_exclusive_group()
    q.add_argument("--query-text")
    q.add_argument("--query-id")
    p.add_argument("--all-ones-mask", action="store_true", help="diagnostic: bypass the model mask")
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("evaluate", help="SDR report on held-out pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--manifest")
    p.add_argument("--bank")
    p.add_argument("--interference", help="manifest of interference clips (default: corpus test split)")
    p.add_argument("--pairs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--modality", choices=["image", "text"], default="text")
    p.add_argument("--crop-len", type=int)
    p.add_argument("--spectrograms", help="directory for PNG spectrogram dumps")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gamma-sweep", help="train/evaluate CLIPSep-NIT across noise levels")
    p.add_argument("--corpus", required=True)
    p.add_argument("--manifest")
    p.add_argument("--bank")
    p.add_argument("--interference")
    p.add_argument("--out", required=True)
    p.add_argument("--gammas", type=float, nargs="+", default=list(DEFAULT_GAMMAS))
    p.add_argument("--pairs", type=int, default=50)
    p.add_argument("--modality", choices=["image", "text"], default="text")
    _add_train_flags(p)
    p.set_defaults(func=cmd_gamma_sweep, variant="clipsep_nit")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ClipSepError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
