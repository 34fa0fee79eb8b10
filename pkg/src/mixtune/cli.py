"""Command-line entry point wiring the whole pipeline.

Subcommands: ``synth | pretrain | tune | eval | export-embeddings``.
Settings come from an optional JSON config file (schema-checked, unknown
keys rejected) overridden by individual flags; a flag always wins.

Exit codes: 0 success, 2 usage/config error, 3 I/O error, 4 numerical
failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict

import numpy as np

from . import data, encoder, fewshot, tuning
from .errors import CorruptionError, NumericalError, StateError
from .mixing import MixMode, MixParams

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

# config sections and their allowed keys; values are validated by the
# dataclass constructors they feed
_SCHEMA = {
    "seed": None,
    "synth": {"n_classes", "per_class", "t_len", "f_len", "class_signature", "noise_sigma"},
    "encoder": {"patch_t", "patch_f", "depth", "dim", "heads", "head_dims", "input_t", "input_f"},
    "pretrain": {"epochs", "batch", "lr", "mask_ratio"},
    "tune": {
        "stage1_epochs", "stage1_lr", "stage1_batch",
        "stage2_epochs", "stage2_lr", "stage2_batch",
        "llrd_factor", "tau", "k", "queue_capacity", "mix", "seed",
    },
    "mix": {"alpha", "mode"},
    "eval": {"way", "shot", "query_per_class", "episodes"},
}


def _validate_config(doc: dict) -> dict:
    if not isinstance(doc, dict):
        raise ValueError("config root must be a JSON object")
    for key, val in doc.items():
        if key not in _SCHEMA:
            raise ValueError(f"unknown config key {key!r}")
        allowed = _SCHEMA[key]
        if allowed is None:
            continue
        if not isinstance(val, dict):
            raise ValueError(f"config section {key!r} must be an object")
        for sub in val:
            if sub not in allowed:
                raise ValueError(f"unknown key {key}.{sub!r}")
        if key == "tune" and isinstance(val.get("mix"), dict):
            for sub in val["mix"]:
                if sub not in _SCHEMA["mix"]:
                    raise ValueError(f"unknown key tune.mix.{sub!r}")
    return doc


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        text = fh.read()
    doc = json.loads(text)
    return _validate_config(doc)


def _section(cfg: dict, name: str) -> dict:
    return dict(cfg.get(name, {}))


def _synth_spec(cfg: dict) -> data.SynthSpec:
    sec = _section(cfg, "synth")
    if "class_signature" in sec and sec["class_signature"] is not None:
        sec["class_signature"] = [
            [tuple(pair) for pair in sig] for sig in sec["class_signature"]
        ]
    return data.SynthSpec(**sec)


def _encoder_config(cfg: dict) -> encoder.EncoderConfig:
    return encoder.EncoderConfig(**_section(cfg, "encoder"))


def _tune_config(cfg: dict, args) -> tuning.TuneConfig:
    sec = _section(cfg, "tune")
    sec.setdefault("seed", cfg.get("seed", 0))
    if args.seed is not None:
        sec["seed"] = args.seed
    mix = sec.get("mix", {})
    if args.mix is not None:
        mix = dict(mix)
        mix["mode"] = args.mix
    if args.alpha is not None:
        mix = dict(mix)
        mix["alpha"] = args.alpha
    sec["mix"] = MixParams(**mix) if isinstance(mix, dict) else mix
    for flag in ("tau", "k", "queue_capacity"):
        v = getattr(args, flag)
        if v is not None:
            sec[flag] = v
    return tuning.TuneConfig(**sec)


def _seed(cfg: dict, args) -> int:
    return args.seed if args.seed is not None else int(cfg.get("seed", 0))


def cmd_synth(args) -> int:
    cfg = _load_config(args.config)
    ds = data.generate_synthetic(_synth_spec(cfg), _seed(cfg, args))
    data.save_dataset(ds, args.out)
    print(f"wrote {ds.n} items ({ds.t_len}x{ds.f_len}) to {args.out}.json / .f32")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_config(args.config)
    ds = data.load_dataset(args.data)
    enc_cfg = _encoder_config(cfg)
    if args.resume is not None:
        state = encoder.load_checkpoint(args.resume)
        if "encoder" in cfg and state.config != enc_cfg:
            raise ValueError("checkpoint architecture does not match the config")
    else:
        state = encoder.init_state(enc_cfg, seed=_seed(cfg, args))
    sec = _section(cfg, "pretrain")
    for flag in ("epochs", "batch", "lr", "mask_ratio"):
        v = getattr(args, flag)
        if v is not None:
            sec[flag] = v
    log = tuning.run_pretrain(state, ds, seed=_seed(cfg, args), **sec)
    encoder.save_checkpoint(state, args.out_ckpt)
    if args.log is not None:
        log.write_csv(args.log, state.config.depth)
    print(f"pretrained {log.epoch_means[-1][0] + 1} epochs, "
          f"loss {log.epoch_means[0][1]:.6f} -> {log.epoch_means[-1][1]:.6f}, "
          f"step {state.step}, saved {args.out_ckpt}")
    return EXIT_OK


def cmd_tune(args) -> int:
    cfg = _load_config(args.config)
    ds = data.load_dataset(args.data)
    state = encoder.load_checkpoint(args.in_ckpt)
    if "encoder" in cfg and state.config != _encoder_config(cfg):
        raise ValueError("checkpoint architecture does not match the config")
    tune_cfg = _tune_config(cfg, args)

    log1 = tuning.run_stage1(state, ds, tune_cfg)
    stage1_ckpt = f"{args.out_ckpt}.stage1"
    encoder.save_checkpoint(state, stage1_ckpt)
    log1.write_csv(f"{args.out_ckpt}.stage1.csv", state.config.depth)

    log2 = tuning.run_stage2(state, ds, tune_cfg)
    encoder.save_checkpoint(state, args.out_ckpt)
    log2.write_csv(f"{args.out_ckpt}.stage2.csv", state.config.depth)
    print(f"tuned (mix={tune_cfg.mix.mode.value}): stage1 loss "
          f"{log1.epoch_means[-1][1]:.6f}, stage2 loss {log2.epoch_means[-1][1]:.6f}, "
          f"saved {stage1_ckpt} and {args.out_ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    sec = _section(cfg, "eval")
    for flag, key in (("way", "way"), ("shot", "shot"), ("queries", "query_per_class"),
                      ("episodes", "episodes")):
        v = getattr(args, flag)
        if v is not None:
            sec[key] = v
    if (args.ckpt is None) == (args.features is None):
        raise ValueError("provide exactly one of --ckpt or --features")
    if args.features is not None:
        feats, labels = fewshot.load_embeddings(args.features)
        report = fewshot.evaluate_features(feats, labels, seed=_seed(cfg, args),
                                           threads=args.threads, **sec)
    else:
        ds = data.load_dataset(args.data)
        state = encoder.load_checkpoint(args.ckpt)
        report = fewshot.evaluate(state, ds, seed=_seed(cfg, args),
                                  threads=args.threads, **sec)
    print(report.summary())
    if args.out is not None:
        with open(args.out, "w") as fh:
            fh.write(report.to_json() + "\n")
    return EXIT_OK


def cmd_export(args) -> int:
    ds = data.load_dataset(args.data)
    state = encoder.load_checkpoint(args.ckpt)
    fewshot.export_embeddings(state, ds, args.out)
    print(f"wrote {ds.n} embeddings to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mixtune",
        description="Contrastive tuning of masked-spectrogram encoders with "
                    "time-axis CutMix, and episodic few-shot evaluation.",
    )
    sub = p.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    def common(sp):
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--seed", type=int, default=None, help="RNG seed (default: 0)")

    sp = sub.add_parser("synth", help="generate a labeled synthetic dataset", formatter_class=fmt)
    common(sp)
    sp.add_argument("--out", required=True, help="output stem (writes <out>.json and <out>.f32)")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("pretrain", help="masked-reconstruction pretraining", formatter_class=fmt)
    common(sp)
    sp.add_argument("--data", required=True, help="dataset stem or manifest path")
    sp.add_argument("--out-ckpt", required=True, help="checkpoint to write")
    sp.add_argument("--resume", default=None, help="checkpoint to continue from")
    sp.add_argument("--epochs", type=int, default=None, help="epochs (default: 20)")
    sp.add_argument("--batch", type=int, default=None, help="batch size (default: 32)")
    sp.add_argument("--lr", type=float, default=None, help="learning rate (default: 1e-3)")
    sp.add_argument("--mask-ratio", dest="mask_ratio", type=float, default=None,
                    help="fraction of patches to mask (default: 0.75)")
    sp.add_argument("--log", default=None, help="per-step CSV log path")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("tune", help="two-stage contrastive tuning", formatter_class=fmt)
    common(sp)
    sp.add_argument("--data", required=True, help="dataset stem or manifest path")
    sp.add_argument("--in-ckpt", required=True, help="pretrained checkpoint to start from")
    sp.add_argument("--out-ckpt", required=True,
                    help="final checkpoint; stage-1 artifacts get .stage1 suffixes")
    sp.add_argument("--mix", choices=[m.value for m in MixMode], default=None,
                    help="mixing mode (default: t_cutmix)")
    sp.add_argument("--alpha", type=float, default=None,
                    help="Beta(alpha, alpha) concentration (default: 1.0)")
    sp.add_argument("--tau", type=float, default=None, help="softmax temperature (default: 0.15)")
    sp.add_argument("--k", type=int, default=None, help="neighbors in the queue lookup (default: 1)")
    sp.add_argument("--queue-capacity", dest="queue_capacity", type=int, default=None,
                    help="support queue capacity (default: 1024)")
    sp.add_argument("--threads", type=int, default=1,
                    help="worker cap; results are independent of it")
    sp.set_defaults(func=cmd_tune)

    sp = sub.add_parser("eval", help="episodic few-shot evaluation", formatter_class=fmt)
    common(sp)
    sp.add_argument("--data", default=None, help="dataset stem or manifest path")
    sp.add_argument("--ckpt", default=None, help="encoder checkpoint to evaluate")
    sp.add_argument("--features", default=None,
                    help="embeddings CSV to evaluate instead of a checkpoint")
    sp.add_argument("--way", type=int, default=None, help="classes per episode (default: 5)")
    sp.add_argument("--shot", type=int, default=None, help="support items per class (default: 1)")
    sp.add_argument("--queries", type=int, default=None, help="query items per class (default: 15)")
    sp.add_argument("--episodes", type=int, default=None, help="episode count (default: 600)")
    sp.add_argument("--threads", type=int, default=1,
                    help="episode worker threads; results are independent of it")
    sp.add_argument("--out", default=None, help="write the report as JSON here")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("export-embeddings", help="dump per-item features as CSV",
                        formatter_class=fmt)
    common(sp)
    sp.add_argument("--data", required=True, help="dataset stem or manifest path")
    sp.add_argument("--ckpt", required=True, help="encoder checkpoint")
    sp.add_argument("--out", required=True, help="CSV path to write")
    sp.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors and 0 on --help; keep its codes
        return int(e.code or 0)
    try:
        return args.func(args)
    except json.JSONDecodeError as e:
        print(f"error: bad JSON at line {e.lineno}, column {e.colno}: {e.msg}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, KeyError, TypeError, StateError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CorruptionError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
