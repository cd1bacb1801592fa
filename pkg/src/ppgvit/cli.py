"""``ppgvit`` command line: synth, imagify, train, eval, inspect.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
The output directory defaults to ``$PPGVIT_OUT_DIR`` (or ``./ppgvit_out``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .container import save_container
from .errors import ConfigError, DataError, InvalidInputError, LayoutError, NumericError
from .imagify import REPR_TAGS, ImageTriplet, RecurrenceConfig, StftConfig, make_image, save_preview
from .model import SELECTORS, count_params
from .signal import read_jsonl, write_jsonl
from .synth import SynthConfig, split, synth_ppg
from .tensorize import PRESETS, PROFILE_NAMES, get_profile, normalize_channels, pad_and_mask, patchify
from .train import (
    Checkpoint,
    EvalReport,
    TrainConfig,
    evaluate,
    fit,
    mae_report,
    render_report,
    write_log,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("ppgvit")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _out_dir(arg) -> Path:
    return Path(arg or os.environ.get("PPGVIT_OUT_DIR") or "ppgvit_out")


def _read_config(path) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file {p} not found")
    cfg = json.loads(p.read_text())
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: config must be a JSON object of key/value pairs")
    return cfg


# -- shared flag groups -------------------------------------------------------

def _add_image_flags(p):
    g = p.add_argument_group("representation")
    g.add_argument("--repr", dest="repr_tag", choices=REPR_TAGS, help="image representation (default stft)")
    g.add_argument("--n-window", type=int, help="STFT window length in samples (default 128)")
    g.add_argument("--hop", type=int, help="STFT hop in samples (default 32)")
    g.add_argument("--n-fft", type=int, help="DFT size (default 128)")
    g.add_argument("--window", dest="window_kind", help="taper: hann, hamming, blackman, rect")
    g.add_argument("--eps", type=float, help="log-power stability constant (default 1e-10)")
    g.add_argument("--two-sided", action="store_true", default=None, help="keep negative-frequency bins")
    g.add_argument("--sigma", type=float, help="recurrence Gaussian bandwidth (default 1.0)")
    g.add_argument("--target-len", type=int, help="recurrence downsampled length K (default 240)")


def _add_model_flags(p):
    g = p.add_argument_group("backbone")
    g.add_argument("--profile", choices=PROFILE_NAMES, help="backbone profile (default dinov3_like)")
    g.add_argument("--preset", choices=tuple(PRESETS), help="model size preset (default tiny)")


def _image_configs(args, base: dict) -> tuple[StftConfig, RecurrenceConfig]:
    stft_kw = dict(base.get("stft", {}))
    for key in ("n_window", "hop", "n_fft", "window_kind", "eps"):
        if getattr(args, key, None) is not None:
            stft_kw[key] = getattr(args, key)
    if getattr(args, "two_sided", None):
        stft_kw["one_sided"] = False
    rec_kw = dict(base.get("recurrence", {}))
    if getattr(args, "sigma", None) is not None:
        rec_kw["sigma"] = args.sigma
    if getattr(args, "target_len", None) is not None:
        rec_kw["target_len"] = args.target_len
    return StftConfig(**stft_kw), RecurrenceConfig(**rec_kw)


def _train_config(args, file_cfg: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(file_cfg) - known - {"data", "out", "workers"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kw = {k: v for k, v in file_cfg.items() if k in known}
    for key in ("target", "repr_tag", "profile", "preset", "selector", "loss_kind", "lr", "weight_decay",
                "batch_size", "epochs", "val_fraction", "seed", "lora_rank", "lora_alpha", "lora_dropout"):
        val = getattr(args, key, None)
        if val is not None:
            kw[key] = val
    kw["stft"], kw["recurrence"] = _image_configs(args, file_cfg)
    return TrainConfig.from_dict(kw)


# -- commands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_records=args.n_records, fs=args.fs, duration_s=args.duration,
        hr_range=(args.hr_min, args.hr_max), rr_range=(args.rr_min, args.rr_max),
        noise_std=args.noise_std, seed=args.seed,
    )
    out = Path(args.out) if args.out else _out_dir(None) / "synth.jsonl"
    write_jsonl(synth_ppg(cfg), out)
    print(f"wrote {cfg.n_records} records to {out}")
    return EXIT_OK


def _imagify_one(job):
    rec, repr_tag, profile_name, stft_cfg, rec_cfg, out_dir, preview = job
    img = make_image(rec.samples, repr_tag, stft_cfg, rec_cfg)
    prof = get_profile(profile_name)
    norm = normalize_channels(img, prof)
    h_f, w_f, n = pad_and_mask(norm, prof).grid
    manifest = {
        "id": rec.id, "repr_tag": repr_tag, "profile": profile_name,
        "shape": list(img.channels.shape), "patch_grid": [h_f, w_f, n],
        "stft": asdict(stft_cfg), "recurrence": asdict(rec_cfg), "fs": rec.fs,
    }
    path = out_dir / f"{rec.id}.npz"
    save_container(path, {"channels": img.channels, "normalized": norm.channels,
                          "valid_mask": img.valid_mask}, manifest)
    if preview:
        save_preview(img, out_dir / "preview" / rec.id)
    return path, img.channels.shape


def cmd_imagify(args) -> int:
    records = read_jsonl(args.input)
    stft_cfg, rec_cfg = _image_configs(args, {})
    out_dir = _out_dir(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    repr_tag = args.repr_tag or "stft"
    jobs = [(r, repr_tag, args.profile or "dinov3_like", stft_cfg, rec_cfg, out_dir, args.preview)
            for r in records]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as ex:
            results = list(ex.map(_imagify_one, jobs))
    else:
        results = [_imagify_one(j) for j in jobs]
    shapes = sorted({s for _, s in results})
    print(f"wrote {len(results)} {repr_tag} images to {out_dir} (shapes {shapes})")
    return EXIT_OK


def cmd_train(args) -> int:
    file_cfg = _read_config(args.config)
    cfg = _train_config(args, file_cfg)
    data = args.data or file_cfg.get("data")
    if not data:
        raise ConfigError("train needs --data (or 'data' in the config file)")
    out_dir = _out_dir(args.out or file_cfg.get("out"))
    records = read_jsonl(data)
    res = fit(records, cfg, workers=args.workers or file_cfg.get("workers", 1))
    ckpt_path = res.checkpoint.save(out_dir / "checkpoint.npz")
    write_log(res.log, out_dir / "train_log.jsonl")
    print(f"best epoch {res.best_epoch}, val MAE {res.best_val_mae}; checkpoint {ckpt_path}")
    return EXIT_OK


def _load_predictions(path) -> list[EvalReport]:
    groups: dict[tuple[str, str, str], tuple[list, list]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                key = (row["target"], row.get("dataset", "synthetic"), row.get("model", "ppgvit"))
                pred, lab = groups.setdefault(key, ([], []))
                pred.append(float(row["prediction"]))
                lab.append(float(row["label"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad prediction record ({exc})") from exc
    return [mae_report(p, y, t, "predictions", dataset=ds, model=m) for (t, ds, m), (p, y) in groups.items()]


def cmd_eval(args) -> int:
    out_dir = _out_dir(args.out)
    reports: list[EvalReport] = []
    if args.predictions:
        reports = _load_predictions(args.predictions)
    else:
        if not args.data or not args.checkpoint:
            raise ConfigError("eval needs --data and --checkpoint (or --predictions)")
        records = read_jsonl(args.data)
        for ck_path in args.checkpoint:
            if not Path(ck_path).is_file():
                raise FileNotFoundError(f"checkpoint {ck_path} not found")
            ckpt = Checkpoint.load(ck_path)
            cfg = ckpt.config
            if args.target and args.target != ckpt.model.target:
                raise ConfigError(f"checkpoint {ck_path} predicts {ckpt.model.target!r}, not {args.target!r}")
            subset = records
            if args.split != "all":
                train, val, _ = split(records, (1 - cfg.val_fraction, cfg.val_fraction, 0.0), cfg.seed)
                subset = train if args.split == "train" else val
            rep = evaluate(subset, ckpt, workers=args.workers,
                           dataset=args.dataset_name, model=args.model_name or cfg.profile)
            reports.append(rep)
            pred_path = out_dir / f"predictions_{rep.target}.jsonl"
            pred_path.parent.mkdir(parents=True, exist_ok=True)
            with open(pred_path, "w", encoding="utf-8") as fh:
                for rid, p, y in zip((r.id for r in subset), rep.predictions, rep.labels):
                    fh.write(json.dumps({"id": rid, "target": rep.target, "prediction": float(p),
                                         "label": float(y), "dataset": rep.dataset, "model": rep.model}) + "\n")
    layout = args.layout
    if layout is None:
        layout = "bp_slash" if {r.target for r in reports} == {"dbp", "sbp"} else "task_rows"
    table = render_report(reports, layout)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(table, encoding="utf-8")
    with open(out_dir / "report.jsonl", "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_record()) + "\n")
    print(table, end="")
    return EXIT_OK


def cmd_inspect(args) -> int:
    file_cfg = _read_config(args.config)
    cfg = _train_config(args, file_cfg)
    prof = get_profile(cfg.profile, cfg.preset)
    if args.data:
        rec = read_jsonl(args.data)[0]
        img = make_image(rec.samples, cfg.repr_tag, cfg.stft, cfg.recurrence)
        f, t = img.shape
    elif args.F and args.T:
        f, t = args.F, args.T
    else:
        n = int(round(args.fs * args.duration))
        if cfg.repr_tag == "recurrence":
            f = t = cfg.recurrence.target_len
        else:
            f, t = cfg.stft.n_bins, cfg.stft.n_frames(n)
    h_f, w_f, n_patches = prof.grid(f, t)
    dummy = ImageTriplet(np.zeros((3, f, t)), np.ones((f, t), bool), cfg.repr_tag)
    pimg = pad_and_mask(dummy, prof)
    ps = patchify(pimg)
    lora = cfg.lora_config()
    total, trainable = count_params(prof, cfg.target, lora, cfg.selector)
    lora_layer = len(lora.targets) * 2 * lora.rank * prof.width if prof.depth else 0
    info = {
        "profile": prof.name, "preset": cfg.preset, "repr": cfg.repr_tag,
        "patch": prof.patch, "width": prof.width, "depth": prof.depth, "heads": prof.n_heads,
        "registers": prof.n_registers,
        "image_FxT": [f, t], "padded_HtxWt": list(pimg.channels.shape[1:]),
        "grid_HfxWf": [h_f, w_f], "N": n_patches, "tokens": 1 + prof.n_registers + n_patches,
        "patch_dim": prof.patch_dim,
        "valid_pixel_fraction": float(pimg.valid_mask.mean()),
        "valid_patches": int(ps.patch_mask.sum()),
        "params_total": total, "params_trainable": trainable, "selector": cfg.selector,
        "lora_params_per_layer": lora_layer, "lora_scale": cfg.lora_alpha / cfg.lora_rank,
    }
    if args.json:
        print(json.dumps(info))
    else:
        for k, v in info.items():
            print(f"{k:>22}: {v}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ppgvit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic labelled PPG dataset")
    s.add_argument("--out", help="output .jsonl path (default $PPGVIT_OUT_DIR/synth.jsonl)")
    s.add_argument("--n-records", type=int, default=500)
    s.add_argument("--fs", type=float, default=40.0)
    s.add_argument("--duration", type=float, default=30.0, help="seconds per record")
    s.add_argument("--hr-min", type=float, default=50.0)
    s.add_argument("--hr-max", type=float, default=120.0)
    s.add_argument("--rr-min", type=float, default=8.0)
    s.add_argument("--rr-max", type=float, default=20.0)
    s.add_argument("--noise-std", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("imagify", help="turn records into 3-channel image containers")
    s.add_argument("input", help="records .jsonl")
    s.add_argument("--out", help="output directory")
    s.add_argument("--preview", action="store_true", help="also write lossy 8-bit PNG previews")
    s.add_argument("--workers", type=int, default=1)
    _add_image_flags(s)
    s.add_argument("--profile", choices=PROFILE_NAMES, help="profile for the normalized copy")
    s.set_defaults(func=cmd_imagify)

    s = sub.add_parser("train", help="fine-tune a regressor for one target")
    s.add_argument("--data", help="records .jsonl")
    s.add_argument("--out", help="output directory for checkpoint.npz and train_log.jsonl")
    s.add_argument("--config", help="JSON key/value config; flags override it")
    s.add_argument("--target")
    s.add_argument("--selector", choices=SELECTORS)
    s.add_argument("--loss", dest="loss_kind", choices=("l1", "mse"))
    s.add_argument("--lr", type=float)
    s.add_argument("--weight-decay", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--val-fraction", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--lora-rank", type=int)
    s.add_argument("--lora-alpha", type=float)
    s.add_argument("--lora-dropout", type=float)
    s.add_argument("--workers", type=int, default=None)
    _add_model_flags(s)
    _add_image_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="MAE of checkpoints (or a predictions file) as a table")
    s.add_argument("--data", help="records .jsonl")
    s.add_argument("--checkpoint", action="append", help="checkpoint .npz (repeat for DBP and SBP)")
    s.add_argument("--predictions", help="jsonl of {target, prediction, label[, dataset, model]}")
    s.add_argument("--target", help="expected target; mismatching checkpoints are rejected")
    s.add_argument("--split", choices=("all", "train", "val"), default="all",
                   help="re-derive the training split and score only that part")
    s.add_argument("--layout", choices=("bp_slash", "task_rows"))
    s.add_argument("--dataset-name", default="synthetic")
    s.add_argument("--model-name")
    s.add_argument("--out", help="output directory for report.txt / report.jsonl")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect", help="print geometry and parameter counts for a config")
    s.add_argument("--config")
    s.add_argument("--data", help="take the image size from the first record")
    s.add_argument("--F", type=int, help="image height (frequency bins)")
    s.add_argument("--T", type=int, help="image width (frames)")
    s.add_argument("--fs", type=float, default=40.0)
    s.add_argument("--duration", type=float, default=30.0)
    s.add_argument("--selector", choices=SELECTORS)
    s.add_argument("--target")
    s.add_argument("--lora-rank", type=int)
    s.add_argument("--lora-alpha", type=float)
    s.add_argument("--json", action="store_true")
    _add_model_flags(s)
    _add_image_flags(s)
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, LayoutError) as exc:
        print(f"ppgvit {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, InvalidInputError, FileNotFoundError) as exc:
        print(f"ppgvit {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"ppgvit {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
