"""Command-line entry point: ``adhocloc {simulate,train,eval,locate,ablate}``."""
from __future__ import annotations

import argparse
import configparser
import csv
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import pipeline as pl
from .acoustics import read_wav
from .autodiff import ShapeError
from .dsp import StftConfig, extract_features
from .grid import DomainError, GridSpec, RoomDims, area_center, one_hot
from .model import ModelConfig, forward_probs, predict_from_probs

log = logging.getLogger("adhocloc")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
USAGE_ERRORS = (pl.ConfigError, DomainError, ShapeError, FileNotFoundError, ValueError,
                configparser.Error)


class UsageError(Exception):
    pass


def _pair(text: str, sep: str, kind=float):
    try:
        a, b = text.lower().split(sep)
        return kind(a), kind(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A{sep}B, got {text!r}") from None


def parse_grid(text: str) -> tuple[int, int]:
    return _pair(text, "x", int)


def parse_range(text: str) -> tuple[float, float]:
    if "," not in text:
        v = float(text)
        return v, v
    return _pair(text, ",", float)


def parse_room(text: str) -> RoomDims:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"room must look like 6x6x3, got {text!r}")
    return RoomDims(*map(float, parts))


PRESETS = ("defaults", "desk")


def _packaged(name: str) -> str:
    return resources.files(__package__).joinpath(f"configs/{name}.ini").read_text()


def load_config(path=None, preset: str | None = None) -> configparser.ConfigParser:
    """Packaged defaults, then the named preset, then ``path``; later values win."""
    cp = configparser.ConfigParser()
    cp.read_string(_packaged("defaults"))
    if preset is not None:
        if preset not in PRESETS:
            raise pl.ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        cp.read_string(_packaged(preset))
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} does not exist")
        cp.read(path)
    return cp


def read_rooms(path) -> list[RoomDims]:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(f"rooms file {path} does not exist")
    if not cp.has_section("rooms") or not cp["rooms"]:
        raise pl.ConfigError(f"{path} has no [rooms] entries")
    try:
        return [parse_room(v) for v in cp["rooms"].values()]
    except argparse.ArgumentTypeError as exc:
        raise pl.ConfigError(str(exc)) from None


def stft_from(cp) -> StftConfig:
    s = cp["stft"]
    return StftConfig(fft_size=s.getint("fft_size"), hop=s.getint("hop"), window=s["window"],
                      first_bin=s.getint("first_bin"), n_bins=s.getint("n_bins"))


def model_from(cp, m_total: int) -> ModelConfig:
    return ModelConfig.from_mapping({**cp["model"], "m_total": m_total})


def train_from(cp, args) -> pl.TrainConfig:
    t = cp["train"]
    cfg = pl.TrainConfig(epochs=t.getint("epochs"), lr=t.getfloat("lr"),
                         beta1=t.getfloat("beta1"), beta2=t.getfloat("beta2"),
                         eps=t.getfloat("eps"), batch_size=t.getint("batch_size"),
                         val_fraction=t.getfloat("val_fraction"),
                         crop_frames=t.getint("crop_frames"), max_steps=t.getint("max_steps"))
    for name in ("epochs", "lr", "batch_size", "crop_frames", "max_steps", "seed",
                 "val_fraction"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    return cfg


# -- subcommands ------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cp = load_config(args.config, args.preset)
    d = cp["dataset"]
    if args.rooms:
        rooms = read_rooms(args.rooms)
    elif args.room:
        rooms = list(args.room)
    else:
        raise UsageError("give --rooms FILE or at least one --room LxWxH")
    out = Path(args.out)
    if not out.is_dir():
        raise FileNotFoundError(f"output directory {out} does not exist")
    spec = pl.DatasetSpec(
        rooms=rooms, m_x=args.grid[0], m_y=args.grid[1], nodes_per_scene=args.nodes,
        positions_per_area=args.per_area or d.getint("per_area"),
        t60_range=args.t60 or (d.getfloat("t60_min"), d.getfloat("t60_max")),
        snr_range=args.snr or (d.getfloat("snr_min"), d.getfloat("snr_max")),
        segment_seconds=d.getfloat("segment_seconds"), sample_rate=d.getint("sample_rate"),
        source_corpus=args.corpus or d["source_corpus"], seed=args.seed,
        height_range=(d.getfloat("height_min"), d.getfloat("height_max")))
    manifest = pl.synthesize_dataset(spec, out, threads=args.threads)
    seconds = spec.n_samples * spec.nodes_per_scene * spec.segment_seconds
    print(f"wrote {spec.n_samples} samples ({seconds:.1f} s of audio over "
          f"{spec.nodes_per_scene} nodes) to {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cp = load_config(args.config, args.preset)
    records = pl.read_manifest(args.manifest)
    model_cfg = model_from(cp, pl.manifest_m_total(records))
    train_cfg = train_from(cp, args)
    ckpt = Path(args.checkpoint)
    log_path = Path(args.log) if args.log else ckpt.with_name(ckpt.name + ".log.csv")

    def progress(epoch, step, loss):
        if step % 50 == 0:
            log.info("epoch %d step %d loss %.4f", epoch + 1, step, loss)

    res = pl.train(args.manifest, model_cfg, train_cfg, ckpt, stft_from(cp), log_path,
                   resume=args.resume, progress=progress)
    final = res.losses[-1] if res.losses else float("nan")
    print(f"checkpoint {res.checkpoint}  steps {len(res.losses)}  final loss {final:.4f}")
    if res.val_history and "val_accuracy" in res.val_history[-1]:
        v = res.val_history[-1]
        print(f"validation accuracy {v['val_accuracy']:.4f}  MAE {v['val_mae']:.4f} m")
    return EXIT_OK


def _eval_rows(manifest, checkpoint, nodes, seeds, seed, stft_cfg, oracle):
    rows = []
    for n in nodes or [None]:
        reps = [pl.evaluate(manifest, checkpoint, n, seed + k, stft_cfg, oracle)
                for k in range(seeds if n is not None else 1)]
        rows.append((reps[0].node_count, reps[0].n_samples,
                     float(np.mean([r.mae_meters for r in reps])),
                     float(np.mean([r.accuracy for r in reps]))))
    return rows


def _write_csv(path, headers, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(headers)
        w.writerows(rows)


def cmd_eval(args) -> int:
    if not args.oracle and not args.checkpoint:
        raise UsageError("--checkpoint is required unless --oracle is given")
    cp = load_config(args.config, args.preset)
    rows = _eval_rows(args.manifest, args.checkpoint, args.nodes, args.seeds, args.seed,
                      stft_from(cp), args.oracle)
    headers = ["nodes", "samples", "mae_m", "accuracy"]
    print(pl.format_table(rows, headers))
    if not args.nodes and not args.oracle:
        rep = pl.evaluate(args.manifest, args.checkpoint, None, args.seed, stft_from(cp))
        if len(rep.per_room) > 1:
            print()
            print(pl.format_table(list(rep.rows()), ["room", "samples", "mae_m", "accuracy"]))
    if args.csv:
        _write_csv(args.csv, headers, rows)
    return EXIT_OK


def cmd_locate(args) -> int:
    cp = load_config(args.config, args.preset)
    stft_cfg = stft_from(cp)
    params, cfg = pl.load_model(args.checkpoint)
    if args.manifest:
        if args.wav:
            raise UsageError("give either --manifest/--sample or --wav, not both")
        records = {r["sample_id"]: r for r in pl.read_manifest(args.manifest)}
        if args.sample not in records:
            raise pl.ConfigError(f"sample {args.sample!r} is not in {args.manifest}")
        rec = records[args.sample]
        grid = pl.record_grid(rec)
        onehots, feats = pl.sample_inputs(rec, Path(args.manifest).parent, stft_cfg,
                                          dtype=params.dtype)
    else:
        if not (args.wav and args.areas and args.room and args.grid):
            raise UsageError("ad-hoc input needs --wav, --areas, --room and --grid")
        if len(args.wav) != len(args.areas):
            raise UsageError(f"{len(args.wav)} WAV files but {len(args.areas)} area indices")
        grid = GridSpec(args.room, *args.grid)
        waves = []
        for path in args.wav:
            try:
                x, _ = read_wav(path, expected_rate=args.sample_rate)
            except OSError as exc:
                raise FileNotFoundError(f"cannot read {path}: {exc}") from None
            waves.append(x)
        n = min(len(w) for w in waves)
        onehots = np.stack([one_hot(a, grid, params.dtype) for a in args.areas])
        feats = pl.normalize_features(
            extract_features(np.stack([w[:n] for w in waves]), stft_cfg, np.float64).data)
        feats = feats.astype(params.dtype)
    if grid.m_total != cfg.m_total:
        raise pl.ConfigError(f"checkpoint predicts {cfg.m_total} areas but the grid has "
                             f"{grid.m_total}")
    pred = predict_from_probs(forward_probs(onehots, feats, params, cfg).data)
    x, y = area_center(pred.decided, grid)
    print(f"area {pred.decided}")
    print(f"center ({x:.4g}, {y:.4g})")
    print("top-5: " + ", ".join(f"{m}:{p:.4f}" for m, p in pred.top(5)))
    return EXIT_OK


def _parse_run(text: str):
    label, sep, rest = text.partition("=")
    manifest, sep2, ckpt = rest.partition(":")
    if not (sep and sep2 and label):
        raise argparse.ArgumentTypeError(f"expected LABEL=MANIFEST:CHECKPOINT, got {text!r}")
    return label, manifest, ckpt


def cmd_ablate(args) -> int:
    cp = load_config(args.config, args.preset)
    stft_cfg = stft_from(cp)
    rows = []
    for label, manifest, ckpt in args.run:
        for n, count, mae, acc in _eval_rows(manifest, ckpt, args.nodes, args.seeds, args.seed,
                                             stft_cfg, False):
            rows.append((label, n, count, mae, acc))
    headers = ["run", "nodes", "samples", "mae_m", "accuracy"]
    print(pl.format_table(rows, headers))
    if args.csv:
        _write_csv(args.csv, headers, rows)
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE",
                        help="INI file overriding the packaged defaults and preset")
    common.add_argument("--preset", choices=PRESETS,
                        help="packaged settings to start from; 'desk' is sized for one CPU core")
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--threads", type=int, default=1,
                        help="cap on worker processes and BLAS threads (default 1)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="adhocloc",
                                description="Speaker localization with ad-hoc microphone nodes.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="synthesize a dataset",
                       description="Render reverberant, noisy scenes and write WAVs plus "
                                   "manifest.jsonl into --out.")
    s.add_argument("--rooms", metavar="FILE", help="INI file with a [rooms] section, "
                                                   "one 'name = LxWxH' per room")
    s.add_argument("--room", type=parse_room, action="append",
                   help="room as LxWxH in metres; repeatable, ignored with --rooms")
    s.add_argument("--grid", type=parse_grid, required=True, help="grid as MXxMY, e.g. 4x4")
    s.add_argument("--nodes", type=int, required=True, help="nodes per scene")
    s.add_argument("--per-area", type=int, help="speaker positions per area")
    s.add_argument("--t60", type=parse_range, help="T60 in seconds, a value or MIN,MAX")
    s.add_argument("--snr", type=parse_range, help="SNR in dB, a value or MIN,MAX")
    s.add_argument("--corpus", help="'synthetic' or a directory of WAV files")
    s.add_argument("--out", required=True, help="existing output directory")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", parents=[common], help="train a model",
                       description="Train on a manifest; writes the best checkpoint, "
                                   "CHECKPOINT.last and a CSV log.")
    t.add_argument("--manifest", required=True, help="manifest.jsonl from simulate")
    t.add_argument("--checkpoint", required=True, help="output checkpoint path")
    t.add_argument("--epochs", type=int, help="number of epochs")
    t.add_argument("--lr", type=float, help="Adam learning rate")
    t.add_argument("--batch-size", type=int, help="samples per step")
    t.add_argument("--crop-frames", type=int, help="random frame crop per step; 0 keeps all")
    t.add_argument("--max-steps", type=int, help="stop after this many steps; 0 for no limit")
    t.add_argument("--val-fraction", type=float, help="share of samples held out for validation")
    t.add_argument("--log", metavar="CSV", help="training log (default CHECKPOINT.log.csv)")
    t.add_argument("--resume", action="store_true", help="continue from CHECKPOINT.last")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint",
                       description="Report MAE and accuracy, optionally for node subsets.")
    e.add_argument("--manifest", required=True, help="manifest.jsonl to evaluate on")
    e.add_argument("--checkpoint", help="trained checkpoint")
    e.add_argument("--nodes", type=int, nargs="+", help="node subset sizes to sweep")
    e.add_argument("--seeds", type=int, default=1,
                   help="subset seeds averaged per node count (default 1)")
    e.add_argument("--oracle", action="store_true",
                   help="use the true labels instead of a model")
    e.add_argument("--csv", help="also write the table as CSV")
    e.set_defaults(func=cmd_eval)

    lo = sub.add_parser("locate", parents=[common], help="localize one sample",
                        description="Print the decided area, its center and the top-5 areas.")
    lo.add_argument("--checkpoint", required=True, help="trained checkpoint")
    lo.add_argument("--manifest", help="manifest holding the sample")
    lo.add_argument("--sample", help="sample_id within --manifest")
    lo.add_argument("--wav", nargs="+", help="one WAV file per node")
    lo.add_argument("--areas", type=int, nargs="+", help="1-based area index of each node")
    lo.add_argument("--room", type=parse_room, help="room as LxWxH for --wav input")
    lo.add_argument("--grid", type=parse_grid, help="grid as MXxMY for --wav input")
    lo.add_argument("--sample-rate", type=int, default=16000,
                    help="expected WAV sample rate (default 16000)")
    lo.set_defaults(func=cmd_locate)

    a = sub.add_parser("ablate", parents=[common], help="compare runs",
                       description="Evaluate several manifest/checkpoint pairs side by side.")
    a.add_argument("--run", type=_parse_run, action="append", required=True,
                   help="LABEL=MANIFEST:CHECKPOINT; repeatable")
    a.add_argument("--nodes", type=int, nargs="+", help="node subset sizes to sweep")
    a.add_argument("--seeds", type=int, default=1, help="subset seeds per node count")
    a.add_argument("--csv", help="also write the table as CSV")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.debug("internal failure", exc_info=True)
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
