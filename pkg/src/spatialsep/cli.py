"""Command-line entry point: ``spatialsep <command> ...``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .errors import ConfigError, SpatialSepError

log = logging.getLogger("spatialsep")

SEED_ENV = "SPATIALSEP_SEED"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def resolve_seed(seed: int | None) -> int:
    """Explicit ``--seed`` wins, then ``$SPATIALSEP_SEED``, then 0."""
    if seed is not None:
        return seed
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


# commands

def cmd_make_dry(args) -> int:
    from .dataset import make_dry_sources
    paths = make_dry_sources(args.out_dir, args.count, resolve_seed(args.seed), args.seconds)
    print(f"wrote {len(paths)} dry sources to {args.out_dir}")
    return 0


def cmd_simulate(args) -> int:
    from .dataset import simulate_dataset
    lo, hi = args.t60_range
    if not 0 < lo <= hi:
        raise ConfigError(f"invalid --t60-range {lo} {hi}")
    manifest = simulate_dataset(args.dry_dir, args.out_dir, args.count, resolve_seed(args.seed),
                                t60_range=(lo, hi), max_order=args.max_order, jobs=args.jobs)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    from .config import load_config
    from .train import train

    config = None
    if args.resume is None:
        if args.config is None:
            raise ConfigError("--config is required unless --resume is given")
        config = load_config(args.config)
        if args.seed is not None or os.environ.get(SEED_ENV):
            config.training.seed = resolve_seed(args.seed)
        if args.batch_size is not None:
            config.training.batch_size = args.batch_size
        if args.lr is not None:
            config.training.lr = args.lr
        config.validate()
    trainer = train(config, args.manifest, args.out_model, dev_manifest=args.dev_manifest,
                    resume=args.resume, steps=args.steps, log_path=args.log)
    print(f"trained {trainer.step_count} steps; checkpoint {args.out_model}; "
          f"SI-SDRi on {trainer.examples[0].id}: {trainer.probe_si_sdri:.3f} dB")
    return 0


def _load_model(path):
    from .model import SeparationModel
    if not os.path.exists(path):
        from .errors import DataError
        raise DataError(f"model file {path!r} does not exist")
    model, header, _ = SeparationModel.load(path)
    return model, header


def cmd_separate(args) -> int:
    from .errors import DataError
    from .signal import MultiChannelSignal
    from .wav import read_wav, write_wav

    model, _ = _load_model(args.model)
    sig = read_wav(args.wav)
    if sig.sample_rate != model.config.training.sample_rate:
        raise DataError(f"{args.wav}: {sig.sample_rate} Hz, model expects "
                        f"{model.config.training.sample_rate} Hz")
    est = model.separate(sig.samples)
    os.makedirs(args.out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.wav))[0]
    for s, wave in enumerate(est):
        path = os.path.join(args.out_dir, f"{stem}_s{s + 1}.wav")
        write_wav(path, MultiChannelSignal(wave[None], sig.sample_rate))
        print(path)
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_dataset
    from .plotting import plot_report

    model, _ = _load_model(args.model)
    report = evaluate_dataset(model.separate, args.manifest, jobs=args.jobs)
    stem = os.path.splitext(args.out)[0]
    parent = os.path.dirname(args.out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(args.out, "w") as fh:
        fh.write(report.to_json() + "\n")
    table = report.to_table()
    with open(f"{stem}.txt", "w") as fh:
        fh.write(table)
    report.write_csv(f"{stem}.csv")
    plot_report(report, f"{stem}.png")
    sys.stdout.write(table)
    return 0


def filter_bank(model, which: str) -> tuple[np.ndarray, dict]:
    """Raw taps of the requested bank plus descriptive metadata."""
    from .errors import DataError
    if which == "encoder":
        taps = model.params["encoder.basis"].value[:, 0, :]
        return taps, {"bank": "encoder", "shape": list(taps.shape)}
    if which == "icd":
        if model.icd is None:
            raise DataError("model has no ICD filter bank")
        taps = model.icd.K.value
        return taps, {"bank": "icd", "shape": list(taps.shape), "w2_mode": model.icd.w2_mode,
                      "w2": model.icd.w2.value.tolist()}
    if which == "mcs":
        if model.mcs is None:
            raise DataError("model has no MCS filter bank")
        taps = model.mcs.K.value
        return taps, {"bank": "mcs", "shape": list(taps.shape)}
    raise ConfigError(f"unknown filter bank {which!r}")


def inspect_filters(model, which: str, prefix: str, n_fft: int = 64) -> dict:
    """Write sorted taps/FFT CSVs, a PGM heatmap, a PNG and a JSON sidecar."""
    from .features import sort_filters_by_peak_bin
    from .plotting import plot_filters, write_pgm

    taps, meta = filter_bank(model, which)
    order, mags = sort_filters_by_peak_bin(taps, n_fft)
    sorted_taps = taps[order]
    sorted_mags = mags[order]
    flat_taps = sorted_taps.reshape(sorted_taps.shape[0], -1)
    parent = os.path.dirname(prefix)
    if parent:
        os.makedirs(parent, exist_ok=True)
    paths = {
        "taps": f"{prefix}_taps.csv",
        "fft": f"{prefix}_fft.csv",
        "pgm": f"{prefix}_fft.pgm",
        "png": f"{prefix}.png",
        "meta": f"{prefix}_meta.json",
    }
    for key, matrix in (("taps", flat_taps), ("fft", sorted_mags)):
        with open(paths[key], "w", newline="") as fh:
            csv.writer(fh).writerows([[repr(float(v)) for v in row] for row in matrix])
    write_pgm(paths["pgm"], sorted_mags)
    # Multi-channel banks are drawn from their first channel.
    shown = sorted_taps[:, 0, :] if sorted_taps.ndim == 3 else sorted_taps
    plot_filters(shown, sorted_mags, paths["png"], title=which)
    meta.update({"n_fft": n_fft, "bins": int(mags.shape[1]), "order": order.tolist(),
                 "peak_bins": np.argmax(sorted_mags, axis=1).tolist(), "files": paths})
    with open(paths["meta"], "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return paths


def cmd_inspect_filters(args) -> int:
    model, _ = _load_model(args.model)
    paths = inspect_filters(model, args.which, args.out)
    for p in paths.values():
        print(p)
    return 0


def cmd_dump_features(args) -> int:
    from .features import write_feature_dump
    from .wav import read_wav

    model, _ = _load_model(args.model)
    sig = read_wav(args.wav)
    out = model.forward(sig.samples[None], training=False)
    meta = {"config": model.config.to_dict(), "pairs": [list(p) for p in model.pairs],
            "source": os.path.basename(args.wav)}
    for p in write_feature_dump(args.out, out["features"], meta):
        print(p)
    return 0


# parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spatialsep", description="Multi-channel speech separation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-dry", help="write synthetic speech-like dry sources")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--count", type=_positive_int, default=8)
    s.add_argument("--seconds", type=float, default=4.0)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_make_dry)

    s = sub.add_parser("simulate", help="simulate spatialized two-speaker mixtures")
    s.add_argument("--dry-dir", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--count", type=_positive_int, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--t60-range", type=float, nargs=2, default=(0.05, 0.5), metavar=("LO", "HI"))
    s.add_argument("--max-order", type=int)
    s.add_argument("--jobs", type=_positive_int, default=1)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train a separation model")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config", help="JSON config file or preset name")
    s.add_argument("--out-model", required=True)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--dev-manifest", help="select checkpoints by dev SI-SDRi")
    s.add_argument("--steps", type=_positive_int, help="total step count (overrides config)")
    s.add_argument("--batch-size", type=_positive_int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--log", help="JSONL step log (default <out-model>.log.jsonl)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("separate", help="separate one multi-channel WAV")
    s.add_argument("--model", required=True)
    s.add_argument("--wav", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_separate)

    s = sub.add_parser("evaluate", help="score a model on a manifest")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="report JSON path; .txt/.csv/.png written alongside")
    s.add_argument("--jobs", type=_positive_int, default=1)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("inspect-filters", help="export learned filters sorted by peak frequency")
    s.add_argument("--model", required=True)
    s.add_argument("--which", choices=("encoder", "icd", "mcs"), default="icd")
    s.add_argument("--out", required=True, help="output prefix")
    s.set_defaults(func=cmd_inspect_filters)

    s = sub.add_parser("dump-features", help="write the stacked separator input for one WAV")
    s.add_argument("--model", required=True)
    s.add_argument("--wav", required=True)
    s.add_argument("--out", required=True, help="output prefix (.f64 + .json)")
    s.set_defaults(func=cmd_dump_features)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SpatialSepError as exc:
        print(f"spatialsep: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
