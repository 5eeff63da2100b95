"""Command-line front end: ``zsunits <subcommand> [flags]``.

Every subcommand writes a ``report.txt`` of ``key = value`` lines (no
timestamps) into ``--out`` when given, and prints it to stdout. Exit
codes: 0 ok, 2 usage or configuration error, 3 data error, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import inverter as I
from . import metrics, pipeline
from .cluster import ClusterInputError
from .corpus import (
    BundleError,
    ManifestError,
    ModelBundle,
    UnsupportedFormatError,
    WavFormatError,
    load_bundle,
    load_manifest,
    save_bundle,
    save_wav,
)
from .dsp import ConfigurationError, EmptyInputError
from .grad import ShapeError
from .inverter import InverterInputError
from .metrics import MetricInputError
from .vq import CodebookStateError, TrainingHalted, VqInputError

log = logging.getLogger("zsunits")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DATA_ERRORS = (
    ManifestError, WavFormatError, UnsupportedFormatError, BundleError, MetricInputError, VqInputError,
    InverterInputError, ClusterInputError, EmptyInputError, CodebookStateError, ShapeError, FileNotFoundError,
)
NUMERIC_ERRORS = (TrainingHalted, FloatingPointError)
SUBMITTED = {("vqvae", "256", "4"), ("vqvae", "256", "2")}

# flag -> config key
OVERRIDES = {
    "seed": "training.seed",
    "model": "model.kind",
    "codebook": "model.codebook",
    "time_reduction": "model.time_reduction",
    "gamma": "model.gamma",
    "gan": "inverter.gan",
    "beta": "inverter.beta",
    "steps": "training.steps",
    "inverter_steps": "training.inverter_steps",
    "kind": "features.kind",
}


class CommandError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# -- reports ------------------------------------------------------------------

def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Report:
    def __init__(self, command, cfg: pipeline.PipelineConfig | None):
        self.lines = [
            ("command", command),
            ("version", __version__),
            ("python", platform.python_version()),
            ("numpy", np.__version__),
            ("scipy", scipy.__version__),
        ]
        if cfg is not None:
            self.lines.append(("seed", cfg.get("training.seed")))
            self.lines.append(("defaults_note", "training.* values are package defaults, not published settings"))
            self.lines += [(f"config.{k}", v) for k, v in cfg.flat().items()]

    def add(self, key, value):
        self.lines.append((key, _fmt(value)))

    def artifact(self, name, path):
        self.add(f"artifact.{name}", f"{Path(path).name} sha256={digest(path)}")

    def text(self):
        return "".join(f"{k} = {v}\n" for k, v in self.lines)


def _finish(args, report):
    text = report.text()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _config(args):
    overrides = {key: getattr(args, flag, None) for flag, key in OVERRIDES.items()}
    cfg = pipeline.PipelineConfig.load(args.config, overrides)
    if getattr(args, "manifest", None):
        cfg.set("paths.manifest", args.manifest)
    return cfg


def _out_dir(args):
    if not args.out:
        raise CommandError("--out is required for this command", EXIT_USAGE)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(args):
    if not args.manifest:
        raise CommandError("--manifest is required for this command", EXIT_USAGE)
    return load_manifest(args.manifest)


def _require(args, name):
    value = getattr(args, name)
    if value is None:
        raise CommandError(f"--{name.replace('_', '-')} is required for this command", EXIT_USAGE)
    return value


# -- subcommands --------------------------------------------------------------

def cmd_extract(args):
    cfg = _config(args)
    manifest = _manifest(args)
    out = _out_dir(args)
    data = pipeline.manifest_features(manifest, cfg, args.cache, args.jobs)
    stft = cfg.stft()
    bundle = ModelBundle(
        "feature_set",
        {"kind": cfg.get("features.kind"), "frame_rate": manifest.sample_rate / stft.hop_length},
        {uid: f for uid, f in zip(data.ids, data.frames)},
    )
    save_bundle(bundle, out / "features.zsu")
    cfg.write(out / "config.ini")
    report = Report("extract", cfg)
    report.add("metric.utterances", len(data.ids))
    report.add("metric.frames", sum(len(f) for f in data.frames))
    report.artifact("features", out / "features.zsu")
    return _finish(args, report)


def cmd_train_units(args):
    cfg = _config(args)
    manifest = _manifest(args)
    out = _out_dir(args)
    data = pipeline.manifest_features(manifest, cfg, args.cache, args.jobs)
    ckpt = out / "checkpoint.zsu" if cfg.unit_kind() == "vqvae" else None
    unit, stats = pipeline.train_units(data, cfg, ckpt)
    model_path = out / "model.zsu"
    save_bundle(unit.to_bundle({"pipeline": cfg.flat()}), model_path)
    cfg.write(out / "config.ini")
    report = Report("train-units", cfg)
    for key, value in stats.items():
        report.add(f"metric.{key}", value)
    report.artifact("model", model_path)
    if ckpt is not None:
        report.artifact("checkpoint", ckpt)
    key = (unit.kind, cfg.get("model.codebook"), cfg.get("model.time_reduction"))
    for system, rep, k, r, abx, rate in pipeline.reference_table():
        if (system, k, r) == key:
            report.add("reference.published_abx_percent", abx)
            report.add("reference.published_bitrate", rate)
            report.add("reference.note", "published full-corpus result; not reproduced here")
            if key in SUBMITTED:
                report.add("reference.submitted_system", "yes")
    return _finish(args, report)


def _load_units_model(args):
    path = _require(args, "model_file")
    return pipeline.UnitModel.from_bundle(load_bundle(path))


def cmd_encode(args):
    cfg = _config(args)
    manifest = _manifest(args)
    unit = _load_units_model(args)
    out = _out_dir(args)
    cfg.set("features.kind", unit.feature_kind)
    data = pipeline.manifest_features(manifest, cfg, args.cache, args.jobs)
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        encoded = list(pool.map(unit.encode, data.frames))
    units = {uid: e.indices for uid, e in zip(data.ids, encoded)}
    metrics.write_units(out / "units.txt", units)
    reps = ModelBundle(
        "representations",
        {"frame_distance": unit.frame_distance, "time_reduction": unit.time_reduction, "unit_kind": unit.kind},
        {uid: e.representation for uid, e in zip(data.ids, encoded)},
    )
    save_bundle(reps, out / "representations.zsu")
    report = Report("encode", cfg)
    report.add("metric.utterances", len(units))
    report.add("metric.symbols", sum(len(u) for u in units.values()))
    report.add("metric.bitrate", metrics.bitrate(list(units.values()), manifest.total_duration()))
    report.artifact("units", out / "units.txt")
    report.artifact("representations", out / "representations.zsu")
    return _finish(args, report)


def cmd_train_inverter(args):
    cfg = _config(args)
    manifest = _manifest(args)
    unit = _load_units_model(args)
    out = _out_dir(args)
    cfg.set("features.kind", unit.feature_kind)
    pairs = pipeline.inverter_pairs(unit, manifest, cfg, args.cache)
    icfg = cfg.inverter_config(unit.codebook.shape[1], unit.time_reduction, pairs[0][1].shape[1])
    res = I.train_inverter(
        pairs, icfg, cfg.inverter_train_config(str(out / "inverter_checkpoint.zsu")), cfg.stft(),
        unit.codebook, manifest.sample_rate,
    )
    path = out / "inverter.zsu"
    save_bundle(res.inverter.to_bundle({"pipeline": cfg.flat()}), path)
    cfg.write(out / "config.ini")
    report = Report("train-inverter", cfg)
    report.add("metric.initial_mse", res.history[0]["mse"])
    report.add("metric.final_mse", res.history[-1]["mse"])
    report.add("metric.final_d_loss", res.history[-1]["d_loss"])
    report.artifact("inverter", path)
    return _finish(args, report)


def cmd_synthesize(args):
    cfg = _config(args)
    inv = I.Inverter.from_bundle(load_bundle(_require(args, "model_file")))
    units = metrics.read_units(_require(args, "units"))
    out = _out_dir(args)
    iterations = args.iterations or cfg.int("inverter.griffin_lim_iterations")
    seed = cfg.int("training.seed")

    def one(item):
        uid, idx = item
        if inv.codebook is not None and idx.size and idx.max() >= len(inv.codebook):
            raise InverterInputError(f"{uid}: code {idx.max()} outside the inverter's codebook")
        result = I.synthesize(idx, inv, iterations, seed)
        path = out / f"{uid}.wav"
        save_wav(path, result.audio)
        return uid, path

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        written = list(pool.map(one, units.items()))
    report = Report("synthesize", cfg)
    report.add("metric.utterances", len(written))
    for uid, path in written:
        report.artifact(f"wav.{uid}", path)
    return _finish(args, report)


def cmd_eval_abx(args):
    cfg = _config(args)
    triples = metrics.read_triples(_require(args, "triples"))
    reps = load_bundle(_require(args, "features"))
    distance = args.frame_distance or reps.hparams.get("frame_distance", "cosine")
    result = metrics.abx_score(triples, reps.tensors, distance)
    report = Report("eval-abx", cfg)
    report.add("metric.frame_distance", distance)
    report.add("metric.abx_error_percent", result.error_percent)
    report.add("metric.triples", result.n_triples)
    report.add("metric.skipped", result.n_skipped)
    for cat, err in result.by_category.items():
        report.add(f"metric.abx_by_category.{cat}", 100.0 * err)
    return _finish(args, report)


def cmd_eval_bitrate(args):
    cfg = _config(args)
    units = metrics.read_units(_require(args, "units"))
    if args.duration is not None:
        duration = args.duration
    else:
        manifest = _manifest(args)
        durations = {e.utterance_id: e.duration for e in manifest}
        missing = sorted(set(units) - set(durations))
        if missing:
            raise CommandError(f"no duration for utterances {missing[:5]}", EXIT_DATA)
        duration = sum(durations[u] for u in units)
    report = Report("eval-bitrate", cfg)
    report.add("metric.total_duration", duration)
    report.add("metric.symbols", sum(len(u) for u in units.values()))
    report.add("metric.bitrate", metrics.bitrate(list(units.values()), duration))
    return _finish(args, report)


def cmd_gradcheck(args):
    from .diagnostics import gradcheck_suite

    cfg = _config(args)
    results = gradcheck_suite(seed=cfg.int("training.seed"))
    report = Report("gradcheck", cfg)
    for name, rep in results.items():
        report.add(f"gradcheck.{name}", f"{rep.max_error:.3e} {'pass' if rep.passed else 'FAIL'}")
    _finish(args, report)
    if not all(r.passed for r in results.values()):
        raise CommandError("gradient check failed", EXIT_NUMERIC)
    return EXIT_OK


def cmd_info(args):
    report = Report("info", None)
    report.add("unit_models", ",".join(pipeline.UNIT_KINDS))
    if args.paper_table:
        report.add("reference.note", "published full-corpus numbers (ABX %, bits/s); not reproduced by this package")
        for system, rep, k, r, abx, rate in pipeline.reference_table():
            mark = " submitted" if (system, k, r) in SUBMITTED else ""
            report.add(f"reference.{system}.{rep}.K{k}.r{r}", f"abx={abx} bitrate={rate}{mark}")
    return _finish(args, report)


COMMANDS = {
    "extract": cmd_extract,
    "train-units": cmd_train_units,
    "encode": cmd_encode,
    "train-inverter": cmd_train_inverter,
    "synthesize": cmd_synthesize,
    "eval-abx": cmd_eval_abx,
    "eval-bitrate": cmd_eval_bitrate,
    "gradcheck": cmd_gradcheck,
    "info": cmd_info,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file; flags override its values")
    common.add_argument("--manifest", help="TSV manifest: utterance_id, audio_path, speaker_id[, duration]")
    common.add_argument("--out", help="output directory for artifacts and report.txt")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, default=1, help="parallel workers for per-utterance work")
    common.add_argument("--model", choices=pipeline.UNIT_KINDS, help="unit model kind")
    common.add_argument("--model-file", help="trained bundle (unit model or inverter)")
    common.add_argument("--codebook", type=int, help="codebook size K")
    common.add_argument("--time-reduction", type=int, choices=(1, 2, 4, 8))
    common.add_argument("--gan", choices=I.GAN_KINDS)
    common.add_argument("--beta", type=float, help="adversarial loss weight")
    common.add_argument("--gamma", type=float, help="commitment weight")
    common.add_argument("--frame-distance", choices=("cosine", "kl"))
    common.add_argument("--kind", choices=("mfcc39", "mfcc39e", "mel80", "linear"),
                        help="feature kind; mfcc39e puts log energy in place of c0")
    common.add_argument("--steps", type=int, help="unit-model training steps")
    common.add_argument("--inverter-steps", type=int)
    common.add_argument("--units", help="units file: 'utterance-id idx idx ...' per line")
    common.add_argument("--triples", help="ABX triples file: 'A B X category_a category_b' per line")
    common.add_argument("--features", help="representation bundle for ABX")
    common.add_argument("--duration", type=float, help="total seconds, instead of manifest durations")
    common.add_argument("--iterations", type=int, help="Griffin-Lim iterations")
    common.add_argument("--cache", help="feature cache directory")
    common.add_argument("--paper-table", action="store_true", help="show published reference numbers")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="zsunits", description="Acoustic unit discovery and spectrogram inversion.")
    parser.add_argument("--version", action="version", version=f"zsunits {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
