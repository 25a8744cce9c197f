"""``blinkwise`` command line.

Subcommands: detect, features, calibrate, train, eval, crossval, synth and
throughput. Settings come from defaults, then ``--config FILE``, then flags.

Exit codes: 0 success, 2 input format error, 3 precondition violation,
4 numerical divergence, 5 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .exceptions import BlinkwiseError, PreconditionError

log = logging.getLogger("blinkwise")

EXIT_FORMAT, EXIT_PRECONDITION, EXIT_DIVERGENCE, EXIT_IO = 2, 3, 4, 5


# ---------------------------------------------------------------------------
# provenance and run directories


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def inputs_digest(paths: Sequence) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(file_digest(p).encode("ascii"))
    return h.hexdigest()


def provenance(cfg: RunConfig, inputs: Sequence, **extra) -> Dict[str, str]:
    prov = {
        "tool": f"blinkwise {__version__}",
        "config_digest": cfg.digest(),
        "input_digest": inputs_digest(inputs),
    }
    prov.update({k: str(v) for k, v in extra.items()})
    return prov


class RunDir:
    """Output folder with config snapshot, input digests and a log file."""

    def __init__(self, path, cfg: RunConfig, inputs: Sequence):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
        lines = [f"{file_digest(p)}  {Path(p).name}\n" for p in inputs]
        (self.path / "inputs.txt").write_text("".join(lines), encoding="utf-8")
        self._handler = logging.FileHandler(self.path / "log.txt", mode="w", encoding="utf-8")
        self._handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        log.addHandler(self._handler)

    def __truediv__(self, name):
        return self.path / name

    def close(self):
        log.removeHandler(self._handler)
        self._handler.close()


def _prov_header(prov: Dict[str, str]) -> str:
    return "".join(f"# {k}: {v}\n" for k, v in prov.items())


# ---------------------------------------------------------------------------
# argument groups


def _add_detector_flags(p):
    g = p.add_argument_group("detector")
    g.add_argument("--classifier", dest="detector.classifier", choices=["threshold", "linear13"])
    g.add_argument("--threshold", dest="detector.threshold", type=float)
    g.add_argument("--filter", dest="detector.filter", choices=["median", "mean"])
    g.add_argument("--window", dest="detector.window", type=int, help="smoothing window (odd)")
    g.add_argument("--context", dest="detector.context", type=int)
    g.add_argument("--weights", help="file with 13 window weights and a bias (linear13)")


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--learning-rate", dest="train.learning_rate", type=float)
    g.add_argument("--delta", dest="train.delta", type=float)
    g.add_argument("--batch-size", dest="train.batch_size", type=int)
    g.add_argument("--epochs", dest="train.epochs", type=int)
    g.add_argument("--l2", dest="train.l2_lambda", type=float)
    g.add_argument("--seq-len", dest="train.window", type=int, help="blinks per sequence (T)")
    g.add_argument("--stride", dest="train.stride", type=int)
    g.add_argument("--boundary", dest="boundary", choices=["hard", "soft"])


def _overrides(args) -> Dict[str, object]:
    return {k: v for k, v in vars(args).items() if "." in k or k in ("seed", "boundary")}


def _config(args) -> RunConfig:
    return load_config(args.config, _overrides(args))


def _detector(cfg: RunConfig, args):
    weights, bias = None, 0.0
    if getattr(args, "weights", None):
        values = np.loadtxt(args.weights, dtype=float, comments="#", delimiter=",").ravel()
        if values.size != 14:
            raise PreconditionError("weights file must hold 13 weights followed by a bias")
        weights, bias = values[:13], float(values[13])
    return cfg.detector.detector(weights, bias)


# ---------------------------------------------------------------------------
# commands


def cmd_detect(args) -> int:
    from .detection import write_blinks
    from .landmarks import load_stream

    cfg = _config(args)
    series = load_stream(args.input)
    blinks = _detector(cfg, args).detect(series)
    prov = provenance(cfg, [args.input], filter=cfg.detector.filter, window=cfg.detector.window,
                      classifier=cfg.detector.classifier)
    write_blinks(blinks, args.output, prov)
    print(f"{len(blinks)} blinks -> {args.output}")
    return 0


def cmd_features(args) -> int:
    from .detection import read_blinks
    from .features import extract_features, write_features
    from .landmarks import load_stream

    cfg = _config(args)
    inputs = [args.input] + ([args.blinks] if args.blinks else [])
    run = RunDir(args.out, cfg, inputs)
    try:
        series = load_stream(args.input)
        blinks = read_blinks(args.blinks) if args.blinks else _detector(cfg, args).detect(series)
        X = extract_features(blinks, series)
        dest = run / (Path(args.input).name.split(".")[0] + ".features.csv")
        write_features(X, dest, provenance=provenance(cfg, inputs))
        log.info("wrote %d feature rows to %s", len(X), dest)
        print(f"{len(X)} feature rows -> {dest}")
    finally:
        run.close()
    return 0


def cmd_calibrate(args) -> int:
    from .features import SubjectCalibrator, read_features, write_features

    cfg = _config(args)
    inputs = [args.alert] + list(args.video)
    run = RunDir(args.out, cfg, inputs)
    try:
        prov = provenance(cfg, inputs)
        alert = read_features(args.alert)
        if alert.normalized:
            raise PreconditionError(f"{args.alert} is already normalized")
        cal = SubjectCalibrator().fit(alert.values)
        cal.stats_.write(run / "calibration.csv", prov)
        rest = cal.remaining(alert.values)
        write_features(cal.transform(rest), run / _normalized_name(args.alert), True,
                       alert.blink_idx[cal.n_calibration_:], prov)
        for path in args.video:
            table = read_features(path)
            write_features(cal.transform(table.values), run / _normalized_name(path), True, table.blink_idx, prov)
        log.info("calibrated on %d of %d alert blinks", cal.n_calibration_, len(alert.values))
        print(f"calibration from {cal.n_calibration_} blinks -> {run / 'calibration.csv'}")
    finally:
        run.close()
    return 0


def _normalized_name(path) -> str:
    return Path(path).name.split(".")[0] + ".normalized.csv"


def _manifest_inputs(manifest, records) -> List[str]:
    return [manifest] + [r.path for r in records]


def cmd_train(args) -> int:
    from .dataset import prepare_videos, read_manifest
    from .network import Architecture, save_model

    cfg = _config(args)
    records = read_manifest(args.manifest)
    run = RunDir(args.out, cfg, _manifest_inputs(args.manifest, records))
    try:
        videos = prepare_videos(records, _detector(cfg, args))
        train_v = [v for v in videos if args.holdout_fold is None or v.record.fold != args.holdout_fold]
        if not train_v:
            raise PreconditionError("no training videos left after holding out the fold")

        with open(run / "loss.log", "w", encoding="utf-8") as loss_log:
            def on_epoch(epoch, loss):
                loss_log.write(f"epoch={epoch + 1} loss={loss!r}\n")
                log.info("epoch %d loss %.6f", epoch + 1, loss)

            std, result = _fit_with_log(train_v, cfg, Architecture(T=cfg.train.window), on_epoch)
        prov = provenance(cfg, _manifest_inputs(args.manifest, records),
                          holdout_fold=args.holdout_fold if args.holdout_fold is not None else "none")
        save_model(run / "model.bin", result.arch, result.params, result.state,
                   {"global.mean": std.mean_, "global.scale": std.scale_}, prov)
        print(f"trained {result.steps} steps, final loss {result.loss_trace[-1]:.4f} -> {run / 'model.bin'}")
    finally:
        run.close()
    return 0


def _fit_with_log(train_v, cfg: RunConfig, arch, on_epoch):
    from .evaluation import sequences_for
    from .features import GlobalStandardizer
    from .training import train

    std = GlobalStandardizer().fit(np.concatenate([v.features for v in train_v]))
    seqs = sequences_for(train_v, std, cfg.train)
    return std, train(seqs, cfg.train, arch, boundary=cfg.boundary, on_epoch=on_epoch)


def _write_reports(run, reports, prov, confusion):
    from .evaluation import render_confusion, render_table

    header = _prov_header(prov)
    (run / "report.txt").write_text(header + "\n".join(r.to_kv() for r in reports), encoding="utf-8")
    (run / "report_table.txt").write_text(header + render_table(reports), encoding="utf-8")
    (run / "confusion.txt").write_text(header + render_confusion(confusion), encoding="utf-8")


def _write_predictions(path, prov, records_by_id, predictions):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(_prov_header(prov))
        fh.write("video_id,label,voted_class,mean_out,n_sequences\n")
        for p in predictions:
            r = records_by_id[p.video_id]
            fh.write(f"{p.video_id},{r.label},{int(p.voted_class.score)},{p.mean_out!r},{len(p.outs)}\n")


def cmd_eval(args) -> int:
    from .dataset import prepare_videos, read_manifest
    from .evaluation import evaluate_videos
    from .network import load_model
    from .pipeline import standardizer_from
    from .training import TrainResult

    cfg = _config(args)
    records = read_manifest(args.manifest)
    inputs = _manifest_inputs(args.manifest, records) + [args.model]
    run = RunDir(args.out, cfg, inputs)
    try:
        bundle = load_model(args.model)
        std = standardizer_from(bundle)
        if std is None:
            raise PreconditionError("model file lacks normalization statistics")
        videos = prepare_videos(records, _detector(cfg, args))
        test_v = [v for v in videos if args.fold is None or v.record.fold == args.fold]
        if not test_v:
            raise PreconditionError(f"no videos in fold {args.fold}")
        train_cfg = cfg.train if cfg.train.window == bundle.arch.T else _with_window(cfg.train, bundle.arch.T)
        result = TrainResult(bundle.arch, bundle.params, bundle.state, [], 0)
        name = "all" if args.fold is None else f"fold {args.fold}"
        report, preds = evaluate_videos(test_v, std, result, train_cfg, name=name)
        prov = provenance(cfg, inputs)
        _write_reports(run, [report], prov, report.confusion)
        _write_predictions(run / "predictions.csv", prov, {r.video_id: r for r in records}, preds)
        log.info("VA %.4f VRE %.4f BSA %.4f BSRE %.4f", report.VA, report.VRE, report.BSA, report.BSRE)
        print(report.to_kv(), end="")
    finally:
        run.close()
    return 0


def _with_window(train_cfg, T):
    from dataclasses import replace

    return replace(train_cfg, window=T, stride=min(train_cfg.stride, T))


def cmd_crossval(args) -> int:
    from .dataset import read_manifest
    from .evaluation import MetricReport, crossvalidate
    from .network import Architecture

    cfg = _config(args)
    records = read_manifest(args.manifest)
    inputs = _manifest_inputs(args.manifest, records)
    run = RunDir(args.out, cfg, inputs)
    try:
        cv = crossvalidate(records, cfg.train, Architecture(T=cfg.train.window), _detector(cfg, args),
                           boundary=cfg.boundary, jobs=args.jobs,
                           on_fold=lambda k, r: log.info("fold %d VA %.4f", k, r.VA))
        prov = provenance(cfg, inputs)
        reports: List[MetricReport] = cv.folds + [cv.average]
        _write_reports(run, reports, prov, cv.average.confusion)
        by_id = {r.video_id: r for r in records}
        _write_predictions(run / "predictions.csv", prov, by_id,
                           [p for k in sorted(cv.predictions) for p in cv.predictions[k]])
        print((run / "report_table.txt").read_text(encoding="utf-8"), end="")
    finally:
        run.close()
    return 0


def cmd_synth(args) -> int:
    from dataclasses import replace

    from .synthetic import SynthProfile, gen_dataset

    cfg = _config(args)
    s = cfg.synth
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    profile = replace(SynthProfile(), seed=cfg.seed, noise_sigma=s.noise_sigma, subject_spread=s.subject_spread)
    prov = provenance(cfg, [], generator="synthetic")
    records = gen_dataset(profile, s.subjects, s.videos_per_state, out, s.minutes, s.fps, s.folds,
                          _detector(cfg, args), prov)
    files = sorted(p for p in out.iterdir() if p.is_file() and p.name != "digests.txt")
    digests = "".join(f"{file_digest(p)}  {p.name}\n" for p in files)
    (out / "digests.txt").write_text(digests, encoding="utf-8")
    print(f"{len(records)} videos -> {out / 'manifest.csv'}")
    print(f"dataset digest {hashlib.sha256(digests.encode('ascii')).hexdigest()}")
    return 0


def cmd_throughput(args) -> int:
    from .landmarks import load_stream
    from .network import Architecture, ModelBundle, init_params, init_state, load_model
    from .pipeline import measure_throughput
    from .synthetic import SynthProfile, gen_ear_stream

    cfg = _config(args)
    if args.input:
        series = load_stream(args.input)
    else:
        series, _ = gen_ear_stream(SynthProfile(seed=cfg.seed), "drowsy", 0, n_frames=args.frames)
    if args.model:
        bundle = load_model(args.model)
    else:
        arch = Architecture(T=cfg.train.window)
        bundle = ModelBundle(arch, init_params(arch, np.random.default_rng(cfg.seed)), init_state(arch))
    report = measure_throughput(series, bundle, args.repeats, _detector(cfg, args))
    text = report.to_kv()
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blinkwise", description="Blink-based drowsiness pipeline.")
    parser.add_argument("--version", action="version", version=f"blinkwise {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, default=1, help="worker processes (cross-validation folds)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", parents=[common], help="EAR or landmark stream -> blink file")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    _add_detector_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("features", parents=[common], help="stream (+ blinks) -> raw feature file")
    p.add_argument("input")
    p.add_argument("--blinks", help="use this blink file instead of running the detector")
    p.add_argument("--out", required=True, help="run directory")
    _add_detector_flags(p)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("calibrate", parents=[common], help="per-subject normalization")
    p.add_argument("--alert", required=True, help="raw features of the subject's alert video")
    p.add_argument("--video", action="append", default=[], help="further raw feature files to normalize")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train", parents=[common], help="train on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--holdout-fold", type=int, help="exclude this fold from training")
    p.add_argument("--out", required=True, help="run directory")
    _add_train_flags(p)
    _add_detector_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--fold", type=int, help="evaluate only this fold")
    p.add_argument("--out", required=True, help="run directory")
    _add_train_flags(p)
    _add_detector_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", parents=[common], help="leave-one-fold-out protocol")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="run directory")
    _add_train_flags(p)
    _add_detector_flags(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", dest="synth.subjects", type=int)
    p.add_argument("--minutes", dest="synth.minutes", type=float)
    p.add_argument("--videos-per-state", dest="synth.videos_per_state", type=int)
    p.add_argument("--folds", dest="synth.folds", type=int)
    p.add_argument("--noise", dest="synth.noise_sigma", type=float)
    _add_detector_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("throughput", parents=[common], help="frames/s of the post-landmark pipeline")
    p.add_argument("input", nargs="?", help="EAR or landmark stream (synthetic when omitted)")
    p.add_argument("--frames", type=int, default=10_000, help="synthetic stream length")
    p.add_argument("--model", help="checkpoint (random weights when omitted)")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("-o", "--output")
    _add_detector_flags(p)
    p.set_defaults(func=cmd_throughput)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except BlinkwiseError as exc:
        print(f"blinkwise {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (KeyError, ValueError) as exc:
        print(f"blinkwise {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except ArithmeticError as exc:
        print(f"blinkwise {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"blinkwise {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())


__all__ = ["build_parser", "main", "EXIT_FORMAT", "EXIT_PRECONDITION", "EXIT_DIVERGENCE", "EXIT_IO"]
