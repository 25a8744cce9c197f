"""Acceptance suite. Each test prints one PASS/FAIL line with its measurement."""

import time

import numpy as np
import pytest

from blinkwise.cli import main
from blinkwise.dataset import VideoRecord, check_protocol, read_manifest, write_manifest
from blinkwise.detection import CandidateSegment, detect_blinks, retrieve_blinks
from blinkwise.evaluation import VideoPrediction, bsa, bsre, crossvalidate, vre_va
from blinkwise.landmarks import write_landmarks
from blinkwise.network import Architecture, count_parameters, init_params, init_state, ModelBundle
from blinkwise.pipeline import measure_throughput
from blinkwise.synthetic import STATES, SynthProfile, ear_to_landmark_frames, gen_dataset, gen_ear_stream
from blinkwise.training import TrainConfig, gradcheck, make_sequences, small_instance, train

import oracles
from test_detection import THREE_DIPS, THREE_DIPS_TRACE, TWO_DIPS, TWO_DIPS_TRACE


@pytest.fixture
def verdict(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, detail

    return emit


def test_rldd_manifest_runs(tmp_path, verdict):
    # RLDD layout: one folder per subject, videos named by label, landmarks extracted per video
    profile = SynthProfile(seed=11)
    rows = []
    for s in range(5):
        sub_rng = np.random.default_rng([11, s])
        sub = profile.perturbed(sub_rng)
        folder = tmp_path / f"Fold{s + 1}_part1" / f"{s + 1:02d}"
        folder.mkdir(parents=True)
        for state, label in zip(STATES, (0, 5, 10)):
            series, _ = gen_ear_stream(sub, state, 0, rng=sub_rng, n_frames=1800)
            write_landmarks(ear_to_landmark_frames(series), folder / f"{label}.landmarks.csv")
            rows.append(VideoRecord(f"{s + 1:02d}", f"{s + 1:02d}_{label}", label,
                                    f"{folder.relative_to(tmp_path)}/{label}.landmarks.csv", s + 1))
    write_manifest(rows, tmp_path / "manifest.csv")
    check_protocol(read_manifest(tmp_path / "manifest.csv"))
    code = main(["crossval", "--manifest", str(tmp_path / "manifest.csv"), "--out", str(tmp_path / "cv"),
                 "--epochs", "1", "--seq-len", "8", "--stride", "2", "--batch-size", "16"])
    table = (tmp_path / "cv" / "report_table.txt").read_text() if code == 0 else ""
    ok = code == 0 and "average" in table and "fold 5" in table
    verdict("rldd-manifest", ok, f"exit={code}, 15 landmark videos over 5 folds")


def test_blink_retrieval_oracle(verdict):
    t0 = time.perf_counter()
    profile = SynthProfile()
    exact, off_bottom, streams = 0, 0, 1000
    for k in range(streams):
        series, truth = gen_ear_stream(profile, STATES[k % 3], 8, rng=np.random.default_rng([7, k]),
                                       noise_sigma=0.005)
        found = detect_blinks(series)
        exact += len(found) == len(truth)
        planted = np.array([b.bottom for b in truth])
        off_bottom += sum(np.min(np.abs(planted - b.bottom)) > 1 for b in found)
    elapsed = time.perf_counter() - t0
    ok = exact >= 0.99 * streams and off_bottom == 0 and elapsed < 30
    verdict("blink-oracle", ok, f"count exact {exact}/{streams}, bottoms off by >1: {off_bottom}, {elapsed:.1f}s")


def test_multi_blink_split(verdict):
    got2 = [(b.start, b.bottom, b.end) for b in retrieve_blinks(CandidateSegment(TWO_DIPS))]
    got3 = [(b.start, b.bottom, b.end) for b in retrieve_blinks(CandidateSegment(THREE_DIPS))]
    ok = got2 == TWO_DIPS_TRACE and got3 == THREE_DIPS_TRACE
    verdict("multi-blink-split", ok, f"2-dip -> {len(got2)} blinks, 3-dip -> {len(got3)} blinks, traces match={ok}")


def test_gradient_check(verdict):
    t0 = time.perf_counter()
    worst, where = 0.0, ""
    for seed in range(20):
        arch, params, B, mask, y = small_instance(seed, T=5, width=4, batch=8)
        report = gradcheck(arch, params, B, mask, y)
        if report.worst > worst:
            worst, where = report.worst, f"seed {seed} {report.worst_tensor}"
    elapsed = time.perf_counter() - t0
    verdict("gradcheck", worst < 1e-4 and elapsed < 60, f"worst rel err {worst:.2e} ({where}), {elapsed:.1f}s")


def test_single_sequence_overfit(verdict):
    X = np.random.default_rng(3).standard_normal((30, 4))
    seqs = make_sequences(X, 10.0)
    result = train(seqs, TrainConfig(learning_rate=1e-2, batch_size=1, epochs=500))
    trace = np.array(result.loss_trace)
    zero = np.flatnonzero(trace == 0.0)
    ok = len(zero) > 0 and result.steps <= 500
    first = int(zero[0]) + 1 if len(zero) else None
    verdict("overfit", ok, f"loss exactly 0 first at step {first} of {result.steps}, final {trace[-1]}")


@pytest.mark.slow
def test_synthetic_end_to_end(tmp_path, verdict):
    t0 = time.perf_counter()
    records = gen_dataset(SynthProfile(seed=0), 15, out_dir=tmp_path, minutes=10.0)
    records = read_manifest(tmp_path / "manifest.csv")
    cfg = TrainConfig(learning_rate=1e-3, epochs=20, seed=0)
    cv = crossvalidate(records, cfg, Architecture(T=cfg.window))
    elapsed = time.perf_counter() - t0
    cm = cv.average.confusion
    cross = (cm[0, 2] + cm[2, 0]) / cm.sum()
    ok = cv.average.VA >= 0.85 and cross <= 0.05 and elapsed < 600
    verdict("end-to-end", ok, f"VA {cv.average.VA:.3f}, alert<->drowsy {cross:.1%}, {elapsed:.0f}s")


def test_metric_oracle(verdict):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        n_videos = int(rng.integers(1, 12))
        video_outs = [rng.uniform(0, 10, int(rng.integers(1, 9))) for _ in range(n_videos)]
        labels = rng.choice([0, 5, 10], n_videos)
        outs = np.concatenate(video_outs)
        seq_labels = np.concatenate([[lab] * len(v) for v, lab in zip(video_outs, labels)])
        e, a = oracles.sequence_metrics(outs.tolist(), [lab // 5 for lab in seq_labels])
        vre, va = vre_va([VideoPrediction(str(i), v) for i, v in enumerate(video_outs)], labels)
        ve, vaa = oracles.video_metrics([v.tolist() for v in video_outs], [lab // 5 for lab in labels])
        worst = max(worst, abs(bsre(outs, seq_labels) - e), abs(bsa(outs, seq_labels) - a),
                    abs(vre - ve), abs(va - vaa))
    hand_bsre = bsre([5.0], [0])
    hand_vre, _ = vre_va([VideoPrediction("v", [5.5])], [10])
    ok = worst <= 1e-12 and abs(hand_bsre - 2.89) <= 1e-12 and abs(hand_vre - 1.21) <= 1e-12
    verdict("metric-oracle", ok, f"max diff {worst:.1e} on 100 instances, BSRE {hand_bsre:.12f}, VRE {hand_vre:.12f}")


def test_parameter_count(verdict):
    n = count_parameters(Architecture())
    verdict("parameter-count", abs(n - 50_000) <= 10_000, f"{n} trainable parameters")


def test_throughput(verdict):
    arch = Architecture()
    bundle = ModelBundle(arch, init_params(arch, np.random.default_rng(0)), init_state(arch))
    series, _ = gen_ear_stream(SynthProfile(seed=5), "drowsy", 0, n_frames=18_000)
    report = measure_throughput(series, bundle, repeats=3)
    fps = float(np.min(report.fps))
    verdict("throughput", fps >= 1000, f"{fps:.0f} frames/s (slowest of 3 runs, {report.frames} frames)")


def test_cli_determinism(tmp_path, verdict):
    assert main(["synth", "--out", str(tmp_path / "data"), "--subjects", "5", "--minutes", "1", "--seed", "2"]) == 0
    manifest = str(tmp_path / "data" / "manifest.csv")
    flags = ["--seed", "4", "--epochs", "2", "--seq-len", "10", "--learning-rate", "1e-3"]
    for run in ("a", "b"):
        assert main(["train", "--manifest", manifest, "--holdout-fold", "1",
                     "--out", str(tmp_path / run / "train")] + flags) == 0
        assert main(["eval", "--manifest", manifest, "--fold", "1", "--model",
                     str(tmp_path / run / "train" / "model.bin"), "--out", str(tmp_path / run / "eval")] + flags) == 0
    same_model = (tmp_path / "a/train/model.bin").read_bytes() == (tmp_path / "b/train/model.bin").read_bytes()
    same_report = (tmp_path / "a/eval/report.txt").read_bytes() == (tmp_path / "b/eval/report.txt").read_bytes()
    verdict("determinism", same_model and same_report,
            f"model.bin identical={same_model}, report.txt identical={same_report}")
