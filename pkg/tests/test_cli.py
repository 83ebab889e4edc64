import json
import shutil
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

from cli import main
from common import read_jsonl
from toolkit.audio import Waveform, read_wav, write_wav
from toolkit.banks import load_banks, synthetic_speech
from toolkit.remixit import VadConfig, load_unlabeled, vad_filter

GOLDEN = Path(__file__).parent / "data"


@pytest.fixture
def transcripts(tmp_path, write_transcript):
    directory = tmp_path / "transcripts"
    write_transcript(directory / "S01.json", "S01", 12.0, [("A", 0, 5), ("B", 4, 9)])
    return directory


@pytest.fixture
def references_as_estimates(tmp_path, simulated):
    directory, rows = simulated
    estimates = tmp_path / "estimates"
    estimates.mkdir()
    for row in rows:
        shutil.copy(directory / row.speech, estimates / Path(row.mixture).name)
    return estimates


def test_segment_matches_the_golden_manifest(tmp_path, transcripts):
    out = tmp_path / "out"
    assert main(["segment", "--transcripts", str(transcripts), "--out", str(out)]) == 0

    assert read_jsonl(out / "segments.jsonl") == read_jsonl(GOLDEN / "segments.jsonl")
    assert (out / "config.json").exists()


def test_segment_writes_listening_and_pattern_manifests(tmp_path, transcripts):
    out = tmp_path / "out"
    code = main(
        [
            "segment",
            "--transcripts",
            str(transcripts),
            "--out",
            str(out),
            "--listening-subset",
            "--patterns",
        ],
    )

    assert code == 0
    patterns = read_jsonl(out / "patterns.jsonl")
    assert len(patterns) == 3
    assert patterns[0]["activity"] == [[[0.0, 4.0]]]
    assert (out / "listening.jsonl").exists()


def test_segment_exports_audio(tmp_path, transcripts):
    audio = tmp_path / "sessions"
    write_wav(audio / "S01.wav", Waveform(np.full(12 * 16000, 0.1)))

    out = tmp_path / "out"
    code = main(
        [
            "segment",
            "--transcripts",
            str(transcripts),
            "--out",
            str(out),
            "--audio-dir",
            str(audio),
        ],
    )

    assert code == 0
    assert len(read_wav(out / "audio" / "S01_0_4000.wav")) == 4 * 16000


def test_segment_flags_audio_that_disagrees_with_its_label(tmp_path, transcripts):
    rng = np.random.default_rng(7)
    speech = synthetic_speech(4.0, 150.0, rng)
    noise = 0.1 * rng.standard_normal(5 * 16000)
    recording = np.concatenate([speech, noise, speech[: 3 * 16000]])

    # Speech in [0, 4] and [9, 12], stationary noise in [4, 9].
    audio = tmp_path / "sessions"
    write_wav(audio / "S01.wav", Waveform(recording))

    out = tmp_path / "out"
    code = main(
        [
            "segment",
            "--transcripts",
            str(transcripts),
            "--out",
            str(out),
            "--audio-dir",
            str(audio),
        ],
    )

    assert code == 0
    flagged = read_jsonl(out / "vad_flagged.jsonl")
    assert [(row["start_s"], row["max_speakers"]) for row in flagged] == [
        (5.0, 1),
        (9.0, 0),
    ]


def test_segment_an_empty_directory(tmp_path):
    (tmp_path / "transcripts").mkdir()
    out = tmp_path / "out"

    transcripts = tmp_path / "transcripts"
    code = main(["segment", "--transcripts", str(transcripts), "--out", str(out)])
    assert code == 0
    assert (out / "segments.jsonl").read_text() == ""


def test_segment_reports_malformed_transcripts(tmp_path, transcripts, caplog):
    (transcripts / "S02.json").write_text("{not json")

    code = main(["segment", "--transcripts", str(transcripts), "--out", str(tmp_path)])
    assert code == 2
    assert "S02.json" in caplog.text


def test_segment_reports_missing_directories(tmp_path):
    missing = tmp_path / "missing"
    code = main(["segment", "--transcripts", str(missing), "--out", str(tmp_path)])
    assert code == 1


def test_invalid_settings_are_configuration_errors(tmp_path, transcripts):
    code = main(
        [
            "segment",
            "--transcripts",
            str(transcripts),
            "--out",
            str(tmp_path),
            "--min-duration",
            "-1",
        ],
    )
    assert code == 1


def test_unknown_flags_exit_with_a_configuration_error():
    with pytest.raises(SystemExit) as e:
        main(["segment", "--unknown"])

    assert e.value.code == 1


def test_configuration_files_are_merged_with_flags(tmp_path, transcripts):
    config = tmp_path / "config.toml"
    config.write_text(f'transcripts = "{transcripts.as_posix()}"\nmin_duration = 3.5\n')

    out = tmp_path / "out"
    assert main(["segment", "--config", str(config), "--out", str(out)]) == 0

    segments = read_jsonl(out / "segments.jsonl")
    assert [s["max_speakers"] for s in segments] == [1, 1]
    assert json.loads((out / "config.json").read_text())["min_duration"] == 3.5


def test_missing_configuration_files(tmp_path):
    code = main(["segment", "--config", str(tmp_path / "missing.json")])
    assert code == 1


def test_echoed_configuration_reproduces_the_run(tmp_path, transcripts):
    first = tmp_path / "first"
    main(["segment", "--transcripts", str(transcripts), "--out", str(first)])

    second = tmp_path / "second"
    config = first / "config.json"
    code = main(["segment", "--config", str(config), "--out", str(second)])

    assert code == 0
    assert (first / "segments.jsonl").read_bytes() == (
        second / "segments.jsonl"
    ).read_bytes()


def test_simulate_without_examples(tmp_path, toy_banks_index):
    out = tmp_path / "out"
    code = main(["simulate", "--banks", str(toy_banks_index), "--out", str(out)])

    assert code == 0
    assert (out / "manifest.jsonl").read_text() == ""


def test_simulate_is_reproducible(tmp_path, toy_banks_index):
    for name in ("a", "b"):
        code = main(
            [
                "simulate",
                "--banks",
                str(toy_banks_index),
                "--out",
                str(tmp_path / name),
                "--count",
                "3",
                "--seed",
                "7",
                "--jobs",
                "2",
            ],
        )
        assert code == 0

    for path in sorted((tmp_path / "a").rglob("*")):
        if path.is_file() and path.name != "config.json":
            twin = tmp_path / "b" / path.relative_to(tmp_path / "a")
            assert path.read_bytes() == twin.read_bytes()


def test_simulate_reports_missing_bank_assets(tmp_path, toy_banks_index):
    banks = tmp_path / "banks"
    shutil.copytree(toy_banks_index.parent, banks)
    next(iter(sorted((banks / "speech").glob("*.wav")))).unlink()

    code = main(
        [
            "simulate",
            "--banks",
            str(banks / "index.json"),
            "--out",
            str(tmp_path / "out"),
            "--count",
            "1",
        ],
    )
    assert code == 2


def test_evaluate_references(tmp_path, simulated, references_as_estimates):
    directory, _ = simulated
    out = tmp_path / "out"
    code = main(
        [
            "evaluate",
            "--estimates",
            str(references_as_estimates),
            "--manifest",
            str(directory / "manifest.jsonl"),
            "--out",
            str(out),
            "--normalize",
        ],
    )

    assert code == 0
    summary = pd.read_csv(out / "summary.csv")
    overall = summary[(summary["metric"] == "si_sdr") & (summary["subset"] == "all")]
    assert overall["mean"].item() == 100.0
    assert len(list((out / "normalized").glob("*.wav"))) == 8


def test_evaluate_fails_on_missing_estimates(
    tmp_path,
    simulated,
    references_as_estimates,
    caplog,
):
    directory, rows = simulated
    (references_as_estimates / Path(rows[-1].mixture).name).unlink()

    code = main(
        [
            "evaluate",
            "--estimates",
            str(references_as_estimates),
            "--manifest",
            str(directory / "manifest.jsonl"),
            "--out",
            str(tmp_path / "out"),
        ],
    )
    assert code == 2
    assert rows[-1].file_id in caplog.text
    assert len(pd.read_csv(tmp_path / "out" / "scores.csv")) == len(rows) - 1


def test_adapt_without_epochs_keeps_the_initial_enhancer(tmp_path, simulated):
    directory, _ = simulated
    out = tmp_path / "out"
    code = main(
        [
            "adapt",
            "--unlabeled",
            str(directory / "audio"),
            "--dev-manifest",
            str(directory / "manifest.jsonl"),
            "--out",
            str(out),
            "--epochs",
            "0",
            "--vad",
        ],
    )

    assert code == 0
    student = json.loads((out / "student.json").read_text())
    assert student["enhancer_kind"] == "enhancer.GainEnhancer"
    assert student["theta"] == [0.0] * 32
    assert student["epoch"] == 0

    log = read_jsonl(out / "log.jsonl")
    unlabeled = load_unlabeled(directory / "audio")
    kept = vad_filter(unlabeled, config=VadConfig())
    assert len(log) == 1
    assert log[0]["filtered_segments"] == len(unlabeled) - len(kept)


def test_adapt_reruns_are_byte_identical(tmp_path, simulated):
    directory, _ = simulated

    def run(out):
        return main(
            [
                "adapt",
                "--unlabeled",
                str(directory / "audio"),
                "--dev-manifest",
                str(directory / "manifest.jsonl"),
                "--pretrain-manifest",
                str(directory / "manifest.jsonl"),
                "--out",
                str(out),
                "--epochs",
                "2",
                "--seed",
                "5",
            ],
        )

    assert run(tmp_path / "a") == 0
    assert run(tmp_path / "b") == 0
    for name in ["student.json", "teacher.json", "log.jsonl"]:
        first = (tmp_path / "a" / name).read_bytes()
        assert first == (tmp_path / "b" / name).read_bytes()


def adapt_arguments(unlabeled, directory, out):
    return [
        "adapt",
        "--unlabeled",
        str(unlabeled),
        "--dev-manifest",
        str(directory / "manifest.jsonl"),
        "--out",
        str(out),
        "--epochs",
        "1",
    ]


def test_adapt_rejects_segments_shorter_than_a_frame(tmp_path, simulated, caplog):
    directory, rows = simulated
    unlabeled = tmp_path / "unlabeled"
    unlabeled.mkdir()
    shutil.copy(directory / rows[0].mixture, unlabeled / "a.wav")
    write_wav(unlabeled / "b.wav", Waveform(np.full(100, 0.1)))

    code = main(adapt_arguments(unlabeled, directory, tmp_path / "out"))
    assert code == 2
    assert "at least 512 samples" in caplog.text


def test_value_errors_from_the_data_exit_with_a_data_error(tmp_path, simulated):
    directory, _ = simulated

    with patch("cli.adapt", side_effect=ValueError("Length mismatch")):
        code = main(adapt_arguments(directory / "audio", directory, tmp_path / "out"))

    assert code == 2


def test_toy_banks(tmp_path):
    assert main(["toy-banks", "--out", str(tmp_path), "--noise", "pink"]) == 0

    banks = load_banks(tmp_path / "banks" / "index.json")
    assert all(path.startswith("noise/pink_") for path in banks.noises)
