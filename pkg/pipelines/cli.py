"""Command-line entry point of the toolkit.

Every command reads an optional JSON or TOML configuration file, applies the
command-line flags on top of it, validates the result, and echoes the resolved
configuration to `config.json` in the output directory before doing any work.

Exit codes: 0 on success, 1 for configuration errors, 2 for data errors.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Literal

import pydantic
from pydantic import Field

from common import (
    ConfigurationError,
    ToolkitError,
    configure_logging,
    load_config_file,
)
from enhancers.enhancer import load_enhancer
from toolkit.audio import read_wav
from toolkit.banks import build_toy_banks, load_banks
from toolkit.metrics import TARGET_LUFS, evaluate_dataset, export_normalized
from toolkit.remixit import (
    AdaptConfig,
    PretrainConfig,
    adapt,
    evaluate_enhancer,
    load_checkpoint,
    load_labeled,
    load_unlabeled,
    mislabeled_segments,
    pretrain,
    save_checkpoint,
)
from toolkit.segmenter import (
    build_timeline,
    export_segment_audio,
    extract_listening_subset,
    extract_segments,
    load_pattern_manifest,
    load_transcripts,
    pattern_record,
    speaker_count_fractions,
    write_segment_manifest,
)
from toolkit.simulator import (
    SimulationConfig,
    SnrSamplerConfig,
    SpeakerCountPrior,
    load_manifest,
    simulate_dataset,
    summarize_manifest,
)

CONFIG_ECHO = "config.json"


def _require(path: Path | None, what: str):
    if path is not None and not path.exists():
        message = f"The {what} {path} does not exist."
        raise ConfigurationError(message)


class SegmentConfig(pydantic.BaseModel):
    transcripts: Path
    out: Path
    min_duration: float = Field(default=3.0, gt=0)
    listening_subset: bool = False
    listening_min_length_s: float = 4.0
    listening_max_length_s: float = 5.0
    listening_min_speech_s: float = 3.0
    listening_margin_s: float = 0.25
    patterns: bool = False
    audio_dir: Path | None = None
    channel: int = Field(default=0, ge=0)
    encoding: Literal["pcm16", "float32"] = "float32"

    def check_paths(self):
        _require(self.transcripts, "transcript directory")
        _require(self.audio_dir, "session audio directory")


class SimulateConfig(pydantic.BaseModel):
    banks: Path
    out: Path
    count: int = Field(default=0, ge=0)
    seed: int = 0
    prior: Literal["eval", "train"] = "eval"
    snr: SnrSamplerConfig = SnrSamplerConfig()
    max_length_s: float | None = Field(default=None, gt=0)
    patterns: Path | None = None
    homes: list[str] | None = None
    rooms: list[str] | None = None
    exclude_kinds: list[str] = ["bathroom"]
    encoding: Literal["pcm16", "float32"] = "float32"
    jobs: int = Field(default=1, ge=1)

    def check_paths(self):
        _require(self.banks, "bank index")
        _require(self.patterns, "pattern manifest")


class EvaluateConfig(pydantic.BaseModel):
    estimates: Path
    manifest: Path
    out: Path
    normalize: bool = False
    target_lufs: float = TARGET_LUFS
    input_scores: bool = False
    merge: Path | None = None
    jobs: int = Field(default=1, ge=1)

    def check_paths(self):
        _require(self.estimates, "estimates directory")
        _require(self.manifest, "manifest")
        _require(self.merge, "score file")


class AdaptCommandConfig(pydantic.BaseModel):
    unlabeled: Path
    dev_manifest: Path
    out: Path
    seed: int = 0
    teacher: Path | None = None
    enhancer: str = "enhancer.GainEnhancer"
    enhancer_options: dict[str, Any] = {}
    pretrain_manifest: Path | None = None
    pretrain: PretrainConfig = PretrainConfig()
    adapt: AdaptConfig = AdaptConfig()

    def check_paths(self):
        _require(self.unlabeled, "unlabeled audio directory")
        _require(self.dev_manifest, "dev manifest")
        _require(self.teacher, "teacher checkpoint")
        _require(self.pretrain_manifest, "pre-training manifest")


class ToyBanksConfig(pydantic.BaseModel):
    out: Path
    seed: int = 0
    noise: Literal["white", "pink"] = "white"

    def check_paths(self):
        pass


def resolve_config(cls, args: argparse.Namespace, overrides: dict[str, Any]):
    """Merge the configuration file with the flags, validate it, and echo it."""
    data = load_config_file(args.config)
    data.update({key: value for key, value in overrides.items() if value is not None})

    try:
        config = cls.model_validate(data)
    except pydantic.ValidationError as e:
        message = f"Invalid configuration: {e}"
        raise ConfigurationError(message) from e

    config.check_paths()

    config.out.mkdir(parents=True, exist_ok=True)
    (config.out / CONFIG_ECHO).write_text(config.model_dump_json(indent=2))
    return config


def cmd_segment(args: argparse.Namespace) -> int:
    config = resolve_config(
        SegmentConfig,
        args,
        {
            "transcripts": args.transcripts,
            "out": args.out,
            "min_duration": args.min_duration,
            "listening_subset": args.listening_subset,
            "patterns": args.patterns,
            "audio_dir": args.audio_dir,
        },
    )

    segments, listening, patterns, flagged = [], [], [], []
    for transcript in load_transcripts(config.transcripts):
        timeline = build_timeline(transcript)
        session_segments = extract_segments(timeline, config.min_duration)
        segments.extend(session_segments)

        if config.listening_subset:
            listening.extend(
                extract_listening_subset(
                    timeline,
                    config.listening_min_length_s,
                    config.listening_max_length_s,
                    config.listening_min_speech_s,
                    config.listening_margin_s,
                ),
            )

        if config.patterns:
            patterns.extend(pattern_record(timeline, s) for s in session_segments)

        if config.audio_dir is not None:
            recording = read_wav(
                config.audio_dir / f"{transcript.session_id}.wav",
                channel=config.channel,
            )
            paths = export_segment_audio(
                recording,
                session_segments,
                config.out / "audio",
                config.encoding,
            )
            flagged.extend(
                mislabeled_segments(session_segments, [read_wav(p) for p in paths]),
            )

    write_segment_manifest(config.out / "segments.jsonl", segments)
    if config.listening_subset:
        write_segment_manifest(config.out / "listening.jsonl", listening)
    if config.patterns:
        write_segment_manifest(config.out / "patterns.jsonl", patterns)
    if config.audio_dir is not None:
        write_segment_manifest(config.out / "vad_flagged.jsonl", flagged)

    summary = {"segments": len(segments)}
    for label, fraction in speaker_count_fractions(segments).items():
        summary[f"fraction_{label}"] = fraction
    if config.audio_dir is not None:
        summary["vad_flagged"] = len(flagged)

    print(json.dumps(summary))
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    config = resolve_config(
        SimulateConfig,
        args,
        {
            "banks": args.banks,
            "out": args.out,
            "count": args.count,
            "seed": args.seed,
            "prior": args.prior,
            "patterns": args.patterns,
            "jobs": args.jobs,
        },
    )

    banks = load_banks(
        config.banks,
        config.homes,
        config.rooms,
        tuple(config.exclude_kinds),
    )
    patterns = load_pattern_manifest(config.patterns) if config.patterns else None

    simulation = SimulationConfig(
        prior=SpeakerCountPrior.from_mode(config.prior),
        snr=config.snr,
        max_length_s=config.max_length_s,
        encoding=config.encoding,
    )
    rows = simulate_dataset(
        simulation,
        banks,
        config.count,
        config.out,
        config.seed,
        patterns,
        config.jobs,
    )

    print(summarize_manifest(rows).model_dump_json())
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = resolve_config(
        EvaluateConfig,
        args,
        {
            "estimates": args.estimates,
            "manifest": args.manifest,
            "out": args.out,
            "normalize": args.normalize,
            "input_scores": args.input_scores,
            "merge": args.merge,
            "jobs": args.jobs,
        },
    )

    report = evaluate_dataset(
        config.estimates,
        config.manifest,
        config.input_scores,
        config.jobs,
    )
    if config.merge is not None:
        report = report.merge(config.merge)

    report.to_csv(config.out / "scores.csv")
    report.to_jsonl(config.out / "scores.jsonl")

    summary = report.summary()
    summary.to_csv(config.out / "summary.csv", index=False, lineterminator="\n")
    print(summary.to_string(index=False))

    if config.normalize:
        export_normalized(
            config.estimates,
            config.manifest,
            config.out / "normalized",
            config.target_lufs,
            include_mixtures=config.input_scores,
        )

    if report.missing:
        logging.error("%d estimates are missing", len(report.missing))
        return 2

    return 0


def cmd_adapt(args: argparse.Namespace) -> int:
    overrides = {
        "unlabeled": args.unlabeled,
        "dev_manifest": args.dev_manifest,
        "out": args.out,
        "seed": args.seed,
        "teacher": args.teacher,
        "pretrain_manifest": args.pretrain_manifest,
    }
    if args.vad or args.epochs is not None:
        file_config = load_config_file(args.config).get("adapt", {})
        if args.vad:
            file_config["vad_filter"] = True
        if args.epochs is not None:
            file_config["epochs"] = args.epochs
        overrides["adapt"] = file_config

    config = resolve_config(AdaptCommandConfig, args, overrides)

    dev_rows = load_manifest(config.dev_manifest)
    dev = load_labeled(dev_rows, config.dev_manifest.parent)

    if config.teacher is not None:
        teacher, _ = load_checkpoint(config.teacher)
    else:
        teacher = load_enhancer(config.enhancer, None, config.enhancer_options)

    if config.pretrain_manifest is not None:
        examples = load_labeled(
            load_manifest(config.pretrain_manifest),
            config.pretrain_manifest.parent,
        )
        teacher, _ = pretrain(teacher, examples, config.pretrain, config.seed)
        save_checkpoint(
            config.out / "teacher.json",
            teacher,
            config.pretrain.epochs,
            evaluate_enhancer(teacher, dev),
        )

    result = adapt(
        config.adapt.model_copy(update={"seed": config.seed}),
        teacher,
        load_unlabeled(config.unlabeled),
        dev,
        log_path=config.out / "log.jsonl",
    )
    save_checkpoint(
        config.out / "student.json",
        teacher.with_params(result.params),
        result.epoch,
        result.dev_score,
    )

    print(
        json.dumps(
            {
                "teacher_dev_si_sdr": result.log[0].dev_si_sdr,
                "best_epoch": result.epoch,
                "best_dev_si_sdr": result.dev_score,
            },
        ),
    )
    return 0


def cmd_toy_banks(args: argparse.Namespace) -> int:
    config = resolve_config(
        ToyBanksConfig,
        args,
        {"out": args.out, "seed": args.seed, "noise": args.noise},
    )
    print(build_toy_banks(config.out / "banks", config.seed, config.noise))
    return 0


class ArgumentParser(argparse.ArgumentParser):
    """Argument parser reporting usage errors as configuration errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="udase",
        description="Segmentation, simulation, evaluation, and adaptation toolkit.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    shared = ArgumentParser(add_help=False)
    shared.add_argument("--config", type=Path, help="JSON or TOML configuration file.")
    shared.add_argument("--out", type=Path, help="Output directory.")
    shared.add_argument("--seed", type=int, help="Seed of every random choice.")
    shared.add_argument("--jobs", type=int, help="Number of parallel workers.")

    segment = commands.add_parser(
        "segment",
        parents=[shared],
        help="Segment transcripts by speaker count.",
    )
    segment.add_argument("--transcripts", type=Path, help="Transcript directory.")
    segment.add_argument("--min-duration", type=float, help="Minimum segment length.")
    segment.add_argument(
        "--listening-subset",
        action="store_true",
        default=None,
        help="Also select the listening-test subset.",
    )
    segment.add_argument(
        "--patterns",
        action="store_true",
        default=None,
        help="Also write the activity pattern of every segment.",
    )
    segment.add_argument(
        "--audio-dir",
        type=Path,
        help="Directory of session recordings named {session_id}.wav.",
    )
    segment.set_defaults(handler=cmd_segment)

    simulate = commands.add_parser(
        "simulate",
        parents=[shared],
        help="Simulate labeled noisy mixtures.",
    )
    simulate.add_argument("--banks", type=Path, help="Bank index file.")
    simulate.add_argument("--count", type=int, help="Number of mixtures.")
    simulate.add_argument(
        "--prior",
        choices=["eval", "train"],
        help="Speaker-count prior.",
    )
    simulate.add_argument("--patterns", type=Path, help="Activity pattern manifest.")
    simulate.set_defaults(handler=cmd_simulate)

    evaluate = commands.add_parser(
        "evaluate",
        parents=[shared],
        help="Score speech estimates.",
    )
    evaluate.add_argument("--estimates", type=Path, help="Estimates directory.")
    evaluate.add_argument("--manifest", type=Path, help="Simulation manifest.")
    evaluate.add_argument(
        "--normalize",
        action="store_true",
        default=None,
        help="Export loudness-normalized copies of the estimates.",
    )
    evaluate.add_argument(
        "--input-scores",
        action="store_true",
        default=None,
        help="Also score the unprocessed mixtures.",
    )
    evaluate.add_argument("--merge", type=Path, help="CSV file of external scores.")
    evaluate.set_defaults(handler=cmd_evaluate)

    adapt_parser = commands.add_parser(
        "adapt",
        parents=[shared],
        help="Adapt an enhancer to unlabeled data.",
    )
    adapt_parser.add_argument("--unlabeled", type=Path, help="Unlabeled audio.")
    adapt_parser.add_argument("--dev-manifest", type=Path, help="Labeled dev set.")
    adapt_parser.add_argument("--teacher", type=Path, help="Teacher checkpoint.")
    adapt_parser.add_argument(
        "--pretrain-manifest",
        type=Path,
        help="Labeled source-domain set used to pre-train the teacher.",
    )
    adapt_parser.add_argument("--epochs", type=int, help="Adaptation epochs.")
    adapt_parser.add_argument(
        "--vad",
        action="store_true",
        help="Keep only the unlabeled segments that contain speech.",
    )
    adapt_parser.set_defaults(handler=cmd_adapt)

    toy = commands.add_parser(
        "toy-banks",
        parents=[shared],
        help="Write a synthetic bank directory.",
    )
    toy.add_argument("--noise", choices=["white", "pink"], help="Noise color.")
    toy.set_defaults(handler=cmd_toy_banks)

    return parser


def main(argv: list[str] | None = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)

    try:
        return args.handler(args)
    except ConfigurationError as e:
        logging.error("%s", e)
        return 1
    except ToolkitError as e:
        logging.error("%s", e)
        return 2
    except ValueError as e:
        logging.error("Invalid input data: %s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
