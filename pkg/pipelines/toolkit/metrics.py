"""Speech enhancement metrics, loudness normalization, and evaluation reports."""

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import pyloudnorm as pyln
from joblib import Parallel, delayed

from common import DataError, write_jsonl
from toolkit.audio import Waveform, read_wav, write_wav
from toolkit.simulator import ManifestRow, load_manifest

CAP_DB = 100.0

# Error energies below this fraction of the target energy count as a perfect estimate.
CAP_RATIO = 1e-12

BLOCK_S = 0.4
OVERLAP = 0.75
ABSOLUTE_GATE_LUFS = -70.0
RELATIVE_GATE_LU = -10.0

TARGET_LUFS = -30.0

REPORT_COLUMNS = ["file_id", "metric", "value", "n_speakers"]


@dataclass(frozen=True)
class SiSdrResult:
    value_db: float
    capped: bool = False


@dataclass(frozen=True)
class LoudnessMeasurement:
    lufs: float
    gated_blocks: int


def _projection(estimate: np.ndarray, reference: np.ndarray):
    reference_energy = float(np.dot(reference, reference))
    if reference_energy == 0:
        message = "The reference signal has zero energy."
        raise ValueError(message)

    alpha = float(np.dot(estimate, reference)) / reference_energy
    target = alpha * reference
    return target, estimate - target


def _check_pair(estimate: Waveform, reference: Waveform):
    if len(estimate) != len(reference):
        message = f"Length mismatch: {len(estimate)} and {len(reference)} samples."
        raise ValueError(message)


def si_sdr(
    estimate: Waveform,
    reference: Waveform,
    cap_db: float = CAP_DB,
) -> SiSdrResult:
    """Return the scale-invariant signal-to-distortion ratio of an estimate.

    Values are clipped to [-cap_db, cap_db]. Estimates whose error energy
    underflows relative to the projected target are reported as capped.
    """
    _check_pair(estimate, reference)
    target, error = _projection(estimate.samples, reference.samples)

    target_energy = float(np.dot(target, target))
    error_energy = float(np.dot(error, error))

    if error_energy < CAP_RATIO * target_energy:
        return SiSdrResult(cap_db, capped=True)

    if target_energy == 0:
        return SiSdrResult(-cap_db)

    value = 10 * math.log10(target_energy / error_energy)
    return SiSdrResult(float(np.clip(value, -cap_db, cap_db)))


def si_sdr_gradient(
    estimate: np.ndarray,
    reference: np.ndarray,
    cap_db: float = CAP_DB,
) -> tuple[float, np.ndarray]:
    """Return the clipped SI-SDR of an estimate and its gradient with respect to it.

    The gradient is zero wherever the value is clipped.
    """
    target, error = _projection(estimate, reference)
    target_energy = float(np.dot(target, target))
    error_energy = float(np.dot(error, error))

    if error_energy < CAP_RATIO * target_energy:
        return cap_db, np.zeros_like(estimate)

    if target_energy == 0:
        return -cap_db, np.zeros_like(estimate)

    value = 10 * math.log10(target_energy / error_energy)
    if not -cap_db < value < cap_db:
        return float(np.clip(value, -cap_db, cap_db)), np.zeros_like(estimate)

    gradient = 2 * target / target_energy - 2 * error / error_energy
    return value, (10 / math.log(10)) * gradient


def neg_si_sdr_loss(
    speech_est: Waveform,
    noise_est: Waveform,
    speech_ref: Waveform,
    noise_ref: Waveform,
) -> float:
    """Return minus the mean SI-SDR of the speech and noise estimates."""
    speech = si_sdr(speech_est, speech_ref).value_db
    noise = si_sdr(noise_est, noise_ref).value_db
    return -0.5 * (speech + noise)


def _gated_blocks(meter: pyln.Meter, samples: np.ndarray, lufs: float) -> int:
    """Count the blocks that pass both gates of the meter's measurement."""
    filtered = samples
    for stage in meter._filters.values():
        filtered = stage.apply_filter(filtered)

    rate, block = meter.rate, meter.block_size
    step = 1.0 - OVERLAP
    count = int(np.round((len(filtered) / rate - block) / (block * step))) + 1
    blocks = np.arange(count)
    lower = (block * (blocks * step) * rate).astype(int)
    upper = np.minimum((block * (blocks * step + 1) * rate).astype(int), len(filtered))

    squares = np.concatenate([[0.0], np.cumsum(filtered**2)])
    z = (squares[upper] - squares[lower]) / (block * rate)
    with np.errstate(divide="ignore"):
        levels = -0.691 + 10 * np.log10(z)

    gated = levels >= ABSOLUTE_GATE_LUFS
    relative = -0.691 + 10 * np.log10(np.mean(z[gated])) + RELATIVE_GATE_LU
    gated &= levels > relative
    return int(np.count_nonzero(gated))


def integrated_loudness(w: Waveform) -> LoudnessMeasurement:
    """Measure the gated integrated loudness of a mono signal in LUFS.

    Silence, or any signal whose blocks all fall below the absolute gate, returns
    -inf with zero gated blocks.
    """
    rate = w.sample_rate
    if len(w) < BLOCK_S * rate:
        message = f"Loudness needs at least {BLOCK_S * 1000:.0f} ms of audio."
        raise ValueError(message)

    meter = pyln.Meter(rate, block_size=BLOCK_S)
    lufs = float(meter.integrated_loudness(w.samples))
    if not math.isfinite(lufs):
        return LoudnessMeasurement(-math.inf, 0)

    return LoudnessMeasurement(lufs, _gated_blocks(meter, w.samples, lufs))


def normalize_loudness(
    w: Waveform,
    target_lufs: float = TARGET_LUFS,
    tolerance: float = 0.1,
    max_iterations: int = 3,
) -> Waveform:
    """Scale a signal so its integrated loudness matches the target.

    The loudness is re-measured after every pass, at most `max_iterations` times.
    """
    measured = integrated_loudness(w).lufs
    if math.isinf(measured):
        message = "Cannot normalize the loudness of a silent signal."
        raise ValueError(message)

    output = w
    for _ in range(max_iterations):
        with warnings.catch_warnings():
            # Peaks above full scale are kept.
            warnings.simplefilter("ignore", UserWarning)
            samples = pyln.normalize.loudness(output.samples, measured, target_lufs)

        output = Waveform(samples, w.sample_rate)
        measured = integrated_loudness(output).lufs
        if abs(measured - target_lufs) <= tolerance:
            return output

    logging.warning(
        "Loudness normalization stopped at %.3f LUFS (target %.1f LUFS)",
        measured,
        target_lufs,
    )
    return output


@dataclass
class ScoreReport:
    """Per-file scores with aggregate means per metric and speaker-count subset.

    Metric names are free-form so externally computed scores, such as DNSMOS
    SIG, BAK, and OVRL, can be merged into the same report.
    """

    rows: pd.DataFrame = field(
        default_factory=lambda: pd.DataFrame(columns=REPORT_COLUMNS),
    )
    missing: list[str] = field(default_factory=list)

    @classmethod
    def from_records(cls, records: list[dict], missing=None) -> "ScoreReport":
        rows = pd.DataFrame.from_records(records, columns=REPORT_COLUMNS)
        rows["value"] = rows["value"].astype(float)
        return cls(rows=rows, missing=list(missing or []))

    def aggregate(self) -> dict[str, float]:
        """Return the arithmetic mean of every metric."""
        means = self.rows.groupby("metric", sort=True)["value"].mean()
        return {metric: float(value) for metric, value in means.items()}

    def summary(self) -> pd.DataFrame:
        """Return the mean of every metric overall and per speaker-count subset."""
        overall = self.rows.groupby("metric")["value"].agg(["mean", "count"])
        overall["subset"] = "all"

        subsets = self.rows.dropna(subset=["n_speakers"])
        per_subset = subsets.groupby(["metric", "n_speakers"])["value"].agg(
            ["mean", "count"],
        )
        per_subset = per_subset.reset_index(level="n_speakers")
        per_subset["subset"] = per_subset.pop("n_speakers").astype(int).astype(str)

        return (
            pd.concat([overall, per_subset])
            .reset_index()
            .sort_values(["metric", "subset"], kind="stable")
            .reset_index(drop=True)[["metric", "subset", "mean", "count"]]
        )

    def merge(self, path: str | Path) -> "ScoreReport":
        """Return a report extended with the metric rows of an external CSV file."""
        try:
            external = pd.read_csv(path)
        except (OSError, pd.errors.ParserError) as e:
            message = f"Score file {path} could not be read."
            raise DataError(message) from e

        if not {"file_id", "metric", "value"} <= set(external.columns):
            message = f"Score file {path} needs file_id, metric, and value columns."
            raise DataError(message)

        external["file_id"] = external["file_id"].astype(str)
        speakers = dict(zip(self.rows["file_id"], self.rows["n_speakers"], strict=True))
        external["n_speakers"] = external["file_id"].map(speakers)

        rows = pd.concat([self.rows, external[REPORT_COLUMNS]], ignore_index=True)
        return ScoreReport(rows=rows, missing=self.missing)

    def to_csv(self, path: str | Path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self.rows.to_csv(path, index=False, lineterminator="\n")

    def to_jsonl(self, path: str | Path):
        write_jsonl(
            path,
            (row.to_json() for _, row in self.rows.iterrows()),
        )


def estimate_path(estimates_dir: str | Path, row: ManifestRow) -> Path:
    """Estimates are named after the mixture they were computed from."""
    return Path(estimates_dir) / Path(row.mixture).name


def _score_row(row: ManifestRow, estimates_dir: Path, root: Path, input_scores: bool):
    path = estimate_path(estimates_dir, row)
    if not path.exists():
        return row.file_id, []

    estimate = read_wav(path)
    reference = read_wav(root / row.speech)
    if len(estimate) != len(reference):
        message = (
            f"Estimate {path} has {len(estimate)} samples, "
            f"the reference has {len(reference)}."
        )
        raise DataError(message)

    records = [
        {
            "file_id": row.file_id,
            "metric": "si_sdr",
            "value": si_sdr(estimate, reference).value_db,
            "n_speakers": row.n_speakers,
        },
    ]

    if input_scores:
        mixture = read_wav(root / row.mixture)
        records.append(
            {
                "file_id": row.file_id,
                "metric": "input_si_sdr",
                "value": si_sdr(mixture, reference).value_db,
                "n_speakers": row.n_speakers,
            },
        )

    return row.file_id, records


def evaluate_dataset(
    estimates_dir: str | Path,
    manifest: str | Path,
    input_scores: bool = False,
    jobs: int = 1,
) -> ScoreReport:
    """Score the speech estimates of a simulated dataset against the speech sum.

    Manifest rows without an estimate are reported in `missing` and skipped.
    """
    estimates_dir = Path(estimates_dir)
    manifest = Path(manifest)
    rows = load_manifest(manifest)

    results = Parallel(n_jobs=jobs)(
        delayed(_score_row)(row, estimates_dir, manifest.parent, input_scores)
        for row in rows
    )

    missing = [file_id for file_id, records in results if not records]
    for file_id in missing:
        logging.error("Missing estimate for %s", file_id)

    report = ScoreReport.from_records(
        [record for _, records in results for record in records],
        missing,
    )
    logging.info("Scored %d of %d files", len(rows) - len(missing), len(rows))
    return report


def _export(source: Path, destination: Path, target_lufs: float) -> bool:
    w = read_wav(source)
    if len(w) < BLOCK_S * w.sample_rate or math.isinf(integrated_loudness(w).lufs):
        logging.warning("Skipping %s: too short or silent", source)
        return False

    write_wav(destination, normalize_loudness(w, target_lufs))
    return True


def export_normalized(
    estimates_dir: str | Path,
    manifest: str | Path,
    out_dir: str | Path,
    target_lufs: float = TARGET_LUFS,
    include_mixtures: bool = False,
) -> list[Path]:
    """Write loudness-normalized copies of the estimates for external scoring.

    Mixtures, when included, are written to a `mixtures` subdirectory.
    """
    estimates_dir, manifest = Path(estimates_dir), Path(manifest)
    out_dir = Path(out_dir)

    written = []
    for row in load_manifest(manifest):
        source = estimate_path(estimates_dir, row)
        if source.exists() and _export(source, out_dir / source.name, target_lufs):
            written.append(out_dir / source.name)

        if include_mixtures:
            destination = out_dir / "mixtures" / Path(row.mixture).name
            if _export(manifest.parent / row.mixture, destination, target_lufs):
                written.append(destination)

    logging.info("Exported %d loudness-normalized files to %s", len(written), out_dir)
    return written
