"""Simulation of reverberant multi-speaker noisy mixtures.

Every example is generated from its own random stream derived from the master
seed and the example index, so examples can be generated in any order, on any
number of workers, and still reproduce the same dataset.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pydantic
from joblib import Parallel, delayed
from pydantic import Field, field_validator, model_validator

from common import DataError, read_jsonl, write_jsonl
from toolkit.audio import (
    Waveform,
    check_sample_rates,
    convolve,
    crop,
    energy,
    mix_add,
    pad_to,
    scale,
    write_wav,
)
from toolkit.banks import Banks, RirBank
from toolkit.segmenter import PatternRecord

PRIORS = {
    "eval": (0.60, 0.35, 0.05),
    "train": (0.50, 0.25, 0.25),
}

POOLED_SNR_STD_DB = 7.0

MANIFEST = "manifest.jsonl"


class SpeakerCountPrior(pydantic.BaseModel):
    """Probabilities of one, two, and three simultaneously active speakers."""

    probabilities: tuple[float, float, float] = PRIORS["eval"]

    @field_validator("probabilities")
    @classmethod
    def check_probabilities(cls, value):
        if any(p < 0 for p in value):
            message = "Speaker-count probabilities must be non-negative."
            raise ValueError(message)

        if abs(sum(value) - 1.0) > 1e-12:
            message = f"Speaker-count probabilities must sum to 1, got {sum(value)}."
            raise ValueError(message)

        return value

    @classmethod
    def from_mode(cls, mode: str) -> "SpeakerCountPrior":
        if mode not in PRIORS:
            message = f"Unknown prior {mode}, expected one of {sorted(PRIORS)}."
            raise ValueError(message)

        return cls(probabilities=PRIORS[mode])


class SnrSamplerConfig(pydantic.BaseModel):
    """Two-level Gaussian sampler of per-speaker SNRs.

    A global SNR is drawn around `mean_db` with `sigma1_db`, and every speaker SNR
    is drawn around the global one with `sigma2_db`.
    """

    mean_db: float = 5.0
    sigma1_db: float = Field(default=6.7082, ge=0)
    sigma2_db: float = Field(default=2.0, ge=0)

    @model_validator(mode="after")
    def check_pooled_std(self):
        pooled = math.hypot(self.sigma1_db, self.sigma2_db)
        if abs(pooled - POOLED_SNR_STD_DB) > 0.01:
            logging.warning(
                "Pooled per-speaker SNR std is %.4f dB instead of %.1f dB",
                pooled,
                POOLED_SNR_STD_DB,
            )
        return self


class RirSelection(pydantic.BaseModel):
    home: str
    room: str
    array: str
    positions: list[str]
    channel: str

    @field_validator("positions")
    @classmethod
    def check_positions(cls, value):
        if len(set(value)) != len(value):
            message = "Speaker positions must be pairwise distinct."
            raise ValueError(message)
        return value

    def paths(self, bank: RirBank) -> list[str]:
        positions = bank.homes[self.home][self.room].arrays[self.array]
        return [positions[position][self.channel] for position in self.positions]


class MixtureSpec(pydantic.BaseModel):
    """Every random choice made for one example.

    `utterance_refs` lists, for every speaker, the utterances concatenated to fill
    the speaker's activity. `activity` holds (onset, offset) intervals in seconds
    relative to the mixture start.
    """

    index: int = Field(ge=0)
    seed: int
    n: int = Field(ge=1, le=3)
    rir_selection: RirSelection
    speakers: list[str]
    utterance_refs: list[list[str]]
    noise_ref: str
    noise_offset: int = Field(ge=0)
    length: int = Field(gt=0)
    activity: list[list[tuple[float, float]]]
    global_snr_db: float
    per_speaker_snr_db: list[float]

    @model_validator(mode="after")
    def check_speakers(self):
        sizes = {
            "positions": len(self.rir_selection.positions),
            "speakers": len(self.speakers),
            "utterance_refs": len(self.utterance_refs),
            "activity": len(self.activity),
            "per_speaker_snr_db": len(self.per_speaker_snr_db),
        }
        for name, size in sizes.items():
            if size != self.n:
                message = f"Expected {self.n} entries in {name}, got {size}."
                raise ValueError(message)
        return self


@dataclass(frozen=True)
class MixtureExample:
    mixture: Waveform
    speech_refs: list[Waveform]
    speech_sum_ref: Waveform
    noise_ref: Waveform
    spec: MixtureSpec


class SimulationConfig(pydantic.BaseModel):
    prior: SpeakerCountPrior = SpeakerCountPrior()
    snr: SnrSamplerConfig = SnrSamplerConfig()
    max_length_s: float | None = Field(default=None, gt=0)
    encoding: str = "float32"


class ManifestRow(pydantic.BaseModel):
    """One simulated example. Paths are relative to the manifest directory."""

    file_id: str
    mixture: str
    speech: str
    noise: str
    speakers: list[str]
    n_speakers: int
    spec: MixtureSpec


class SimulationSummary(pydantic.BaseModel):
    count: int
    fractions: dict[int, float]
    snr_mean_db: float
    snr_std_db: float


def example_rng(master_seed: int, index: int) -> np.random.Generator:
    """Return the random stream of one example."""
    sequence = np.random.SeedSequence(master_seed, spawn_key=(index,))
    return np.random.default_rng(sequence)


def speaker_count_from_uniform(prior: SpeakerCountPrior, u: float) -> int:
    """Map a uniform draw in [0, 1) to a speaker count through the prior's CDF."""
    cumulative = np.cumsum(prior.probabilities)
    for count, threshold in enumerate(cumulative, start=1):
        if u < threshold:
            return count

    # Rounding in the cumulative sum can leave u just above the last threshold.
    return max(i + 1 for i, p in enumerate(prior.probabilities) if p > 0)


def sample_speaker_count(prior: SpeakerCountPrior, rng: np.random.Generator) -> int:
    return speaker_count_from_uniform(prior, rng.random())


def _choose(keys, rng: np.random.Generator) -> str:
    keys = sorted(keys)
    return keys[int(rng.integers(len(keys)))]


def sample_rirs(bank: RirBank, n: int, rng: np.random.Generator) -> RirSelection:
    """Sample a home, a room, an array, `n` distinct positions, and a channel.

    Every level is sampled uniformly given the previous choices.
    """
    home = _choose(bank.homes, rng)
    room = _choose(bank.homes[home], rng)
    arrays = bank.homes[home][room].arrays
    array = _choose(arrays, rng)

    positions = sorted(arrays[array])
    if n > len(positions):
        message = (
            f"Array {home}/{room}/{array} has {len(positions)} positions, "
            f"{n} requested."
        )
        raise ValueError(message)

    chosen = [positions[i] for i in rng.choice(len(positions), size=n, replace=False)]

    channels = set.intersection(*(set(arrays[array][p]) for p in chosen))
    if not channels:
        message = f"Positions {chosen} of {home}/{room}/{array} share no channel."
        raise DataError(message)

    return RirSelection(
        home=home,
        room=room,
        array=array,
        positions=chosen,
        channel=_choose(channels, rng),
    )


def sample_snrs(
    cfg: SnrSamplerConfig,
    n: int,
    rng: np.random.Generator,
) -> tuple[float, list[float]]:
    """Draw the global SNR of a mixture and the SNR of each of its speakers."""
    if n < 1:
        message = "At least one speaker is required."
        raise ValueError(message)

    x = float(rng.normal(cfg.mean_db, cfg.sigma1_db))
    y = rng.normal(x, cfg.sigma2_db, size=n)
    return x, [float(v) for v in y]


def measure_snr(speech: Waveform, noise: Waveform) -> float:
    """Return the SNR in dB of a speech signal against a noise signal.

    Silent speech returns -inf.
    """
    check_sample_rates(speech, noise)
    if len(speech) != len(noise):
        message = f"Length mismatch: {len(speech)} and {len(noise)} samples."
        raise ValueError(message)

    noise_energy = energy(noise)
    if noise_energy == 0:
        message = "The noise signal has zero energy."
        raise ValueError(message)

    speech_energy = energy(speech)
    if speech_energy == 0:
        return -math.inf

    return 10 * math.log10(speech_energy / noise_energy)


def sample_activity(
    n: int,
    length_s: float,
    rng: np.random.Generator,
    patterns: list[PatternRecord] | None = None,
) -> list[list[tuple[float, float]]]:
    """Return the activity intervals of `n` speakers inside a mixture.

    When patterns are available, one with exactly `n` speakers, all active within
    the mixture length, is replayed and cropped to the mixture. Otherwise every
    speaker gets a single interval containing the mixture mid-point, so exactly `n`
    speakers overlap there.
    """
    candidates = [
        p
        for p in patterns or []
        if p.max_speakers == n
        and len(p.activity) == n
        and all(intervals[0][0] < length_s for intervals in p.activity)
    ]

    if candidates:
        pattern = candidates[int(rng.integers(len(candidates)))]
        return [
            [(a, min(b, length_s)) for a, b in intervals if a < length_s]
            for intervals in pattern.activity
        ]

    mid = length_s / 2
    activity = []
    for _ in range(n):
        onset = float(rng.uniform(0, mid))
        offset = float(length_s - rng.uniform(0, length_s - mid))
        activity.append([(onset, offset)])

    return activity


def sample_spec(
    config: SimulationConfig,
    banks: Banks,
    index: int,
    master_seed: int,
    patterns: list[PatternRecord] | None = None,
) -> MixtureSpec:
    """Make every random choice of one example."""
    rng = example_rng(master_seed, index)

    n = sample_speaker_count(config.prior, rng)
    rir_selection = sample_rirs(banks.rirs, n, rng)
    global_snr, speaker_snrs = sample_snrs(config.snr, n, rng)

    noise_ref = banks.noises[int(rng.integers(len(banks.noises)))]
    noise_length = len(banks.audio(noise_ref))
    length, offset = noise_length, 0
    if config.max_length_s is not None:
        max_length = int(config.max_length_s * banks.sample_rate)
        if noise_length > max_length:
            length = max_length
            offset = int(rng.integers(noise_length - max_length + 1))

    if len(banks.speakers) < n:
        message = f"The speech bank has {len(banks.speakers)} speakers, {n} needed."
        raise DataError(message)

    speakers = [banks.speakers[i] for i in rng.choice(len(banks.speakers), n, False)]
    activity = sample_activity(n, length / banks.sample_rate, rng, patterns)

    utterance_refs = []
    for speaker, intervals in zip(speakers, activity, strict=True):
        needed = sum(b - a for a, b in intervals) * banks.sample_rate
        available = banks.utterances[speaker]

        refs, total = [], 0
        order = rng.permutation(len(available))
        while total < needed:
            path = available[order[len(refs) % len(order)]]
            refs.append(path)
            total += len(banks.audio(path))
        utterance_refs.append(refs)

    return MixtureSpec(
        index=index,
        seed=master_seed,
        n=n,
        rir_selection=rir_selection,
        speakers=speakers,
        utterance_refs=utterance_refs,
        noise_ref=noise_ref,
        noise_offset=offset,
        length=length,
        activity=activity,
        global_snr_db=global_snr,
        per_speaker_snr_db=speaker_snrs,
    )


def place(
    utterances: list[Waveform],
    intervals: list[tuple[float, float]],
    length: int,
) -> Waveform:
    """Lay the concatenated utterances over the activity intervals of a speaker.

    Consecutive intervals consume consecutive parts of the concatenated speech.
    """
    rate = check_sample_rates(*utterances)
    dry = np.concatenate([u.samples for u in utterances]) if utterances else np.zeros(0)

    output = np.zeros(length)
    cursor = 0
    for onset, offset in intervals:
        start = min(round(onset * rate), length)
        end = min(round(offset * rate), length)
        chunk = dry[cursor : cursor + end - start]
        output[start : start + len(chunk)] = chunk
        cursor += end - start

    return Waveform(output, rate)


def assemble_mixture(spec: MixtureSpec, banks: Banks) -> MixtureExample:
    """Render a mixture with every speaker calibrated to its sampled SNR."""
    noise = crop(banks.audio(spec.noise_ref), spec.noise_offset, spec.length)
    noise_energy = energy(noise)
    if noise_energy == 0:
        message = f"Noise {spec.noise_ref} is silent in the selected segment."
        raise DataError(message)

    rirs = [banks.audio(path) for path in spec.rir_selection.paths(banks.rirs)]

    speech_refs = []
    for i in range(spec.n):
        utterances = [banks.audio(path) for path in spec.utterance_refs[i]]
        placed = place(utterances, spec.activity[i], spec.length)
        reverberant = pad_to(convolve(placed, rirs[i]), spec.length)

        speech_energy = energy(reverberant)
        if speech_energy == 0:
            message = f"Speaker {spec.speakers[i]} of example {spec.index} is silent."
            raise DataError(message)

        ratio = 10 ** (spec.per_speaker_snr_db[i] / 10)
        gain = math.sqrt(noise_energy / speech_energy * ratio)
        speech_refs.append(scale(reverberant, gain))

    speech_sum = mix_add(speech_refs)
    return MixtureExample(
        mixture=mix_add([speech_sum, noise]),
        speech_refs=speech_refs,
        speech_sum_ref=speech_sum,
        noise_ref=noise,
        spec=spec,
    )


def write_example(
    example: MixtureExample,
    out_dir: str | Path,
    encoding: str = "float32",
) -> ManifestRow:
    """Write the audio of an example and return its manifest row."""
    out_dir = Path(out_dir)
    file_id = f"{example.spec.index:06d}"

    paths = {
        "mixture": f"audio/{file_id}_mix.wav",
        "speech": f"audio/{file_id}_speech.wav",
        "noise": f"audio/{file_id}_noise.wav",
    }
    write_wav(out_dir / paths["mixture"], example.mixture, encoding)
    write_wav(out_dir / paths["speech"], example.speech_sum_ref, encoding)
    write_wav(out_dir / paths["noise"], example.noise_ref, encoding)

    speakers = []
    for i, reference in enumerate(example.speech_refs, start=1):
        path = f"audio/{file_id}_s{i}.wav"
        write_wav(out_dir / path, reference, encoding)
        speakers.append(path)

    return ManifestRow(
        file_id=file_id,
        speakers=speakers,
        n_speakers=example.spec.n,
        spec=example.spec,
        **paths,
    )


def _simulate_one(config, banks, index, out_dir, master_seed, patterns) -> ManifestRow:
    spec = sample_spec(config, banks, index, master_seed, patterns)
    return write_example(assemble_mixture(spec, banks), out_dir, config.encoding)


def simulate_examples(
    config: SimulationConfig,
    banks: Banks,
    indices: list[int],
    out_dir: str | Path,
    master_seed: int,
    patterns: list[PatternRecord] | None = None,
    jobs: int = 1,
) -> list[ManifestRow]:
    """Generate and write the examples with the given indices, in index order."""
    if jobs == 1:
        return [
            _simulate_one(config, banks, index, out_dir, master_seed, patterns)
            for index in indices
        ]

    return Parallel(n_jobs=jobs)(
        delayed(_simulate_one)(config, banks, index, out_dir, master_seed, patterns)
        for index in indices
    )


def write_manifest(path: str | Path, rows: list[ManifestRow]) -> int:
    return write_jsonl(path, (row.model_dump_json() for row in rows))


def load_manifest(path: str | Path) -> list[ManifestRow]:
    try:
        return [ManifestRow.model_validate(record) for record in read_jsonl(path)]
    except pydantic.ValidationError as e:
        message = f"Manifest {path} does not contain simulated examples."
        raise DataError(message) from e


def simulate_dataset(
    config: SimulationConfig,
    banks: Banks,
    count: int,
    out_dir: str | Path,
    master_seed: int,
    patterns: list[PatternRecord] | None = None,
    jobs: int = 1,
) -> list[ManifestRow]:
    """Generate `count` examples and write them with their manifest to `out_dir`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = simulate_examples(
        config,
        banks,
        list(range(count)),
        out_dir,
        master_seed,
        patterns,
        jobs,
    )
    write_manifest(out_dir / MANIFEST, rows)

    logging.info("Simulated %d examples in %s", len(rows), out_dir)
    return rows


def summarize_manifest(rows: list[ManifestRow]) -> SimulationSummary:
    """Return the speaker-count fractions and the pooled per-speaker SNR statistics."""
    counts = [row.n_speakers for row in rows]
    snrs = [snr for row in rows for snr in row.spec.per_speaker_snr_db]

    return SimulationSummary(
        count=len(rows),
        fractions={n: counts.count(n) / len(rows) if rows else 0.0 for n in (1, 2, 3)},
        snr_mean_db=float(np.mean(snrs)) if snrs else math.nan,
        snr_std_db=float(np.std(snrs)) if snrs else math.nan,
    )
