"""Asset banks used by the simulator: clean speech, noise, and room impulse responses.

A bank is a directory with an `index.json` file and the WAV files it references.
Paths in the index are relative to the index file.
"""

import logging
from pathlib import Path

import numpy as np
import pydantic
from pydantic import Field, model_validator

from common import SAMPLE_RATE, DataError
from toolkit.audio import Waveform, read_wav, write_wav

MIN_POSITIONS = 3


class SpeechEntry(pydantic.BaseModel):
    speaker: str = Field(min_length=1)
    path: str


class NoiseEntry(pydantic.BaseModel):
    path: str


class RirRoom(pydantic.BaseModel):
    """Impulse responses recorded in one room.

    `arrays` maps an array configuration to its speaker positions, and every
    position maps a channel to the WAV file of its impulse response.
    """

    kind: str = "room"
    arrays: dict[str, dict[str, dict[str, str]]]

    @model_validator(mode="after")
    def check_arrays(self):
        if not self.arrays:
            message = "Every room needs at least one array configuration."
            raise ValueError(message)

        for array, positions in self.arrays.items():
            # Three speakers are sampled without replacement from these positions.
            if len(positions) < MIN_POSITIONS:
                message = (
                    f"Array {array} has {len(positions)} speaker positions, "
                    f"at least {MIN_POSITIONS} are required."
                )
                raise ValueError(message)

            if any(not channels for channels in positions.values()):
                message = f"Every position of array {array} needs a channel."
                raise ValueError(message)

        return self


class RirBank(pydantic.BaseModel):
    """Nested index home -> room -> array configuration -> position -> channel."""

    homes: dict[str, dict[str, RirRoom]]

    @model_validator(mode="after")
    def check_homes(self):
        if not self.homes:
            message = "The impulse response bank needs at least one home."
            raise ValueError(message)

        for home, rooms in self.homes.items():
            if not rooms:
                message = f"Home {home} needs at least one room."
                raise ValueError(message)

        return self

    def select(
        self,
        homes: list[str] | None = None,
        rooms: list[str] | None = None,
        exclude_kinds: tuple[str, ...] = ("bathroom",),
    ) -> "RirBank":
        """Return the subset of the bank matching the filters.

        `rooms` entries have the form `home/room`. Homes left without rooms are
        dropped from the result.
        """
        selected = {}
        for home, home_rooms in self.homes.items():
            if homes is not None and home not in homes:
                continue

            kept = {
                name: room
                for name, room in home_rooms.items()
                if room.kind not in exclude_kinds
                and (rooms is None or f"{home}/{name}" in rooms)
            }
            if kept:
                selected[home] = kept

        if not selected:
            message = "No impulse responses match the selection."
            raise DataError(message)

        return RirBank(homes=selected)

    def paths(self) -> list[str]:
        return [
            path
            for rooms in self.homes.values()
            for room in rooms.values()
            for positions in room.arrays.values()
            for channels in positions.values()
            for path in channels.values()
        ]


class BankIndex(pydantic.BaseModel):
    speech: list[SpeechEntry]
    noise: list[NoiseEntry]
    rirs: RirBank


class Banks:
    """Loaded bank index with cached access to its audio assets."""

    def __init__(self, index: BankIndex, root: Path, sample_rate: int = SAMPLE_RATE):
        """Initialize the banks from an index whose paths are relative to `root`."""
        self.index = index
        self.root = Path(root)
        self.sample_rate = sample_rate
        self._cache: dict[str, Waveform] = {}

        self.utterances: dict[str, list[str]] = {}
        for entry in index.speech:
            self.utterances.setdefault(entry.speaker, []).append(entry.path)

    @property
    def speakers(self) -> list[str]:
        return sorted(self.utterances)

    @property
    def noises(self) -> list[str]:
        return [entry.path for entry in self.index.noise]

    @property
    def rirs(self) -> RirBank:
        return self.index.rirs

    def audio(self, path: str) -> Waveform:
        if path not in self._cache:
            self._cache[path] = read_wav(self.root / path, sample_rate=self.sample_rate)
        return self._cache[path]

    def validate(self):
        """Raise a `DataError` listing every referenced asset that does not exist."""
        paths = [e.path for e in self.index.speech] + self.noises + self.rirs.paths()
        missing = [path for path in paths if not (self.root / path).exists()]
        if missing:
            message = f"{len(missing)} bank assets are missing, e.g. {missing[0]}."
            raise DataError(message)

        if not self.index.speech or not self.index.noise:
            message = "The bank needs at least one speech and one noise file."
            raise DataError(message)


def load_banks(
    index_path: str | Path,
    homes: list[str] | None = None,
    rooms: list[str] | None = None,
    exclude_kinds: tuple[str, ...] = ("bathroom",),
) -> Banks:
    """Load a bank index, apply the impulse response filters, and check its assets."""
    index_path = Path(index_path)
    try:
        index = BankIndex.model_validate_json(index_path.read_text())
    except (OSError, pydantic.ValidationError) as e:
        message = f"Bank index {index_path} is malformed or unreadable."
        raise DataError(message) from e

    index = index.model_copy(
        update={"rirs": index.rirs.select(homes, rooms, exclude_kinds)},
    )
    banks = Banks(index, index_path.parent)
    banks.validate()

    logging.info(
        "Loaded banks with %d speakers, %d noise files, and %d impulse responses",
        len(banks.speakers),
        len(banks.noises),
        len(banks.rirs.paths()),
    )
    return banks


def synthetic_speech(
    duration_s: float,
    f0: float,
    rng: np.random.Generator,
    sample_rate: int = SAMPLE_RATE,
) -> np.ndarray:
    """Harmonic voiced signal with a syllable-rate amplitude envelope."""
    t = np.arange(int(duration_s * sample_rate)) / sample_rate

    vibrato = 1 + 0.03 * np.sin(2 * np.pi * rng.uniform(3, 6) * t)
    phase = 2 * np.pi * f0 * np.cumsum(vibrato) / sample_rate

    voiced = np.zeros_like(t)
    for k in range(1, int(3500 // f0) + 1):
        formant = np.exp(-(((k * f0) - 700) ** 2) / (2 * 500**2))
        voiced += (1 / k + formant) * np.sin(k * phase + rng.uniform(0, 2 * np.pi))

    syllables = np.abs(np.sin(np.pi * rng.uniform(3, 5) * t + rng.uniform(0, np.pi)))
    speech = voiced * syllables**1.5
    return 0.5 * speech / np.max(np.abs(speech))


def colored_noise(
    color: str,
    num_samples: int,
    rng: np.random.Generator,
    sample_rate: int = SAMPLE_RATE,
) -> np.ndarray:
    """White or pink noise with an RMS level of 0.1."""
    noise = rng.standard_normal(num_samples)
    if color == "pink":
        spectrum = np.fft.rfft(noise)
        freqs = np.fft.rfftfreq(num_samples, d=1.0 / sample_rate)
        magnitude = np.ones_like(freqs)
        magnitude[1:] = 1.0 / np.sqrt(freqs[1:])
        magnitude[0] = 0.0
        noise = np.fft.irfft(spectrum * magnitude, n=num_samples)
    elif color != "white":
        message = f"Unsupported noise color {color}."
        raise ValueError(message)

    return 0.1 * noise / np.sqrt(np.mean(noise**2))


def synthetic_rir(
    rt60: float,
    rng: np.random.Generator,
    length_s: float = 0.3,
    sample_rate: int = SAMPLE_RATE,
) -> np.ndarray:
    """Direct path, a few early reflections, and an exponentially decaying tail."""
    size = int(length_s * sample_rate)
    t = np.arange(size) / sample_rate

    rir = np.zeros(size)
    direct = int(rng.integers(8, 64))
    rir[direct] = 1.0

    for _ in range(int(rng.integers(3, 8))):
        delay = direct + int(rng.integers(20, int(0.05 * sample_rate)))
        rir[delay] += rng.uniform(0.1, 0.5) * rng.choice([-1.0, 1.0])

    tau = rt60 / 6.91
    tail = np.exp(-t / tau) * rng.standard_normal(size) * 0.1
    tail[: direct + 1] = 0.0
    return rir + tail


def build_toy_banks(
    out_dir: str | Path,
    seed: int = 0,
    noise_color: str = "white",
    speakers: int = 6,
    utterances_per_speaker: int = 4,
    noise_files: int = 8,
    noise_duration_s: float = 4.0,
    homes: int = 2,
    rooms_per_home: int = 2,
    arrays: int = 2,
    positions: int = 3,
    channels: int = 2,
    sample_rate: int = SAMPLE_RATE,
) -> Path:
    """Write a synthetic bank directory and return the path of its index.

    The first home also gets a room tagged as a bathroom so exclusion filters have
    something to exclude.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)

    speech = []
    for s in range(speakers):
        speaker = f"spk{s:02d}"
        f0 = rng.uniform(100, 240)
        for u in range(utterances_per_speaker):
            path = f"speech/{speaker}_{u:02d}.wav"
            samples = synthetic_speech(rng.uniform(1.0, 2.5), f0, rng, sample_rate)
            write_wav(out_dir / path, Waveform(samples, sample_rate))
            speech.append(SpeechEntry(speaker=speaker, path=path))

    noise = []
    for i in range(noise_files):
        path = f"noise/{noise_color}_{i:02d}.wav"
        samples = colored_noise(
            noise_color,
            int(noise_duration_s * sample_rate),
            rng,
            sample_rate,
        )
        write_wav(out_dir / path, Waveform(samples, sample_rate))
        noise.append(NoiseEntry(path=path))

    kinds = ["living", "kitchen", "bedroom"]
    rir_homes = {}
    for h in range(homes):
        home = f"home{h + 1}"
        room_kinds = [kinds[r % len(kinds)] for r in range(rooms_per_home)]
        if h == 0:
            room_kinds.append("bathroom")

        rir_homes[home] = {}
        for r, kind in enumerate(room_kinds):
            room = f"room{r + 1}"
            rt60 = rng.uniform(0.2, 0.5)
            room_arrays = {}
            for a in range(arrays):
                room_arrays[f"array{a + 1}"] = {}
                for p in range(positions):
                    room_arrays[f"array{a + 1}"][f"pos{p + 1}"] = {}
                    for c in range(channels):
                        name = f"{home}_{room}_array{a + 1}_pos{p + 1}_ch{c + 1}"
                        path = f"rirs/{name}.wav"
                        samples = synthetic_rir(rt60, rng, sample_rate=sample_rate)
                        write_wav(out_dir / path, Waveform(samples, sample_rate))
                        room_arrays[f"array{a + 1}"][f"pos{p + 1}"][f"ch{c + 1}"] = path

            rir_homes[home][room] = RirRoom(kind=kind, arrays=room_arrays)

    index = BankIndex(speech=speech, noise=noise, rirs=RirBank(homes=rir_homes))
    index_path = out_dir / "index.json"
    index_path.write_text(index.model_dump_json(indent=2))

    logging.info("Wrote toy banks (%s noise) to %s", noise_color, out_dir)
    return index_path
