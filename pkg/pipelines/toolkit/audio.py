"""Audio containers, WAV file I/O, and elementary signal operations."""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import soundfile as sf
from scipy import signal

from common import SAMPLE_RATE, DataError

SUBTYPES = {"pcm16": "PCM_16", "float32": "FLOAT"}

PCM16_SCALE = 32768


class AudioError(DataError):
    """An audio file could not be read or written."""


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono sampled audio.

    Samples are stored as a read-only float64 array with nominal range [-1, 1].
    """

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        """Validate the samples and freeze the underlying array."""
        samples = np.array(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(samples)):
            message = "Waveform samples must be finite."
            raise ValueError(message)

        if self.sample_rate <= 0:
            message = f"Invalid sample rate {self.sample_rate}."
            raise ValueError(message)

        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate

    @classmethod
    def zeros(cls, length: int, sample_rate: int = SAMPLE_RATE) -> "Waveform":
        return cls(np.zeros(length), sample_rate)


def check_sample_rates(*waveforms: Waveform) -> int:
    """Return the common sample rate of the waveforms or raise a `ValueError`."""
    rates = {w.sample_rate for w in waveforms}
    if len(rates) > 1:
        message = f"Sample rate mismatch: {sorted(rates)}."
        raise ValueError(message)

    return rates.pop() if rates else SAMPLE_RATE


def read_wav(
    path: str | Path,
    channel: int = 0,
    sample_rate: int | None = SAMPLE_RATE,
) -> Waveform:
    """Read one channel of a 16-bit PCM or 32-bit float WAV file.

    Multi-channel files supply the requested channel only. Files recorded at a rate
    other than `sample_rate` are rejected because the toolkit never resamples; set
    `sample_rate` to None to accept any rate.
    """
    path = Path(path)
    if not path.exists():
        message = f"Audio file {path} does not exist."
        raise AudioError(message)

    try:
        info = sf.info(path)
    except RuntimeError as e:
        message = f"Audio file {path} could not be opened."
        raise AudioError(message) from e

    if info.subtype not in SUBTYPES.values():
        message = f"Audio file {path} uses an unsupported encoding ({info.subtype})."
        raise AudioError(message)

    if not 0 <= channel < info.channels:
        message = (
            f"Channel {channel} is out of range for {path} "
            f"({info.channels} channels)."
        )
        raise AudioError(message)

    if sample_rate is not None and info.samplerate != sample_rate:
        message = (
            f"Audio file {path} is sampled at {info.samplerate} Hz, "
            f"expected {sample_rate} Hz."
        )
        raise AudioError(message)

    data, rate = sf.read(path, dtype="float64", always_2d=True)
    return Waveform(data[:, channel], rate)


def write_wav(path: str | Path, w: Waveform, encoding: str = "float32") -> int:
    """Write a waveform to a mono WAV file and return the number of clipped samples.

    Under `pcm16`, samples outside [-1, 1] are clipped instead of rejected so batch
    jobs never abort halfway through a dataset.
    """
    if encoding not in SUBTYPES:
        message = f"Unsupported encoding {encoding}."
        raise ValueError(message)

    path = Path(path)
    clipped = 0

    if encoding == "pcm16":
        clipped = int(np.count_nonzero(np.abs(w.samples) > 1.0))
        if clipped:
            logging.warning("Clipped %d samples while writing %s", clipped, path)

        # We quantize the samples ourselves so the reader's 1/32768 scaling
        # recovers every value within one quantization step.
        data = np.clip(
            np.round(w.samples * PCM16_SCALE),
            -PCM16_SCALE,
            PCM16_SCALE - 1,
        ).astype(np.int16)
    else:
        data = w.samples.astype(np.float32)

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        sf.write(path, data, w.sample_rate, subtype=SUBTYPES[encoding])
    except (OSError, RuntimeError) as e:
        message = f"Audio file {path} could not be written."
        raise AudioError(message) from e

    return clipped


def energy(w: Waveform) -> float:
    """Return the sum of squared samples."""
    return float(np.dot(w.samples, w.samples))


def scale(w: Waveform, gain: float) -> Waveform:
    return Waveform(w.samples * gain, w.sample_rate)


def convolve(x: Waveform, h: Waveform) -> Waveform:
    """Return the full linear convolution of `x` with the impulse response `h`."""
    rate = check_sample_rates(x, h)
    if len(h) == 0:
        message = "The impulse response must not be empty."
        raise ValueError(message)

    if len(x) == 0:
        return Waveform.zeros(0, rate)

    return Waveform(signal.fftconvolve(x.samples, h.samples, mode="full"), rate)


def mix_add(signals: list[Waveform], offsets: list[int] | None = None) -> Waveform:
    """Sum signals placed at sample offsets, zero-padding outside their support."""
    offsets = [0] * len(signals) if offsets is None else list(offsets)
    if len(offsets) != len(signals):
        message = "Every signal needs exactly one offset."
        raise ValueError(message)

    if any(offset < 0 for offset in offsets):
        message = "Offsets must be non-negative."
        raise ValueError(message)

    rate = check_sample_rates(*signals)
    length = max(
        (offset + len(s) for s, offset in zip(signals, offsets, strict=True)),
        default=0,
    )

    output = np.zeros(length)
    for s, offset in zip(signals, offsets, strict=True):
        output[offset : offset + len(s)] += s.samples

    return Waveform(output, rate)


def crop(w: Waveform, start: int, length: int) -> Waveform:
    """Return `length` samples starting at `start`, zero-padded past the end."""
    segment = w.samples[start : start + length]
    return pad_to(Waveform(segment, w.sample_rate), length)


def pad_to(w: Waveform, length: int) -> Waveform:
    """Right-pad with zeros (or truncate) to exactly `length` samples."""
    if len(w) >= length:
        return Waveform(w.samples[:length], w.sample_rate)

    return Waveform(np.pad(w.samples, (0, length - len(w))), w.sample_rate)
