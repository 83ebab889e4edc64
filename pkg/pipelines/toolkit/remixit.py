"""Self-supervised domain adaptation of a speech enhancer with RemixIT.

A frozen teacher produces speech and noise pseudo-labels for unlabeled mixtures,
the noise estimates are permuted across the batch and remixed with the speech
estimates, and a student learns to separate the bootstrapped mixtures. The
teacher follows the student through an exponential moving average.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

import numpy as np
import pydantic
from pydantic import Field
from scipy import signal
from scipy.stats import gmean

from common import DataError, ToolkitError
from enhancers.enhancer import Enhancer, EnhancerParams, load_enhancer
from toolkit.audio import Waveform, crop, mix_add, read_wav
from toolkit.metrics import neg_si_sdr_loss, si_sdr
from toolkit.segmenter import LabeledSegment
from toolkit.simulator import ManifestRow

FINITE_DIFFERENCE_STEP = 1e-4

# Mixtures, speech references, and noise references of a labeled dataset.
LabeledExample = tuple[Waveform, Waveform, Waveform]


class TrainingError(ToolkitError):
    """Training diverged."""


class EmaConfig(pydantic.BaseModel):
    gamma: float = Field(default=0.99, ge=0, lt=1)
    update_every: int = Field(default=1, ge=1)


class VadConfig(pydantic.BaseModel):
    frame_ms: float = Field(default=30.0, gt=0)
    threshold_db: float = Field(default=20.0, ge=0)
    min_active_fraction: float = Field(default=0.25, gt=0, le=1)
    min_spread_db: float = Field(default=4.0, ge=0)
    max_flatness: float = Field(default=0.3, gt=0, le=1)
    highpass_hz: float = Field(default=100.0, ge=0)


class PretrainConfig(pydantic.BaseModel):
    """Supervised training of the teacher on labeled source-domain mixtures."""

    epochs: int = Field(default=20, ge=0)
    batch_size: int = Field(default=8, ge=1)
    learning_rate: float = Field(default=1.0, ge=0)


class AdaptConfig(pydantic.BaseModel):
    batch_size: int = Field(default=8, ge=2)
    epochs: int = Field(default=10, ge=0)
    learning_rate: float = Field(default=1.0, ge=0)
    ema: EmaConfig = EmaConfig()
    vad_filter: bool = False
    vad: VadConfig = VadConfig()
    selection_metric: Literal["si_sdr_dev"] = "si_sdr_dev"
    seed: int = 0


class EpochLog(pydantic.BaseModel):
    epoch: int
    loss: float | None
    dev_si_sdr: float
    teacher_student_distance: float
    selection_metric: str
    kept_segments: int
    filtered_segments: int


class Checkpoint(pydantic.BaseModel):
    enhancer_kind: str
    theta: list[float]
    epoch: int
    dev_score: float | None = None
    options: dict[str, Any] = {}


@dataclass
class AdaptResult:
    params: EnhancerParams
    epoch: int
    dev_score: float
    log: list[EpochLog] = field(default_factory=list)


def teacher_infer(
    teacher: Enhancer,
    batch: list[Waveform],
) -> list[tuple[Waveform, Waveform]]:
    """Return the speech and noise pseudo-labels of every mixture in the batch."""
    if not batch:
        message = "Cannot produce pseudo-labels for an empty batch."
        raise ValueError(message)

    return [teacher.enhance(mixture) for mixture in batch]


def cyclic_permutation(size: int) -> list[int]:
    """Pair every item with the next one, which leaves no item in place."""
    if size < 2:
        message = f"A batch of {size} cannot be permuted without fixed points."
        raise ValueError(message)

    return [(i + 1) % size for i in range(size)]


def remix(
    pseudo: list[tuple[Waveform, Waveform]],
    permutation: list[int],
) -> tuple[list[Waveform], list[tuple[Waveform, Waveform]]]:
    """Remix every speech estimate with the noise estimate of another mixture.

    All signals are cropped to the shortest one in the batch. Returns the
    bootstrapped mixtures and their (speech, noise) training targets.
    """
    size = len(pseudo)
    if sorted(permutation) != list(range(size)):
        message = f"{permutation} is not a permutation of the batch indices."
        raise ValueError(message)

    if any(i == j for i, j in enumerate(permutation)):
        message = f"Permutation {permutation} has a fixed point."
        raise ValueError(message)

    length = min(min(len(s), len(n)) for s, n in pseudo)
    speech = [crop(s, 0, length) for s, _ in pseudo]
    noise = [crop(n, 0, length) for _, n in pseudo]

    mixtures, targets = [], []
    for i, j in enumerate(permutation):
        mixtures.append(mix_add([speech[i], noise[j]]))
        targets.append((speech[i], noise[j]))

    return mixtures, targets


def batch_loss(
    enhancer: Enhancer,
    mixtures: list[Waveform],
    targets: list[tuple[Waveform, Waveform]],
) -> float:
    losses = [
        neg_si_sdr_loss(*enhancer.enhance(mixture), speech, noise)
        for mixture, (speech, noise) in zip(mixtures, targets, strict=True)
    ]
    return float(np.mean(losses))


def finite_difference_gradient(
    enhancer: Enhancer,
    mixtures: list[Waveform],
    targets: list[tuple[Waveform, Waveform]],
    step: float = FINITE_DIFFERENCE_STEP,
) -> np.ndarray:
    """Estimate the gradient of the batch loss with central differences."""
    theta = enhancer.params.theta
    gradient = np.zeros_like(theta)

    for d in range(theta.shape[0]):
        delta = np.zeros_like(theta)
        delta[d] = step
        plus = enhancer.with_params(EnhancerParams(theta + delta))
        minus = enhancer.with_params(EnhancerParams(theta - delta))
        gradient[d] = (
            batch_loss(plus, mixtures, targets) - batch_loss(minus, mixtures, targets)
        ) / (2 * step)

    return gradient


def student_step(
    student: Enhancer,
    bootstrapped: list[Waveform],
    targets: list[tuple[Waveform, Waveform]],
    lr: float,
) -> tuple[Enhancer, float]:
    """Take one gradient step on the mean loss of the batch.

    Returns the updated student and the batch loss before the step.
    """
    if lr < 0:
        message = f"The learning rate must be non-negative, got {lr}."
        raise ValueError(message)

    results = [
        student.loss_and_gradient(mixture, speech, noise)
        for mixture, (speech, noise) in zip(bootstrapped, targets, strict=True)
    ]
    loss = float(np.mean([value for value, _ in results]))
    if not math.isfinite(loss):
        message = f"The training loss is not finite ({loss})."
        raise TrainingError(message)

    if any(gradient is None for _, gradient in results):
        gradient = finite_difference_gradient(student, bootstrapped, targets)
    else:
        gradient = np.mean([gradient for _, gradient in results], axis=0)

    theta = student.params.theta - lr * gradient
    return student.with_params(EnhancerParams(theta)), loss


def ema_update(
    teacher_params: EnhancerParams,
    student_params: EnhancerParams,
    gamma: float,
) -> EnhancerParams:
    """Move the teacher parameters toward the student parameters."""
    if len(teacher_params) != len(student_params):
        message = (
            f"Teacher and student dimensions differ: "
            f"{len(teacher_params)} and {len(student_params)}."
        )
        raise ValueError(message)

    if not 0 <= gamma <= 1:
        message = f"The EMA factor must be in [0, 1], got {gamma}."
        raise ValueError(message)

    return EnhancerParams(
        gamma * teacher_params.theta + (1 - gamma) * student_params.theta,
    )


def frame_energies(w: Waveform, frame_ms: float) -> np.ndarray:
    """Return the mean square of consecutive non-overlapping frames."""
    size = max(1, round(frame_ms * w.sample_rate / 1000))
    if len(w) < size:
        return np.array([np.mean(w.samples**2)])

    count = len(w) // size
    return np.mean(w.samples[: count * size].reshape(count, size) ** 2, axis=1)


def spectral_flatness(w: Waveform) -> float:
    """Return the ratio of the geometric to the arithmetic mean of the spectrum.

    The DC bin is ignored. White noise scores close to 1 and tones close to 0.
    """
    _, psd = signal.welch(w.samples, fs=w.sample_rate, nperseg=min(512, len(w)))
    psd = np.maximum(psd[1:], np.finfo(float).tiny)
    return float(gmean(psd) / np.mean(psd))


def speech_band(w: Waveform, cutoff_hz: float) -> Waveform:
    """Remove the content below the voice pitch range."""
    if cutoff_hz <= 0 or cutoff_hz >= w.sample_rate / 2 or len(w) == 0:
        return w

    sos = signal.butter(4, cutoff_hz, "highpass", fs=w.sample_rate, output="sos")
    return Waveform(signal.sosfilt(sos, w.samples), w.sample_rate)


def is_speech(w: Waveform, config: VadConfig) -> bool:
    """Decide whether a segment contains enough speech-like activity.

    A frame is active when its energy is within `threshold_db` of the loudest
    frame, and a segment needs `min_active_fraction` of active frames. Segments
    that are both stationary and spectrally flat count as noise. Energies are
    measured above `highpass_hz`.
    """
    if len(w) == 0:
        return False

    w = speech_band(w, config.highpass_hz)
    energies = frame_energies(w, config.frame_ms)
    peak = np.max(energies)
    if peak == 0:
        return False

    active = energies >= peak * 10 ** (-config.threshold_db / 10)
    if np.mean(active) < config.min_active_fraction:
        return False

    floor = max(np.percentile(energies, 10), np.finfo(float).tiny)
    stationary = 10 * math.log10(peak / floor) < config.min_spread_db
    return not (stationary and spectral_flatness(w) > config.max_flatness)


def vad_filter(
    segments: list[Waveform],
    frame_ms: float = 30.0,
    threshold_db: float = 20.0,
    config: VadConfig | None = None,
) -> list[Waveform]:
    """Return the segments that contain speech."""
    config = config or VadConfig(frame_ms=frame_ms, threshold_db=threshold_db)
    return [segment for segment in segments if is_speech(segment, config)]


def mislabeled_segments(
    segments: list[LabeledSegment],
    audio: list[Waveform],
    config: VadConfig | None = None,
) -> list[LabeledSegment]:
    """Return the segments whose audio disagrees with their speaker count.

    A 0-speaker segment should be free of speech and a 1-speaker segment should
    contain some. Segments with overlapping speakers are not checked.
    """
    config = config or VadConfig()
    flagged = []
    for segment, w in zip(segments, audio, strict=True):
        if segment.max_speakers > 1:
            continue

        speech = bool(vad_filter([w], config=config))
        if speech != (segment.max_speakers == 1):
            logging.warning(
                "Segment %s [%.3f, %.3f] is labeled with %d speakers but %s speech",
                segment.session_id,
                segment.start_s,
                segment.end_s,
                segment.max_speakers,
                "contains" if speech else "has no",
            )
            flagged.append(segment)

    return flagged


def load_unlabeled(directory: str | Path) -> list[Waveform]:
    """Load every WAV file below a directory, in sorted path order."""
    paths = sorted(Path(directory).rglob("*.wav"))
    if not paths:
        message = f"No unlabeled audio found in {directory}."
        raise DataError(message)

    return [read_wav(path) for path in paths]


def load_labeled(rows: list[ManifestRow], root: str | Path) -> list[LabeledExample]:
    root = Path(root)
    return [
        tuple(read_wav(root / path) for path in (row.mixture, row.speech, row.noise))
        for row in rows
    ]


def evaluate_enhancer(enhancer: Enhancer, examples: list[LabeledExample]) -> float:
    """Return the mean SI-SDR of the speech estimates of a labeled dataset."""
    if not examples:
        message = "Cannot evaluate an enhancer on an empty dataset."
        raise DataError(message)

    scores = [
        si_sdr(enhancer.enhance(mixture)[0], speech).value_db
        for mixture, speech, _ in examples
    ]
    return float(np.mean(scores))


def pretrain(
    enhancer: Enhancer,
    examples: list[LabeledExample],
    config: PretrainConfig,
    seed: int = 0,
) -> tuple[Enhancer, list[float]]:
    """Train an enhancer with the true speech and noise of labeled mixtures.

    Returns the trained enhancer and the mean loss of every epoch.
    """
    if not examples:
        message = "Pre-training needs at least one labeled example."
        raise DataError(message)

    rng = np.random.default_rng(seed)
    losses = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(examples))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [examples[i] for i in order[start : start + config.batch_size]]
            enhancer, loss = student_step(
                enhancer,
                [mixture for mixture, _, _ in batch],
                [(speech, noise) for _, speech, noise in batch],
                config.learning_rate,
            )
            epoch_losses.append(loss)

        losses.append(float(np.mean(epoch_losses)))
        logging.info("Pre-training epoch %d: loss %.4f", epoch, losses[-1])

    return enhancer, losses


def _distance(teacher: Enhancer, student: Enhancer) -> float:
    if teacher.dimension != student.dimension:
        return math.nan
    return float(np.linalg.norm(teacher.params.theta - student.params.theta))


def adapt(
    config: AdaptConfig,
    teacher_init: Enhancer,
    unlabeled: list[Waveform],
    dev: list[LabeledExample],
    log_path: str | Path | None = None,
    student_init: Enhancer | None = None,
) -> AdaptResult:
    """Adapt a student to unlabeled mixtures and return its best epoch.

    The student starts from `student_init`, or from the teacher when omitted. The
    initialization is scored as epoch 0, so the result is never worse on the dev
    set than the starting point. When teacher and student have different
    parameter spaces, the teacher stays frozen.
    """
    kept = vad_filter(unlabeled, config=config.vad) if config.vad_filter else unlabeled
    filtered = len(unlabeled) - len(kept)
    if config.vad_filter:
        logging.info(
            "Voice activity filter kept %d of %d segments",
            len(kept),
            len(unlabeled),
        )

    if len(kept) < 2:
        message = f"Adaptation needs at least 2 unlabeled segments, got {len(kept)}."
        raise DataError(message)

    teacher = teacher_init
    student = student_init if student_init is not None else teacher_init
    follow = teacher.kind == student.kind and teacher.dimension == student.dimension
    if not follow:
        logging.info("Teacher and student differ, the teacher stays frozen")

    logging.info("Selecting the best student by %s", config.selection_metric)

    log_file = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_file = log_path.open("w", encoding="utf-8", newline="\n")

    def record(epoch: int, loss: float | None, score: float) -> EpochLog:
        entry = EpochLog(
            epoch=epoch,
            loss=loss,
            dev_si_sdr=score,
            teacher_student_distance=_distance(teacher, student),
            selection_metric=config.selection_metric,
            kept_segments=len(kept),
            filtered_segments=filtered,
        )
        if log_file is not None:
            log_file.write(entry.model_dump_json() + "\n")
            log_file.flush()
        return entry

    try:
        score = evaluate_enhancer(student, dev)
        result = AdaptResult(student.params, 0, score, [record(0, None, score)])

        rng = np.random.default_rng(config.seed)
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(kept))
            batches = [
                order[i : i + config.batch_size]
                for i in range(0, len(order), config.batch_size)
            ]

            losses = []
            batches = [batch for batch in batches if len(batch) >= 2]
            for number, batch in enumerate(batches, start=1):
                pseudo = teacher_infer(teacher, [kept[i] for i in batch])
                bootstrapped, targets = remix(pseudo, cyclic_permutation(len(batch)))
                student, loss = student_step(
                    student,
                    bootstrapped,
                    targets,
                    config.learning_rate,
                )
                losses.append(loss)

                if follow and number % config.ema.update_every == 0:
                    teacher = teacher.with_params(
                        ema_update(teacher.params, student.params, config.ema.gamma),
                    )

            score = evaluate_enhancer(student, dev)
            loss = float(np.mean(losses)) if losses else None
            result.log.append(record(epoch, loss, score))
            logging.info("Epoch %d: loss %s, dev SI-SDR %.3f dB", epoch, loss, score)

            if score > result.dev_score:
                result.params = student.params
                result.epoch, result.dev_score = epoch, score
    finally:
        if log_file is not None:
            log_file.close()

    logging.info(
        "Best student from epoch %d with dev SI-SDR %.3f dB",
        result.epoch,
        result.dev_score,
    )
    return result


def save_checkpoint(
    path: str | Path,
    enhancer: Enhancer,
    epoch: int = 0,
    dev_score: float | None = None,
) -> Checkpoint:
    checkpoint = Checkpoint(
        enhancer_kind=enhancer.kind,
        theta=[float(v) for v in enhancer.params.theta],
        epoch=epoch,
        dev_score=dev_score,
        options=enhancer.options(),
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(checkpoint.model_dump_json(indent=2))
    return checkpoint


def load_checkpoint(path: str | Path) -> tuple[Enhancer, Checkpoint]:
    """Load a checkpoint and rebuild the enhancer it describes."""
    path = Path(path)
    try:
        checkpoint = Checkpoint.model_validate_json(path.read_text())
    except (OSError, pydantic.ValidationError) as e:
        message = f"Checkpoint {path} is malformed or unreadable."
        raise DataError(message) from e

    enhancer = load_enhancer(
        checkpoint.enhancer_kind,
        checkpoint.theta,
        checkpoint.options,
    )
    return enhancer, checkpoint
