"""Speaker-count labeled segmentation of conversational transcripts.

Every boundary is quantized to integer milliseconds before any comparison, so the
timeline arithmetic is exact and reproducible.
"""

import bisect
import heapq
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pydantic
from pydantic import ConfigDict, Field, model_validator

from common import DataError, write_jsonl
from toolkit.audio import Waveform, crop, write_wav

MAX_LABEL = 3


def to_ms(seconds: float) -> int:
    """Quantize a time in seconds to integer milliseconds."""
    return round(seconds * 1000)


class Utterance(pydantic.BaseModel):
    """A timed speech interval attributed to one speaker."""

    model_config = ConfigDict(populate_by_name=True, frozen=True)

    speaker_id: str = Field(alias="speaker", min_length=1)
    start_s: float = Field(ge=0)
    end_s: float

    @model_validator(mode="after")
    def check_interval(self):
        if self.end_s <= self.start_s:
            message = (
                f"Utterance ends ({self.end_s}) before it starts ({self.start_s})."
            )
            raise ValueError(message)
        return self


class Transcript(pydantic.BaseModel):
    """Speaker-attributed transcript of one recording session."""

    session_id: str = Field(min_length=1)
    duration_s: float = Field(gt=0)
    excluded_speaker: str | None = None
    utterances: list[Utterance] = []

    @model_validator(mode="after")
    def normalize(self):
        for utterance in self.utterances:
            if utterance.end_s > self.duration_s:
                message = (
                    f"Utterance of {utterance.speaker_id} ends at {utterance.end_s} s, "
                    f"after the end of the session ({self.duration_s} s)."
                )
                raise ValueError(message)

        self.utterances.sort(key=lambda u: (u.start_s, u.end_s, u.speaker_id))
        return self


class LabeledSegment(pydantic.BaseModel):
    """Time interval labeled with its maximum number of simultaneous speakers."""

    model_config = ConfigDict(frozen=True)

    session_id: str
    start_s: float
    end_s: float
    max_speakers: int = Field(ge=0, le=MAX_LABEL)

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


class PatternRecord(LabeledSegment):
    """Labeled segment carrying the activity of each of its speakers."""

    activity: list[list[tuple[float, float]]]


class TimelineStats(pydantic.BaseModel):
    """Fraction of the session spent at each active-speaker count."""

    fractions: dict[int, float]
    excluded: float


@dataclass(frozen=True)
class CountTimeline:
    """Active-speaker count over a session as a list of constant intervals.

    Adjacent intervals always differ in count or exclusion, and together they tile
    [0, duration]. `activity` keeps the merged intervals of every non-excluded
    speaker, in milliseconds.
    """

    session_id: str
    breakpoints_ms: tuple[int, ...]
    counts: tuple[int, ...]
    excluded_mask: tuple[bool, ...]
    activity: dict[str, tuple[tuple[int, int], ...]] = field(default_factory=dict)

    @property
    def breakpoints(self) -> list[float]:
        return [b / 1000 for b in self.breakpoints_ms]

    @property
    def duration_ms(self) -> int:
        return self.breakpoints_ms[-1]

    def intervals(self):
        """Yield `(start_ms, end_ms, count, excluded)` for every interval."""
        yield from zip(
            self.breakpoints_ms[:-1],
            self.breakpoints_ms[1:],
            self.counts,
            self.excluded_mask,
            strict=True,
        )


def load_transcript(path: str | Path) -> Transcript:
    """Load and validate a transcript JSON file."""
    path = Path(path)
    try:
        return Transcript.model_validate_json(path.read_text())
    except (OSError, pydantic.ValidationError) as e:
        message = f"Transcript {path} is malformed or unreadable."
        raise DataError(message) from e


def load_transcripts(directory: str | Path) -> list[Transcript]:
    """Load every transcript JSON file in a directory, sorted by file name."""
    directory = Path(directory)
    if not directory.is_dir():
        message = f"Transcript directory {directory} does not exist."
        raise DataError(message)

    transcripts = [load_transcript(path) for path in sorted(directory.glob("*.json"))]
    logging.info("Loaded %d transcripts from %s", len(transcripts), directory)
    return transcripts


def _merge(intervals: list[tuple[int, int]]) -> list[tuple[int, int]]:
    merged = []
    for start, end in sorted(intervals):
        if merged and start <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], end))
        else:
            merged.append((start, end))
    return merged


def build_timeline(t: Transcript) -> CountTimeline:
    """Build the active-speaker count timeline of a transcript.

    The count at any instant is the number of distinct non-excluded speakers with
    an utterance covering it. Time where the excluded speaker talks is flagged in
    `excluded_mask`.
    """
    duration = to_ms(t.duration_s)

    per_speaker: dict[str, list[tuple[int, int]]] = {}
    for utterance in t.utterances:
        start, end = to_ms(utterance.start_s), to_ms(utterance.end_s)
        if end > duration:
            message = (
                f"Utterance of {utterance.speaker_id} in {t.session_id} exceeds "
                "the session duration."
            )
            raise DataError(message)
        if end > start:
            per_speaker.setdefault(utterance.speaker_id, []).append((start, end))

    per_speaker = {speaker: _merge(spans) for speaker, spans in per_speaker.items()}

    points = {0, duration}
    for spans in per_speaker.values():
        for start, end in spans:
            points.update((start, end))
    points = np.array(sorted(points))

    counts = np.zeros(len(points) - 1, dtype=int)
    excluded = np.zeros(len(points) - 1, dtype=bool)
    for speaker, spans in per_speaker.items():
        coverage = np.zeros(len(points), dtype=int)
        for start, end in spans:
            coverage[np.searchsorted(points, start)] += 1
            coverage[np.searchsorted(points, end)] -= 1
        active = np.cumsum(coverage)[:-1] > 0

        if speaker == t.excluded_speaker:
            excluded |= active
        else:
            counts += active

    # Adjacent intervals with identical state are merged so the timeline is
    # canonical for a given transcript.
    breakpoints = [int(points[0])]
    merged_counts: list[int] = []
    merged_excluded: list[bool] = []
    for i in range(len(counts)):
        state = (int(counts[i]), bool(excluded[i]))
        if merged_counts and state == (merged_counts[-1], merged_excluded[-1]):
            breakpoints[-1] = int(points[i + 1])
            continue
        merged_counts.append(state[0])
        merged_excluded.append(state[1])
        breakpoints.append(int(points[i + 1]))

    activity = {
        speaker: tuple(spans)
        for speaker, spans in sorted(per_speaker.items())
        if speaker != t.excluded_speaker
    }

    return CountTimeline(
        session_id=t.session_id,
        breakpoints_ms=tuple(breakpoints),
        counts=tuple(merged_counts),
        excluded_mask=tuple(merged_excluded),
        activity=activity,
    )


def timeline_stats(tl: CountTimeline) -> TimelineStats:
    """Return the fraction of total time spent at each count and excluded."""
    total = tl.duration_ms
    fractions: dict[int, float] = {}
    excluded = 0

    for start, end, count, is_excluded in tl.intervals():
        if is_excluded:
            excluded += end - start
        else:
            fractions[count] = fractions.get(count, 0) + (end - start)

    return TimelineStats(
        fractions={count: ms / total for count, ms in sorted(fractions.items())},
        excluded=excluded / total,
    )


def extract_segments(
    tl: CountTimeline,
    min_duration_s: float = 3.0,
) -> list[LabeledSegment]:
    """Extract speaker-count labeled segments with four greedy passes.

    Pass k claims every maximal run of unclaimed, non-excluded time whose count is at
    most k, provided the run lasts at least `min_duration_s`. Runs that are too short
    stay available to the following passes.
    """
    if min_duration_s <= 0:
        message = "The minimum segment duration must be positive."
        raise ValueError(message)

    min_duration = to_ms(min_duration_s)
    bounds = tl.breakpoints_ms
    size = len(tl.counts)
    claimed = [False] * size
    segments = []

    for bound in range(MAX_LABEL + 1):

        def available(i, bound=bound):
            return (
                not claimed[i] and not tl.excluded_mask[i] and tl.counts[i] <= bound
            )

        runs = []
        i = 0
        while i < size:
            if not available(i):
                i += 1
                continue
            j = i
            while j < size and available(j):
                j += 1
            runs.append((i, j))
            i = j

        for i, j in runs:
            if bounds[j] - bounds[i] < min_duration:
                continue
            claimed[i:j] = [True] * (j - i)
            segments.append(
                LabeledSegment(
                    session_id=tl.session_id,
                    start_s=bounds[i] / 1000,
                    end_s=bounds[j] / 1000,
                    max_speakers=max(tl.counts[i:j]),
                ),
            )

        logging.debug("Pass %d claimed %d segments", bound, len(segments))

    return sorted(segments, key=lambda s: s.start_s)


class _TimelineIndex:
    """Lookup structures for the listening-subset search."""

    def __init__(self, tl: CountTimeline, margin: int):
        self.tl = tl
        self.duration = tl.duration_ms

        bounds = tl.breakpoints_ms
        speech = [
            (count >= 1 and not excluded) * (end - start)
            for start, end, count, excluded in tl.intervals()
        ]
        self.cumulative = np.concatenate([[0], np.cumsum(speech)]).astype(int)

        self.silent = []
        for start, end, count, excluded in tl.intervals():
            if count == 0 and not excluded:
                if self.silent and self.silent[-1][1] == start:
                    self.silent[-1] = (self.silent[-1][0], end)
                else:
                    self.silent.append((start, end))
        self.silent_starts = [start for start, _ in self.silent]

        # Points where a segment may end: the last `margin` ms before them are silent.
        self.tails = [(a + margin, b) for a, b in self.silent if b - a >= margin]
        self.tail_starts = [start for start, _ in self.tails]

        # A segment cannot extend over excluded time or over more than MAX_LABEL
        # simultaneous speakers.
        self.barriers = [
            start
            for start, _, count, excluded in tl.intervals()
            if excluded or count > MAX_LABEL
        ]
        self.bounds = bounds

    def speech_until(self, t: int) -> int:
        i = bisect.bisect_right(self.bounds, t) - 1
        i = min(max(i, 0), len(self.tl.counts) - 1)
        start = self.bounds[i]
        is_speech = self.tl.counts[i] >= 1 and not self.tl.excluded_mask[i]
        return int(self.cumulative[i]) + is_speech * (t - start)

    def max_count(self, start: int, end: int) -> int:
        first = bisect.bisect_right(self.bounds, start) - 1
        last = bisect.bisect_left(self.bounds, end)
        return max(self.tl.counts[max(first, 0) : last], default=0)

    def silent_region(self, t: int):
        i = bisect.bisect_right(self.silent_starts, t) - 1
        return self.silent[i] if i >= 0 else None

    def next_barrier(self, t: int) -> int:
        i = bisect.bisect_left(self.barriers, t)
        if i < len(self.barriers):
            return self.barriers[i]
        return self.duration

    def latest_tail(self, limit: int):
        i = bisect.bisect_right(self.tail_starts, limit) - 1
        if i < 0:
            return None
        return min(limit, self.tails[i][1])


def extract_listening_subset(
    tl: CountTimeline,
    min_length_s: float = 4.0,
    max_length_s: float = 5.0,
    min_speech_s: float = 3.0,
    margin_s: float = 0.25,
) -> list[LabeledSegment]:
    """Select non-overlapping segments suitable for a listening test.

    Every segment lasts between `min_length_s` and `max_length_s`, holds at least
    `min_speech_s` of speech, and is silent during its first and last `margin_s`.
    Selection is greedy from left to right: the earliest feasible start wins, and it
    is paired with its latest feasible end.
    """
    min_length, max_length = to_ms(min_length_s), to_ms(max_length_s)
    min_speech, margin = to_ms(min_speech_s), to_ms(margin_s)
    index = _TimelineIndex(tl, margin)

    def feasible_end(s: int) -> int | None:
        region = index.silent_region(s)
        if region is None or s + margin > region[1]:
            return None

        limit = min(s + max_length, index.next_barrier(s), index.duration)
        end = index.latest_tail(limit)
        if end is None or end < s + min_length:
            return None

        if index.speech_until(end) - index.speech_until(s) < min_speech:
            return None

        return end

    # Feasibility only changes when a start enters a silent region or when the
    # longest window reaches a new tail, so those are the only starts to test.
    candidates = {start for start, _ in index.silent}
    candidates.update(start - max_length for start in index.tail_starts)
    heap = [c for c in candidates if c >= 0]
    heapq.heapify(heap)

    segments = []
    cursor = 0
    while heap:
        s = heapq.heappop(heap)
        if s < cursor:
            continue
        end = feasible_end(s)
        if end is None:
            continue
        segments.append(
            LabeledSegment(
                session_id=tl.session_id,
                start_s=s / 1000,
                end_s=end / 1000,
                max_speakers=index.max_count(s, end),
            ),
        )
        cursor = end
        heapq.heappush(heap, end)

    return segments


def activity_pattern(
    tl: CountTimeline,
    seg: LabeledSegment,
) -> list[list[tuple[float, float]]]:
    """Return the activity of each speaker inside a segment.

    Intervals are relative to the segment start, and speakers are ordered by their
    first onset inside the segment.
    """
    start, end = to_ms(seg.start_s), to_ms(seg.end_s)
    if start < 0 or end > tl.duration_ms or end <= start:
        message = f"Segment [{seg.start_s}, {seg.end_s}] is outside the timeline."
        raise ValueError(message)

    speakers = []
    for speaker, spans in tl.activity.items():
        clipped = [
            (max(a, start), min(b, end))
            for a, b in spans
            if min(b, end) > max(a, start)
        ]
        if clipped:
            speakers.append((clipped[0][0], speaker, clipped))

    speakers.sort()
    return [
        [((a - start) / 1000, (b - start) / 1000) for a, b in clipped]
        for _, _, clipped in speakers
    ]


def pattern_record(tl: CountTimeline, seg: LabeledSegment) -> PatternRecord:
    return PatternRecord(**seg.model_dump(), activity=activity_pattern(tl, seg))


def speaker_count_fractions(segments: list[LabeledSegment]) -> dict[int, float]:
    """Return the fraction of segments carrying each label."""
    if not segments:
        return {}

    labels = np.array([segment.max_speakers for segment in segments])
    values, counts = np.unique(labels, return_counts=True)
    return {
        int(v): float(c) / len(segments) for v, c in zip(values, counts, strict=True)
    }


def export_segment_audio(
    recording: Waveform,
    segments: list[LabeledSegment],
    out_dir: str | Path,
    encoding: str = "float32",
) -> list[Path]:
    """Cut every segment out of a session recording and write it as a WAV file."""
    out_dir = Path(out_dir)
    paths = []

    for segment in segments:
        start = to_ms(segment.start_s) * recording.sample_rate // 1000
        end = to_ms(segment.end_s) * recording.sample_rate // 1000
        if end > len(recording):
            message = (
                f"Segment [{segment.start_s}, {segment.end_s}] of "
                f"{segment.session_id} exceeds the recording length."
            )
            raise DataError(message)

        path = out_dir / (
            f"{segment.session_id}_{to_ms(segment.start_s)}_{to_ms(segment.end_s)}.wav"
        )
        write_wav(path, crop(recording, start, end - start), encoding)
        paths.append(path)

    return paths


def write_segment_manifest(path: str | Path, segments: list[LabeledSegment]) -> int:
    return write_jsonl(path, (segment.model_dump_json() for segment in segments))


def load_pattern_manifest(path: str | Path) -> list[PatternRecord]:
    """Load a pattern manifest written by `write_segment_manifest`."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
        return [
            PatternRecord.model_validate(json.loads(line)) for line in lines if line
        ]
    except (OSError, ValueError) as e:
        message = f"Pattern manifest {path} is malformed or unreadable."
        raise DataError(message) from e
