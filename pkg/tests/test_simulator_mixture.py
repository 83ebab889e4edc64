import math
from collections import Counter

import numpy as np
import pytest

from common import DataError
from toolkit.audio import Waveform, energy, read_wav
from toolkit.simulator import (
    MANIFEST,
    MixtureSpec,
    SimulationConfig,
    SnrSamplerConfig,
    SpeakerCountPrior,
    assemble_mixture,
    load_manifest,
    measure_snr,
    place,
    sample_spec,
    simulate_dataset,
    summarize_manifest,
)


def test_measure_snr_of_equal_energy_signals():
    rng = np.random.default_rng(0)
    noise = Waveform(rng.standard_normal(1000))
    assert measure_snr(Waveform(noise.samples[::-1]), noise) == pytest.approx(0.0)


def test_measure_snr_is_homogeneous():
    rng = np.random.default_rng(0)
    speech = Waveform(rng.standard_normal(1000))
    noise = Waveform(rng.standard_normal(1000))

    shifted = measure_snr(Waveform(speech.samples * math.sqrt(10)), noise)
    assert shifted - measure_snr(speech, noise) == pytest.approx(10.0, abs=1e-10)


def test_measure_snr_matches_energy_ratio():
    rng = np.random.default_rng(1)
    speech, noise = rng.standard_normal(500), rng.standard_normal(500)

    expected = 10 * np.log10(np.sum(speech**2) / np.sum(noise**2))
    assert measure_snr(Waveform(speech), Waveform(noise)) == pytest.approx(
        expected,
        abs=1e-10,
    )


def test_measure_snr_edge_cases():
    assert measure_snr(Waveform.zeros(4), Waveform(np.ones(4))) == -math.inf
    with pytest.raises(ValueError, match="zero energy"):
        measure_snr(Waveform(np.ones(4)), Waveform.zeros(4))
    with pytest.raises(ValueError, match="mismatch"):
        measure_snr(Waveform(np.ones(4)), Waveform(np.ones(5)))


def test_gain_formula_hand_example():
    speech_energy, noise_energy, snr = 1.0, 4.0, 5.0
    gain = math.sqrt(noise_energy / speech_energy * 10 ** (snr / 10))

    assert gain**2 == pytest.approx(12.6491, abs=1e-4)
    assert gain == pytest.approx(3.5566, abs=1e-4)

    speech = Waveform(np.array([1.0, 0.0, 0.0, 0.0]))
    noise = Waveform(np.array([0.0, 1.0, 1.0, 1.0]) * math.sqrt(4 / 3))
    assert measure_snr(Waveform(speech.samples * gain), noise) == pytest.approx(5.0)


def test_place_fills_intervals_with_consecutive_speech():
    utterances = [Waveform(np.arange(1, 4, dtype=float), 10)]
    placed = place(utterances, [(0.1, 0.2), (0.5, 0.7)], 10)

    assert np.array_equal(placed.samples, [0, 1, 0, 0, 0, 2, 3, 0, 0, 0])


def test_spec_is_deterministic(toy_banks):
    config = SimulationConfig()
    first = sample_spec(config, toy_banks, 4, master_seed=9)
    second = sample_spec(config, toy_banks, 4, master_seed=9)

    assert first == second
    assert sample_spec(config, toy_banks, 5, master_seed=9) != first


def test_spec_draws_distinct_speakers_and_enough_speech(toy_banks):
    config = SimulationConfig(prior=SpeakerCountPrior(probabilities=(0, 0, 1)))
    for index in range(10):
        spec = sample_spec(config, toy_banks, index, master_seed=0)
        assert len(set(spec.speakers)) == 3

        for refs, intervals in zip(spec.utterance_refs, spec.activity, strict=True):
            needed = sum(b - a for a, b in intervals) * toy_banks.sample_rate
            assert sum(len(toy_banks.audio(ref)) for ref in refs) >= needed


def test_spec_crops_long_noise(toy_banks):
    config = SimulationConfig(max_length_s=1.0)
    spec = sample_spec(config, toy_banks, 0, master_seed=0)

    assert spec.length == toy_banks.sample_rate
    assert 0 <= spec.noise_offset <= len(toy_banks.audio(spec.noise_ref)) - spec.length


def test_spec_validates_speaker_lists(toy_banks):
    spec = sample_spec(SimulationConfig(), toy_banks, 0, master_seed=0)
    data = spec.model_dump()
    data["per_speaker_snr_db"] = [*data["per_speaker_snr_db"], 0.0]

    with pytest.raises(ValueError, match="per_speaker_snr_db"):
        MixtureSpec.model_validate(data)


def test_mixture_calibrates_every_speaker(toy_banks):
    for index in range(10):
        spec = sample_spec(SimulationConfig(), toy_banks, index, master_seed=1)
        example = assemble_mixture(spec, toy_banks)

        for reference, snr in zip(
            example.speech_refs,
            spec.per_speaker_snr_db,
            strict=True,
        ):
            assert measure_snr(reference, example.noise_ref) == pytest.approx(
                snr,
                abs=1e-9,
            )


def test_mixture_is_the_sum_of_its_references(toy_banks):
    for index in range(10):
        spec = sample_spec(SimulationConfig(), toy_banks, index, master_seed=2)
        example = assemble_mixture(spec, toy_banks)

        residual = example.mixture.samples - example.noise_ref.samples
        residual -= sum(reference.samples for reference in example.speech_refs)
        assert np.max(np.abs(residual)) < 1e-9
        assert len(example.mixture) == spec.length


def test_single_speaker_with_unit_impulse_matches_noise_energy(toy_banks):
    spec = sample_spec(
        SimulationConfig(
            prior=SpeakerCountPrior(probabilities=(1, 0, 0)),
            snr=SnrSamplerConfig(mean_db=0.0, sigma1_db=0.0, sigma2_db=0.0),
        ),
        toy_banks,
        0,
        master_seed=0,
    )
    assert spec.per_speaker_snr_db == [0.0]

    unit = Waveform(np.array([1.0]))
    toy_banks._cache[spec.rir_selection.paths(toy_banks.rirs)[0]] = unit
    try:
        example = assemble_mixture(spec, toy_banks)
    finally:
        toy_banks._cache.clear()

    assert energy(example.speech_refs[0]) == pytest.approx(
        energy(example.noise_ref),
        rel=1e-9,
    )


def test_mixture_fails_on_silent_noise(toy_banks):
    spec = sample_spec(SimulationConfig(), toy_banks, 0, master_seed=0)
    toy_banks._cache[spec.noise_ref] = Waveform.zeros(spec.length)
    try:
        with pytest.raises(DataError, match="silent"):
            assemble_mixture(spec, toy_banks)
    finally:
        toy_banks._cache.clear()


def test_written_examples_keep_their_calibration(simulated):
    directory, rows = simulated
    for row in rows:
        noise = read_wav(directory / row.noise)
        for path, snr in zip(row.speakers, row.spec.per_speaker_snr_db, strict=True):
            speech = read_wav(directory / path)
            assert measure_snr(speech, noise) == pytest.approx(snr, abs=0.001)


def test_manifest_lists_every_example(simulated):
    directory, rows = simulated

    assert load_manifest(directory / MANIFEST) == rows
    assert [row.file_id for row in rows] == [f"{i:06d}" for i in range(len(rows))]
    for row in rows:
        assert row.n_speakers == len(row.speakers) == row.spec.n
        assert (directory / row.mixture).exists()


def test_same_seed_produces_identical_datasets(tmp_path, toy_banks):
    config = SimulationConfig()
    simulate_dataset(config, toy_banks, 4, tmp_path / "a", master_seed=5)
    simulate_dataset(config, toy_banks, 4, tmp_path / "b", master_seed=5)

    first = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*"))
    second = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*"))
    assert first == second
    for path in first:
        if (tmp_path / "a" / path).is_file():
            assert (tmp_path / "a" / path).read_bytes() == (
                tmp_path / "b" / path
            ).read_bytes()


def test_parallel_generation_matches_sequential_generation(tmp_path, toy_banks):
    config = SimulationConfig()
    simulate_dataset(config, toy_banks, 4, tmp_path / "a", master_seed=5)
    simulate_dataset(config, toy_banks, 4, tmp_path / "b", master_seed=5, jobs=2)

    assert (tmp_path / "a" / MANIFEST).read_bytes() == (
        tmp_path / "b" / MANIFEST
    ).read_bytes()


def test_empty_dataset_writes_an_empty_manifest(tmp_path, toy_banks):
    rows = simulate_dataset(SimulationConfig(), toy_banks, 0, tmp_path, master_seed=0)

    assert rows == []
    assert (tmp_path / MANIFEST).read_text() == ""


def test_speaker_count_fractions_follow_the_prior(toy_banks):
    config = SimulationConfig()
    counts = Counter(
        sample_spec(config, toy_banks, index, master_seed=0).n
        for index in range(10_000)
    )
    for n, p in enumerate(config.prior.probabilities, start=1):
        assert counts[n] / 10_000 == pytest.approx(p, abs=0.015)


def test_summarize_manifest(simulated):
    _, rows = simulated
    summary = summarize_manifest(rows)

    snrs = [snr for row in rows for snr in row.spec.per_speaker_snr_db]
    assert summary.count == len(rows)
    assert sum(summary.fractions.values()) == pytest.approx(1.0)
    assert summary.snr_mean_db == pytest.approx(np.mean(snrs))
    assert summary.snr_std_db == pytest.approx(np.std(snrs))
