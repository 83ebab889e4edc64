import json

import numpy as np
import pydantic
import pytest

from common import DataError
from toolkit.audio import read_wav
from toolkit.banks import (
    RirBank,
    RirRoom,
    build_toy_banks,
    colored_noise,
    load_banks,
    synthetic_rir,
    synthetic_speech,
)


def room(positions=3, kind="room"):
    return RirRoom(
        kind=kind,
        arrays={"a": {f"p{i}": {"c": f"rir_{i}.wav"} for i in range(positions)}},
    )


def test_room_needs_three_positions():
    with pytest.raises(pydantic.ValidationError, match="at least 3"):
        room(positions=2)


def test_room_positions_need_a_channel():
    with pytest.raises(pydantic.ValidationError, match="needs a channel"):
        RirRoom(arrays={"a": {"p0": {}, "p1": {"c": "x"}, "p2": {"c": "y"}}})


def test_bank_needs_a_room_in_every_home():
    with pytest.raises(pydantic.ValidationError, match="at least one room"):
        RirBank(homes={"h1": {}})


def test_select_excludes_bathrooms_by_default():
    bank = RirBank(homes={"h1": {"r1": room(), "r2": room(kind="bathroom")}})
    assert list(bank.select().homes["h1"]) == ["r1"]


def test_select_filters_homes_and_rooms():
    bank = RirBank(
        homes={"h1": {"r1": room(), "r2": room()}, "h2": {"r1": room()}},
    )

    assert list(bank.select(homes=["h2"]).homes) == ["h2"]
    selected = bank.select(rooms=["h1/r2", "h2/r1"])
    assert {home: list(rooms) for home, rooms in selected.homes.items()} == {
        "h1": ["r2"],
        "h2": ["r1"],
    }


def test_select_fails_when_nothing_matches():
    bank = RirBank(homes={"h1": {"r1": room(kind="bathroom")}})
    with pytest.raises(DataError, match="No impulse responses"):
        bank.select()


def test_toy_banks_load_and_exclude_bathrooms(tmp_path):
    index = build_toy_banks(
        tmp_path,
        speakers=3,
        utterances_per_speaker=2,
        noise_files=2,
        noise_duration_s=1.0,
        homes=2,
        rooms_per_home=1,
        arrays=1,
        channels=1,
    )
    banks = load_banks(index)

    assert banks.speakers == ["spk00", "spk01", "spk02"]
    assert len(banks.noises) == 2
    rooms = [r for h in banks.rirs.homes.values() for r in h.values()]
    assert all(r.kind != "bathroom" for r in rooms)
    assert len(load_banks(index, exclude_kinds=()).rirs.homes["home1"]) == 2


def test_toy_banks_are_deterministic(tmp_path):
    first = build_toy_banks(tmp_path / "a", seed=5, speakers=2, noise_files=1)
    second = build_toy_banks(tmp_path / "b", seed=5, speakers=2, noise_files=1)

    assert first.read_text() == second.read_text()
    path = json.loads(first.read_text())["noise"][0]["path"]
    assert (first.parent / path).read_bytes() == (second.parent / path).read_bytes()


def test_load_banks_reports_missing_assets(tmp_path):
    index = build_toy_banks(tmp_path, speakers=2, noise_files=1)
    (tmp_path / json.loads(index.read_text())["noise"][0]["path"]).unlink()

    with pytest.raises(DataError, match="missing"):
        load_banks(index)


def test_load_banks_fails_on_malformed_index(tmp_path):
    (tmp_path / "index.json").write_text('{"speech": []}')
    with pytest.raises(DataError, match="malformed"):
        load_banks(tmp_path / "index.json")


def test_banks_cache_audio(toy_banks):
    path = toy_banks.noises[0]
    assert toy_banks.audio(path) is toy_banks.audio(path)
    assert np.array_equal(
        toy_banks.audio(path).samples,
        read_wav(toy_banks.root / path).samples,
    )


def test_colored_noise_has_fixed_level():
    rng = np.random.default_rng(0)
    for color in ("white", "pink"):
        noise = colored_noise(color, 16000, rng)
        assert np.sqrt(np.mean(noise**2)) == pytest.approx(0.1)


def test_pink_noise_concentrates_energy_in_low_frequencies():
    rng = np.random.default_rng(0)
    spectrum = np.abs(np.fft.rfft(colored_noise("pink", 16000, rng))) ** 2
    assert spectrum[1:500].sum() > spectrum[4000:].sum()


def test_colored_noise_rejects_unknown_colors():
    with pytest.raises(ValueError, match="Unsupported"):
        colored_noise("brown", 100, np.random.default_rng(0))


def test_synthetic_speech_peaks_at_half_scale():
    speech = synthetic_speech(1.0, 120.0, np.random.default_rng(0))
    assert len(speech) == 16000
    assert np.max(np.abs(speech)) == pytest.approx(0.5)


def test_synthetic_rir_starts_with_the_direct_path():
    rir = synthetic_rir(0.3, np.random.default_rng(0))
    direct = int(np.flatnonzero(rir)[0])
    assert rir[direct] == 1.0
    assert len(rir) == int(0.3 * 16000)
