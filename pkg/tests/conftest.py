import json
import tempfile
from pathlib import Path

import pytest
from metaflow import Runner

from toolkit.banks import build_toy_banks, load_banks
from toolkit.simulator import SimulationConfig, SnrSamplerConfig, simulate_dataset


@pytest.fixture(scope="session")
def mlflow_directory():
    temporal_directory = tempfile.gettempdir()
    return (Path(temporal_directory) / "mlflow").as_posix()


@pytest.fixture(scope="session")
def toy_banks_index(tmp_path_factory):
    """Return the index of a small synthetic bank shared by every test."""
    return build_toy_banks(
        tmp_path_factory.mktemp("banks"),
        seed=0,
        speakers=4,
        utterances_per_speaker=3,
        noise_files=4,
        noise_duration_s=2.0,
        homes=2,
        rooms_per_home=1,
        arrays=1,
        positions=3,
        channels=1,
    )


@pytest.fixture(scope="session")
def toy_banks(toy_banks_index):
    return load_banks(toy_banks_index)


@pytest.fixture(scope="session")
def simulated(tmp_path_factory, toy_banks):
    """Simulate a small dataset and return its directory and manifest rows."""
    directory = tmp_path_factory.mktemp("simulated")
    rows = simulate_dataset(
        SimulationConfig(snr=SnrSamplerConfig(mean_db=10.0)),
        toy_banks,
        count=8,
        out_dir=directory,
        master_seed=3,
    )
    return directory, rows


@pytest.fixture
def write_transcript():
    """Return a function that writes a transcript JSON file."""

    def _write(path, session_id, duration_s, utterances, excluded_speaker=None):
        data = {
            "session_id": session_id,
            "duration_s": duration_s,
            "excluded_speaker": excluded_speaker,
            "utterances": [
                {"speaker": speaker, "start_s": start, "end_s": end}
                for speaker, start, end in utterances
            ],
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data))
        return path

    return _write


@pytest.fixture(scope="session")
def simulation_run(toy_banks_index, tmp_path_factory):
    with Runner(
        "pipelines/simulation.py",
        show_output=False,
    ).run(
        banks=toy_banks_index.as_posix(),
        out=tmp_path_factory.mktemp("flow").as_posix(),
        count=6,
        seed=1,
        shards=2,
    ) as running:
        return running.run


@pytest.fixture(scope="session")
def adaptation_run(mlflow_directory, simulated):
    directory, _ = simulated
    with Runner(
        "pipelines/adaptation.py",
        show_output=False,
    ).run(
        mlflow_tracking_uri=mlflow_directory,
        unlabeled=(directory / "audio").as_posix(),
        dev_manifest=(directory / "manifest.jsonl").as_posix(),
        pretrain_manifest=(directory / "manifest.jsonl").as_posix(),
    ) as running:
        return running.run
