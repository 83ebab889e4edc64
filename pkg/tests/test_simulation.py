import pytest

from toolkit.simulator import MANIFEST, load_manifest


@pytest.mark.integration
def test_start_splits_the_examples_in_shards(simulation_run):
    data = simulation_run["start"].task.data
    assert data.indices == [[0, 1, 2], [3, 4, 5]]
    assert data.simulation.prior.probabilities == (0.60, 0.35, 0.05)


@pytest.mark.integration
def test_join_writes_the_manifest_in_example_order(simulation_run):
    data = simulation_run["join"].task.data
    rows = load_manifest(f"{data.out}/{MANIFEST}")

    assert [row.spec.index for row in rows] == list(range(6))
    assert data.summary["count"] == 6
