import logging
from pathlib import Path

from common import (
    PYTHON,
    configure_logging,
    expand_environment,
    packages,
    write_jsonl,
)
from metaflow import (
    Config,
    FlowSpec,
    Parameter,
    card,
    conda_base,
    project,
    step,
)

configure_logging()


@project(name="udase")
@conda_base(
    python=PYTHON,
    packages=packages(
        "numpy",
        "scipy",
        "pandas",
        "pydantic",
        "soundfile",
        "joblib",
    ),
)
class Simulation(FlowSpec):
    """Simulation pipeline.

    This pipeline generates a dataset of reverberant multi-speaker noisy mixtures
    from a bank of clean speech, noise, and room impulse responses. The examples
    are split into shards that run in parallel, and every example draws its random
    choices from its own stream, so the dataset does not depend on the number of
    shards.
    """

    config = Config(
        "config",
        help="Simulation configuration (speaker-count prior, SNR sampler, lengths).",
        default=None,
    )

    banks = Parameter(
        "banks",
        help="Location of the bank index file.",
        default="banks/index.json",
    )

    out = Parameter(
        "out",
        help="Output directory of the simulated dataset.",
        default="simulation",
    )

    count = Parameter(
        "count",
        help="Number of mixtures that will be generated.",
        default=100,
    )

    seed = Parameter(
        "seed",
        help="Master seed of the dataset.",
        default=0,
    )

    prior = Parameter(
        "prior",
        help="Speaker-count prior, either `eval` or `train`.",
        default="eval",
    )

    shards = Parameter(
        "shards",
        help="Number of shards generated in parallel.",
        default=4,
    )

    @card
    @step
    def start(self):
        """Validate the configuration and the banks, and split the work in shards."""
        import numpy as np
        from toolkit.banks import load_banks
        from toolkit.simulator import SimulationConfig, SpeakerCountPrior

        settings = expand_environment(self.config.to_dict()) if self.config else {}
        settings["prior"] = SpeakerCountPrior.from_mode(self.prior)
        self.simulation = SimulationConfig.model_validate(settings)

        # Let's load the banks once here so a missing asset fails the flow before
        # any shard starts working.
        load_banks(self.banks)

        # Every shard receives a contiguous range of example indices. Empty shards
        # are skipped, but a foreach needs at least one branch.
        self.indices = [
            [int(i) for i in shard]
            for shard in np.array_split(np.arange(self.count), self.shards)
            if len(shard)
        ] or [[]]
        logging.info(
            "Simulating %d examples in %d shards",
            self.count,
            len(self.indices),
        )

        self.next(self.simulate, foreach="indices")

    @step
    def simulate(self):
        """Generate the examples of one shard."""
        from toolkit.banks import load_banks
        from toolkit.simulator import simulate_examples

        banks = load_banks(self.banks)
        rows = simulate_examples(
            self.simulation,
            banks,
            self.input,
            self.out,
            self.seed,
        )

        # We store the serialized manifest rows so the join step can write the
        # manifest without loading any audio.
        self.rows = [(row.spec.index, row.model_dump_json()) for row in rows]
        logging.info("Shard generated %d examples", len(rows))

        self.next(self.join)

    @card
    @step
    def join(self, inputs):
        """Write the manifest in example order and summarize the dataset."""
        from toolkit.simulator import MANIFEST, ManifestRow, summarize_manifest

        rows = sorted(row for i in inputs for row in i.rows)
        write_jsonl(Path(self.out) / MANIFEST, [record for _, record in rows])

        self.summary = summarize_manifest(
            [ManifestRow.model_validate_json(record) for _, record in rows],
        ).model_dump()
        logging.info("Summary: %s", self.summary)

        self.next(self.end)

    @step
    def end(self):
        """End the Simulation pipeline."""
        logging.info("The dataset is ready in %s", self.out)


if __name__ == "__main__":
    Simulation()
