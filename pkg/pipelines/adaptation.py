import logging
import os
from pathlib import Path

from common import (
    PYTHON,
    configure_logging,
    expand_environment,
    packages,
)
from metaflow import (
    Config,
    FlowSpec,
    Parameter,
    card,
    conda_base,
    current,
    project,
    resources,
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
        "mlflow",
        "pyloudnorm",
    ),
)
class Adaptation(FlowSpec):
    """Adaptation pipeline.

    This pipeline pre-trains a teacher enhancer on labeled source-domain mixtures,
    adapts a student to unlabeled target-domain audio with RemixIT, and registers
    the best student checkpoint in MLflow.
    """

    config = Config(
        "config",
        help="Enhancer, pre-training, and adaptation configuration.",
        default=None,
    )

    mlflow_tracking_uri = Parameter(
        "mlflow-tracking-uri",
        help="Location of the MLflow tracking server.",
        default=os.getenv("MLFLOW_TRACKING_URI", "https://127.0.0.1:5000"),
    )

    unlabeled = Parameter(
        "unlabeled",
        help="Directory of unlabeled target-domain audio.",
        default="adaptation/unlabeled",
    )

    dev_manifest = Parameter(
        "dev-manifest",
        help="Manifest of the labeled dev set used to select the student.",
        default="adaptation/dev/manifest.jsonl",
    )

    pretrain_manifest = Parameter(
        "pretrain-manifest",
        help="Manifest of the labeled source-domain set. Leave empty to skip.",
        default="",
    )

    seed = Parameter(
        "seed",
        help="Seed of the data shuffling.",
        default=0,
    )

    @card
    @step
    def start(self):
        """Start and prepare the Adaptation pipeline."""
        import mlflow
        from toolkit.remixit import AdaptConfig, PretrainConfig

        mlflow.set_tracking_uri(self.mlflow_tracking_uri)
        logging.info("MLflow tracking server: %s", self.mlflow_tracking_uri)

        settings = expand_environment(self.config.to_dict()) if self.config else {}
        self.enhancer_kind = settings.get("enhancer", "enhancer.GainEnhancer")
        self.enhancer_options = settings.get("enhancer_options", {})
        self.pretrain_config = PretrainConfig.model_validate(
            settings.get("pretrain", {}),
        )
        self.adapt_config = AdaptConfig.model_validate(
            {**settings.get("adapt", {}), "seed": self.seed},
        )

        try:
            # Let's start a new MLflow run to track the execution of this flow. We want
            # to set the name of the MLflow run to the Metaflow run ID so we can easily
            # recognize how they relate to each other.
            run = mlflow.start_run(run_name=current.run_id)
            self.mlflow_run_id = run.info.run_id
        except Exception as e:
            message = f"Failed to connect to MLflow server {self.mlflow_tracking_uri}."
            raise RuntimeError(message) from e

        mlflow.log_params(
            {
                "enhancer": self.enhancer_kind,
                "batch_size": self.adapt_config.batch_size,
                "epochs": self.adapt_config.epochs,
                "learning_rate": self.adapt_config.learning_rate,
                "ema_gamma": self.adapt_config.ema.gamma,
                "vad_filter": self.adapt_config.vad_filter,
            },
        )
        mlflow.end_run()

        self.next(self.pretrain)

    @resources(memory=4096)
    @step
    def pretrain(self):
        """Pre-train the teacher on the labeled source-domain set."""
        import mlflow
        from enhancers.enhancer import load_enhancer
        from toolkit.remixit import evaluate_enhancer, load_labeled, pretrain
        from toolkit.simulator import load_manifest

        mlflow.set_tracking_uri(self.mlflow_tracking_uri)

        self.teacher = load_enhancer(self.enhancer_kind, None, self.enhancer_options)

        # Without a source-domain set, the teacher is adapted as it was initialized.
        if self.pretrain_manifest:
            manifest = Path(self.pretrain_manifest)
            examples = load_labeled(load_manifest(manifest), manifest.parent)
            self.teacher, losses = pretrain(
                self.teacher,
                examples,
                self.pretrain_config,
                self.seed,
            )

            for epoch, loss in enumerate(losses, start=1):
                mlflow.log_metrics(
                    {"pretrain_loss": loss},
                    step=epoch,
                    run_id=self.mlflow_run_id,
                )

        manifest = Path(self.dev_manifest)
        self.dev_score = evaluate_enhancer(
            self.teacher,
            load_labeled(load_manifest(manifest), manifest.parent),
        )
        logging.info("Teacher dev SI-SDR: %.3f dB", self.dev_score)

        self.next(self.adapt)

    @resources(memory=4096)
    @step
    def adapt(self):
        """Adapt the student to the unlabeled target-domain audio."""
        import mlflow
        from toolkit.remixit import adapt, load_labeled, load_unlabeled
        from toolkit.simulator import load_manifest

        mlflow.set_tracking_uri(self.mlflow_tracking_uri)

        manifest = Path(self.dev_manifest)
        result = adapt(
            self.adapt_config,
            self.teacher,
            load_unlabeled(self.unlabeled),
            load_labeled(load_manifest(manifest), manifest.parent),
        )

        # Let's track the loss and the dev score of every epoch. The initialization
        # is logged as epoch 0 and has no loss.
        for entry in result.log:
            metrics = {"dev_si_sdr": entry.dev_si_sdr}
            if entry.loss is not None:
                metrics["loss"] = entry.loss
            mlflow.log_metrics(metrics, step=entry.epoch, run_id=self.mlflow_run_id)

        self.log = [entry.model_dump() for entry in result.log]
        self.student = self.teacher.with_params(result.params)
        self.best_epoch = result.epoch
        self.best_dev_score = result.dev_score

        logging.info(
            "Best student from epoch %d: %.3f dB (teacher %.3f dB)",
            self.best_epoch,
            self.best_dev_score,
            self.dev_score,
        )

        self.next(self.register)

    @step
    def register(self):
        """Register the best student checkpoint as an MLflow artifact."""
        import tempfile

        import mlflow
        from common import write_jsonl
        from toolkit.remixit import EpochLog, save_checkpoint

        mlflow.set_tracking_uri(self.mlflow_tracking_uri)

        with (
            mlflow.start_run(run_id=self.mlflow_run_id),
            tempfile.TemporaryDirectory() as directory,
        ):
            checkpoint = Path(directory) / "student.json"
            save_checkpoint(
                checkpoint,
                self.student,
                self.best_epoch,
                self.best_dev_score,
            )

            log = Path(directory) / "log.jsonl"
            write_jsonl(
                log,
                (EpochLog(**entry).model_dump_json() for entry in self.log),
            )

            mlflow.log_metric("best_dev_si_sdr", self.best_dev_score)
            mlflow.log_artifact(checkpoint.as_posix(), artifact_path="checkpoint")
            mlflow.log_artifact(log.as_posix(), artifact_path="checkpoint")

        self.next(self.end)

    @step
    def end(self):
        """End the Adaptation pipeline."""
        logging.info("The pipeline finished successfully.")


if __name__ == "__main__":
    Adaptation()
