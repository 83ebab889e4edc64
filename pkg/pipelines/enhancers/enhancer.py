import copy
import hashlib
import importlib
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import signal
from scipy.special import expit

from common import ConfigurationError, DataError
from toolkit.audio import Waveform
from toolkit.metrics import neg_si_sdr_loss, si_sdr_gradient


@dataclass(frozen=True, eq=False)
class EnhancerParams:
    """Flat vector of trainable enhancer parameters."""

    theta: np.ndarray

    def __post_init__(self):
        """Validate the parameters and freeze the underlying array."""
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(theta)):
            message = "Enhancer parameters must be finite."
            raise ValueError(message)

        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    def __len__(self) -> int:
        return self.theta.shape[0]


class Enhancer(ABC):
    """Abstract class defining the interface of a speech enhancer.

    An enhancer splits a mixture into a speech estimate and a noise estimate, both
    with the length of the mixture. Enhancers never mutate their parameters;
    training produces new instances through `with_params`.
    """

    def __init__(self, params: EnhancerParams | None = None) -> None:
        """Initialize the enhancer with the supplied or the default parameters."""
        self.params = params if params is not None else self.default_params()
        if len(self.params) != self.dimension:
            message = (
                f"{self.kind} expects {self.dimension} parameters, "
                f"got {len(self.params)}."
            )
            raise ValueError(message)

    @property
    def kind(self) -> str:
        """Dotted name used to load the enhancer from a checkpoint."""
        return f"enhancer.{type(self).__name__}"

    @property
    @abstractmethod
    def dimension(self) -> int:
        """Number of trainable parameters."""

    def default_params(self) -> EnhancerParams:
        return EnhancerParams(np.zeros(self.dimension))

    def options(self) -> dict[str, Any]:
        """Return the constructor arguments needed to rebuild this enhancer."""
        return {}

    def with_params(self, params: EnhancerParams) -> "Enhancer":
        """Return a copy of this enhancer using the supplied parameters."""
        if len(params) != self.dimension:
            message = f"Expected {self.dimension} parameters, got {len(params)}."
            raise ValueError(message)

        clone = copy.copy(self)
        clone.params = params
        return clone

    @abstractmethod
    def enhance(self, mixture: Waveform) -> tuple[Waveform, Waveform]:
        """Return the speech and noise estimates of a mixture."""

    def loss_and_gradient(
        self,
        mixture: Waveform,
        speech_target: Waveform,
        noise_target: Waveform,
    ) -> tuple[float, np.ndarray | None]:
        """Return the training loss on one example and its parameter gradient.

        Enhancers without an analytic gradient return None as the gradient and
        are trained with finite differences.
        """
        speech, noise = self.enhance(mixture)
        return neg_si_sdr_loss(speech, noise, speech_target, noise_target), None


class GainEnhancer(Enhancer):
    """Complementary spectral gain with one learnable logit per frequency band.

    The speech estimate keeps a sigmoid-shaped fraction of every band of the
    short-time spectrum, and the noise estimate is the rest of the mixture, so
    both estimates always add up to the mixture.
    """

    def __init__(
        self,
        params: EnhancerParams | None = None,
        bands: int = 32,
        nperseg: int = 512,
        noverlap: int = 256,
    ) -> None:
        """Initialize the enhancer with `bands` equal-width frequency bands."""
        if not 0 < bands <= nperseg // 2 + 1:
            bins = nperseg // 2 + 1
            message = f"Cannot split {bins} frequency bins in {bands} bands."
            raise ValueError(message)

        self.bands = bands
        self.nperseg = nperseg
        self.noverlap = noverlap
        super().__init__(params)

    @property
    def dimension(self) -> int:
        return self.bands

    def options(self) -> dict[str, Any]:
        return {"bands": self.bands, "nperseg": self.nperseg, "noverlap": self.noverlap}

    def band_components(self, mixture: Waveform) -> np.ndarray:
        """Return the time-domain contribution of every band, shaped (bands, samples).

        The components add up to the mixture.
        """
        length = len(mixture)
        if length < self.nperseg:
            message = f"Mixtures need at least {self.nperseg} samples, got {length}."
            raise DataError(message)

        _, _, spectrum = signal.stft(
            mixture.samples,
            nperseg=self.nperseg,
            noverlap=self.noverlap,
        )

        edges = np.linspace(0, spectrum.shape[0], self.bands + 1).round().astype(int)
        masks = np.zeros((self.bands, spectrum.shape[0]))
        for band in range(self.bands):
            masks[band, edges[band] : edges[band + 1]] = 1.0

        _, components = signal.istft(
            masks[:, :, None] * spectrum[None],
            nperseg=self.nperseg,
            noverlap=self.noverlap,
        )
        return components[:, :length]

    def enhance(self, mixture: Waveform) -> tuple[Waveform, Waveform]:
        speech = expit(self.params.theta) @ self.band_components(mixture)
        return (
            Waveform(speech, mixture.sample_rate),
            Waveform(mixture.samples - speech, mixture.sample_rate),
        )

    def loss_and_gradient(
        self,
        mixture: Waveform,
        speech_target: Waveform,
        noise_target: Waveform,
    ) -> tuple[float, np.ndarray]:
        components = self.band_components(mixture)
        weights = expit(self.params.theta)

        speech = weights @ components
        noise = mixture.samples - speech

        speech_score, speech_gradient = si_sdr_gradient(speech, speech_target.samples)
        noise_score, noise_gradient = si_sdr_gradient(noise, noise_target.samples)

        # The noise estimate moves opposite to the speech estimate in every band.
        gradient = components @ (speech_gradient - noise_gradient)
        gradient = -0.5 * weights * (1 - weights) * gradient
        return -0.5 * (speech_score + noise_score), gradient


class OracleEnhancer(Enhancer):
    """Enhancer returning the true references of the mixtures it was given.

    Mixtures are recognized by a fingerprint of their samples.
    """

    def __init__(self, params: EnhancerParams | None = None) -> None:
        """Initialize an oracle without any known mixture."""
        self.references: dict[str, tuple[Waveform, Waveform]] = {}
        super().__init__(params)

    @property
    def dimension(self) -> int:
        return 0

    @staticmethod
    def fingerprint(w: Waveform) -> str:
        return hashlib.sha256(w.samples.tobytes()).hexdigest()

    def register(self, mixture: Waveform, speech: Waveform, noise: Waveform):
        self.references[self.fingerprint(mixture)] = (speech, noise)

    def enhance(self, mixture: Waveform) -> tuple[Waveform, Waveform]:
        key = self.fingerprint(mixture)
        if key not in self.references:
            message = "The oracle does not know the references of this mixture."
            raise ValueError(message)

        return self.references[key]


def load_enhancer(
    kind: str,
    theta: list[float] | np.ndarray | None = None,
    options: dict[str, Any] | None = None,
) -> Enhancer:
    """Instantiate the enhancer class named by `kind` with the supplied parameters."""
    try:
        module, cls = kind.rsplit(".", 1)
        module = importlib.import_module(module)
        params = EnhancerParams(theta) if theta is not None else None
        enhancer = getattr(module, cls)(params=params, **(options or {}))
    except Exception as e:
        message = f"There was an error instantiating enhancer {kind}."
        raise ConfigurationError(message) from e
    else:
        logging.info("Enhancer: %s", kind)
        return enhancer
