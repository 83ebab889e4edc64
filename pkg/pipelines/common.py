import json
import logging
import logging.config
import os
import re
import sys
import tomllib
from collections.abc import Iterable
from pathlib import Path
from typing import Any

PYTHON = "3.12.8"

SAMPLE_RATE = 16000

PACKAGES = {
    "numpy": "1.26.4",
    "scipy": "1.14.1",
    "pandas": "2.2.3",
    "pydantic": "2.10.6",
    "soundfile": "0.13.1",
    "mlflow": "2.20.2",
    "pyloudnorm": "0.1.1",
}


class ToolkitError(Exception):
    """Base class for the errors raised by the toolkit."""


class ConfigurationError(ToolkitError):
    """The supplied configuration is invalid or references missing paths."""


class DataError(ToolkitError):
    """The input data is missing, malformed, or inconsistent."""


def packages(*names: str):
    """Return a dictionary of the specified packages and their corresponding version.

    This function is useful to set up the different pipelines while keeping the
    package versions consistent and centralized in a single location.

    Any packages that should be locked to a specific version will be part of the
    `PACKAGES` dictionary. If a package is not present in the dictionary, it will be
    installed using the latest version available.
    """
    return {name: PACKAGES.get(name, "") for name in names}


def configure_logging():
    """Configure logging handlers and return a logger instance."""
    if Path("logging.conf").exists():
        logging.config.fileConfig("logging.conf")
    else:
        logging.basicConfig(
            format="%(asctime)s [%(levelname)s] %(message)s",
            handlers=[logging.StreamHandler(sys.stdout)],
            level=logging.INFO,
        )


def expand_environment(value: Any) -> Any:
    """Expand ${ENVIRONMENT_VARIABLE} references in every string of a config tree.

    Unknown variables are left untouched so the validation step can report them.
    """
    pattern = re.compile(r"\$\{(\w+)\}")

    def replacer(match):
        env_var = match.group(1)
        return os.getenv(env_var, f"${{{env_var}}}")

    if isinstance(value, str):
        return pattern.sub(replacer, value)
    if isinstance(value, dict):
        return {key: expand_environment(item) for key, item in value.items()}
    if isinstance(value, list):
        return [expand_environment(item) for item in value]
    return value


def load_config_file(path: str | Path | None) -> dict:
    """Load a JSON or TOML configuration file into a dictionary.

    A missing `path` returns an empty configuration so every setting falls back to
    its default value or to the command-line flags.
    """
    if path is None:
        return {}

    path = Path(path)
    if not path.exists():
        message = f"Configuration file {path} does not exist."
        raise ConfigurationError(message)

    try:
        if path.suffix == ".toml":
            data = tomllib.loads(path.read_text())
        else:
            data = json.loads(path.read_text())
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        message = f"Configuration file {path} could not be parsed."
        raise ConfigurationError(message) from e

    if not isinstance(data, dict):
        message = f"Configuration file {path} must contain an object."
        raise ConfigurationError(message)

    return expand_environment(data)


def write_jsonl(path: str | Path, records: Iterable[str]) -> int:
    """Write pre-serialized JSON records to a JSON-lines file.

    Records are written in the order they are received, one per line, which keeps
    the output byte-identical across reruns.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    count = 0
    with path.open("w", encoding="utf-8", newline="\n") as file:
        for record in records:
            file.write(record)
            file.write("\n")
            count += 1

    return count


def read_jsonl(path: str | Path) -> list[dict]:
    """Read every record of a JSON-lines file."""
    path = Path(path)
    if not path.exists():
        message = f"Manifest {path} does not exist."
        raise DataError(message)

    records = []
    with path.open(encoding="utf-8") as file:
        for number, line in enumerate(file, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                message = f"Line {number} of {path} is not valid JSON."
                raise DataError(message) from e

    return records
