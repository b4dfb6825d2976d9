"""JSON configuration files and delimited data files.

A model configuration is a JSON object with the keys

    kind   "hmm" | "lgssm" | "sv"
    theta  list of parameter values
    K, M   state and alphabet sizes (hmm only; M defaults to K)

Run configurations nest it under "model" next to run parameters such as
"seed". Floats are written with repr so a load of a save returns the
original object exactly.

Observation files are single-column CSVs: ``# key=value`` metadata lines,
a ``y`` header row, one value per line.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import __version__
from .models import ModelSpec, Theta, make_finite_hmm, make_lgssm, make_sv

MODEL_KINDS = ("hmm", "lgssm", "sv")


def model_from_config(cfg: dict) -> tuple[ModelSpec, Theta]:
    """Instantiate a model family and parameter vector from a config object."""
    kind = cfg.get("kind")
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; choose from {MODEL_KINDS}")
    if kind == "hmm":
        k = int(cfg["K"])
        m = int(cfg.get("M", k))
        theta = Theta(np.asarray(cfg["theta"], dtype=float), ("trans_logit", "emis_scale"))
        return make_finite_hmm(k, theta, m), theta
    theta = Theta(np.asarray(cfg["theta"], dtype=float), ("phi", "sigma", "beta"))
    if kind == "lgssm":
        return make_lgssm(theta), theta
    return make_sv(theta), theta


def model_config(kind: str, theta: Theta, k: int | None = None, m: int | None = None) -> dict:
    cfg: dict = {"kind": kind, "theta": [float(v) for v in theta.values]}
    if kind == "hmm":
        cfg["K"] = int(k)
        cfg["M"] = int(m if m is not None else k)
    return cfg


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def save_config(path, cfg: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, meta: dict, header: list[str], rows) -> None:
    """Write a CSV with ``# key=value`` metadata lines before the header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# generator=pfgrad-{__version__}\n")
        for key, value in meta.items():
            fh.write(f"# {key}={value}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_observations(path, ys: np.ndarray, meta: dict) -> None:
    write_csv(path, meta, ["y"], ([y] for y in np.asarray(ys).tolist()))


def read_observations(path) -> tuple[np.ndarray, dict]:
    """Read a single-column observation CSV, returning values and metadata.

    Values written without a decimal point or exponent come back as an
    integer array (discrete observation alphabets round-trip as ints).
    """
    meta: dict = {}
    literals: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        header_seen = False
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                meta[key.strip()] = val.strip()
                continue
            if not header_seen:
                header_seen = True  # column name row
                continue
            literals.append(line.split(",")[0])
    integral = all(("." not in lit and "e" not in lit and "E" not in lit) for lit in literals)
    if literals and integral:
        return np.asarray([int(lit) for lit in literals]), meta
    return np.asarray([float(lit) for lit in literals]), meta
