"""Checkpoint, sample-set and manifest serialisation.

A ``.ckpt`` file is one JSON header line followed by the network parameters
as little-endian float64 blocks in layer order ``W_1, b_1, ..., W_out, b_out``.
Sample sets are CSV with a ``x0,...,x{d-1}`` header and 17 significant digits,
which round-trips every double exactly.
"""
from __future__ import annotations

import hashlib
import json
import platform
import warnings
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .geometry import DomainSpec
from .score import MlpParams, ScoreModel

CKPT_FORMAT = "cdiff-ckpt/1"
FLOAT_FMT = "%.17g"
_LE_F8 = np.dtype("<f8")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def checkpoint_header(model: ScoreModel) -> dict:
    p = model.params
    return {
        "format": CKPT_FORMAT,
        "architecture": {"input_dim": model.input_dim, "output_dim": model.dim,
                         "hidden": p.n_hidden, "width": p.width, "activation": "sin",
                         "delta": model.delta, "T": model.T},
        "domain": model.domain.to_dict(),
        "domain_name": model.domain.name,
        "domain_hash": model.domain.hash(),
        "method": model.meta.get("method"),
        "schedule": model.meta.get("schedule"),
        "config": model.meta.get("config"),
        "iteration": model.meta.get("iteration", 0),
        "shapes": [list(s) for s in p.shapes()],
    }


def save_checkpoint(path, model: ScoreModel):
    header = json.dumps(checkpoint_header(model), sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(header.encode() + b"\n")
        for block in model.params.arrays():
            fh.write(np.ascontiguousarray(block, dtype=_LE_F8).tobytes())


def load_checkpoint(path) -> ScoreModel:
    """Rebuild a :class:`ScoreModel`; header details land in ``model.meta``."""
    raw = Path(path).read_bytes()
    cut = raw.find(b"\n")
    if cut < 0:
        raise ConfigError(f"{path}: not a checkpoint")
    try:
        header = json.loads(raw[:cut].decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: not a checkpoint") from exc
    if not isinstance(header, dict) or header.get("format") != CKPT_FORMAT:
        raise ConfigError(f"{path}: unsupported checkpoint format")
    shapes = [tuple(s) for s in header["shapes"]]
    flat = np.frombuffer(raw[cut + 1:], dtype=_LE_F8)
    if flat.size != sum(int(np.prod(s)) for s in shapes):
        raise ConfigError(f"{path}: parameter payload is truncated or oversized")
    domain = DomainSpec.from_dict(header["domain"])
    domain = DomainSpec(domain.constrained, domain.periodic_dims, name=header.get("domain_name", ""))
    if domain.hash() != header["domain_hash"]:
        raise ConfigError(f"{path}: domain hash does not match the stored domain")
    arch = header["architecture"]
    model = ScoreModel(MlpParams.from_flat(flat, shapes), domain, arch["delta"], arch["T"])
    model.meta = {k: header[k] for k in ("method", "schedule", "config", "iteration",
                                         "domain_hash")}
    return model


# ---------------------------------------------------------------------------
# Sample sets
# ---------------------------------------------------------------------------

def sample_header(d: int) -> str:
    return ",".join(f"x{i}" for i in range(d))


def write_samples_csv(path, X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    np.savetxt(path, X, fmt=FLOAT_FMT, delimiter=",", header=sample_header(X.shape[1]),
               comments="")


def read_samples_csv(path) -> np.ndarray:
    with open(path) as fh:
        names = fh.readline().strip().split(",")
    if names != sample_header(len(names)).split(","):
        raise ConfigError(f"{path}: expected a header x0,...,x{{d-1}}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # header-only files are valid
        X = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if X.size == 0:
        X = X.reshape(0, len(names))
    if X.shape[1] != len(names):
        raise ConfigError(f"{path}: rows do not match the header")
    return X


def write_samples_json(path, X):
    Path(path).write_text(json.dumps(np.asarray(X, dtype=float).tolist()) + "\n")


def read_samples_json(path) -> np.ndarray:
    return np.atleast_2d(np.asarray(json.loads(Path(path).read_text()), dtype=float))


def read_samples(path) -> np.ndarray:
    return read_samples_json(path) if str(path).endswith(".json") else read_samples_csv(path)


def write_samples(path, X):
    if str(path).endswith(".json"):
        write_samples_json(path, X)
    else:
        write_samples_csv(path, X)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def versions() -> dict:
    import numba
    import scipy

    from . import __version__
    return {"cdiff": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__}


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def write_manifest(path, command: str, config: dict, seed, extra=None) -> Path:
    """Write ``<path>.manifest.json`` describing how ``path`` was produced."""
    doc = {"artifact": Path(path).name, "command": command, "config": config,
           "config_hash": config_hash(config), "seed": seed, "versions": versions()}
    if extra:
        doc.update(extra)
    out = manifest_path(path)
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out
