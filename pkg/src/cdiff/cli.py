"""``cdiff`` command-line front end.

Subcommands: gen-data, train, sample, eval and forward-viz.  Settings come
from one JSON run config (``--config``) whose fields can be overridden by
flags; ``CDIFF_SEED`` overrides the config seed and ``--seed`` overrides both.
Every artifact gets a ``<file>.manifest.json`` with the config hash, seed and
library versions.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import CdiffError, ConfigError, NumericalError
from .geometry import DomainSpec, make_domain

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

DEFAULT_CONFIG = {
    "domain": {"kind": "hypercube", "dim": 2},
    "method": "reflected",
    "schedule": {"T": 1.0, "N": 1000, "beta_min": 0.001, "beta_max": 6.0},
    "train": {"profile": "desk"},
    "data": {"n": 10000, "mixture": None},
    "sampling": {"n": 10000, "lambda0": [1.0], "psi": 0.0, "workers": 1},
    "eval": {"bandwidth": "median-heuristic", "m": None},
    "seed": 0,
    "output_dir": ".",
}


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------

def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "domain":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, env=None) -> dict:
    """Defaults, then the JSON file at ``path``, then ``CDIFF_SEED``."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(DEFAULT_CONFIG)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = _merge(cfg, doc)
        if isinstance(cfg["domain"], str):
            cfg["domain"] = _read_domain_file(Path(path).parent / cfg["domain"])
    env = os.environ if env is None else env
    if env.get("CDIFF_SEED"):
        try:
            cfg["seed"] = int(env["CDIFF_SEED"])
        except ValueError as exc:
            raise ConfigError("CDIFF_SEED must be an integer") from exc
    return cfg


def _read_domain_file(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read domain file {path}: {exc}") from exc


def build_domain(doc) -> DomainSpec:
    """Domain from ``{"kind": ..., **params}`` or a serialised constraint set."""
    if not isinstance(doc, dict):
        raise ConfigError("domain must be an object or a path to a JSON file")
    try:
        if "kind" in doc:
            kw = {k: v for k, v in doc.items() if k != "kind"}
            return make_domain(doc["kind"], **kw)
        return DomainSpec.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad domain: {exc}") from exc


def build_schedule(doc):
    from .schedule import NoiseSchedule
    try:
        return NoiseSchedule(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad schedule: {exc}") from exc


def build_train_config(doc, seed):
    from .score import TrainConfig
    doc = dict(doc)
    profile = doc.pop("profile", "desk")
    doc.setdefault("seed", seed)
    try:
        if profile == "desk":
            return TrainConfig.desk(**doc)
        if profile == "full":
            return TrainConfig.from_dict(doc)
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from exc
    raise ConfigError(f"unknown train profile {profile!r}")


def _out_path(cfg, given, default_name):
    if given is not None:
        return Path(given)
    return Path(cfg["output_dir"]) / default_name


def _seeded(cfg, args):
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def _finish(path, command, cfg, extra=None):
    from .io import write_manifest
    write_manifest(path, command, cfg, cfg.get("seed"), extra)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .io import write_samples
    from .sampling import Mixture, default_mixture, make_synthetic_dataset

    cfg = _seeded(load_config(args.config), args)
    if args.n is not None:
        cfg["data"]["n"] = args.n
    domain = build_domain(cfg["domain"])
    mix_doc = cfg["data"].get("mixture")
    mixture = Mixture.from_dict(mix_doc) if mix_doc else default_mixture(domain)
    cfg["data"]["mixture"] = mixture.to_dict()
    n = int(cfg["data"]["n"])
    if n < 1:
        raise ConfigError("data.n must be positive")
    X = make_synthetic_dataset(domain, mixture, n, np.random.default_rng(cfg["seed"]))
    out = _out_path(cfg, args.out, "data.csv")
    write_samples(out, X)
    _finish(out, "gen-data", cfg, {"domain_hash": domain.hash()})
    print(f"wrote {n} points to {out}")
    print("mean " + " ".join(f"{v:.6g}" for v in X.mean(axis=0)))
    print("std  " + " ".join(f"{v:.6g}" for v in X.std(axis=0)))
    print("min  " + " ".join(f"{v:.6g}" for v in X.min(axis=0)))
    print("max  " + " ".join(f"{v:.6g}" for v in X.max(axis=0)))
    return EXIT_OK


def cmd_train(args) -> int:
    from .io import read_samples, save_checkpoint
    from .sampling import check_method
    from .score import train

    cfg = _seeded(load_config(args.config), args)
    if args.method is not None:
        cfg["method"] = args.method
    if args.iters is not None:
        cfg["train"]["total_iters"] = args.iters
        if args.iters < cfg["train"].get("warmup_iters", 1000):
            cfg["train"]["warmup_iters"] = args.iters // 2
    domain = build_domain(cfg["domain"])
    schedule = build_schedule(cfg["schedule"])
    tcfg = build_train_config(cfg["train"], cfg["seed"])
    check_method(cfg["method"], domain)
    data = read_samples(args.data)
    ckpt = _out_path(cfg, args.out, "model.ckpt")
    loss_path = Path(args.loss_csv) if args.loss_csv else ckpt.with_suffix(".loss.csv")
    rows = []
    model = train(data, domain, schedule, cfg["method"], tcfg,
                  callback=lambda it, loss, lr: rows.append(f"{it},{loss!r},{lr!r}\n"))
    save_checkpoint(ckpt, model)
    with open(loss_path, "w") as fh:
        fh.write("iteration,loss,lr\n")
        fh.writelines(rows)
    resolved = dict(cfg, train=tcfg.to_dict())
    _finish(ckpt, "train", resolved, {"data": Path(args.data).name})
    _finish(loss_path, "train", resolved)
    print(f"trained {tcfg.total_iters} iterations; checkpoint {ckpt}")
    return EXIT_OK


def _lambda_path(out: Path, lam, many):
    if not many:
        return out
    return out.with_name(f"{out.stem}_lambda0-{lam:g}{out.suffix}")


def cmd_sample(args) -> int:
    from .io import load_checkpoint, write_samples
    from .sampling import LowTempConfig, backward_sample
    from .errors import ModelDomainMismatchError

    cfg = _seeded(load_config(args.config), args)
    s = cfg["sampling"]
    for key in ("n", "lambda0", "psi", "workers"):
        if getattr(args, key) is not None:
            s[key] = getattr(args, key)
    lambdas = s["lambda0"] if isinstance(s["lambda0"], list) else [s["lambda0"]]
    model = load_checkpoint(args.ckpt)
    if args.config is not None:
        if build_domain(cfg["domain"]).hash() != model.domain.hash():
            raise ModelDomainMismatchError("checkpoint domain differs from the config domain")
    method = model.meta["method"]
    schedule = build_schedule(model.meta["schedule"])
    cfg.update(method=method, schedule=schedule.to_dict(), domain=model.domain.to_dict())
    out = _out_path(cfg, args.out, "samples.csv")
    for lam in lambdas:
        try:
            lowtemp = LowTempConfig(float(lam), float(s["psi"]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        X = backward_sample(model, method, model.domain, schedule, int(s["n"]), lowtemp,
                            np.random.default_rng(cfg["seed"]), workers=int(s["workers"]))
        path = _lambda_path(out, float(lam), len(lambdas) > 1)
        write_samples(path, X)
        _finish(path, "sample", cfg, {"checkpoint": Path(args.ckpt).name, "lambda0": float(lam),
                                      "psi": float(s["psi"])})
        inside = float(np.mean(model.domain.contains(X))) if len(X) else 1.0
        print(f"wrote {len(X)} samples to {path} (inside fraction {inside:.6g})")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import KernelSpec, histogram, metrics_report
    from .io import read_samples

    cfg = _seeded(load_config(args.config), args)
    if args.bandwidth is not None:
        cfg["eval"]["bandwidth"] = args.bandwidth
    if args.m is not None:
        cfg["eval"]["m"] = args.m
    bw = cfg["eval"]["bandwidth"]
    try:
        kernel = KernelSpec("rbf", bw if bw == "median-heuristic" else float(bw))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    A, B = read_samples(args.a), read_samples(args.b)
    if A.shape[1] != B.shape[1]:
        raise ConfigError(f"sample files have {A.shape[1]} and {B.shape[1]} coordinates")
    m = cfg["eval"]["m"]
    if m is not None:
        A, B = A[:int(m)], B[:int(m)]
    report = metrics_report(A, B, kernel, seed=cfg["seed"])
    out = _out_path(cfg, args.out, "metrics.json")
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    eval_cfg = {"eval": cfg["eval"], "seed": cfg["seed"]}
    _finish(out, "eval", eval_cfg, {"a": Path(args.a).name, "b": Path(args.b).name})
    if args.hist_out:
        lo = np.minimum(A.min(axis=0), B.min(axis=0))
        hi = np.maximum(A.max(axis=0), B.max(axis=0))
        hi = np.where(hi > lo, hi, lo + 1.0)
        Path(args.hist_out).write_text(histogram(A, args.bins, np.stack([lo, hi], 1)).to_csv())
        _finish(args.hist_out, "eval", dict(eval_cfg, bins=args.bins))
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def forward_viz(domain, schedule, x0, rng):
    """Unconstrained, barrier and reflected chains from ``x0`` with shared noise.

    Returns times ``(N + 1,)`` and states ``(3, N + 1, d)``.
    """
    from .sampling import domain_move

    x0 = np.asarray(x0, dtype=float).reshape(1, -1)
    if x0.shape[1] != domain.dimension:
        raise ConfigError(f"x0 has {x0.shape[1]} coordinates, domain has {domain.dimension}")
    if not domain.contains(x0)[0]:
        raise ConfigError("x0 must lie strictly inside the domain")
    gamma = schedule.gamma
    paths = np.empty((3, schedule.N + 1, domain.dimension))
    paths[:, 0] = x0
    free, bar, ref = x0.copy(), x0.copy(), x0.copy()
    for k in range(schedule.N):
        beta = float(schedule.beta(k * gamma))
        z = rng.standard_normal(x0.shape)
        free = free + np.sqrt(gamma * beta) * z
        bar = domain_move(bar, "barrier", domain, gamma, beta, z)
        ref = domain_move(ref, "reflected", domain, gamma, beta, z)
        paths[0, k + 1], paths[1, k + 1], paths[2, k + 1] = free[0], bar[0], ref[0]
    return schedule.times(), paths


def cmd_forward_viz(args) -> int:
    from .geometry import interior_point
    from .sampling import check_method

    cfg = _seeded(load_config(args.config), args)
    if args.domain is not None:
        cfg["domain"] = json.loads(args.domain)
    domain = build_domain(cfg["domain"])
    check_method("barrier", domain)
    schedule = build_schedule(cfg["schedule"])
    if args.x0 is not None:
        x0 = [float(v) for v in args.x0.split(",")]
    else:
        x0 = list(interior_point(domain.constrained)) if domain.constrained is not None else []
        x0 += [np.pi] * domain.periodic_dims
    cfg["x0"] = x0
    times, paths = forward_viz(domain, schedule, x0, np.random.default_rng(cfg["seed"]))
    out = _out_path(cfg, args.out, "forward_viz.csv")
    d = domain.dimension
    cols = ["t"] + [f"{name}_x{i}" for name in ("unconstrained", "barrier", "reflected")
                    for i in range(d)]
    table = np.column_stack([times] + [paths[j, :, i] for j in range(3) for i in range(d)])
    np.savetxt(out, table, fmt="%.17g", delimiter=",", header=",".join(cols), comments="")
    _finish(out, "forward-viz", cfg)
    print(f"wrote {len(times)} time points to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cdiff", description="Diffusion models on inequality-constrained domains.",
        epilog="Exit codes: 0 success, 2 config/input error, 3 numerical failure. "
               "CDIFF_SEED overrides the config seed.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int, help="random seed (overrides config and CDIFF_SEED)")
        sp.add_argument("--out", help="output file (default: under config output_dir)")

    g = sub.add_parser("gen-data", help="write a synthetic mixture dataset as CSV")
    common(g)
    g.add_argument("--n", type=int, help="number of points")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="fit a score model; writes .ckpt and a loss CSV")
    common(t)
    t.add_argument("--data", required=True, help="training set (CSV or JSON)")
    t.add_argument("--method", choices=("barrier", "reflected"), help="noising process")
    t.add_argument("--iters", type=int, help="total training iterations")
    t.add_argument("--loss-csv", help="loss curve path (default: <ckpt>.loss.csv)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    common(s)
    s.add_argument("--ckpt", required=True, help="checkpoint file")
    s.add_argument("--n", type=int, help="number of samples")
    s.add_argument("--lambda0", type=float, nargs="+",
                   help="low-temperature lambda0 values; one output file per value")
    s.add_argument("--psi", type=float, help="low-temperature noise inflation (>= 0)")
    s.add_argument("--workers", type=int, help="threads; 1 gives bit-reproducible output")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="MMD^2 between two sample files")
    common(e)
    e.add_argument("a", help="first sample file")
    e.add_argument("b", help="second sample file")
    e.add_argument("--bandwidth", help="RBF bandwidth or 'median-heuristic'")
    e.add_argument("--m", type=int, help="use the first m rows of each file")
    e.add_argument("--hist-out", help="also write a histogram CSV of the first file")
    e.add_argument("--bins", type=int, default=50, help="histogram bins per coordinate")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("forward-viz", help="three forward traces driven by shared noise")
    common(f)
    f.add_argument("--domain", help="inline JSON domain, e.g. '{\"kind\": \"interval\"}'")
    f.add_argument("--x0", help="comma-separated start point (default: an interior point)")
    f.set_defaults(func=cmd_forward_viz)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"cdiff: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CdiffError, ValueError, OSError) as exc:
        print(f"cdiff: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
