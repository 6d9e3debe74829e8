"""Benchmark command line for the differentiable particle filter.

Subcommands::

    flowfilter simulate     write train/val/test splits for an experiment
    flowfilter train        fit a model variant per seed; curves + checkpoints
    flowfilter evaluate     score a checkpoint (or the truth) on the test split
    flowfilter convergence  error-vs-ensemble-size study for the resamplers

Configuration is an INI file (``key = value`` under ``[experiment]``,
``[filter]``, ``[training]``, ``[convergence]``); every key has a default so
the file and any individual key are optional.  ``--seed``, ``--out``, and
``--paper-scale`` override the file.  See ``docs/config.md`` for the schema.

All CSV outputs start with a ``# config=<hash> ...`` comment followed by a
header row.  Given the same configuration and seed, every artifact except
``report.json`` and ``timing.json`` (which record wall-clock time) is
byte-identical across runs.  Exit codes: 0 success, 2 configuration error,
3 numeric failure.
"""

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from flowfilter import autodiff as ad
from flowfilter import filter as flt
from flowfilter import models as md
from flowfilter import resampling as rs
from flowfilter import training as tr
from flowfilter.autodiff import ParamStore
from flowfilter.filter import FilterConfig
from flowfilter.flows import FlowError

__all__ = ["ExperimentConfig", "ConfigError", "load_config", "config_digest",
           "main"]

_KINDS = ("lgssm1d", "lgssm-multi", "disk", "convergence")
_VARIANTS = ("nf-dpf", "aesmc", "aesmc-bootstrap")
_DISK_VARIANTS = ("nf-dpf", "aesmc-bootstrap")

# split-seed streams (mixed with the base seed through SeedSequence)
_STREAMS = {"train": 0x51A0, "val": 0x51A1, "test": 0x51A2}
_VARIANT_STREAM = 0xB111D       # variant initialization rng
_CONV_DATA_STREAM = 0xC09F      # convergence-study trajectories
_CONV_FILTER_STREAM = 0xF117    # convergence-study filter noise

# default split sizes per experiment kind: (train, val, test)
_DESK_SIZES = {"lgssm1d": (0, 50, 50), "lgssm-multi": (0, 50, 50),
               "disk": (60, 10, 10)}
_PAPER_SIZES = {"lgssm1d": (0, 1000, 1000), "lgssm-multi": (0, 1000, 1000),
                "disk": (500, 50, 50)}

_NUMERIC_ERRORS = (ad.NumericError, flt.FilterError, rs.ResamplingError,
                   FlowError, md.ModelError, tr.TrainingError)


class ConfigError(Exception):
    """Invalid configuration file, flag combination, or referenced path."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Fully resolved settings for one benchmark command."""

    kind: str = "lgssm1d"
    dimension: int = 1
    variant: str = "nf-dpf"
    seeds: tuple = (0, 1, 2, 3, 4)
    out: str = "runs"
    paper_scale: bool = False
    train_size: int = 0
    val_size: int = 50
    test_size: int = 50
    filter: FilterConfig = field(default_factory=FilterConfig)
    # training
    iterations: int = 500
    k_sequences: int = 10
    horizon: int = 50
    lr: float = 0.002
    loss: str = "elbo"
    val_every: int = 10
    val_count: int = 10
    clip_norm: float = None
    # convergence study
    grid: tuple = (25, 50, 100, 200, 400, 800)
    seeds_per_cell: int = 20
    conv_horizon: int = 20
    constant: float = 0.5
    probe_particles: int = 100
    probe_epsilons: tuple = (1.0, 10.0)


def _int_tuple(text: str) -> tuple:
    return tuple(int(tok) for tok in text.replace(",", " ").split())


def _float_tuple(text: str) -> tuple:
    return tuple(float(tok) for tok in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (ExperimentConfig attribute or filter field, parser)
_SCHEMA = {
    "experiment": {
        "kind": ("kind", str),
        "dimension": ("dimension", int),
        "variant": ("variant", str),
        "seeds": ("seeds", _int_tuple),
        "out": ("out", str),
        "paper_scale": ("paper_scale", _bool),
        "train_size": ("train_size", int),
        "val_size": ("val_size", int),
        "test_size": ("test_size", int),
    },
    "filter": {
        "n_particles": ("filter.n_particles", int),
        "ess_min": ("filter.ess_min", float),
        "resampler": ("filter.resampler", str),
        "epsilon": ("filter.epsilon", float),
        "max_iter": ("filter.max_iter", int),
        "tol": ("filter.tol", float),
    },
    "training": {
        "iterations": ("iterations", int),
        "k_sequences": ("k_sequences", int),
        "horizon": ("horizon", int),
        "lr": ("lr", float),
        "loss": ("loss", str),
        "val_every": ("val_every", int),
        "val_count": ("val_count", int),
        "clip_norm": ("clip_norm", float),
    },
    "convergence": {
        "grid": ("grid", _int_tuple),
        "seeds_per_cell": ("seeds_per_cell", int),
        "horizon": ("conv_horizon", int),
        "constant": ("constant", float),
        "probe_particles": ("probe_particles", int),
        "probe_epsilons": ("probe_epsilons", _float_tuple),
    },
}


def _read_ini(path) -> dict:
    """INI file -> {attribute: parsed value}; unknown keys are errors."""
    import configparser

    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config file: {err}")
    except configparser.Error as err:
        raise ConfigError(f"malformed config file: {err}")
    values = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(
                f"unknown config section [{section}]; "
                f"expected one of {sorted(_SCHEMA)}"
            )
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(
                    f"unknown key {key!r} in section [{section}]; "
                    f"expected one of {sorted(_SCHEMA[section])}"
                )
            if raw.strip() == "":
                continue
            attr, parse = _SCHEMA[section][key]
            try:
                values[attr] = parse(raw)
            except ValueError as err:
                raise ConfigError(f"bad value for [{section}] {key}: {err}")
    return values


def load_config(path=None, seed=None, out=None, paper_scale=False
                ) -> ExperimentConfig:
    """Resolve the configuration from an optional INI file plus overrides.

    ``seed`` replaces the seed list with a single entry; ``paper_scale``
    upgrades any setting the file left at its default (seed count, split
    sizes, convergence repetitions) to the full published protocol.
    """
    values = _read_ini(path) if path else {}
    if out is not None:
        values["out"] = str(out)
    if seed is not None:
        values["seeds"] = (int(seed),)
    if paper_scale:
        values["paper_scale"] = True

    filter_kw = {a.split(".", 1)[1]: v for a, v in values.items()
                 if a.startswith("filter.")}
    plain = {a: v for a, v in values.items() if not a.startswith("filter.")}

    cfg = ExperimentConfig(**plain)
    if cfg.kind not in _KINDS:
        raise ConfigError(f"unknown experiment kind {cfg.kind!r}; "
                          f"expected one of {_KINDS}")
    if cfg.variant not in _VARIANTS:
        raise ConfigError(f"unknown variant {cfg.variant!r}; "
                          f"expected one of {_VARIANTS}")
    if cfg.kind == "disk" and cfg.variant not in _DISK_VARIANTS:
        raise ConfigError(
            f"the disk experiment supports variants {_DISK_VARIANTS}, "
            f"not {cfg.variant!r}"
        )
    if cfg.kind == "lgssm1d" and "dimension" in plain and cfg.dimension != 1:
        raise ConfigError("lgssm1d is one-dimensional; use lgssm-multi")
    if cfg.kind == "lgssm-multi" and cfg.dimension < 2:
        raise ConfigError("lgssm-multi needs dimension >= 2")
    if cfg.kind == "disk":
        cfg.dimension = 2
    if cfg.kind == "lgssm1d":
        cfg.dimension = 1
    if not cfg.seeds:
        raise ConfigError("seed list is empty")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("seed list has duplicates")
    if any(s < 0 for s in cfg.seeds):
        raise ConfigError("seeds must be non-negative")
    if cfg.iterations < 0 or cfg.horizon < 1 or cfg.k_sequences < 1:
        raise ConfigError("iterations >= 0, horizon >= 1, k_sequences >= 1")
    if cfg.loss not in ("elbo", "rmse"):
        raise ConfigError(f"unknown loss {cfg.loss!r}")
    if any(n < 2 for n in cfg.grid) or len(cfg.grid) < 2:
        raise ConfigError("convergence grid needs >= 2 entries, each >= 2")
    if cfg.seeds_per_cell < 1:
        raise ConfigError("seeds_per_cell must be positive")

    # paper-scale upgrades for settings still at their desk defaults
    if cfg.paper_scale:
        if "seeds" not in values:
            cfg.seeds = tuple(range(50))
        if "seeds_per_cell" not in plain:
            cfg.seeds_per_cell = 50
    sizes = (_PAPER_SIZES if cfg.paper_scale else _DESK_SIZES).get(cfg.kind)
    if sizes is not None:
        if "train_size" not in plain:
            cfg.train_size = sizes[0]
        if "val_size" not in plain:
            cfg.val_size = sizes[1]
        if "test_size" not in plain:
            cfg.test_size = sizes[2]
    if min(cfg.train_size, cfg.val_size, cfg.test_size) < 0:
        raise ConfigError("split sizes must be non-negative")

    try:
        cfg.filter = FilterConfig(**filter_kw)
    except flt.FilterError as err:
        raise ConfigError(f"bad [filter] settings: {err}")
    return cfg


def config_digest(cfg: ExperimentConfig) -> str:
    """Short stable hash of every resolved setting except the output path."""
    blob = dataclasses.asdict(cfg)
    del blob["out"]
    blob["seeds"] = list(cfg.seeds)
    blob["grid"] = list(cfg.grid)
    blob["probe_epsilons"] = list(cfg.probe_epsilons)
    raw = json.dumps(blob, sort_keys=True).encode("utf-8")
    return hashlib.sha256(raw).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _derive(*words) -> int:
    return int(np.random.SeedSequence([int(w) for w in words])
               .generate_state(1)[0])


def _comment(cfg: ExperimentConfig) -> str:
    return (f"config={config_digest(cfg)} kind={cfg.kind} "
            f"variant={cfg.variant}")


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path, header, rows, comment: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(cfg: ExperimentConfig) -> Path:
    path = Path(cfg.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def build_truth(cfg: ExperimentConfig) -> md.SsmSpec:
    if cfg.kind == "disk":
        return md.make_disk_truth()
    return md.make_lgssm_truth(cfg.dimension)


def build_variant(cfg: ExperimentConfig, store: ParamStore, seed: int
                  ) -> md.SsmSpec:
    rng = np.random.default_rng(
        np.random.SeedSequence([int(seed), _VARIANT_STREAM])
    )
    if cfg.kind == "disk":
        return md.make_disk_variant(cfg.variant, store, rng)
    return md.make_lgssm_variant(cfg.variant, cfg.dimension, store, rng)


def _filter_for(cfg: ExperimentConfig, seed: int, resampler=None,
                n_particles=None, epsilon=None) -> FilterConfig:
    base = cfg.filter
    return FilterConfig(
        n_particles=n_particles if n_particles is not None else base.n_particles,
        ess_min=None if n_particles is not None else base.ess_min,
        resampler=resampler if resampler is not None else base.resampler,
        epsilon=epsilon if epsilon is not None else base.epsilon,
        max_iter=base.max_iter, tol=base.tol, seed=seed,
    )


def _load_split(data_dir, name: str):
    if data_dir is None:
        return None
    path = Path(data_dir) / f"{name}.nfd"
    if not path.exists():
        return None
    return md.load_dataset(path)


def _kalman_means(truth: md.SsmSpec, dataset: md.Dataset) -> np.ndarray:
    """Exact posterior-mean trajectories, one row per sequence."""
    refs = []
    for i in range(len(dataset)):
        traj = dataset[i]
        refs.append(md.kalman_filter(truth, traj.observations,
                                     actions=traj.actions).means)
    return np.stack(refs)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: ExperimentConfig) -> int:
    if cfg.kind == "convergence":
        raise ConfigError("the convergence study simulates its own data; "
                          "pick an lgssm or disk experiment kind")
    out = _out_dir(cfg)
    truth = build_truth(cfg)
    base = cfg.seeds[0]
    comment = _comment(cfg)
    splits = {"train": cfg.train_size, "val": cfg.val_size,
              "test": cfg.test_size}
    manifest = {"kind": cfg.kind, "dimension": cfg.dimension,
                "horizon": cfg.horizon, "config": config_digest(cfg),
                "base_seed": base, "splits": {}}
    for name, size in splits.items():
        entry = {"size": size}
        if size > 0:
            split_seed = _derive(base, _STREAMS[name])
            dataset = md.simulate_dataset(truth, cfg.horizon, size,
                                          seed=split_seed)
            path = out / f"{name}.nfd"
            md.save_dataset(path, dataset)
            entry.update(seed=split_seed, path=path.name,
                         sha256=_sha256(path))
            if size <= 200:
                md.dataset_to_csv(dataset, out / f"{name}.csv",
                                  comment=f"{comment} split={name}")
        manifest["splits"][name] = entry
    _write_json(out / "manifest.json", manifest)
    for name, entry in manifest["splits"].items():
        print(f"simulate: {name} size={entry['size']}"
              + (f" sha256={entry['sha256'][:12]}" if entry["size"] else ""))
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _curve_rows(report: tr.TrainReport):
    """Merged per-iteration timeline: loss rows plus validation rows."""
    start = report.start_iteration
    loss_at = {start + i: report.loss[i] for i in range(len(report.loss))}
    val_at = {it: k for k, it in enumerate(report.val_iterations)}
    rows = []
    for it in sorted(set(loss_at) | set(val_at)):
        row = [it, loss_at.get(it)]
        if it in val_at:
            k = val_at[it]
            row += [report.val_loss[k], report.val_elbo[k],
                    report.val_mean_ess[k], report.val_param_dist[k],
                    report.val_traj_err[k]]
        else:
            row += [None] * 5
        rows.append(row)
    return rows


_CURVE_HEADER = ["iteration", "loss", "val_loss", "val_elbo", "val_mean_ess",
                 "val_param_dist", "val_traj_err"]
_SUMMARY_HEADER = ["seed", "iterations_run", "best_iteration", "best_val_loss",
                   "val_loss", "val_elbo", "val_mean_ess", "val_param_dist",
                   "val_traj_err", "skipped_steps", "final_lr", "aborted"]


def _summary_row(seed, report: tr.TrainReport):
    return [seed, len(report.loss), report.best_iteration,
            report.best_val_loss, report.val_loss[-1], report.val_elbo[-1],
            report.val_mean_ess[-1], report.val_param_dist[-1],
            report.val_traj_err[-1], report.skipped_steps, report.final_lr,
            report.aborted or ""]


def cmd_train(cfg: ExperimentConfig, data_dir=None, resume=None) -> int:
    if cfg.kind == "convergence":
        raise ConfigError("use the convergence subcommand for that study")
    if resume is not None and len(cfg.seeds) != 1:
        raise ConfigError("--resume expects a single seed (use --seed)")
    out = _out_dir(cfg)
    truth = build_truth(cfg)
    comment = _comment(cfg)

    train_ds = _load_split(data_dir, "train")
    val_ds = _load_split(data_dir, "val")
    for name, ds in (("train", train_ds), ("val", val_ds)):
        if ds is not None and ds.states.shape[2] != truth.d_x:
            raise ConfigError(f"{name} split has state dimension "
                              f"{ds.states.shape[2]}, expected {truth.d_x}")
    if train_ds is None and cfg.train_size > 0:
        train_ds = md.simulate_dataset(
            truth, cfg.horizon, cfg.train_size,
            seed=_derive(cfg.seeds[0], _STREAMS["train"]),
        )
    if val_ds is None:
        val_ds = md.simulate_dataset(
            truth, cfg.horizon, cfg.val_count,
            seed=_derive(cfg.seeds[0], _STREAMS["val"]),
        )
    if train_ds is not None and cfg.k_sequences > len(train_ds):
        raise ConfigError(
            f"k_sequences={cfg.k_sequences} exceeds the fixed training "
            f"pool of {len(train_ds)} sequences"
        )

    summary_rows, report_blobs, timing = [], {}, {}
    any_aborted = False
    for seed in cfg.seeds:
        seed_dir = out / f"seed{seed:03d}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        store = ParamStore()
        spec = build_variant(cfg, store, seed)
        t_config = tr.TrainConfig(
            iterations=cfg.iterations, k_sequences=cfg.k_sequences,
            horizon=cfg.horizon, lr=cfg.lr, loss=cfg.loss,
            val_every=cfg.val_every, val_count=cfg.val_count, seed=seed,
            clip_norm=cfg.clip_norm,
            checkpoint_path=str(seed_dir / "best.ckpt"),
            filter=dataclasses.replace(cfg.filter, seed=seed),
        )
        start = 0
        adam = tr.AdamState.for_store(store, cfg.lr)
        if resume is not None:
            try:
                adam, extra = tr.load_training_state(resume, store)
            except (OSError, KeyError, ad.AutodiffError) as err:
                raise ConfigError(f"cannot resume from {resume}: {err}")
            if extra.get("seed") != seed:
                raise ConfigError(
                    f"checkpoint was trained with seed {extra.get('seed')}, "
                    f"not {seed}"
                )
            start = int(extra["iteration"])
        tic = time.perf_counter()
        report = tr.train(spec, store, truth, t_config, dataset=train_ds,
                          val_set=val_ds, start_iteration=start, adam=adam)
        timing[f"seed{seed:03d}"] = time.perf_counter() - tic
        tr.save_training_state(seed_dir / "last.ckpt", store, adam,
                               start + len(report.loss), t_config)
        report.save_json(seed_dir / "report.json")
        _write_csv(seed_dir / "train_curve.csv", _CURVE_HEADER,
                   _curve_rows(report), f"{comment} seed={seed}")
        summary_rows.append(_summary_row(seed, report))
        report_blobs[f"seed{seed:03d}"] = {
            "best_iteration": report.best_iteration,
            "best_val_loss": float(report.best_val_loss),
            "val_loss": float(report.val_loss[-1]),
            "val_param_dist": float(report.val_param_dist[-1]),
            "val_traj_err": float(report.val_traj_err[-1]),
            "val_mean_ess": float(report.val_mean_ess[-1]),
            "aborted": report.aborted,
        }
        if report.aborted:
            any_aborted = True
            print(f"train: seed={seed} ABORTED ({report.aborted})",
                  file=sys.stderr)
        else:
            print(f"train: seed={seed} best_iter={report.best_iteration} "
                  f"val_loss={report.val_loss[-1]:.4f} "
                  f"param_dist={report.val_param_dist[-1]:.4f}")

    finished = [r for r in summary_rows if r[-1] == ""]
    for label, reducer in (("mean", np.mean), ("std", np.std)):
        if finished:
            agg = [label] + [
                reducer([row[i] for row in finished]) for i in range(1, 11)
            ] + [""]
            summary_rows.append(agg)
    _write_csv(out / "summary.csv", _SUMMARY_HEADER, summary_rows, comment)
    _write_json(out / "summary.json",
                {"config": config_digest(cfg), "kind": cfg.kind,
                 "variant": cfg.variant, "seeds": report_blobs})
    _write_json(out / "timing.json", {"seconds": timing})
    return 3 if any_aborted else 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

_EVAL_HEADER = ["kind", "variant", "seed", "n_test", "horizon", "n_particles",
                "resampler", "epsilon", "loglik", "kalman_loglik",
                "loglik_gap", "mean_ess", "param_dist", "traj_err", "rmse",
                "mse_per_step"]


def cmd_evaluate(cfg: ExperimentConfig, checkpoint=None, data_dir=None,
                 at_truth=False) -> int:
    if cfg.kind == "convergence":
        raise ConfigError("use the convergence subcommand for that study")
    if at_truth and checkpoint is not None:
        raise ConfigError("--at-truth and --checkpoint are mutually exclusive")
    if not at_truth and checkpoint is None:
        raise ConfigError("evaluate needs --checkpoint PATH or --at-truth")
    out = _out_dir(cfg)
    truth = build_truth(cfg)
    seed = cfg.seeds[0]

    test = _load_split(data_dir, "test")
    if test is None:
        if cfg.test_size < 1:
            raise ConfigError("test_size must be >= 1 to evaluate")
        test = md.simulate_dataset(truth, cfg.horizon, cfg.test_size,
                                   seed=_derive(seed, _STREAMS["test"]))
    if test.observations.shape[2] != truth.d_y:
        raise ConfigError(
            f"test split has observation dimension "
            f"{test.observations.shape[2]}, expected {truth.d_y}"
        )

    if at_truth:
        spec, store, label = truth, None, "truth"
    else:
        store = ParamStore()
        spec = build_variant(cfg, store, seed)
        try:
            params, _, _ = ad.load_checkpoint(checkpoint)
        except OSError as err:
            raise ConfigError(f"cannot read checkpoint: {err}")
        except ad.AutodiffError as err:
            raise ConfigError(f"bad checkpoint: {err}")
        missing = sorted(set(store.names()) - set(params))
        surplus = sorted(set(params) - set(store.names()))
        if missing or surplus:
            raise ConfigError(
                f"checkpoint does not match the configured variant "
                f"(missing {missing}, unexpected {surplus})"
            )
        try:
            store.set_values(params)
        except ad.AutodiffError as err:
            raise ConfigError(
                f"checkpoint does not match the configured variant: {err}"
            )
        label = cfg.variant

    if truth.kalman_coeffs is None:
        raise ConfigError("evaluation reference requires a linear-Gaussian "
                          "generative truth")
    kal = [md.kalman_filter(truth, test[i].observations,
                            actions=test[i].actions)
           for i in range(len(test))]
    kal_means = np.stack([k.means for k in kal])
    kal_logliks = np.array([k.loglik for k in kal])

    tic = time.perf_counter()
    fcfg = dataclasses.replace(cfg.filter, seed=seed)
    with ad.no_grad():
        reports, tensors = flt.run_filter(spec, test.observations, fcfg,
                                          actions=test.actions)
    seconds = time.perf_counter() - tic

    means = tensors.means.data                       # (n_test, T+1, d_x)
    logliks = tensors.loglik.data
    horizon = means.shape[1] - 1
    seq_ess = np.array([r.mean_ess() for r in reports])
    seq_err = np.sqrt(np.sum((means - kal_means) ** 2, axis=(1, 2)))
    seq_rmse = np.sqrt(np.sum((means - test.states) ** 2, axis=(1, 2))
                       / horizon)
    if at_truth:
        param_dist = 0.0
    elif spec.theta_star:
        param_dist = tr.parameter_distance(store, spec.theta_star)
    else:
        param_dist = float("nan")

    metrics = {
        "kind": cfg.kind, "variant": label, "seed": seed,
        "n_test": len(test), "horizon": horizon,
        "n_particles": fcfg.n_particles, "resampler": fcfg.resampler,
        "epsilon": fcfg.epsilon,
        "loglik": float(np.mean(logliks)),
        "kalman_loglik": float(np.mean(kal_logliks)),
        "loglik_gap": float(np.mean(logliks - kal_logliks)),
        "mean_ess": float(np.mean(seq_ess)),
        "param_dist": float(param_dist),
        "traj_err": float(np.mean(seq_err)),
        "rmse": float(np.mean(seq_rmse)),
        "mse_per_step": float(np.mean((means - kal_means) ** 2)),
    }
    comment = _comment(cfg)
    _write_csv(out / "metrics.csv", _EVAL_HEADER,
               [[metrics[k] for k in _EVAL_HEADER]], comment)
    _write_json(out / "metrics.json",
                dict(metrics, config=config_digest(cfg)))
    _write_csv(
        out / "sequences.csv",
        ["sequence", "loglik", "kalman_loglik", "mean_ess", "traj_err",
         "rmse"],
        [[i, logliks[i], kal_logliks[i], seq_ess[i], seq_err[i], seq_rmse[i]]
         for i in range(len(test))],
        comment,
    )
    _write_json(out / "timing.json", {"seconds": {"evaluate": seconds}})
    print(f"evaluate: {label} loglik={metrics['loglik']:.3f} "
          f"gap={metrics['loglik_gap']:.3f} ess={metrics['mean_ess']:.1f} "
          f"traj_err={metrics['traj_err']:.3f}")
    return 0


# ---------------------------------------------------------------------------
# convergence
# ---------------------------------------------------------------------------

def _gauss_hermite_tanh(means: np.ndarray, variances: np.ndarray
                        ) -> np.ndarray:
    """E[tanh(X)] for X ~ N(mean, variance), elementwise via 64-node GH."""
    nodes, weights = np.polynomial.hermite.hermgauss(64)
    shifted = means[..., None] + np.sqrt(2.0 * variances)[..., None] * nodes
    return np.tanh(shifted) @ weights / np.sqrt(np.pi)


def _mse_rows(label, resampler, n, epsilon, beta, ref):
    per_seed = np.mean((beta - ref) ** 2, axis=1)        # (seeds,)
    return [label, resampler, n, epsilon, float(np.median(per_seed)),
            float(np.mean(per_seed)), float(np.std(per_seed)), len(per_seed)]


_CONV_HEADER = ["psi", "resampler", "n_particles", "epsilon", "median_mse",
                "mean_mse", "std_mse", "n_seeds"]


def cmd_convergence(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    truth = md.make_lgssm_truth(1)
    base = cfg.seeds[0]
    T = cfg.conv_horizon
    dataset = md.simulate_dataset(truth, T, cfg.seeds_per_cell,
                                  seed=_derive(base, _CONV_DATA_STREAM))
    kal = [md.kalman_filter(truth, dataset[i].observations)
           for i in range(len(dataset))]
    ref_x = np.stack([k.means[:, 0] for k in kal])               # (S, T+1)
    variances = np.stack([k.covariances[:, 0, 0] for k in kal])
    ref_tanh = _gauss_hermite_tanh(ref_x, variances)

    functionals = {"x": lambda x: x, "tanh": np.tanh}
    rows, timing = [], {}
    medians = {}
    for n in cfg.grid:
        epsilon = rs.epsilon_schedule(n, c=cfg.constant)
        for arm, resampler in enumerate(("ot", "multinomial")):
            fcfg = _filter_for(cfg, _derive(base, _CONV_FILTER_STREAM, n, arm),
                               resampler=resampler, n_particles=n,
                               epsilon=epsilon)
            tic = time.perf_counter()
            with ad.no_grad():
                _, tensors = flt.run_filter(truth, dataset.observations, fcfg,
                                            functionals=functionals)
            timing[f"{resampler}-n{n}"] = time.perf_counter() - tic
            for psi, ref in (("x", ref_x), ("tanh", ref_tanh)):
                row = _mse_rows(psi, resampler, n, epsilon,
                                tensors.functionals[psi][:, :, 0], ref)
                rows.append(row)
                medians[(psi, resampler)] = medians.get((psi, resampler), [])
                medians[(psi, resampler)].append((n, row[4]))

    slopes = {}
    for (psi, resampler), pairs in medians.items():
        ns = np.log([p[0] for p in pairs])
        ms = np.log([p[1] for p in pairs])
        slopes[f"{psi}/{resampler}"] = float(np.polyfit(ns, ms, 1)[0])

    probe_rows = []
    n = cfg.probe_particles
    # one shared filter seed: probe rows differ only in the regularization
    probe_seed = _derive(base, _CONV_FILTER_STREAM, n, 100)
    for epsilon in ([rs.epsilon_schedule(n, c=cfg.constant)]
                    + list(cfg.probe_epsilons)):
        fcfg = _filter_for(cfg, probe_seed, resampler="ot", n_particles=n,
                           epsilon=epsilon)
        with ad.no_grad():
            _, tensors = flt.run_filter(truth, dataset.observations, fcfg,
                                        functionals={"x": lambda x: x})
        probe_rows.append(_mse_rows("x", "ot", n, epsilon,
                                    tensors.functionals["x"][:, :, 0], ref_x))

    comment = _comment(cfg)
    _write_csv(out / "convergence.csv", _CONV_HEADER, rows, comment)
    _write_csv(out / "epsilon_probe.csv", _CONV_HEADER, probe_rows, comment)
    _write_json(out / "summary.json",
                {"config": config_digest(cfg), "grid": list(cfg.grid),
                 "seeds_per_cell": cfg.seeds_per_cell,
                 "horizon": T, "slopes": slopes})
    _write_json(out / "timing.json", {"seconds": timing})
    for key in sorted(slopes):
        print(f"convergence: slope[{key}] = {slopes[key]:.3f}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE",
                        help="INI configuration file (see docs/config.md)")
    common.add_argument("--seed", type=int, metavar="N",
                        help="replace the configured seed list with one seed")
    common.add_argument("--out", metavar="DIR",
                        help="output directory (created if missing)")
    common.add_argument("--paper-scale", action="store_true",
                        help="full published protocol (more seeds and data)")

    parser = argparse.ArgumentParser(
        prog="flowfilter",
        description="Benchmark harness for flow-based differentiable "
                    "particle filtering.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common],
                   help="write train/val/test splits")
    p_train = sub.add_parser("train", parents=[common],
                             help="fit a variant per seed")
    p_train.add_argument("--data", metavar="DIR",
                         help="directory with splits from `simulate`")
    p_train.add_argument("--resume", metavar="CKPT",
                         help="continue from a last.ckpt (single seed only)")
    p_eval = sub.add_parser("evaluate", parents=[common],
                            help="score a checkpoint on the test split")
    p_eval.add_argument("--checkpoint", metavar="CKPT",
                        help="trained checkpoint to evaluate")
    p_eval.add_argument("--data", metavar="DIR",
                        help="directory with splits from `simulate`")
    p_eval.add_argument("--at-truth", action="store_true",
                        help="evaluate the generative truth instead of a "
                             "checkpoint")
    sub.add_parser("convergence", parents=[common],
                   help="error-vs-ensemble-size study")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out,
                          paper_scale=args.paper_scale)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "train":
            return cmd_train(cfg, data_dir=args.data, resume=args.resume)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, checkpoint=args.checkpoint,
                                data_dir=args.data, at_truth=args.at_truth)
        return cmd_convergence(cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"file error: {err}", file=sys.stderr)
        return 2
    except _NUMERIC_ERRORS as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
