"""Config-driven command-line front end.

Every command reads a JSON or TOML config, validates it, and writes its
outputs plus a ``manifest.json`` into a fresh run directory named by the
config hash under ``--out``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import numpy as np
from pydantic import (BaseModel, ConfigDict, Field, FilePath, ValidationError, field_validator,
                      model_validator)

from . import __version__
from .analysis import (distance_to_trainset, lipschitz_profile, pairwise_distance_matrix,
                       psnr_curve, two_sample_statistic, write_curves, write_json, write_profile)
from .closedform import cone_field, gaussian_field
from .core import Dataset, denoiser_from_velocity, velocity_from_denoiser
from .datasets import GENERATORS, fig5a_3pt
from .io import load_dataset, write_csv, write_fmdt
from .net import NetModel, ParametrizedDenoiser, TimeEmbedding, load_checkpoint, save_checkpoint
from .restoration import load_problem, pnp_flow_inpaint
from .sampling import (IntegratorSpec, PerturbationSpec, calibrate_schedule, paired_sample,
                       perturb_denoiser, sample, write_trajectory)
from .training import (PiecewiseDenoiser, RegSpec, TrainConfig, WeightingScheme, train,
                       train_ensemble_10)

log = logging.getLogger("fmdt")

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


class ConfigError(Exception):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# ---------------------------------------------------------------- model specs

class CheckpointModel(_Strict):
    kind: Literal["checkpoint"]
    path: FilePath
    ema: bool = True


class ClosedFormModel(_Strict):
    kind: Literal["closed_form"]
    dataset: FilePath
    source: Literal["gaussian", "uniform"] = "gaussian"
    fd_step: float = Field(1e-5, gt=0)


class EnsembleModel(_Strict):
    kind: Literal["ensemble"]
    paths: list[FilePath] = Field(min_length=1)
    ema: bool = True


ModelSpec = Annotated[Union[CheckpointModel, ClosedFormModel, EnsembleModel],
                      Field(discriminator="kind")]


def build_denoiser(spec):
    """A (denoiser, velocity) pair for a model spec."""
    if spec.kind == "checkpoint":
        pd = load_checkpoint(spec.path)
        pd = pd.ema() if spec.ema and pd.ema_weights is not None else pd
        D = pd.as_denoiser()
        return D, velocity_from_denoiser(D)
    if spec.kind == "ensemble":
        pds = [load_checkpoint(p) for p in spec.paths]
        pds = [p.ema() if spec.ema and p.ema_weights is not None else p for p in pds]
        D = PiecewiseDenoiser(pds)
        return D, velocity_from_denoiser(D)
    ds = load_dataset(spec.dataset)
    v = gaussian_field(ds) if spec.source == "gaussian" else cone_field(ds, spec.fd_step)
    return denoiser_from_velocity(v), v


class IntegratorSection(_Strict):
    scheme: Literal["euler", "heun", "rk4", "rk45"] = "rk4"
    steps: int = Field(100, ge=1)
    rtol: float = Field(1e-5, gt=0)
    atol: float = Field(1e-7, gt=0)
    eps_end: float = Field(1e-3, ge=0, lt=1)
    terminal_jump: bool = True

    def build(self) -> IntegratorSpec:
        return IntegratorSpec(**self.model_dump())


# ---------------------------------------------------------------- command configs

class _Command(_Strict):
    seed: int = Field(0, ge=0)


class GenDataConfig(_Command):
    kind: Literal["k-points", "fig5a-3pt", "gaussian-mixture", "checkerboard", "blobs"]
    n: int = Field(1000, ge=1)
    k: int = Field(3, ge=1)
    d: int = Field(2, ge=1)
    options: dict[str, float] = {}


class TrainSection(_Strict):
    epochs: int = Field(100, ge=1)
    steps: Optional[int] = Field(None, ge=1)
    batch_size: int = Field(128, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0)
    ema_decay: float = Field(0.999, ge=0, lt=1)
    t_sampling: Optional[tuple[float, float]] = None
    t_eps: float = Field(1e-3, gt=0, lt=1)
    reg_fraction: float = Field(0.025, ge=0, le=1)
    source: Literal["gaussian", "uniform"] = "gaussian"


class RegSection(_Strict):
    t_min: float = Field(0.1, ge=0, le=1)
    t_max: float = Field(0.3, ge=0, le=1)
    lam: float = Field(0.1, ge=0)
    M: float = Field(4.0, gt=0)
    power_iters: int = Field(10, ge=1)


class NetSection(_Strict):
    hidden: list[int] = [64, 64]
    activation: Literal["tanh", "gelu"] = "gelu"
    frequencies: Optional[list[float]] = None
    klass: Literal["C_NN", "C_IplusNN"] = "C_IplusNN"


class TrainCmdConfig(_Command):
    dataset: FilePath
    weighting: str = "fm"
    w_cap: float = Field(1e4, gt=0)
    net: NetSection = NetSection()
    train: TrainSection = TrainSection()
    regularizer: Optional[RegSection] = None
    ensemble: bool = False

    @field_validator("weighting")
    @classmethod
    def _known_weighting(cls, v):
        WeightingScheme.parse(v)
        return v


class SampleConfig(_Command):
    model: ModelSpec
    n_samples: int = Field(100, ge=1)
    integrator: IntegratorSection = IntegratorSection()
    dump_trajectories: int = Field(0, ge=0)


class PerturbSection(_Strict):
    direction: Literal["checkerboard", "posshift", "negshift", "residual"]
    t_min: float = Field(ge=0, le=1)
    t_max: float = Field(ge=0, le=1)
    patch_size: int = Field(1, ge=1)
    ratio: Optional[float] = Field(0.9, gt=0, le=1)
    level: Optional[list[tuple[float, float]]] = None


class PerturbConfig(_Command):
    model: ModelSpec
    perturbation: PerturbSection
    test_dataset: FilePath
    n_eval: Optional[int] = Field(None, ge=1)
    nodes: int = Field(7, ge=1)
    data_max: Optional[float] = Field(None, gt=0)
    n_samples: int = Field(100, ge=2)
    integrator: IntegratorSection = IntegratorSection()
    statistic: Literal["energy", "mmd"] = "energy"


class PsnrConfig(_Command):
    models: dict[str, ModelSpec] = Field(min_length=1)
    test_dataset: FilePath
    t_grid: list[float] = [i / 10 for i in range(11)]
    n_eval: Optional[int] = Field(None, ge=1)
    replace: bool = False
    data_max: Optional[float] = Field(None, gt=0)
    baseline: Optional[str] = None

    @model_validator(mode="after")
    def _known_baseline(self):
        if self.baseline is not None and self.baseline not in self.models:
            raise ValueError(f"baseline {self.baseline!r} is not one of the models")
        return self


class LipschitzConfig(_Command):
    model: ModelSpec
    dataset: FilePath
    n_traj: int = Field(256, ge=1)
    t_grid: Optional[list[float]] = None
    substeps: int = Field(20, ge=1)
    scheme: Literal["euler", "heun", "rk4"] = "rk4"
    source: Literal["gaussian", "uniform"] = "gaussian"
    stratified: bool = False
    iters: int = Field(10, ge=1)
    fd_step: Optional[float] = Field(None, gt=0)


class PairwiseConfig(_Command):
    models: dict[str, ModelSpec] = Field(min_length=1)
    train_dataset: FilePath
    n_samples: int = Field(100, ge=1)
    integrator: IntegratorSection = IntegratorSection()


class TwoSampleConfig(_Command):
    a: FilePath
    b: FilePath
    kind: Literal["energy", "mmd"] = "energy"
    bandwidth: Optional[float] = Field(None, gt=0)


class InpaintConfig(_Command):
    model: ModelSpec
    problem: FilePath
    alpha: float = Field(0.3, gt=0, le=1)
    n_iters: int = Field(100, ge=0)
    step: Literal["power", "constant"] = "power"
    ground_truth: Optional[FilePath] = None
    data_max: float = Field(2.0, gt=0)


# ---------------------------------------------------------------- commands

class Run:
    """Run directory, manifest and input bookkeeping for one invocation."""

    def __init__(self, out: Path, command: str, cfg: _Command, threads: int):
        self.command = command
        self.cfg = cfg
        self.threads = threads
        echo = cfg.model_dump(mode="json")
        self.config_echo = echo
        blob = json.dumps({"command": command, "config": echo}, sort_keys=True).encode()
        digest = hashlib.sha256(blob).hexdigest()[:8]
        path = out / digest
        k = 0
        while path.exists():
            k += 1
            path = out / f"{digest}-{k}"
        path.mkdir(parents=True)
        self.dir = path
        self.hash = digest

    def file(self, name: str) -> Path:
        return self.dir / name

    def manifest(self) -> None:
        inputs = {}
        for p in sorted(_paths(self.config_echo)):
            inputs[p] = hashlib.sha256(Path(p).read_bytes()).hexdigest()
        write_json(self.file("manifest.json"), {
            "command": self.command,
            "config": self.config_echo,
            "config_hash": self.hash,
            "inputs": inputs,
            "version": __version__,
        })


def _paths(obj) -> list[str]:
    out = []
    if isinstance(obj, dict):
        for v in obj.values():
            out += _paths(v)
    elif isinstance(obj, list):
        for v in obj:
            out += _paths(v)
    elif isinstance(obj, str) and os.path.isfile(obj):
        out.append(obj)
    return out


def cmd_gen_data(run: Run, cfg: GenDataConfig) -> None:
    opts = dict(cfg.options)
    if cfg.kind == "fig5a-3pt":
        ds = fig5a_3pt()
    elif cfg.kind == "k-points":
        ds = GENERATORS["k-points"](cfg.k, cfg.d, seed=cfg.seed, **opts)
    else:
        if cfg.kind == "blobs" and "size" in opts:
            opts["size"] = int(opts["size"])
        if cfg.kind == "gaussian-mixture" and "components" in opts:
            opts["components"] = int(opts["components"])
        if cfg.kind == "checkerboard" and "cells" in opts:
            opts["cells"] = int(opts["cells"])
        ds = GENERATORS[cfg.kind](cfg.n, seed=cfg.seed, **opts)
    write_fmdt(run.file("data.fmdt"), ds)
    write_json(run.file("summary.json"), {"n": ds.n, "d": ds.d, "name": ds.name,
                                          "shape": list(ds.shape) if ds.shape else None})


def cmd_train(run: Run, cfg: TrainCmdConfig) -> None:
    ds = load_dataset(cfg.dataset)
    ws = WeightingScheme.parse(cfg.weighting, w_cap=cfg.w_cap)
    emb = TimeEmbedding(tuple(cfg.net.frequencies)) if cfg.net.frequencies is not None else None
    pd = ParametrizedDenoiser(NetModel.init(ds.d, tuple(cfg.net.hidden), cfg.net.activation, emb,
                                            seed=cfg.seed), cfg.net.klass)
    reg = RegSpec(**cfg.regularizer.model_dump()) if cfg.regularizer else None
    tc = TrainConfig(seed=cfg.seed, regularizer=reg, **cfg.train.model_dump())
    if cfg.ensemble:
        _, results = train_ensemble_10(ds, tc, pd, ws, threads=run.threads)
        for i, r in enumerate(results):
            save_checkpoint(run.file(f"model_{i}.json"), r.model)
        hist = np.column_stack([np.arange(len(results[0].history))]
                               + [r.history for r in results])
        write_csv(run.file("history.csv"), hist, ["epoch"] + [f"loss_{i}" for i in range(10)])
        final = [r.history[-1] for r in results]
    else:
        r = train(ds, pd, ws, tc)
        save_checkpoint(run.file("model.json"), r.model)
        write_csv(run.file("history.csv"), np.column_stack([np.arange(len(r.history)), r.history]),
                  ["epoch", "loss"])
        final = r.history[-1]
    write_json(run.file("summary.json"), {"final_loss": final, "weighting": ws.label})


def _source(seed: int, n: int, d: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n, d))


def _model_dim(spec) -> int:
    if spec.kind == "checkpoint":
        return load_checkpoint(spec.path).d
    if spec.kind == "ensemble":
        return load_checkpoint(spec.paths[0]).d
    return load_dataset(spec.dataset).d


def cmd_sample(run: Run, cfg: SampleConfig) -> None:
    _, v = build_denoiser(cfg.model)
    x0 = _source(cfg.seed, cfg.n_samples, _model_dim(cfg.model))
    rec = sample(v, x0, cfg.integrator.build())
    end = np.atleast_2d(rec.final)
    write_fmdt(run.file("endpoints.fmdt"), Dataset(end, name="endpoints"))
    write_csv(run.file("endpoints.csv"), end, [f"x_{i}" for i in range(end.shape[1])])
    for i in range(min(cfg.dump_trajectories, cfg.n_samples)):
        write_trajectory(run.file(f"trajectory_{i}"), rec, i)


def cmd_perturb(run: Run, cfg: PerturbConfig) -> None:
    D, v = build_denoiser(cfg.model)
    test = load_dataset(cfg.test_dataset)
    p = cfg.perturbation
    level = tuple(tuple(r) for r in p.level) if p.level is not None else None
    spec = PerturbationSpec(p.direction, p.t_min, p.t_max, p.patch_size, level,
                            None if level is not None else p.ratio)
    if spec.level is None:
        spec = calibrate_schedule(D, test, spec, cfg.nodes, cfg.n_eval, cfg.seed, cfg.data_max)
    pert = perturb_denoiser(D, spec, test.shape, test.d)
    peak = test.value_range() if cfg.data_max is None else cfg.data_max
    rows = []
    for t, sig in spec.level:
        base = psnr_curve(D, test, [t], cfg.n_eval, cfg.seed, peak).values[0]
        new = psnr_curve(pert, test, [t], cfg.n_eval, cfg.seed, peak).values[0]
        rows.append((t, sig, base, new, new / base))
    write_csv(run.file("calibration.csv"), np.array(rows),
              ["t", "sigma", "psnr", "psnr_perturbed", "ratio"])
    x0 = _source(cfg.seed, cfg.n_samples, test.d)
    isp = cfg.integrator.build()
    ends = paired_sample([v, velocity_from_denoiser(pert)], x0, isp, run.threads)
    ref = sample(v, _source(cfg.seed + 1, cfg.n_samples, test.d), isp).final
    write_fmdt(run.file("baseline.fmdt"), Dataset(ends[0], name="baseline"))
    write_fmdt(run.file("perturbed.fmdt"), Dataset(ends[1], name="perturbed"))
    stat = two_sample_statistic(ends[1], ref, cfg.statistic)
    write_json(run.file("summary.json"), {
        "label": spec.label,
        "displacement": float(np.linalg.norm(ends[1] - ends[0], axis=1).mean()),
        "two_sample": stat.statistic,
        "two_sample_kind": stat.kind,
        "two_sample_baseline": two_sample_statistic(ends[0], ref, cfg.statistic).statistic,
    })


def cmd_psnr(run: Run, cfg: PsnrConfig) -> None:
    test = load_dataset(cfg.test_dataset)
    curves = {}
    for name, spec in cfg.models.items():
        D, _ = build_denoiser(spec)
        curves[name] = psnr_curve(D, test, cfg.t_grid, cfg.n_eval, cfg.seed, cfg.data_max,
                                  label=name, replace=cfg.replace)
    write_curves(run.file("psnr.csv"), list(curves.values()))
    if cfg.baseline is not None:
        base = curves[cfg.baseline]
        diffs = [base.minus(c) for n, c in curves.items() if n != cfg.baseline]
        if diffs:
            write_curves(run.file("psnr_diff.csv"), diffs)


def cmd_lipschitz(run: Run, cfg: LipschitzConfig) -> None:
    _, v = build_denoiser(cfg.model)
    ds = load_dataset(cfg.dataset)
    x0 = None
    if cfg.stratified:
        if ds.d != 1:
            raise ConfigError("stratified: only available for d = 1")
        edge = 3.0 if cfg.source == "gaussian" else 1.0
        x0 = (-edge + (np.arange(cfg.n_traj) + 0.5) * 2 * edge / cfg.n_traj)[:, None]
    prof = lipschitz_profile(v, ds, cfg.n_traj, cfg.t_grid, cfg.substeps, cfg.scheme, cfg.seed,
                             x0, cfg.source, cfg.iters, cfg.fd_step)
    write_profile(run.file("profile.csv"), prof)
    write_json(run.file("summary.json"), {"peak_time": prof.peak_time,
                                          "local_maxima": prof.times[prof.local_maxima()].tolist()})


def cmd_pairwise(run: Run, cfg: PairwiseConfig) -> None:
    ds = load_dataset(cfg.train_dataset)
    names = list(cfg.models)
    vs = [build_denoiser(cfg.models[n])[1] for n in names]
    x0 = _source(cfg.seed, cfg.n_samples, ds.d)
    ends = paired_sample(vs, x0, cfg.integrator.build(), run.threads)
    mat = pairwise_distance_matrix(ends)
    write_csv(run.file("pairwise.csv"), mat, names)
    write_csv(run.file("trainset_distance.csv"), distance_to_trainset(ends, ds)[None, :], names)
    for n, e in zip(names, ends):
        write_fmdt(run.file(f"endpoints_{n}.fmdt"), Dataset(e, name=n))


def cmd_twosample(run: Run, cfg: TwoSampleConfig) -> None:
    a = load_dataset(cfg.a)
    b = load_dataset(cfg.b)
    rep = two_sample_statistic(a.points, b.points, cfg.kind, cfg.bandwidth)
    write_json(run.file("summary.json"), {"statistic": rep.statistic, "kind": rep.kind,
                                          "n_a": rep.n_a, "n_b": rep.n_b,
                                          "bandwidth": rep.bandwidth})


def cmd_inpaint(run: Run, cfg: InpaintConfig) -> None:
    D, _ = build_denoiser(cfg.model)
    prob = load_problem(cfg.problem)
    truth = load_dataset(cfg.ground_truth).points[0] if cfg.ground_truth else None
    res = pnp_flow_inpaint(D, prob, cfg.alpha, cfg.n_iters, cfg.seed, cfg.step, truth,
                           cfg.data_max)
    write_fmdt(run.file("estimate.fmdt"), Dataset(res.x[None, :], name="estimate"))
    write_csv(run.file("estimate.csv"), res.x[None, :], [f"x_{i}" for i in range(prob.d)])
    if res.trace:
        write_csv(run.file("trace.csv"), np.column_stack([np.arange(len(res.trace)), res.trace]),
                  ["iteration", "psnr"])
    write_json(run.file("summary.json"), {"residual": prob.residual(res.x),
                                          "initial_residual": prob.residual(prob.initial())})


COMMANDS = {
    "gen-data": (GenDataConfig, cmd_gen_data),
    "train": (TrainCmdConfig, cmd_train),
    "sample": (SampleConfig, cmd_sample),
    "perturb": (PerturbConfig, cmd_perturb),
    "psnr": (PsnrConfig, cmd_psnr),
    "lipschitz": (LipschitzConfig, cmd_lipschitz),
    "pairwise": (PairwiseConfig, cmd_pairwise),
    "twosample": (TwoSampleConfig, cmd_twosample),
    "inpaint": (InpaintConfig, cmd_inpaint),
}


# ---------------------------------------------------------------- entry point

def read_config(path: Path) -> dict:
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"--config: cannot read {path}: {exc.strerror}") from exc
    try:
        if path.suffix.lower() == ".toml":
            return tomllib.loads(text.decode())
        return json.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"--config: cannot parse {path}: {exc}") from exc


def _resolve_paths(raw, base: Path):
    """Make relative paths to existing files absolute against the config's directory."""
    if isinstance(raw, dict):
        return {k: _resolve_paths(v, base) for k, v in raw.items()}
    if isinstance(raw, list):
        return [_resolve_paths(v, base) for v in raw]
    if isinstance(raw, str) and raw and not os.path.isabs(raw) and (base / raw).is_file():
        return str((base / raw).resolve())
    return raw


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"config error: {loc}: {err['msg']}")
    return "\n".join(lines)


def execute(command: str, raw: dict, out: Path, threads: int, seed: Optional[int] = None) -> Path:
    schema, fn = COMMANDS[command]
    if seed is not None:
        raw = {**raw, "seed": seed}
    cfg = schema.model_validate(raw)
    run = Run(out, command, cfg, threads)
    fn(run, cfg)
    run.manifest()
    return run.dir


def _threads(arg: Optional[int]) -> int:
    if arg is not None:
        return max(1, arg)
    env = os.environ.get("FMDT_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise ConfigError(f"FMDT_THREADS: not an integer: {env!r}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fmdt", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"fmdt {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in [*COMMANDS, "rerun"]:
        p = sub.add_parser(name)
        if name == "rerun":
            p.add_argument("manifest", type=Path, help="manifest.json of an earlier run")
        else:
            p.add_argument("--config", type=Path, required=True)
            p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=Path, default=Path("runs"))
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = _threads(args.threads)
        if args.command == "rerun":
            doc = read_config(args.manifest)
            command, raw, seed = doc.get("command"), doc.get("config"), None
            if command not in COMMANDS or not isinstance(raw, dict):
                raise ConfigError("manifest: missing or unknown command/config")
        else:
            command, seed = args.command, args.seed
            if seed is not None and seed < 0:
                raise ConfigError("--seed: must be a non-negative integer")
            raw = read_config(args.config)
            if not isinstance(raw, dict):
                raise ConfigError("config: top level must be a table")
            raw = _resolve_paths(raw, args.config.resolve().parent)
        run_dir = execute(command, raw, args.out, threads, seed)
    except ValidationError as exc:
        print(_format_validation(exc), file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001  runtime failures map to exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(run_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
