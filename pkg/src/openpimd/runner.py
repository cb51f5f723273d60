"""Run orchestration: configuration, multi-walker VES loop, checkpoints, analysis."""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import os
import shutil
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__
from .dynamics import (
    Integrator,
    IntegratorConfig,
    ThermostatConfig,
    TrajectoryDivergedError,
    load_gle_matrices,
)
from .estimators import (
    DistributionResult,
    bootstrap_distribution,
    coefficient_blocks,
    momentum_transform,
    ntilde_from_free_energy,
)
from .pathcore import PathState, SystemSpec, bc_geometry, initial_state
from .potentials import ConfigurationError, DoubleWell1D, TriatomicBathModel, build_model
from .rdm import (
    EndpointPairCV,
    RdmGrid,
    asymmetry,
    discretize_rho,
    negative_eigenvalues,
    reconstruct_ntilde,
    symmetric_eigensolve,
    translation_expectation,
)
from .ves import (
    BasisAccumulator,
    BasisSet,
    BiasState,
    CVBias,
    EndToEndCV,
    SoftWalls,
    VesDivergedError,
    VesIterationRecord,
    eval_bias,
    read_records,
    recover_free_energy,
    stationary_start,
    update_coefficients,
    write_records,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MODES = ("run-1d", "run-many", "run-rdm", "oracle", "analyze", "extrapolate")
HIST_BINS = 60


class AnalysisError(RuntimeError):
    pass


# ---------------------------------------------------------------- configuration


@dataclass
class RunConfig:
    """Everything needed to reproduce a run; defaults follow the 1D production settings."""

    mode: str = "run-1d"
    beta: float = 5000.0
    nbeads: int = 400
    dt: float = 10.0
    mu: float = 1e-4
    md_steps: int = 12500
    var_steps: int = 200
    walkers: int = 16
    seed: int = 0
    out: str = "run"
    sample_stride: int = 1
    equilibration: int = 0
    checkpoint_every: int = 10
    initial_bias: str | None = None

    model: str = "double_well"
    model_params: dict = field(default_factory=dict)

    basis_lo: float = -3.0
    basis_hi: float = 3.0
    n_functions: int = 12
    wall: float = 3.0
    x_mass: float | None = None

    rdm_bound: float = 1.8
    rdm_bins: int = 73
    rdm_order: int = 10
    wall_stiffness: float = 1.0

    thermostat: str = "pile"
    gamma0: float = 1e-3
    gamma_x: float = 1e-3
    gle_file: str | None = None

    window: int = 20
    plateau_rtol: float = 0.25
    bootstrap: int = 100
    analysis_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        for name in ("beta", "dt", "mu"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("nbeads", "walkers", "md_steps", "sample_stride", "checkpoint_every", "n_functions",
                     "rdm_bins", "rdm_order", "window", "bootstrap"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be at least 1")
        if self.nbeads < 2:
            raise ConfigurationError("nbeads must be at least 2")
        if self.var_steps < 0 or self.equilibration < 0:
            raise ConfigurationError("var_steps and equilibration must be non-negative")
        if self.basis_hi <= self.basis_lo:
            raise ConfigurationError("basis_hi must exceed basis_lo")

    # ini layout: section -> {key: attribute}
    _SECTIONS = {
        "run": {"mode": "mode", "beta": "beta", "nbeads": "nbeads", "dt": "dt", "mu": "mu",
                "md_steps": "md_steps", "var_steps": "var_steps", "walkers": "walkers", "seed": "seed",
                "out": "out", "sample_stride": "sample_stride", "equilibration": "equilibration",
                "checkpoint_every": "checkpoint_every", "initial_bias": "initial_bias"},
        "ves": {"lo": "basis_lo", "hi": "basis_hi", "n_functions": "n_functions", "wall": "wall",
                "x_mass": "x_mass"},
        "rdm": {"bound": "rdm_bound", "bins": "rdm_bins", "order": "rdm_order",
                "wall_stiffness": "wall_stiffness"},
        "thermostat": {"kind": "thermostat", "gamma0": "gamma0", "gamma_x": "gamma_x",
                       "gle_file": "gle_file"},
        "analysis": {"window": "window", "plateau_rtol": "plateau_rtol", "bootstrap": "bootstrap",
                     "seed": "analysis_seed"},
    }

    @classmethod
    def from_ini(cls, path, **overrides) -> "RunConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        if not parser.read(path):
            raise ConfigurationError(f"cannot read config file {path}")
        return cls.from_parser(parser, **overrides)

    @classmethod
    def from_parser(cls, parser: configparser.ConfigParser, **overrides) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for section, keys in cls._SECTIONS.items():
            if not parser.has_section(section):
                continue
            for key, raw in parser.items(section):
                if key not in keys:
                    raise ConfigurationError(f"unknown key [{section}] {key}")
                attr = keys[key]
                values[attr] = _coerce(raw, types[attr], f"[{section}] {key}")
        if parser.has_section("model"):
            params = dict(parser.items("model"))
            values["model"] = params.pop("kind", "double_well")
            values["model_params"] = {k: _literal(v) for k, v in params.items()}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_parser(self) -> configparser.ConfigParser:
        parser = configparser.ConfigParser()
        for section, keys in self._SECTIONS.items():
            parser[section] = {k: "" if getattr(self, a) is None else str(getattr(self, a)) for k, a in keys.items()}
        parser["model"] = {"kind": self.model, **{k: json.dumps(v) for k, v in self.model_params.items()}}
        return parser

    def write_ini(self, path) -> None:
        with open(path, "w") as fh:
            self.to_parser().write(fh)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(**d)


def _literal(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _coerce(raw: str, typ, where: str):
    raw = raw.strip()
    typ = str(typ)
    if raw == "" and "None" in typ:
        return None
    try:
        if typ.startswith("int"):
            return int(raw)
        if typ.startswith("float"):
            return float(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{where}: cannot parse {raw!r}") from exc
    return raw


# ---------------------------------------------------------------- set-up


def make_model(config: RunConfig):
    return build_model(config.model, **dict(config.model_params))


def make_system(config: RunConfig, model) -> SystemSpec:
    if isinstance(model, TriatomicBathModel):
        return SystemSpec(masses=tuple(model.masses), nbeads=config.nbeads, beta=config.beta, tagged=0,
                          anchors=(1, 2), ndim=3, bath_masses=tuple(model.bath_masses), x_mass=config.x_mass)
    if model.n_atoms == 1 and model.ndim == 1:
        return SystemSpec(masses=(model.mass,), nbeads=config.nbeads, beta=config.beta, anchors=None, ndim=1,
                          x_mass=config.x_mass)
    raise ConfigurationError(f"model {config.model!r} is not supported by the runner")


def make_bias(config: RunConfig) -> CVBias:
    if config.mode == "run-rdm":
        basis = BasisSet.product_2d(-config.rdm_bound, config.rdm_bound, config.rdm_order)
        cv, walls = EndpointPairCV(), SoftWalls(config.rdm_bound, config.wall_stiffness)
    else:
        basis = BasisSet.even_1d(config.basis_lo, config.basis_hi, config.n_functions)
        cv, walls = EndToEndCV(), None
    if config.initial_bias:
        state = BiasState.load(config.initial_bias)
        if state.basis.to_dict() != basis.to_dict():
            raise ConfigurationError(f"{config.initial_bias}: basis differs from the configured one")
        # warm start: keep the coefficients, restart the averaging
        state = BiasState(basis, config.beta, config.mu, state.alpha_avg, state.alpha_avg)
    else:
        state = BiasState(basis, config.beta, config.mu)
    return CVBias(state, cv, walls)


def walker_generators(seed: int, walkers: int) -> list[np.random.Generator]:
    """Independent per-walker streams spawned from one master seed."""
    children = np.random.SeedSequence(seed).spawn(walkers)
    return [np.random.default_rng(c) for c in children]


def starting_states(config: RunConfig, system: SystemSpec, model, rngs) -> PathState:
    """Collapsed rings at a potential minimum (walkers alternate wells in 1D), thermal momenta."""
    w = config.walkers
    if isinstance(model, TriatomicBathModel):
        coords = model.reference_geometry()
        state = initial_state(system, coords, w)
    else:
        state = initial_state(system, [0.0], w)
        if isinstance(model, DoubleWell1D):
            state.r[..., 0, :, 0] = np.where(np.arange(w) % 2 == 0, model.a, -model.a)[:, None]
    m = np.asarray(system.masses)[:, None, None]
    for k, g in enumerate(rngs):
        state.p[k] = g.standard_normal(state.p.shape[1:]) * np.sqrt(m / system.beta)
        state.px[k] = g.standard_normal() * np.sqrt(system.x_md_mass / system.beta)
        if system.nbath:
            mb = np.asarray(system.bath_masses)[:, None]
            state.ps[k] = g.standard_normal(state.ps.shape[1:]) * np.sqrt(mb / system.beta)
    return state


def make_integrator(config: RunConfig, system, model, bias) -> Integrator:
    gle = load_gle_matrices(config.gle_file) if config.gle_file else None
    thermo = ThermostatConfig(config.thermostat, config.gamma0, config.gamma_x, gle)
    # (r, r') are confined by the soft walls alone; a reflecting x wall would
    # cut off the corners |r - r'| > wall of the square and VES could never fill them.
    wall = None if config.mode == "run-rdm" else config.wall
    return Integrator(system, model, IntegratorConfig(config.dt, wall, None, thermo), bias,
                      (config.walkers,))


def model_hash(model) -> str:
    blob = json.dumps(model.parameters(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def run_id(config: RunConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def write_manifest(out: Path, config: RunConfig, model, system) -> dict:
    manifest = {
        "version": __version__,
        "run_id": run_id(config),
        "model_hash": model_hash(model),
        "model": model.parameters(),
        "system": system.to_dict() if system is not None else None,
        "config": config.to_dict(),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    """Everything needed to continue a run exactly where it stopped."""

    config: RunConfig
    iteration: int
    state: PathState
    bias: BiasState
    rng_states: list
    thermostat: dict
    records: list
    histograms: np.ndarray  # (iterations, ncomp, HIST_BINS)

    def save(self, path) -> None:
        meta = {
            "format_version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "iteration": self.iteration,
            "bias": self.bias.to_dict(),
            "rng_states": self.rng_states,
            "thermostat_keys": sorted(self.thermostat),
        }
        arrays = {f"state_{k}": v for k, v in zip(("r", "p", "x", "px", "s", "ps"), self.state.arrays())}
        arrays.update({f"thermo_{k}": v for k, v in self.thermostat.items()})
        k = self.bias.basis.size
        arrays["rec_iteration"] = np.array([r.iteration for r in self.records], dtype=np.int64)
        arrays["rec_alpha"] = np.array([r.alpha for r in self.records]).reshape(-1, k)
        arrays["rec_alpha_avg"] = np.array([r.alpha_avg for r in self.records]).reshape(-1, k)
        arrays["rec_grad_norm"] = np.array([r.grad_norm for r in self.records], dtype=float)
        arrays["rec_nsamples"] = np.array([r.nsamples for r in self.records], dtype=np.int64)
        arrays["histograms"] = self.histograms
        tmp = Path(str(path) + ".tmp")
        with open(tmp, "wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            if meta.get("format_version") != CHECKPOINT_VERSION:
                raise ConfigurationError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
            state = PathState(*(np.array(data[f"state_{k}"]) for k in ("r", "p", "x", "px", "s", "ps")))
            thermo = {k: np.array(data[f"thermo_{k}"]) for k in meta["thermostat_keys"]}
            records = [VesIterationRecord(int(i), a.copy(), b.copy(), float(g), int(n))
                       for i, a, b, g, n in zip(data["rec_iteration"], data["rec_alpha"], data["rec_alpha_avg"],
                                                data["rec_grad_norm"], data["rec_nsamples"])]
            hist = np.array(data["histograms"])
        return cls(RunConfig.from_dict(meta["config"]), meta["iteration"], state, BiasState.from_dict(meta["bias"]),
                   meta["rng_states"], thermo, records, hist)


# ---------------------------------------------------------------- VES loop


class _Sampler:
    """Observer that accumulates basis statistics per walker over one interval.

    Order-parameter values are buffered and the basis is evaluated once per
    ``chunk`` steps, which keeps the per-step cost small for the 2D basis.
    """

    def __init__(self, bias: CVBias, system: SystemSpec, walkers: int, stride: int, chunk: int = 256):
        self.bias = bias
        self.system = system
        self.stride = stride
        self.size = bias.state.basis.size
        self.chunk = chunk
        self.ncomp = bias.cv.ncomp
        self.buffer = np.empty((chunk, walkers, self.ncomp))
        self.edges = [np.linspace(lo, hi, HIST_BINS + 1) for lo, hi in bias.state.basis.domain]
        self.reset()

    def reset(self):
        self.fill = 0
        self.accs = [BasisAccumulator(self.size) for _ in range(self.buffer.shape[1])]
        self.hist = np.zeros((len(self.edges), HIST_BINS), dtype=np.int64)

    def __call__(self, state: PathState, step: int):
        if (step + 1) % self.stride:
            return
        geo = bc_geometry(state, self.system) if self.system.anchors is not None else None
        self.buffer[self.fill] = self.bias.cv.value(state, self.system, geo)
        self.fill += 1
        if self.fill == self.chunk:
            self.flush()

    def flush(self):
        if not self.fill:
            return
        s = self.buffer[: self.fill]
        vals, _ = self.bias.state.basis.evaluate(s, derivatives=False)
        for k, acc in enumerate(self.accs):
            acc.add(vals[:, k])
        for c, edges in enumerate(self.edges):
            self.hist[c] += np.histogram(s[..., c], bins=edges)[0]
        self.fill = 0

    def merged(self) -> BasisAccumulator:
        self.flush()
        total = BasisAccumulator(self.size)
        for acc in self.accs:  # fixed walker order
            total.merge(acc)
        return total


@dataclass
class RunResult:
    out: Path
    bias: BiasState
    records: list
    histograms: np.ndarray
    state: PathState


def _generators_from_states(states) -> list[np.random.Generator]:
    gens = []
    for st in states:
        g = np.random.default_rng()
        g.bit_generator.state = st
        gens.append(g)
    return gens


def run_variational(config: RunConfig, restart=None, progress=None) -> RunResult:
    """Multi-walker VES: every walker runs ``md_steps`` steps, statistics are merged,
    the coefficients take one averaged-descent step, repeat ``var_steps`` times.

    ``restart`` is a checkpoint path; the run then continues from the stored
    iteration and reproduces an uninterrupted run exactly.
    """
    if config.mode not in ("run-1d", "run-many", "run-rdm"):
        raise ConfigurationError(f"run_variational cannot handle mode {config.mode!r}")
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    model = make_model(config)
    system = make_system(config, model)
    if config.mode == "run-many" and system.anchors is None:
        raise ConfigurationError("run-many needs a many-body model (e.g. kind = triatomic_bath)")
    cvbias = make_bias(config)
    integ = make_integrator(config, system, model, cvbias)

    if restart is not None:
        ckpt = Checkpoint.load(restart)
        if ckpt.config.to_dict() != config.to_dict():
            raise ConfigurationError("checkpoint was written with a different configuration")
        state = ckpt.state
        cvbias.state = ckpt.bias
        rngs = _generators_from_states(ckpt.rng_states)
        integ.thermostat.set_state(ckpt.thermostat)
        records = list(ckpt.records)
        histograms = list(ckpt.histograms)
        start = ckpt.iteration
        log.info("restarting %s at iteration %d", out, start)
    else:
        write_manifest(out, config, model, system)
        rngs = walker_generators(config.seed, config.walkers)
        state = starting_states(config, system, model, rngs)
        if config.equilibration:
            integ.run(state, config.equilibration, rngs)
        records, histograms, start = [], [], 0

    bias = cvbias.state
    sampler = _Sampler(cvbias, system, config.walkers, config.sample_stride)

    def checkpoint(iteration):
        Checkpoint(config, iteration, state, cvbias.state, [g.bit_generator.state for g in rngs],
                   integ.thermostat.get_state(), records,
                   np.array(histograms).reshape(-1, len(sampler.edges), HIST_BINS)).save(out / "checkpoint.npz")
        write_records(out / "records.csv", records) if records else None
        cvbias.state.save(out / "bias.json")

    for it in range(start, config.var_steps):
        sampler.reset()
        try:
            integ.run(state, config.md_steps, rngs, sampler)
            acc = sampler.merged()
            g = acc.gradient(bias.target)
            h = acc.hessian(bias.beta)
            update_coefficients(bias, g, h)
        except (TrajectoryDivergedError, VesDivergedError):
            checkpoint(it)
            raise
        records.append(VesIterationRecord(bias.iteration, bias.alpha.copy(), bias.alpha_avg.copy(),
                                          float(np.linalg.norm(g)), acc.n))
        histograms.append(sampler.hist.copy())
        if progress is not None:
            progress(it + 1, records[-1])
        if (it + 1) % config.checkpoint_every == 0:
            checkpoint(it + 1)
    checkpoint(max(config.var_steps, start))
    write_histograms(out / "histograms.csv", histograms, sampler.edges)
    hist = np.array(histograms).reshape(-1, len(sampler.edges), HIST_BINS)
    return RunResult(out, bias, records, hist, state)


def write_histograms(path, histograms, edges) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for c, e in enumerate(edges):
            fh.write(f"# component {c} edges = {json.dumps([float(v) for v in e])}\n")
        w.writerow(["iteration", "component"] + [f"bin_{i}" for i in range(HIST_BINS)])
        for it, h in enumerate(histograms, start=1):
            for c, row in enumerate(h):
                w.writerow([it, c] + [int(v) for v in row])


def read_histograms(path) -> tuple[np.ndarray, list]:
    edges, rows = [], []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                edges.append(np.array(json.loads(line.split("=", 1)[1])))
            else:
                rows.append(line)
    data = list(csv.reader(rows))[1:]
    ncomp = max(1, len(edges))
    counts = np.array([[int(v) for v in row[2:]] for row in data], dtype=np.int64)
    return counts.reshape(-1, ncomp, counts.shape[-1]), edges


# ---------------------------------------------------------------- analysis


def uniformity_check(samples=None, lo: float = -3.0, hi: float = 3.0, bins: int = HIST_BINS, counts=None):
    """Chi-square test of sampled order-parameter values against the uniform target.

    Pass raw ``samples`` or pre-binned ``counts``; returns ``(statistic, p_value)``.
    Note that correlated MD samples inflate the statistic.
    """
    if counts is None:
        samples = np.asarray(samples, dtype=float).ravel()
        counts, _ = np.histogram(samples, bins=bins, range=(lo, hi))
    counts = np.asarray(counts, dtype=float)
    if counts.sum() == 0:
        raise ValueError("no samples inside the target domain")
    expected = np.full_like(counts, counts.sum() / counts.size)
    stat, p = stats.chisquare(counts, expected)
    return float(stat), float(p)


def _read_manifest(run_dir: Path) -> dict:
    path = run_dir / "manifest.json"
    if not path.exists():
        raise AnalysisError(f"{run_dir}: no manifest.json")
    with open(path) as fh:
        return json.load(fh)


def stationary_tail(records, window: int, rtol: float):
    """Coefficient trajectory from the detected plateau onwards, or an explanatory error."""
    grad = np.array([r.grad_norm for r in records])
    start = stationary_start(grad, window=window, rtol=rtol)
    if start is None:
        nwin = len(grad) // window
        means = grad[: nwin * window].reshape(nwin, window).mean(axis=1) if nwin else grad
        raise AnalysisError(
            f"no quasi-stationary tail in {len(grad)} iterations (window {window}); window means of |g|: "
            + ", ".join(f"{m:.3g}" for m in means))
    alpha = np.array([r.alpha for r in records[start:]])
    return start, alpha


def momentum_grid(config: RunConfig) -> np.ndarray:
    return np.linspace(0.0, 20.0, 401)


def _profile_pipeline(basis: BasisSet, beta: float, xgrid, pgrid):
    template = BiasState(basis, beta, 1.0)

    def pipeline(coef):
        grid, F = recover_free_energy(template, xgrid, coefficients=coef)
        nt = ntilde_from_free_energy(grid, F, beta)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            npd = momentum_transform(nt, pgrid, tail_tol=np.inf)
        return {"F": F, "ntilde": nt.values, "np": npd.values}

    return pipeline


def _rdm_pipeline(basis: BasisSet, beta: float, grid: RdmGrid, xgrid, nkeep: int = 10):
    template = BiasState(basis, beta, 1.0)
    pts = grid.mesh()

    def pipeline(coef):
        value, _ = eval_bias(template, pts, coef)
        F2 = -value
        m = discretize_rho(F2, beta, grid.delta)
        spec = symmetric_eigensolve(m, grid.delta, grid.centers)
        nt = reconstruct_ntilde(spec, xgrid)
        return {"eigenvalues": spec.eigenvalues[:nkeep], "ntilde": nt.values, "F2": F2 - F2.min(),
                "spec": spec}

    return pipeline


def analyze(run_dir, out=None, config_override: RunConfig | None = None, figures: bool = True) -> dict:
    """Turn a finished run directory into CSV results (and figures).

    Oracle directories are passed through unchanged.
    """
    run_dir = Path(run_dir)
    manifest = _read_manifest(run_dir)
    config = config_override or RunConfig.from_dict(manifest["config"])
    out = Path(out) if out is not None else run_dir / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    header = {"beta": config.beta, "nbeads": config.nbeads, "model_hash": manifest["model_hash"],
              "run_id": manifest["run_id"]}

    if config.mode == "oracle":
        copied = []
        for name in ("ntilde.csv", "np.csv", "spectrum.csv"):
            if (run_dir / name).exists():
                shutil.copyfile(run_dir / name, out / name)
                copied.append(name)
        return {"mode": "oracle", "files": copied, "summary": {"mode": "oracle", "files": copied}}

    rec_path = run_dir / "records.csv"
    if not rec_path.exists():
        raise AnalysisError(f"{run_dir}: no records.csv (run missing or never reached a checkpoint)")
    records = read_records(rec_path)
    start, alpha = stationary_tail(records, config.window, config.plateau_rtol)
    blocks = coefficient_blocks(alpha)
    if blocks.shape[0] < 8:
        raise AnalysisError(f"stationary tail of {len(alpha)} iterations gives only {blocks.shape[0]} "
                            "decorrelated blocks; at least 8 are needed")
    estimate = alpha.mean(axis=0)
    rng = np.random.default_rng(config.analysis_seed)
    summary = {"mode": config.mode, "stationary_start": start, "tail_iterations": len(alpha),
               "blocks": int(blocks.shape[0]), "run_id": manifest["run_id"]}

    hist_path = run_dir / "histograms.csv"
    if hist_path.exists():
        counts, _ = read_histograms(hist_path)
        tail_counts = counts[start:].sum(axis=0)
        checks = [uniformity_check(counts=c) for c in tail_counts]
        summary["uniformity"] = [{"chi2": s, "p_value": p} for s, p in checks]
        if any(p < 1e-3 for _, p in checks):
            log.warning("order-parameter histogram is not uniform (p < 0.001); bias may not be converged")

    if config.mode in ("run-1d", "run-many"):
        basis = BasisSet.even_1d(config.basis_lo, config.basis_hi, config.n_functions)
        xgrid = np.linspace(config.basis_lo, config.basis_hi, 601)
        pgrid = momentum_grid(config)
        pipeline = _profile_pipeline(basis, config.beta, xgrid, pgrid)
        central = pipeline(estimate)
        sigma = bootstrap_distribution(blocks, pipeline, config.bootstrap, rng)
        nt = DistributionResult(xgrid, central["ntilde"], sigma["ntilde"], kind="ntilde")
        npd = DistributionResult(pgrid, central["np"], sigma["np"], kind="np")
        write_profile(out / "free_energy.csv", xgrid, central["F"], sigma["F"], header)
        nt.write_csv(out / "ntilde.csv", header)
        npd.write_csv(out / "np.csv", header)
        summary["files"] = ["free_energy.csv", "ntilde.csv", "np.csv"]
        result = {"ntilde": nt, "np": npd, "F": (xgrid, central["F"], sigma["F"])}
        if figures:
            from .plotting import plot_distributions, plot_convergence
            plot_distributions(out / "distributions.png", nt, npd)
            plot_convergence(out / "convergence.png", records, start)
    else:
        grid = RdmGrid(config.rdm_bound, config.rdm_bins)
        basis = BasisSet.product_2d(-config.rdm_bound, config.rdm_bound, config.rdm_order)
        xgrid = np.linspace(-2 * config.rdm_bound, 2 * config.rdm_bound, 2 * config.rdm_bins + 1)
        pipeline = _rdm_pipeline(basis, config.beta, grid, xgrid)
        try:
            central = pipeline(estimate)
            boot = bootstrap_distribution(blocks, lambda c: {k: v for k, v in pipeline(c).items() if k != "spec"},
                                          config.bootstrap, rng)
        except ConfigurationError as exc:
            raise AnalysisError(f"{run_dir}: 2D free energy is not a usable density matrix ({exc})") from exc
        spec = central["spec"]
        lam, lam_err = central["eigenvalues"], boot["eigenvalues"]
        write_spectrum(out / "spectrum.csv", lam, lam_err, header)
        curves = translation_expectation(spec.vectors[:5], spec.grid, xgrid)
        write_translation(out / "translation.csv", xgrid, curves, header)
        nt = DistributionResult(xgrid, central["ntilde"], boot["ntilde"], kind="ntilde", source="rdm")
        nt.write_csv(out / "ntilde_rdm.csv", header)
        template = BiasState(basis, config.beta, 1.0)
        value, _ = eval_bias(template, grid.mesh(), estimate)
        summary["asymmetry"] = asymmetry(-value, config.beta)
        summary["negative"] = negative_eigenvalues(lam, lam_err).tolist()
        summary["eigenvalues"] = lam.tolist()
        summary["eigenvalue_errors"] = lam_err.tolist()
        summary["files"] = ["spectrum.csv", "translation.csv", "ntilde_rdm.csv"]
        result = {"eigenvalues": lam, "errors": lam_err, "spec": spec, "ntilde": nt}
        if figures:
            from .plotting import plot_spectrum, plot_convergence
            plot_spectrum(out / "spectrum.png", lam, lam_err, xgrid, curves)
            plot_convergence(out / "convergence.png", records, start)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    result["summary"] = summary
    return result


def write_profile(path, grid, values, errors, header) -> None:
    with open(path, "w", newline="") as fh:
        for k, v in header.items():
            fh.write(f"# {k} = {v}\n")
        w = csv.writer(fh)
        w.writerow(["x", "F", "sigma"])
        for row in zip(grid, values, errors):
            w.writerow([repr(float(v)) for v in row])


def write_spectrum(path, values, errors, header) -> None:
    with open(path, "w", newline="") as fh:
        for k, v in header.items():
            fh.write(f"# {k} = {v}\n")
        w = csv.writer(fh)
        w.writerow(["index", "eigenvalue", "sigma"])
        for i, (v, e) in enumerate(zip(values, errors)):
            w.writerow([i, repr(float(v)), repr(float(e))])


def read_spectrum(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path) as fh:
        rows = [line for line in fh if not line.startswith("#")]
    data = np.array(list(csv.reader(rows))[1:], dtype=float)
    return data[:, 1], data[:, 2]


def write_translation(path, xgrid, curves, header) -> None:
    with open(path, "w", newline="") as fh:
        for k, v in header.items():
            fh.write(f"# {k} = {v}\n")
        w = csv.writer(fh)
        w.writerow(["x"] + [f"T_{n}" for n in range(len(curves))])
        for i, x in enumerate(xgrid):
            w.writerow([repr(float(x))] + [repr(float(c[i])) for c in curves])


# ---------------------------------------------------------------- oracle mode


def run_oracle(config: RunConfig, nstates: int = 20) -> dict:
    """Exact 1D results in the same CSV layout as :func:`analyze`."""
    from .oracle1d import Grid1D, exact_ntilde_np, solve_schrodinger, thermal_density_matrix

    model = make_model(config)
    if not (model.n_atoms == 1 and model.ndim == 1):
        raise ConfigurationError("the oracle only handles one-dimensional models")
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = write_manifest(out, config, model, None)
    sol = solve_schrodinger(Grid1D(), model.value, model.mass, nstates)
    xgrid = np.linspace(config.basis_lo, config.basis_hi, 601)
    nt_full, np_exact = exact_ntilde_np(sol, config.beta, momentum_grid(config))
    nt = DistributionResult(xgrid, nt_full.at(xgrid), kind="ntilde", source="exact")
    header = {"beta": config.beta, "model_hash": manifest["model_hash"], "run_id": manifest["run_id"]}
    nt.write_csv(out / "ntilde.csv", header)
    np_exact.write_csv(out / "np.csv", header)
    rho = thermal_density_matrix(sol, config.beta)
    h = sol.grid.spacing
    lam = np.sort(np.linalg.eigvalsh(rho * h))[::-1][:10]
    write_spectrum(out / "spectrum.csv", lam, np.zeros_like(lam), header)
    return {"ntilde": nt, "np": np_exact, "eigenvalues": lam, "solution": sol}


def compare_to_oracle(result: dict, config: RunConfig) -> dict:
    """Sup-norm n(p) deviation from the exact curve with the acceptance tolerance."""
    from .oracle1d import Grid1D, exact_ntilde_np, solve_schrodinger

    model = make_model(config)
    sol = solve_schrodinger(Grid1D(), model.value, model.mass, 20)
    npd = result["np"]
    _, exact = exact_ntilde_np(sol, config.beta, npd.grid)
    dev = np.abs(npd.values - exact.values)
    allowed = np.maximum(3.0 * npd.errors, 0.02 * exact.values[0])
    return {"sup_deviation": float(dev.max()), "worst_p": float(npd.grid[np.argmax(dev - allowed)]),
            "tolerance_floor": float(0.02 * exact.values[0]), "passed": bool(np.all(dev <= allowed)),
            "exact": exact}
