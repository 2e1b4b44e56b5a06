"""
Command-line front end.

    python -m lnareduce <reduce|moments|sde|sweep|check> --model <file or builtin> [options]

Exit codes: 0 success, 1 invalid model or request (or failed assumption
check), 2 numerical failure, 64 bad usage.  Failures print one JSON line
{"error": ..., "message": ...} on stderr; logs also go to stderr.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
import yaml

from . import analysis, ensemble
from .exceptions import (
    LnaReduceError, ModelValidationError, NumericalError, SchemaError, TransformError,
)
from .lna import TransformMatrices, assemble_lna, transform_to_sp
from .moments import (
    DEFAULT_ATOL, DEFAULT_RTOL, OriginalMomentState, OriginalMomentSystem, ReducedMomentState,
    ReducedMomentSystem, check_moment_invariants, original_path, reduced_path,
)
from .network import (
    PHOSPHO_A_X, PHOSPHO_A_Z, PHOSPHO_FAST_NAMES, PHOSPHO_SLOW_NAMES, TIMESCALES,
    AffineProductRate, ConstantInput, PhosphoParams, PhysicalDomain, PiecewiseConstantInput,
    Reaction, ReactionNetwork, build_example_phospho, phospho_closed_form_gamma1,
)
from .reduction import check_assumptions, reduce

LOGGER = logging.getLogger(__name__)

BUILTIN_MODELS = ("phospho-example",)
SCHEMA_VERSION = 1
DEFAULT_GRID = 201
DEFAULT_TSPAN = (0.0, 50.0)
DEFAULT_SWEEP = (0.1, 0.05, 0.02, 0.01)
DEFAULT_N = 100_000
DEFAULT_SWEEP_N = 20_000
REDUCE_SAMPLES = 11
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2, 64


# Model configuration ------------------------------------------------------

@dataclass
class LoadedModel:
    network: ReactionNetwork
    transform: TransformMatrices
    y0: np.ndarray
    psi_x0: Optional[np.ndarray] = None
    psi_z0: Optional[np.ndarray] = None
    closed_form_gamma1: Optional[Callable] = None

    def transformed(self, epsilon=None):
        net = self.network if epsilon is None else self.network.with_epsilon(epsilon)
        return transform_to_sp(assemble_lna(net), self.transform, net)

    def initial_state(self, sp):
        return sp.from_original(self.y0)


def _node_line(root, path):
    """1-based line of the node at path, or of the deepest existing ancestor."""
    if root is None:
        return None
    node = root
    for key in path:
        child = None
        if isinstance(node, yaml.MappingNode):
            child = next((v for k, v in node.value if k.value == key), None)
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            child = node.value[key]
        if child is None:
            break
        node = child
    return node.start_mark.line + 1


class _ModelSchema:
    """Reads one YAML model document; every failure is a SchemaError with field and line."""

    def __init__(self, text):
        try:
            self.root = yaml.compose(text, Loader=yaml.SafeLoader)
            self.data = yaml.safe_load(text)
        except yaml.YAMLError as err:
            mark = getattr(err, "problem_mark", None)
            raise SchemaError("<document>", f"not valid YAML: {getattr(err, 'problem', err)}",
                              None if mark is None else mark.line + 1)
        self.parameters = {}
        self.inputs = {}

    def fail(self, path, message):
        raise SchemaError(".".join(str(p) for p in path) or "<document>", message, _node_line(self.root, path))

    def mapping(self, value, path):
        """value itself, or {} when absent; anything but a mapping is a SchemaError."""
        if value is None:
            return {}
        if not isinstance(value, dict):
            self.fail(path, f"expected a mapping, got {type(value).__name__}")
        return value

    def get(self, mapping, path, key, required=True, default=None):
        if not isinstance(mapping, dict):
            self.fail(path, "expected a mapping")
        if key not in mapping:
            if required:
                self.fail(path + [key], "missing required field")
            return default
        return mapping[key]

    def number(self, value, path, positive=False):
        if isinstance(value, str) and value in self.parameters:
            value = self.parameters[value]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(path, f"expected a number or parameter name, got {value!r}")
        value = float(value)
        if positive and not value > 0:
            self.fail(path, f"must be positive, got {value}")
        return value

    def number_list(self, value, path, length=None):
        if not isinstance(value, list):
            self.fail(path, "expected a list")
        if length is not None and len(value) != length:
            self.fail(path, f"expected {length} entries, got {len(value)}")
        return np.array([self.number(v, path + [i]) for i, v in enumerate(value)])

    def matrix(self, value, path):
        if not isinstance(value, list) or not value:
            self.fail(path, "expected a non-empty list of rows")
        return np.array([self.number_list(row, path + [i]) for i, row in enumerate(value)])

    def scale(self, value, path):
        """Product of numbers, parameters, '1/parameter' and at most one time input."""
        items = value if isinstance(value, list) else [value]
        scale, time_factor = 1.0, None
        for i, item in enumerate(items):
            here = path + [i] if isinstance(value, list) else path
            if isinstance(item, str) and item in self.inputs:
                if time_factor is not None:
                    self.fail(here, "at most one time input per rate")
                time_factor = self.inputs[item]
            elif isinstance(item, str) and item.startswith("1/"):
                scale /= self.number(item[2:].strip(), here, positive=True)
            else:
                scale *= self.number(item, here)
        return scale, time_factor


def _parse_inputs(schema, raw):
    for name, spec in schema.mapping(raw, ["inputs"]).items():
        path = ["inputs", name]
        form = schema.get(spec, path, "form")
        if form == "constant":
            schema.inputs[name] = ConstantInput(schema.number(schema.get(spec, path, "value"), path + ["value"]))
        elif form == "piecewise_constant":
            times = schema.number_list(schema.get(spec, path, "times"), path + ["times"])
            values = schema.number_list(schema.get(spec, path, "values"), path + ["values"], len(times))
            try:
                schema.inputs[name] = PiecewiseConstantInput(times, values)
            except ValueError as err:
                schema.fail(path, str(err))
        else:
            schema.fail(path + ["form"], f"unknown input form '{form}'")


def _parse_rate(schema, raw, path, species):
    n = len(species)
    form = schema.get(raw, path, "form")
    scale, time_factor = schema.scale(schema.get(raw, path, "scale", required=False, default=1.0),
                                      path + ["scale"])
    factors = []
    if form == "affine_product":
        raw_factors = schema.get(raw, path, "factors", required=False, default=[]) or []
        if not isinstance(raw_factors, list):
            schema.fail(path + ["factors"], "expected a list of factors")
        for k, fac in enumerate(raw_factors):
            fpath = path + ["factors", k]
            coeffs = np.zeros(n)
            for name, c in schema.mapping(schema.get(fac, fpath, "coeffs"), fpath + ["coeffs"]).items():
                if name not in species:
                    schema.fail(fpath + ["coeffs", name], f"unknown species '{name}'")
                coeffs[species.index(name)] = schema.number(c, fpath + ["coeffs", name])
            offset = schema.number(schema.get(fac, fpath, "offset", required=False, default=0.0),
                                   fpath + ["offset"])
            factors.append((offset, coeffs))
    elif form == "mass_action":
        for name, order in schema.mapping(schema.get(raw, path, "orders"), path + ["orders"]).items():
            if name not in species:
                schema.fail(path + ["orders", name], f"unknown species '{name}'")
            if isinstance(order, bool) or not isinstance(order, int) or order < 0:
                schema.fail(path + ["orders", name], "order must be a nonnegative integer")
            factors.extend([(0.0, np.eye(n)[species.index(name)])] * order)
    else:
        schema.fail(path + ["form"], f"unknown rate_expr form '{form}'")
    return AffineProductRate(scale, factors, time_factor)


def parse_model(text):
    """Builds a LoadedModel from the text of a YAML model document."""
    schema = _ModelSchema(text)
    doc = schema.data
    if not isinstance(doc, dict):
        schema.fail([], "the document must be a mapping")
    if schema.get(doc, [], "schema_version") != SCHEMA_VERSION:
        schema.fail(["schema_version"], f"unsupported schema version, expected {SCHEMA_VERSION}")
    species = schema.get(doc, [], "species")
    if not isinstance(species, list) or not species or not all(isinstance(s, str) for s in species) \
            or len(set(species)) != len(species):
        schema.fail(["species"], "expected a non-empty list of distinct names")
    n = len(species)
    params = schema.mapping(schema.get(doc, [], "parameters", required=False), ["parameters"])
    for name, value in params.items():
        schema.parameters[name] = schema.number(value, ["parameters", name])
    _parse_inputs(schema, schema.get(doc, [], "inputs", required=False, default={}))
    epsilon = schema.number(schema.get(doc, [], "epsilon"), ["epsilon"], positive=True)
    volume = schema.number(schema.get(doc, [], "volume", required=False, default=1.0), ["volume"], positive=True)

    raw_reactions = schema.get(doc, [], "reactions")
    if not isinstance(raw_reactions, list) or not raw_reactions:
        schema.fail(["reactions"], "expected a non-empty list")
    reactions = []
    for i, raw in enumerate(raw_reactions):
        path = ["reactions", i]
        name = str(schema.get(raw, path, "name"))
        stoich = schema.number_list(schema.get(raw, path, "stoich"), path + ["stoich"], n)
        timescale = schema.get(raw, path, "timescale", required=False, default="slow")
        if timescale not in TIMESCALES:
            schema.fail(path + ["timescale"], f"must be one of {TIMESCALES}")
        rate = _parse_rate(schema, schema.get(raw, path, "rate_expr"), path + ["rate_expr"], species)
        reactions.append(Reaction(name, stoich, rate, timescale))

    raw_tm = schema.get(doc, [], "transform")
    try:
        tm = TransformMatrices(
            schema.matrix(schema.get(raw_tm, ["transform"], "A_x"), ["transform", "A_x"]),
            schema.matrix(schema.get(raw_tm, ["transform"], "A_z"), ["transform", "A_z"]),
            raw_tm.get("slow_names"), raw_tm.get("fast_names"),
        )
    except TransformError as err:
        schema.fail(["transform"], str(err))
    if tm.A.shape[1] != n:
        schema.fail(["transform"], f"transform acts on {tm.A.shape[1]} species, model has {n}")

    domain = None
    raw_domain = schema.get(doc, [], "domain", required=False)
    if raw_domain is not None:
        domain = PhysicalDomain(
            schema.number_list(schema.get(raw_domain, ["domain"], "lower"), ["domain", "lower"], n),
            schema.number_list(schema.get(raw_domain, ["domain"], "upper"), ["domain", "upper"], n),
        )

    initial = schema.mapping(schema.get(doc, [], "initial", required=False), ["initial"])
    y0 = schema.number_list(initial.get("y0", [0.0] * n), ["initial", "y0"], n)
    psi_x0 = psi_z0 = None
    if "psi_x0" in initial:
        psi_x0 = schema.number_list(initial["psi_x0"], ["initial", "psi_x0"], tm.n_s)
    if "psi_z0" in initial:
        psi_z0 = schema.number_list(initial["psi_z0"], ["initial", "psi_z0"], tm.n_f)

    net = ReactionNetwork(
        species_names=tuple(species), reactions=tuple(reactions), epsilon=epsilon, volume=volume,
        domain=domain, parameters=dict(schema.parameters), name=str(doc.get("name", "model")),
    )
    return LoadedModel(net, tm, y0, psi_x0, psi_z0)


def builtin_model(name):
    if name != "phospho-example":
        raise ValueError(f"unknown builtin model '{name}'")
    p = PhosphoParams()
    return LoadedModel(
        build_example_phospho(p),
        TransformMatrices(PHOSPHO_A_X, PHOSPHO_A_Z, PHOSPHO_SLOW_NAMES, PHOSPHO_FAST_NAMES),
        y0=np.zeros(3),
        closed_form_gamma1=lambda x, t: np.array([phospho_closed_form_gamma1(p, x[0])]),
    )


def load_config(model):
    """A builtin model name or the path of a YAML model file."""
    if model in BUILTIN_MODELS:
        return builtin_model(model)
    path = Path(model)
    if not path.is_file():
        raise ModelValidationError(f"model file not found: {model}")
    return parse_model(path.read_text(encoding="utf-8"))


# Run configuration --------------------------------------------------------

@dataclass
class RunConfig:
    command: str
    model: str
    t_span: Tuple[float, float] = DEFAULT_TSPAN
    grid: int = DEFAULT_GRID
    rtol: float = DEFAULT_RTOL
    atol: float = DEFAULT_ATOL
    eps_list: List[float] = field(default_factory=list)
    n_realizations: int = DEFAULT_N
    dt: Optional[float] = None
    seed: int = 0
    threads: Optional[int] = None
    out: Path = Path(".")
    model_kind: str = ensemble.REDUCED
    which: str = "both"
    psi_x0: Optional[np.ndarray] = None
    sweep_sde: bool = False

    def __post_init__(self):
        if self.grid < 1:
            raise ValueError("--grid must be at least 1")
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("--rtol and --atol must be positive")
        if self.n_realizations < 1:
            raise ValueError("--n must be positive")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("--dt must be positive")
        if self.threads is not None and self.threads < 1:
            raise ValueError("--threads must be positive")
        if any(e <= 0 for e in self.eps_list):
            raise ValueError("--eps values must be positive")

    @property
    def t_grid(self):
        return np.linspace(self.t_span[0], self.t_span[1], self.grid)

    def single_epsilon(self):
        if len(self.eps_list) > 1:
            raise ValueError(f"'{self.command}' takes a single --eps value")
        return self.eps_list[0] if self.eps_list else None


def parse_tspan(text):
    try:
        t0, t1 = (float(v) for v in text.split(":"))
    except ValueError:
        raise ValueError(f"--tspan must look like 0:50, got '{text}'")
    if not t1 > t0:
        raise ValueError(f"--tspan end must exceed start, got '{text}'")
    return t0, t1


def parse_eps_list(text):
    """Comma separated epsilons, returned in descending order."""
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ValueError(f"--eps must be comma separated numbers, got '{text}'")
    return sorted(set(values), reverse=True)


def parse_vector(text):
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise ValueError(f"expected comma separated numbers, got '{text}'")


def default_threads():
    env = os.environ.get("LNAREDUCE_THREADS")
    if env:
        return int(env)
    return os.cpu_count() or 1


# Output -------------------------------------------------------------------

def write_csv(result, path, slow_names=(), fast_names=()):
    """
    Writes a MomentTrajectory or EnsembleStats as UTF-8 CSV: header row,
    ascending t, 17 significant digits.  Returns the column names.
    """
    if isinstance(result, ensemble.EnsembleStats):
        frame = result.to_frame()
    else:
        frame = result.to_frame(slow_names, fast_names)
    return _write_frame(frame, path)


def _write_frame(frame, path):
    frame.to_csv(path, index=False, float_format="%.16e", lineterminator="\n", encoding="utf-8")
    return list(frame.columns)


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text, encoding="utf-8")
    return text


class _Outputs:
    """Collects the files of one command and describes them in manifest.json."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.files = {}
        cfg.out.mkdir(parents=True, exist_ok=True)

    def csv(self, name, result, description, slow_names=(), fast_names=()):
        columns = write_csv(result, self.cfg.out / name, slow_names, fast_names)
        self.files[name] = {"description": description, "columns": columns}

    def frame(self, name, frame, description):
        self.files[name] = {"description": description, "columns": _write_frame(frame, self.cfg.out / name)}

    def json(self, name, obj, description):
        self.files[name] = {"description": description}
        return _write_json(obj, self.cfg.out / name)

    def close(self):
        manifest = {
            "command": self.cfg.command,
            "model": self.cfg.model,
            "t_span": list(self.cfg.t_span),
            "grid": self.cfg.grid,
            "files": self.files,
        }
        if self.cfg.command == "sde" or self.cfg.sweep_sde:
            manifest.update(seed=self.cfg.seed, n_realizations=self.cfg.n_realizations)
        _write_json(manifest, self.cfg.out / "manifest.json")


# Commands -----------------------------------------------------------------

def _setup(cfg):
    loaded = load_config(cfg.model)
    sp = loaded.transformed()
    x0, z0 = loaded.initial_state(sp)
    red = reduce(sp, x0, z0, closed_form_gamma1=loaded.closed_form_gamma1)
    psi_x0 = cfg.psi_x0 if cfg.psi_x0 is not None else loaded.psi_x0
    psi_x0 = np.zeros(sp.n_s) if psi_x0 is None else np.asarray(psi_x0, dtype=float)
    if psi_x0.shape != (sp.n_s,):
        raise ValueError(f"--psi-x0 needs {sp.n_s} values")
    psi_z0 = loaded.psi_z0
    if psi_z0 is None:
        psi_z0 = red.fork().gamma2(x0, cfg.t_span[0]) @ psi_x0
    return loaded, sp, red, x0, z0, psi_x0, np.asarray(psi_z0, dtype=float)


def cmd_reduce(cfg, out):
    _, sp, red, x0, _, _, _ = _setup(cfg)
    times = np.linspace(cfg.t_span[0], cfg.t_span[1], REDUCE_SAMPLES)
    path = reduced_path(red, x0, cfg.t_span, times, cfg.rtol, cfg.atol)
    samples = []
    model = red.fork()
    for x, t in zip(path.x, path.times):
        ev = model.evaluate(x, t)
        margin = float(np.max(np.linalg.eigvals(sp.B2(x, ev.z, t, 0.0)).real))
        samples.append({
            "t": float(t), "x": x.tolist(), "gamma1": ev.z.tolist(), "gamma2": ev.gamma2.tolist(),
            "Abar": ev.Abar.tolist(), "hurwitz_margin": margin,
        })
    summary = {
        "model": sp.net.name,
        "slow_names": list(sp.slow_names),
        "fast_names": list(sp.fast_names),
        "epsilon": sp.epsilon,
        "closed_form_gamma1": red.closed_form_gamma1 is not None,
        "worst_hurwitz_margin": max(s["hurwitz_margin"] for s in samples),
        "samples": samples,
    }
    sys.stdout.write(out.json("reduce.json", summary, "reduced model samples along the reduced path"))
    return EXIT_OK


def cmd_moments(cfg, out):
    _, sp, red, x0, z0, psi_x0, psi_z0 = _setup(cfg)
    eps = cfg.single_epsilon()
    if cfg.which in ("original", "both"):
        sp_eps = sp if eps is None else sp.with_epsilon(eps)
        state = OriginalMomentState.deterministic(x0, z0, psi_x0, psi_z0)
        traj = OriginalMomentSystem(sp_eps).integrate(state, cfg.t_span, cfg.t_grid, cfg.rtol, cfg.atol)
        for violation in check_moment_invariants(traj):
            LOGGER.warning("original moments: %s", violation)
        out.csv("moments_original.csv", traj, f"original moments at epsilon={sp_eps.epsilon}",
                sp.slow_names, sp.fast_names)
    if cfg.which in ("reduced", "both"):
        state = ReducedMomentState.deterministic(x0, psi_x0)
        traj = ReducedMomentSystem(red).integrate(state, cfg.t_span, cfg.t_grid, cfg.rtol, cfg.atol)
        for violation in check_moment_invariants(traj):
            LOGGER.warning("reduced moments: %s", violation)
        out.csv("moments_reduced.csv", traj, "reduced moments", sp.slow_names)
    return EXIT_OK


def cmd_sde(cfg, out):
    _, sp, red, x0, z0, psi_x0, psi_z0 = _setup(cfg)
    grid = cfg.t_grid
    if cfg.model_kind == ensemble.ORIGINAL:
        eps = cfg.single_epsilon() or sp.epsilon
        model, psi0 = sp.with_epsilon(eps), np.concatenate([psi_x0, psi_z0])
    else:
        eps, model, psi0 = None, red, psi_x0
    if cfg.dt is None:
        ens_cfg = ensemble.EnsembleConfig.with_default_dt(cfg.n_realizations, grid, cfg.model_kind, eps, cfg.seed)
    else:
        ens_cfg = ensemble.EnsembleConfig(cfg.n_realizations, cfg.dt, grid, cfg.seed, cfg.model_kind, eps)
    path = ensemble.ensemble_path(model, ens_cfg, x0, z0)
    stats = ensemble.simulate_ensemble(model, ens_cfg, path, psi0, threads=cfg.threads)
    name = f"sde_{cfg.model_kind}.csv"
    out.csv(name, stats, f"Euler-Maruyama moments of the {cfg.model_kind} fluctuations, "
                         f"dt={ens_cfg.dt}, states {list(stats.state_names)}")
    return EXIT_OK


def cmd_sweep(cfg, out):
    loaded, sp, red, x0, z0, psi_x0, _ = _setup(cfg)
    eps_list = cfg.eps_list or list(DEFAULT_SWEEP)
    family = analysis.ModelFamily(sp, red, x0, z0, psi_x0)
    result = analysis.epsilon_sweep(family, eps_list, cfg.t_span, cfg.t_grid, cfg.rtol, cfg.atol, cfg.threads)
    out.frame("sweep.csv", result.to_frame(), "sup-t errors per epsilon")
    sys.stdout.write(out.json("sweep.json", result.to_dict(), "epsilon sweep with fitted log-log slopes"))
    if cfg.sweep_sde:
        sde = analysis.ensemble_sweep(family, eps_list, cfg.t_grid, cfg.n_realizations, cfg.seed, cfg.threads)
        out.frame("sweep_sde.csv", sde.to_frame(), "sup-t ensemble errors and noise floors per epsilon")
        out.json("sweep_sde.json", sde.to_dict(), "ensemble epsilon sweep with fitted log-log slopes")
    return EXIT_OK


def cmd_check(cfg, out):
    loaded = load_config(cfg.model)
    sp = loaded.transformed()
    x0, z0 = loaded.initial_state(sp)
    try:
        path = original_path(sp, x0, z0, cfg.t_span, cfg.t_grid, rtol=cfg.rtol, atol=cfg.atol)
        trajectory = path.trajectory()
    except NumericalError as err:
        LOGGER.warning("deterministic path failed (%s); checking the initial state only", err)
        trajectory = [(x0, z0, cfg.t_span[0])]
    report = check_assumptions(sp, trajectory)
    sys.stdout.write(out.json("check.json", report.to_dict(), "assumption checks along the deterministic path"))
    if not report.passed:
        _report_error("AssumptionCheckFailed", "failed checks: " + ", ".join(report.failures()))
        return EXIT_VALIDATION
    return EXIT_OK


COMMANDS = {
    "reduce": cmd_reduce,
    "moments": cmd_moments,
    "sde": cmd_sde,
    "sweep": cmd_sweep,
    "check": cmd_check,
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def build_parser():
    parser = _Parser(prog="lnareduce", description="Reduction of slow/fast linear noise approximations")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--model", required=True, help="YAML model file or builtin name (phospho-example)")
        p.add_argument("--tspan", default="0:50")
        p.add_argument("--grid", type=int, default=DEFAULT_GRID)
        p.add_argument("--rtol", type=float, default=DEFAULT_RTOL)
        p.add_argument("--atol", type=float, default=DEFAULT_ATOL)
        p.add_argument("--eps", default=None, help="epsilon, or comma separated list for sweep")
        p.add_argument("--psi-x0", default=None, help="initial slow fluctuation, comma separated")
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--out", default=".")
        p.add_argument("--verbose", action="store_true")
        if name == "sde":
            p.add_argument("--n", type=int, default=DEFAULT_N)
            p.add_argument("--dt", type=float, default=None)
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--model-kind", choices=(ensemble.ORIGINAL, ensemble.REDUCED), default=ensemble.REDUCED)
        if name == "sweep":
            p.add_argument("--sde", action="store_true", help="also measure the errors on Euler-Maruyama ensembles")
            p.add_argument("--n", type=int, default=DEFAULT_SWEEP_N)
            p.add_argument("--seed", type=int, default=0)
        if name == "moments":
            p.add_argument("--which", choices=("original", "reduced", "both"), default="both")
    return parser


def _run_config(args):
    return RunConfig(
        command=args.command,
        model=args.model,
        t_span=parse_tspan(args.tspan),
        grid=args.grid,
        rtol=args.rtol,
        atol=args.atol,
        eps_list=parse_eps_list(args.eps) if args.eps else [],
        n_realizations=getattr(args, "n", DEFAULT_N),
        dt=getattr(args, "dt", None),
        seed=getattr(args, "seed", 0),
        threads=args.threads if args.threads is not None else default_threads(),
        out=Path(args.out),
        model_kind=getattr(args, "model_kind", ensemble.REDUCED),
        which=getattr(args, "which", "both"),
        psi_x0=parse_vector(args.psi_x0) if args.psi_x0 else None,
        sweep_sde=getattr(args, "sde", False),
    )


def _report_error(kind, message):
    sys.stderr.write(json.dumps({"error": kind, "message": " ".join(str(message).split())}) + "\n")


def run_command(argv):
    """Runs one command and returns its exit code; never raises."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        _report_error("UsageError", err)
        return EXIT_USAGE
    except SystemExit as exit_:
        return EXIT_OK if exit_.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        _report_error("UsageError", "missing command")
        return EXIT_USAGE
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _run_config(args)
        out = _Outputs(cfg)
        code = COMMANDS[cfg.command](cfg, out)
        out.close()
        return code
    except (ModelValidationError, ValueError, OSError) as err:
        _report_error(type(err).__name__, err)
        return EXIT_VALIDATION
    except NumericalError as err:
        _report_error(type(err).__name__, err)
        return EXIT_NUMERICAL
    except LnaReduceError as err:
        _report_error(type(err).__name__, err)
        return EXIT_NUMERICAL


def main():
    sys.exit(run_command(sys.argv[1:]))
