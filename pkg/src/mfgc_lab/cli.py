"""Experiment driver: JSON-configured subcommands producing deterministic,
manifest-audited artifacts.

Exit codes: 0 all checks pass, 1 a scientific check failed, 2 configuration
or solver error. A manifest is written even on failure, recording the cause.
"""

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time

import numpy as np
from jsonschema import Draft202012Validator

from . import __version__
from .hamiltonian import ReducedHamiltonian
from .measures import (
    DensityGrid1d,
    JointEnsemble,
    ParticleEnsemble,
    gaussian_density,
    make_rng,
)
from .models import JointLaw, ModelError, build_model
from . import monotonicity as mono
from .solver import (
    GridSpec,
    ParticleConfig,
    PicardConfig,
    SolverError,
    equilibrium_picard,
    solve_particle_fbsde,
)
from .suite import run_suite
from .value import (
    FDConfig,
    ValueConfig,
    ValueQuery,
    lipschitz_estimate,
    master_residual,
    propagation_check,
    semigroup_check,
    value,
    value_gradient,
)

WIDE = np.linspace(-12.0, 12.0, 961)


class ConfigError(ValueError):
    pass


class CheckFailure(Exception):
    """A completed run whose scientific verdict is negative."""


# ---------------------------------------------------------------------------
# deterministic serialization
# ---------------------------------------------------------------------------


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else repr(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def stable_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([str(v) if not isinstance(v, str) else v for v in row])
    return buf.getvalue()


def atomic_write(path: str, text: str) -> None:
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class ArtifactSink:
    """Collects named text artifacts, writes them atomically, and records
    the inventory (name, checksum, size) for the manifest."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.inventory = []

    def write(self, name: str, text: str) -> None:
        os.makedirs(self.out_dir, exist_ok=True)
        atomic_write(os.path.join(self.out_dir, name), text)
        self.inventory.append(
            {"name": name, "sha256": _sha256(text), "size": len(text.encode("utf-8"))}
        )


# ---------------------------------------------------------------------------
# config schema
# ---------------------------------------------------------------------------


def _obj(props, required=()):
    return {
        "type": "object",
        "properties": props,
        "additionalProperties": False,
        "required": list(required),
    }


_NUM = {"type": "number"}
_INT = {"type": "integer"}
_STR = {"type": "string"}
_PARAMS = {"type": "object", "additionalProperties": {"type": "number"}}
_NUMERICS = _obj({
    "horizon": _NUM, "n_x": _INT, "n_t": _INT, "theta_out": _NUM,
    "tol_out": _NUM, "max_outer": _INT, "n_paths": _INT, "seed": _INT,
    "n_outer_fd": _INT, "n_quantiles": _INT,
})

SCHEMAS = {
    "solve": _obj({
        "model": _STR, "params": _PARAMS,
        "grid": _obj({"x_min": _NUM, "x_max": _NUM, "n_x": _INT},
                     ("x_min", "x_max", "n_x")),
        "time": _obj({"t0": _NUM, "horizon": _NUM, "n_t": _INT},
                     ("t0", "horizon", "n_t")),
        "mu0": _STR, "beta": _NUM, "method": {"enum": ["grid", "particle"]},
        "particles": _INT, "seed": _INT, "theta_out": _NUM, "tol_out": _NUM,
        "max_outer": _INT, "snapshots": {"type": "array", "items": _INT},
    }, ("model", "grid", "time", "mu0")),
    "value": _obj({
        "model": _STR, "params": _PARAMS, "x": _NUM, "t0": _NUM, "mu0": _STR,
        "method": {"enum": ["grid", "particle"]}, "numerics": _NUMERICS,
    }, ("model", "x", "mu0")),
    "residual": _obj({
        "model": _STR, "params": _PARAMS, "x": _NUM, "t0": _NUM, "mu0": _STR,
        "particles": _INT, "seed": _INT, "numerics": _NUMERICS,
        "fd": _obj({"dt": _NUM, "dx": _NUM, "dmu": _NUM}),
        "tolerance": _NUM,
    }, ("model", "x", "mu0")),
    "propagate": _obj({
        "model": _STR, "params": _PARAMS, "kind": {"enum": ["ll", "disp"]},
        "pairs": _INT, "seed": _INT, "tolerance": _NUM, "lam": _NUM,
        "numerics": _NUMERICS,
    }, ("model", "kind")),
    "lipschitz": _obj({
        "model": _STR, "params": _PARAMS, "order": _INT, "pairs": _INT,
        "t0": _NUM, "seed": _INT, "numerics": _NUMERICS,
        "expected_max": _NUM, "tolerance": _NUM,
    }, ("model",)),
    "semigroup": _obj({
        "model": _STR, "params": _PARAMS, "t0": _NUM, "t1": _NUM, "mu0": _STR,
        "numerics": _NUMERICS, "tolerance": _NUM,
    }, ("model", "mu0")),
    "check-monotonicity": _obj({
        "model": _STR, "params": _PARAMS,
        "kind": {"enum": list(mono.KINDS)},
        "trials": _INT, "tolerance": _NUM, "seed": _INT, "lam": _NUM,
        "n": _INT, "feedback": {"type": "array", "items": _NUM},
    }, ("model", "kind")),
    "suite": _obj({
        "mode": {"enum": ["fast", "full"]},
        "names": {"type": "array", "items": _STR},
        "tolerances": {"type": "object", "additionalProperties": _PARAMS},
    }),
}


def validate_config(op: str, config: dict) -> None:
    validator = Draft202012Validator(SCHEMAS[op])
    errors = sorted(validator.iter_errors(config), key=lambda e: e.json_path)
    if errors:
        lines = [f"  {e.json_path}: {e.message}" for e in errors]
        raise ConfigError(
            f"invalid configuration for {op!r}:\n" + "\n".join(lines)
        )


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")


def apply_overrides(config: dict, sets: list) -> dict:
    """Apply dotted-path key=value overrides; values parsed as JSON when
    possible, kept as strings otherwise."""
    out = json.loads(json.dumps(config))
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {key!r} crosses a non-object")
        node[parts[-1]] = val
    return out


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _model_and_ham(config):
    try:
        model = build_model(config["model"], **config.get("params", {}))
    except ModelError as exc:
        raise ConfigError(str(exc))
    return model, ReducedHamiltonian(model)


def parse_mu0(spec: str, x_grid=None, particles=None, seed=0):
    """Initial measure: 'gaussian:mean,std' or a CSV file path. Returns a
    density when a grid is given, a particle ensemble otherwise."""
    if spec.startswith("gaussian:"):
        try:
            mean_s, std_s = spec[len("gaussian:"):].split(",")
            mean, std = float(mean_s), float(std_s)
        except ValueError:
            raise ConfigError(f"mu0 {spec!r}: expected 'gaussian:mean,std'")
        if std <= 0:
            raise ConfigError(f"mu0 {spec!r}: std must be positive")
        if x_grid is not None:
            return gaussian_density(mean, std, x_grid)
        n = particles or 1024
        return ParticleEnsemble(np.sort(make_rng(seed, stream=3).normal(mean, std, n)))
    try:
        with open(spec, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"mu0 {spec!r}: not a gaussian spec and not a readable file ({exc})")
    if x_grid is not None:
        return DensityGrid1d.from_csv(text)
    return ParticleEnsemble.from_csv(text)


def _value_config(config) -> ValueConfig:
    return ValueConfig(**config.get("numerics", {}))


# ---------------------------------------------------------------------------
# subcommand implementations; each returns a verdict dict
# ---------------------------------------------------------------------------


def op_solve(config, sink: ArtifactSink) -> dict:
    model, rh = _model_and_ham(config)
    g, tm = config["grid"], config["time"]
    grid = GridSpec(g["x_min"], g["x_max"], g["n_x"], tm["t0"], tm["horizon"], tm["n_t"])
    method = config.get("method", "grid")
    seed = config.get("seed", 0)

    if method == "particle":
        xi0 = parse_mu0(config["mu0"], particles=config.get("particles", 4096), seed=seed)
        pcfg = ParticleConfig()
        run = solve_particle_fbsde(rh, model.dxG, xi0, grid,
                                   beta=config.get("beta", 0.0), seed=seed, config=pcfg)
        sink.write("moments.csv", csv_text(
            ("t", "mean", "variance"),
            [(t, float(np.mean(run.X[k])), float(np.var(run.X[k])))
             for k, t in enumerate(grid.ts)]))
        sink.write("terminal.csv", run.state_ensemble(grid.n_t).to_csv())
        sink.write("residuals.csv", csv_text(
            ("iteration", "residual"), list(enumerate(run.residuals, start=1))))
        return {"converged": bool(run.converged), "iterations": run.iterations}

    mu0 = parse_mu0(config["mu0"], x_grid=grid.xs)
    cfg = PicardConfig(
        theta_out=config.get("theta_out", 0.5),
        tol_out=config.get("tol_out", 1e-7),
        max_outer=config.get("max_outer", 50),
    )
    flow = equilibrium_picard(rh, model.G, mu0, grid, config=cfg)

    u_rows, mu_rows = [], []
    for k, t in enumerate(grid.ts):
        dens = flow.mu_density(k)
        for j, x in enumerate(grid.xs):
            u_rows.append((t, x, flow.u[k, j], flow.du[k, j]))
            mu_rows.append((t, x, dens.values[j]))
    sink.write("u.csv", csv_text(("t", "x", "u", "du"), u_rows))
    sink.write("mu.csv", csv_text(("t", "x", "density"), mu_rows))
    snapshots = config.get("snapshots", [0, grid.n_t // 2, grid.n_t])
    for k in snapshots:
        if not 0 <= k <= grid.n_t:
            raise ConfigError(f"snapshot index {k} outside [0, {grid.n_t}]")
        law = flow.rho_law(k)
        sink.write(f"rho_{k:05d}.csv", csv_text(
            ("x", "p", "weight"),
            zip(law.states[:, 0], law.seconds[:, 0], law.weights)))
    sink.write("residuals.csv", csv_text(
        ("iteration", "residual"), list(enumerate(flow.residuals, start=1))))
    return {"converged": bool(flow.converged), "iterations": flow.iterations,
            "mass_drift_max": flow.mass_drift_max}


def op_value(config, sink: ArtifactSink) -> dict:
    model, rh = _model_and_ham(config)
    cfg = _value_config(config)
    mu0 = parse_mu0(config["mu0"], x_grid=WIDE if config.get("method", "grid") == "grid" else None,
                    particles=cfg.n_paths, seed=cfg.seed)
    q = ValueQuery(rh, model.G, config.get("t0", 0.0), config["x"], mu0,
                   method=config.get("method", "grid"), config=cfg)
    val = value(q)
    report = {"value": val, "t0": q.t0, "x": config["x"]}
    if q.method == "grid":
        report["gradient"] = float(value_gradient(q)[0])
    sink.write("value.json", stable_json(report))
    return {"value": val}


def op_residual(config, sink: ArtifactSink) -> dict:
    model, rh = _model_and_ham(config)
    cfg = _value_config(config)
    mu0 = parse_mu0(config["mu0"], particles=config.get("particles", 32),
                    seed=config.get("seed", 0))
    q = ValueQuery(rh, model.G, config.get("t0", 0.0), config["x"], mu0, config=cfg)
    fd = FDConfig(**config.get("fd", {}))
    res = master_residual(q, fd)
    tol = config.get("tolerance")
    verdict = None if tol is None else bool(res <= tol)
    sink.write("residual.json", stable_json(
        {"residual": res, "tolerance": tol, "verdict": verdict}))
    if verdict is False:
        raise CheckFailure(f"master residual {res:.3e} exceeds tolerance {tol:.3e}")
    return {"residual": res, "verdict": verdict}


def _random_pairs(rng, n):
    out = []
    for _ in range(n):
        m1, m2 = rng.normal(0.0, 0.8, 2)
        s1, s2 = rng.uniform(0.7, 1.3, 2)
        out.append((gaussian_density(m1, s1, WIDE), gaussian_density(m2, s2, WIDE)))
    return out


def op_propagate(config, sink: ArtifactSink) -> dict:
    model, rh = _model_and_ham(config)
    cfg = _value_config(config)
    pairs = _random_pairs(make_rng(config.get("seed", 0)), config.get("pairs", 5))
    tol = config.get("tolerance", 1e-6)
    rep = propagation_check(config["kind"], rh, model.G, pairs, config=cfg,
                            lam=config.get("lam", 0.0), tolerance=tol)
    rows = [(ip, float(t), rep.gaps[ip, it])
            for ip in range(rep.gaps.shape[0])
            for it, t in enumerate(rep.checkpoints)]
    sink.write("propagation.csv", csv_text(("pair", "t", "gap"), rows))
    sink.write("propagation.json", stable_json(
        {"kind": rep.kind, "min_gap": rep.min_gap, "tolerance": rep.tolerance,
         "verdict": rep.passed()}))
    if not rep.passed():
        raise CheckFailure(f"min propagation gap {rep.min_gap:.3e} below -{tol:.1e}")
    return {"min_gap": rep.min_gap, "verdict": True}


def op_lipschitz(config, sink: ArtifactSink) -> dict:
    model, rh = _model_and_ham(config)
    cfg = _value_config(config)
    pairs = _random_pairs(make_rng(config.get("seed", 0)), config.get("pairs", 5))
    est = lipschitz_estimate(config.get("order", 2), rh, model.G, pairs,
                             config.get("t0", 0.0), cfg)
    sink.write("lipschitz.csv", csv_text(
        ("pair", "ratio"), list(enumerate(est["ratios"]))))
    report = {"max": est["max"], "median": est["median"], "skipped": est["skipped"]}
    verdict = None
    if "expected_max" in config:
        tol = config.get("tolerance", 1e-3)
        verdict = bool(abs(est["max"] - config["expected_max"]) <= tol)
        report.update({"expected_max": config["expected_max"], "tolerance": tol,
                       "verdict": verdict})
    sink.write("lipschitz.json", stable_json(report))
    if verdict is False:
        raise CheckFailure(
            f"max ratio {est['max']:.6f} not within tolerance of {config['expected_max']:.6f}")
    return {"max": est["max"], "verdict": verdict}


def op_semigroup(config, sink: ArtifactSink) -> dict:
    model, rh = _model_and_ham(config)
    cfg = _value_config(config)
    mu0 = parse_mu0(config["mu0"], x_grid=WIDE)
    t0 = config.get("t0", 0.0)
    t1 = config.get("t1", cfg.horizon / 2.0)
    disc = semigroup_check(rh, model.G, mu0, t0, t1, np.linspace(-2.0, 2.0, 21), cfg)
    tol = config.get("tolerance")
    verdict = None if tol is None else bool(disc <= tol)
    sink.write("semigroup.json", stable_json(
        {"discrepancy": disc, "t0": t0, "t1": t1, "tolerance": tol, "verdict": verdict}))
    if verdict is False:
        raise CheckFailure(f"semigroup discrepancy {disc:.3e} exceeds {tol:.3e}")
    return {"discrepancy": disc, "verdict": verdict}


def op_check_monotonicity(config, sink: ArtifactSink) -> dict:
    model, rh = _model_and_ham(config)
    kind = config["kind"]
    n = config.get("n", 8)
    lam = config.get("lam", 0.0)
    coeffs = config.get("feedback", [0.0, 1.0])
    phi = lambda xs: coeffs[0] + coeffs[1] * np.asarray(xs)

    def ens(rng):
        return ParticleEnsemble(rng.normal(size=n))

    def joint(rng):
        return JointEnsemble(rng.normal(size=(n, 2)))

    def fields(rng):
        return rng.normal(size=(n, 1)), rng.normal(size=(n, 1)), rng.normal(size=(n, 1))

    samplers = {
        "LL-U": (lambda rng, i: (model.G, ens(rng), ens(rng)), mono.ll_gap_U),
        "disp-U": (lambda rng, i: (model.dxG, lam, ens(rng), ens(rng)), mono.disp_gap_U),
        "LL-H-integral": (lambda rng, i: (rh, phi, ens(rng), ens(rng)), mono.ll_gap_H),
        "disp-H-integral": (lambda rng, i: (rh, joint(rng), joint(rng), lam), mono.disp_gap_H),
        # differential forms assert nonpositivity, so the gap is the negated form
        "LL-H-differential": (
            lambda rng, i: (rh, phi, ens(rng), *fields(rng)),
            lambda *args: -mono.ll_diff_form_H(*args),
        ),
        "disp-H-differential": (
            lambda rng, i: (rh, joint(rng), *fields(rng)[:2], lam),
            lambda *args: -mono.disp_diff_form_H(*args),
        ),
        # the model's running cost takes a weighted law, the gap an ensemble
        "LL-Lagrangian": (
            lambda rng, i: (
                lambda x, a, rho_e: model.f(x, a, JointLaw.from_ensemble(rho_e)),
                joint(rng), joint(rng),
            ),
            mono.ll_lagrangian_gap,
        ),
    }
    sampler, evaluate = samplers[kind]
    rep = mono.check(kind, evaluate, sampler, trials=config.get("trials", 50),
                     tolerance=config.get("tolerance", 1e-8),
                     seed=config.get("seed", 0))
    sink.write("monotonicity.json", stable_json(
        {"kind": rep.kind, "trials": rep.trials, "min_gap": rep.min_gap,
         "tolerance": rep.tolerance, "verdict": rep.verdict, "gaps": rep.gaps}))
    if not rep.verdict:
        raise CheckFailure(f"{kind} min gap {rep.min_gap:.3e} below -{rep.tolerance:.1e}")
    return {"min_gap": rep.min_gap, "verdict": rep.verdict}


def op_suite(config, sink: ArtifactSink) -> dict:
    rep = run_suite(
        mode=config.get("mode", "fast"),
        tolerances=config.get("tolerances"),
        names=config.get("names"),
    )
    rows = []
    report = {"mode": rep.mode, "passed": rep.passed, "checks": {}}
    for r in rep.results:
        report["checks"][r.name] = {
            "passed": r.passed, "metrics": r.metrics,
            "tolerances": r.tolerances, "error": r.error,
        }
        for key, val in sorted(r.metrics.items()):
            if isinstance(val, (int, float, np.floating)):
                rows.append((r.name, "pass" if r.passed else "fail", key, val))
    sink.write("criteria.csv", csv_text(("check", "verdict", "metric", "value"), rows))
    sink.write("suite-report.json", stable_json(report))
    print(rep.table())
    if not rep.passed:
        failed = ", ".join(r.name for r in rep.results if not r.passed)
        raise CheckFailure(f"suite checks failed: {failed}")
    return {"passed": True, "checks": len(rep.results)}


OPS = {
    "solve": op_solve,
    "value": op_value,
    "residual": op_residual,
    "propagate": op_propagate,
    "lipschitz": op_lipschitz,
    "semigroup": op_semigroup,
    "check-monotonicity": op_check_monotonicity,
    "suite": op_suite,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _solve_flag_overrides(args) -> list:
    sets = []
    if args.model is not None:
        sets.append(f"model={args.model}")
    if args.grid is not None:
        xmin, xmax, nx = args.grid.split(",")
        sets += [f"grid.x_min={xmin}", f"grid.x_max={xmax}", f"grid.n_x={nx}"]
    if args.time is not None:
        t0, horizon, nt = args.time.split(",")
        sets += [f"time.t0={t0}", f"time.horizon={horizon}", f"time.n_t={nt}"]
    if args.mu0 is not None:
        sets.append(f"mu0={args.mu0}")
    if args.beta is not None:
        sets.append(f"beta={args.beta}")
    if args.particles is not None:
        sets.append(f"particles={args.particles}")
    if args.method is not None:
        sets.append(f"method={args.method}")
    if args.seed is not None:
        sets.append(f"seed={args.seed}")
    return sets


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfgc-lab",
        description="Numerical laboratory for mean field games of controls.",
    )
    sub = parser.add_subparsers(dest="op", required=True)
    for op in OPS:
        p = sub.add_parser(op)
        p.add_argument("--config", default=None, help="JSON configuration file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path config override (JSON-parsed value)")
        if op == "solve":
            p.add_argument("--model")
            p.add_argument("--grid", metavar="XMIN,XMAX,NX")
            p.add_argument("--time", metavar="T0,T,NT")
            p.add_argument("--mu0")
            p.add_argument("--beta", type=float)
            p.add_argument("--particles", type=int)
            p.add_argument("--method", choices=["grid", "particle"])
            p.add_argument("--seed", type=int)
        if op == "suite":
            p.add_argument("--mode", choices=["fast", "full"])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    sink = ArtifactSink(args.out)
    config = {}
    verdicts = {}
    failure = None
    exit_code = 0
    try:
        config = load_config(args.config)
        sets = list(args.set)
        if args.op == "solve":
            sets = _solve_flag_overrides(args) + sets
        if args.op == "suite" and getattr(args, "mode", None):
            sets = [f"mode={args.mode}"] + sets
        config = apply_overrides(config, sets)
        validate_config(args.op, config)
        verdicts = OPS[args.op](config, sink)
    except CheckFailure as exc:
        failure = str(exc)
        exit_code = 1
    except (ConfigError, SolverError, mono.MeasureError, ModelError, ValueError) as exc:
        failure = f"{type(exc).__name__}: {exc}"
        exit_code = 2

    manifest = {
        "artifact_version": __version__,
        "operation": args.op,
        "config": config,
        "verdicts": verdicts,
        "failure": failure,
        "files": sink.inventory,
        "wall_clock_s": time.perf_counter() - started,
    }
    try:
        sink_text = stable_json(manifest)
        os.makedirs(args.out, exist_ok=True)
        atomic_write(os.path.join(args.out, "manifest.json"), sink_text)
    except OSError as exc:  # manifest best-effort: report, keep the exit code
        print(f"could not write manifest: {exc}", file=sys.stderr)
        exit_code = exit_code or 2

    if failure is not None:
        print(failure, file=sys.stderr)
    return exit_code


if __name__ == "__main__":
    sys.exit(main())
