"""Command-line entry point: ``python -m mfchaos <subcommand> --config FILE``.

Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure
(blow-up, non-convergence, failed scan cell).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import re
import sys
import warnings
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .dynamics import ForceMode, simulate_replicas
from .experiments import (
    DictionarySpec,
    ScanSpec,
    collect_block_sums,
    content_hash,
    dictionary_stat_fn,
    dumps,
    n_cells,
    refit,
    run_scan,
    source_hash,
)
from .meanfield import (
    ConvergenceError,
    Grid1D,
    default_grid,
    default_observables,
    gibbs_fixed_point,
    meanfield_reference_ensemble,
    scheme_propagator_1d,
    solve_mckean_vlasov_1d,
)
from .model import ConfigError, DomainError, InitSpec, ModelConfig, PotentialSpec, SimulationBlowUp
from .norms import QuadratureError
from .statistics import InsufficientReplicas, MomentTable

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SUBCOMMANDS = ("simulate", "gibbs", "meanfield", "oracle-pde", "correlations", "scan", "fit")


# ---------------------------------------------------------------------------
# configuration files


class ConfigFile:
    """Parsed TOML with the source text kept for line-referenced errors."""

    def __init__(self, path: str | Path):
        self.path = str(path)
        try:
            self.text = Path(path).read_text()
        except OSError as err:
            raise ConfigError(f"{path}: cannot read config ({err.strerror})") from None
        try:
            self.data = tomli.loads(self.text)
        except tomli.TOMLDecodeError as err:
            raise ConfigError(f"{path}: {err}") from None

    def line_of(self, section: str, key: str | None = None) -> int | None:
        """1-based line of ``key`` inside ``[section]`` (or of the header)."""
        lines = self.text.splitlines()
        head = re.compile(r"^\s*\[\s*" + re.escape(section) + r"\s*\]\s*(#.*)?$")
        start = next((i for i, ln in enumerate(lines) if head.match(ln)), None)
        if key is None:
            return None if start is None else start + 1
        pat = re.compile(r"^\s*" + re.escape(key) + r"\s*=")
        lo = 0 if start is None else start + 1
        for i in range(lo, len(lines)):
            if start is not None and re.match(r"^\s*\[", lines[i]):
                break
            if pat.match(lines[i]):
                return i + 1
        return None if start is None else start + 1

    def error(self, section: str, key: str | None, message: str) -> ConfigError:
        line = self.line_of(section, key)
        where = f"{self.path}:{line}" if line else self.path
        what = f"[{section}]" + (f" {key}" if key else "")
        return ConfigError(f"{where}: {what}: {message}")

    def section(self, name: str, allowed: set[str] | None = None) -> dict:
        parts = name.split(".")
        node = self.data
        for p in parts:
            node = node.get(p, {}) if isinstance(node, dict) else {}
        if not isinstance(node, dict):
            raise self.error(name, None, "expected a table")
        if allowed is not None:
            for key, val in node.items():
                if key not in allowed and not isinstance(val, dict):
                    raise self.error(name, key, f"unknown key (allowed: {', '.join(sorted(allowed))})")
        return node


def _build(cf: ConfigFile, section: str, ctor, values: dict):
    """Call ``ctor(**values)``, mapping failures to a line in ``section``."""
    try:
        return ctor(**values)
    except (ConfigError, TypeError, ValueError) as err:
        msg = str(err)
        key = next((k for k in values if re.search(r"\b" + re.escape(k) + r"\b", msg)), None)
        raise cf.error(section, key, msg) from None


def load_model(cf: ConfigFile) -> ModelConfig:
    names = {f.name for f in fields(ModelConfig)} - {"potential"}
    sec = cf.section("model", names | {"potential"})
    values = {k: v for k, v in sec.items() if k in names}
    pot = cf.section("model.potential", {"kind", "amplitude", "width", "modes"})
    if pot:
        pvals = dict(pot)
        if "modes" in pvals:
            try:
                pvals["modes"] = tuple((float(c), tuple(np.atleast_1d(xi).astype(float))) for c, xi in pvals["modes"])
            except (TypeError, ValueError):
                raise cf.error("model.potential", "modes", "modes must be a list of [coefficient, frequency]") from None
        values["potential"] = _build(cf, "model.potential", PotentialSpec, pvals)
    return _build(cf, "model", ModelConfig, values)


def default_init(cfg: ModelConfig) -> InitSpec:
    """iid N(1, 0.25) positions; standard Gaussian velocities (kinetic)."""
    if cfg.dynamics == "kinetic":
        return InitSpec.gaussian([1.0] * cfg.d + [0.0] * cfg.d, [0.25] * cfg.d + [1.0] * cfg.d)
    return InitSpec.gaussian([1.0] * cfg.d, 0.25)


def load_init(cf: ConfigFile, cfg: ModelConfig) -> InitSpec:
    sec = cf.section("init", {"kind", "mean", "var", "cov", "epsilon"})
    if not sec:
        return default_init(cfg)
    base = default_init(cfg)
    mean = sec.get("mean", list(base.mean))
    if "cov" in sec and "var" in sec:
        raise cf.error("init", "cov", "give either var or cov, not both")
    try:
        if "cov" in sec:
            spec = InitSpec(sec.get("kind", "iid"), tuple(mean), tuple(tuple(r) for r in sec["cov"]),
                            float(sec.get("epsilon", 0.0)))
        else:
            var = sec.get("var", [base.cov[i][i] for i in range(base.dim)])
            spec = InitSpec.gaussian(mean, var, kind=sec.get("kind", "iid"), epsilon=float(sec.get("epsilon", 0.0)))
    except (ConfigError, TypeError, ValueError) as err:
        msg = str(err)
        key = next((k for k in ("kind", "mean", "var", "cov", "epsilon") if k in sec and k in msg), None)
        raise cf.error("init", key, msg) from None
    if spec.dim != cfg.phase_dim:
        raise cf.error("init", "mean", f"dimension {spec.dim} does not match phase space dimension {cfg.phase_dim}")
    return spec


def load_force(cf: ConfigFile) -> ForceMode | None:
    sec = cf.section("force", {"kind", "features", "feature_seed", "sampling"})
    if not sec:
        return None
    return _build(cf, "force", ForceMode, dict(sec))


def load_dictionary(cf: ConfigFile) -> DictionarySpec:
    sec = cf.section("dictionary", {"r", "q_prime", "p", "freq_max", "sigmas"})
    vals = {}
    for k in ("r", "q_prime", "p"):
        if k in sec:
            vals[k] = sec[k]
    if "freq_max" in sec:
        k = int(sec["freq_max"])
        if k < 0:
            raise cf.error("dictionary", "freq_max", "must be >= 0")
        vals["freq_axis"] = tuple(float(v) for v in range(-k, k + 1))
    if "sigmas" in sec:
        vals["sigmas"] = tuple(float(s) for s in sec["sigmas"])
    if "r" in vals and not (isinstance(vals["r"], int) and 0 <= vals["r"] <= 4):
        raise cf.error("dictionary", "r", "must be an integer in 0..4")
    if "q_prime" in vals and not vals["q_prime"] >= 2:
        raise cf.error("dictionary", "q_prime", "must be >= 2")
    return DictionarySpec(**vals)


RUN_KEYS = {"seed", "replicas", "times", "n_ref", "n_cells", "half_width", "m_max", "tol", "max_iter", "richardson",
            "n_blocks"}
SCAN_KEYS = {"kind", "N_list", "M", "times", "m_list", "control_variate", "n_blocks", "job_size", "n_ref",
             "concentration_p", "companion_iid", "name", "seed"}


def load_run(cf: ConfigFile) -> dict:
    return dict(cf.section("run", RUN_KEYS))


def load_scan(cf: ConfigFile, args) -> ScanSpec:
    cfg = load_model(cf)
    init = load_init(cf, cfg)
    sec = dict(cf.section("scan", SCAN_KEYS))
    for key in ("kind", "N_list", "times"):
        if key not in sec:
            raise cf.error("scan", None, f"missing required key {key!r}")
    vals = dict(sec)
    for key in ("N_list", "times", "m_list"):
        if key in vals:
            vals[key] = tuple(vals[key])
    if args.seed is not None:
        vals["seed"] = args.seed
    if args.replicas is not None:
        vals["M"] = args.replicas
    vals.setdefault("M", 1000)
    return _build(cf, "scan", ScanSpec, dict(base=cfg, init=init, dictionary=load_dictionary(cf),
                                              force_mode=load_force(cf), **vals))


# ---------------------------------------------------------------------------
# subcommands


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, body: dict, started: str) -> None:
    body = dict(body)
    body["started"] = started
    body["finished"] = _now()
    (out / "manifest.json").write_text(json.dumps(json.loads(dumps(body)), indent=1, sort_keys=True) + "\n")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _simple_manifest(kind: str, cfg: ModelConfig, init: InitSpec | None, extra: dict) -> dict:
    body = {"schema": "mfchaos.manifest/1", "tool": "mfchaos", "version": __version__, "command": kind,
            "config": {"model": asdict(cfg), "init": asdict(init) if init else None},
            "source_hash": source_hash(), **extra}
    body["content_hash"] = content_hash(body)
    return body


def _times(cf: ConfigFile, run: dict, cfg: ModelConfig) -> list[float]:
    times = run.get("times", [cfg.t_final])
    if not isinstance(times, list) or not times:
        raise cf.error("run", "times", "must be a nonempty list of times")
    return [float(t) for t in times]


def cmd_simulate(args, cf: ConfigFile) -> int:
    cfg = load_model(cf)
    init = load_init(cf, cfg)
    run = load_run(cf)
    times = _times(cf, run, cfg)
    seed = args.seed if args.seed is not None else int(run.get("seed", 0))
    replicas = args.replicas if args.replicas is not None else int(run.get("replicas", 1))
    mode = load_force(cf) or ForceMode()
    started = _now()

    def observer(ti, t, batch):
        return (batch.x.copy(), None if batch.v is None else batch.v.copy())

    res = simulate_replicas(cfg, init, seed, np.arange(replicas), times, observer, mode=mode, threads=args.threads)
    x = np.stack([np.concatenate([job[ti][0] for job in res]) for ti in range(len(times))], axis=1)
    arrays = {"times": np.array(times), "x": x}
    if cfg.dynamics == "kinetic":
        arrays["v"] = np.stack([np.concatenate([job[ti][1] for job in res]) for ti in range(len(times))], axis=1)
    out = _out(args)
    manifest = _simple_manifest("simulate", cfg, init, {"master_seed": seed, "replicas": replicas, "times": times,
                                                         "force_mode": asdict(mode)})
    _write_manifest(out, manifest, started)
    np.savez(out / "ensembles.npz", **arrays)
    print(f"wrote {replicas} replica(s) x {len(times)} time(s) to {out / 'ensembles.npz'}")
    return EXIT_OK


def cmd_gibbs(args, cf: ConfigFile) -> int:
    cfg = load_model(cf)
    run = load_run(cf)
    started = _now()
    grid = Grid1D(float(run["half_width"]), int(run.get("n_cells", 2048))) if "half_width" in run else None
    out = _out(args)
    manifest = _simple_manifest("gibbs", cfg, None, {})
    try:
        state = gibbs_fixed_point(cfg, grid, tol=float(run.get("tol", 1e-10)), max_iter=int(run.get("max_iter", 500)))
    except ConvergenceError as err:
        hist = ", ".join(f"{r:.3e}" for r in err.history[-20:])
        print(f"gibbs: {err}\nresidual history (last {min(20, len(err.history))}): {hist}", file=sys.stderr)
        (out / "gibbs_failure.json").write_text(dumps({"error": str(err), "residual_history": list(err.history)}) + "\n")
        return EXIT_NUMERIC
    pairs = state.pair(default_observables(cfg.phase_dim))
    body = {"record": "gibbs", "iterations": state.iterations, "residual": state.residual,
            "residual_history": state.residual_history, "c_M": state.c_M, "beta": state.beta,
            "velocity_var": state.velocity_var, "grid": {"half_width": state.grid.half_width,
                                                        "n_cells": state.grid.n_cells},
            "pairings": pairs}
    (out / "gibbs.json").write_text(dumps(body) + "\n")
    np.savez(out / "gibbs_density.npz", x=state.grid.centers, rho=state.rho)
    _write_manifest(out, manifest, started)
    print(f"gibbs: converged in {state.iterations} iterations, residual {state.residual:.2e}")
    return EXIT_OK


def cmd_meanfield(args, cf: ConfigFile) -> int:
    cfg = load_model(cf)
    init = load_init(cf, cfg)
    run = load_run(cf)
    times = _times(cf, run, cfg)
    seed = args.seed if args.seed is not None else int(run.get("seed", 0))
    n_ref = int(run.get("n_ref", 100_000))
    started = _now()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ref = meanfield_reference_ensemble(cfg, init, n_ref, default_observables(cfg.phase_dim), times, seed=seed,
                                           mode=load_force(cf), richardson=bool(run.get("richardson", True)),
                                           threads=args.threads)
    out = _out(args)
    ref.to_jsonl(out / "meanfield.jsonl")
    extra = {"master_seed": seed, "n_ref": n_ref, "times": times, "warnings": [str(w.message) for w in caught]}
    _write_manifest(out, _simple_manifest("meanfield", cfg, init, extra), started)
    print(f"meanfield: {len(ref.values)} pairings written to {out / 'meanfield.jsonl'}")
    return EXIT_OK


def cmd_oracle_pde(args, cf: ConfigFile) -> int:
    cfg = load_model(cf)
    init = load_init(cf, cfg)
    run = load_run(cf)
    times = _times(cf, run, cfg)
    started = _now()
    grid = default_grid(cfg, init, int(run.get("n_cells", 2048)))
    if "half_width" in run:
        grid = Grid1D(float(run["half_width"]), int(run.get("n_cells", 2048)))
    obs = default_observables(1)
    ref = solve_mckean_vlasov_1d(cfg, init, grid, times, obs)
    out = _out(args)
    ref.to_jsonl(out / "meanfield_pde.jsonl")
    _write_manifest(out, _simple_manifest("oracle-pde", cfg, init, {"times": times, "meta": ref.meta}), started)
    print(f"oracle-pde: max mass error {ref.meta.get('max_mass_error', float('nan')):.1e}")
    return EXIT_OK


def cmd_correlations(args, cf: ConfigFile) -> int:
    cfg = load_model(cf)
    init = load_init(cf, cfg)
    run = load_run(cf)
    times = _times(cf, run, cfg)
    seed = args.seed if args.seed is not None else int(run.get("seed", 0))
    replicas = args.replicas if args.replicas is not None else int(run.get("replicas", 1000))
    m_max = int(run.get("m_max", 2))
    if replicas < 2:
        raise cf.error("run", "replicas", "need at least 2 replicas")
    dic = load_dictionary(cf).build(cfg.phase_dim)
    mode = load_force(cf) or ForceMode()
    started = _now()
    if cfg.dynamics == "overdamped" and cfg.d == 1:
        centers = scheme_propagator_1d(cfg, init, times, dic, mode=mode).table(dic.ids, times)
    else:
        centers = np.zeros((len(times), len(dic)))
    g = int(run.get("n_blocks", min(replicas, 1000)))
    fn = dictionary_stat_fn(dic, centers, cfg.n_particles, m_max, False)
    sums, counts = collect_block_sums(cfg, init, seed, replicas, times, fn, g, mode, threads=args.threads)
    table = MomentTable(tuple(dic.ids), tuple(times), cfg.n_particles, m_max, sums, counts, centers)
    out = _out(args)
    manifest = _simple_manifest("correlations", cfg, init, {"master_seed": seed, "replicas": replicas,
                                                             "times": times, "dictionary": dic.to_dict()})
    with open(out / "correlations.jsonl", "w") as fh:
        fh.write(dumps({"record": "manifest", "content_hash": manifest["content_hash"]}) + "\n")
        for rec in table.to_records(manifest["content_hash"][:12]):
            fh.write(dumps(rec) + "\n")
        for m in range(1, m_max + 1):
            for route in ("moebius", "cumulant"):
                if m == 1 and route == "cumulant":
                    continue
                val, se = table.correlations(m, route)
                for ti, t in enumerate(times):
                    for pi, pid in enumerate(dic.ids):
                        fh.write(dumps({"record": "correlation", "m": m, "phi_id": pid, "t": t, "route": route,
                                        "value": val[ti, pi], "se": se[ti, pi], "N": cfg.n_particles,
                                        "M": replicas}) + "\n")
    _write_manifest(out, manifest, started)
    print(f"correlations: {len(dic)} functions x {len(times)} times, orders 1..{m_max}")
    return EXIT_OK


def cmd_scan(args, cf: ConfigFile) -> int:
    spec = load_scan(cf, args)
    out = _out(args)
    started = _now()
    progress = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    res = run_scan(spec, out, threads=args.threads, progress=progress)
    manifest = dict(res.manifest)
    _write_manifest(out, manifest, started)
    status = EXIT_OK
    if res.failures:
        for f in res.failures:
            print(f"scan: cell {f['cell']} (N={f['N']}) failed: {f['error']}: {f['message']}", file=sys.stderr)
        status = EXIT_NUMERIC
    if args.verify:
        rng = np.random.default_rng(spec.seed)
        cell = int(rng.integers(n_cells(spec)))
        again = run_scan(spec, None, threads=args.threads, cells=[cell])
        a = [dumps(r) for r in res.records if r.get("cell") == cell]
        b = [dumps(r) for r in again.records if r.get("cell") == cell]
        same = a == b
        print(f"verify: cell {cell} {'reproduced' if same else 'DIFFERS'} ({len(a)} records)")
        if not same:
            status = EXIT_NUMERIC
    n_proxy = sum(1 for r in res.records if r.get("record") == "proxy")
    print(f"scan {spec.kind}: {n_proxy} proxy records, {len(res.fits)} fits -> {out}")
    return status


def _parse_filter(items) -> dict:
    out = {}
    for item in items or []:
        for part in item.split(","):
            if "=" not in part:
                raise ConfigError(f"--filter expects key=value, got {part!r}")
            k, v = part.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def cmd_fit(args) -> int:
    path = Path(args.input)
    try:
        records = [json.loads(ln) for ln in path.read_text().splitlines() if ln.strip()]
    except OSError as err:
        raise ConfigError(f"{path}: cannot read ({err.strerror})") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}:{err.lineno}: invalid JSON ({err.msg})") from None
    filters = _parse_filter(args.filter)
    metric = filters.pop("metric", None)
    if metric is None:
        metrics = sorted({r["metric"] for r in records if r.get("record") == "proxy"})
        if len(metrics) > 1:
            raise ConfigError(f"records hold several metrics {metrics}; add --filter metric=NAME")
    fit = refit(records, args.kind, filters, metric)
    print(json.dumps(json.loads(dumps({"fit_kind": args.kind, "filter": _parse_filter(args.filter),
                                       **fit.to_dict()})), sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfchaos", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mfchaos {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.required = True
    helps = {
        "simulate": "simulate replicas and store particle states",
        "gibbs": "solve the Gibbs fixed point (d = 1)",
        "meanfield": "mean-field pairings from a large reference ensemble",
        "oracle-pde": "mean-field pairings from the finite-volume solver (overdamped, d = 1)",
        "correlations": "moment tables and tested correlations over a dictionary",
        "scan": "run a parameter scan with fits",
        "fit": "re-fit stored scan records",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=helps[name])
        if name == "fit":
            p.add_argument("--in", dest="input", required=True, metavar="PATH", help="results.jsonl of a scan")
            p.add_argument("--kind", required=True, choices=("loglog", "decay"))
            p.add_argument("--filter", action="append", metavar="KEY=VALUE",
                           help="keep records with this field value (repeatable; metric=NAME selects the metric)")
            continue
        p.add_argument("--config", required=True, metavar="PATH", help="TOML configuration")
        p.add_argument("--seed", type=_u64, default=None, help="master seed (overrides the config)")
        p.add_argument("--replicas", type=_positive_int, default=None, help="replica count (overrides the config)")
        p.add_argument("--threads", type=_positive_int, default=1, help="worker threads (never changes results)")
        p.add_argument("--out", default="out", metavar="DIR", help="output directory")
        if name == "scan":
            p.add_argument("--verify", action="store_true", help="re-run one random cell and compare records")
            p.add_argument("--verbose", action="store_true", help="report progress per cell")
    return parser


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


COMMANDS = {
    "simulate": cmd_simulate,
    "gibbs": cmd_gibbs,
    "meanfield": cmd_meanfield,
    "oracle-pde": cmd_oracle_pde,
    "correlations": cmd_correlations,
    "scan": cmd_scan,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        if args.command == "fit":
            return cmd_fit(args)
        cf = ConfigFile(args.config)
        return COMMANDS[args.command](args, cf)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationBlowUp, ConvergenceError, QuadratureError, FloatingPointError, InsufficientReplicas,
            DomainError) as err:
        print(f"numeric failure: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as err:
        # fits with too few points and similar data problems
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
