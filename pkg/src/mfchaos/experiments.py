"""Parameter scans over N and t, with log-log slope and decay-plateau fits.

A scan simulates M replicas per particle number, reduces per-replica
statistics into replica-block sums (so standard errors come from a
delete-a-group jackknife), and turns them into dual-norm proxies:

* ``F_minus_mu``: max over the dictionary of |<phi^{(x)m}, F^{N,m} - mu^{(x)m}>|
* ``G_moebius`` / ``G_cumulant``: the same for the tested correlation G^{N,m}
* ``gibbs_distance``: the m = 1 pairing against the Gibbs state instead of mu_t
* ``concentration``: E[(Q_{2p}(mu^N_t) - L)_+^m]

Records stream to ``results.jsonl``; fits go to ``summary.csv``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .dynamics import ForceMode, MeanFieldDrive, resolve_force, simulate_replicas, _KIND_COS, _KIND_COS_HARMONIC
from .meanfield import (
    ConvergenceError,
    MeanFieldReference,
    control_moments,
    gibbs_fixed_point,
    meanfield_reference_ensemble,
    scheme_propagator_1d,
)
from .model import ConfigError, InitSpec, ModelConfig, PotentialSpec, SimulationBlowUp
from .norms import Dictionary, build_dictionary, evaluate_power_sums, proxy_array
from .statistics import MomentTable, jackknife, qr_per_replica, replica_stats

SCHEMA = "mfchaos.results/1"
# lattice cosine modes for the default 1-D force: gradient error < 1e-10 for separations up to 7 widths
LATTICE_FEATURES = 16
SCAN_KINDS = ("chaos_scaling", "correlation_scaling", "decay_fit", "concentration", "relax_to_gibbs")
SUMMARY_COLUMNS = ["scan_kind", "N", "m", "t_or_window", "metric", "value", "se", "fit_field", "fit_value"]


# ---------------------------------------------------------------------------
# fits


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    r2: float
    point_se: list[float]
    slope_se: float = float("nan")
    n_points: int = 0
    dropped: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def fit_loglog_slope(points: Sequence[tuple[float, float, float]]) -> SlopeFit:
    """Weighted least squares of log(value) on log(N).

    Weights are (value / se)^2, the inverse variance of log(value); with
    missing or zero SEs the fit is unweighted.  Nonpositive values are
    dropped with a warning.
    """
    pts = [(float(n), float(v), float(s) if s is not None else float("nan")) for n, v, s in points]
    keep = [p for p in pts if p[1] > 0 and math.isfinite(p[1]) and p[0] > 0]
    dropped = len(pts) - len(keep)
    if dropped:
        warnings.warn(f"dropped {dropped} nonpositive point(s) from log-log fit")
    if len(keep) < 3:
        raise ValueError(f"log-log fit needs >= 3 positive points, got {len(keep)}")
    n, v, s = (np.array(c) for c in zip(*keep))
    x, y = np.log(n), np.log(v)
    rel = s / v
    w = 1.0 / rel**2 if np.all(np.isfinite(rel) & (rel > 0)) else np.ones_like(x)
    w = w / w.sum()
    xm, ym = np.sum(w * x), np.sum(w * y)
    sxx = np.sum(w * (x - xm) ** 2)
    slope = float(np.sum(w * (x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    res = y - (intercept + slope * x)
    ss_tot = np.sum(w * (y - ym) ** 2)
    r2 = float(1.0 - np.sum(w * res**2) / ss_tot) if ss_tot > 0 else 1.0
    dof = len(x) - 2
    if np.all(np.isfinite(rel) & (rel > 0)):
        # inverse-variance weights: slope variance 1/sum(1/rel^2 (x - xm)^2), inflated if chi^2 > dof
        wa = 1.0 / rel**2
        var = 1.0 / np.sum(wa * (x - xm) ** 2)
        chi2 = float(np.sum(wa * res**2))
        slope_se = math.sqrt(var * max(1.0, chi2 / dof)) if dof > 0 else math.sqrt(var)
    else:
        slope_se = math.sqrt(np.sum(res**2) / dof / np.sum((x - x.mean()) ** 2)) if dof > 0 else float("nan")
    return SlopeFit(slope, intercept, r2, [float(e) for e in s], slope_se, len(x), dropped)


@dataclass
class DecayFit:
    plateau: float
    amplitude: float
    rate: float
    residual_rms: float
    window: tuple[float, float]
    identifiable: bool = True
    plateau_se: float = float("nan")
    amplitude_se: float = float("nan")
    rate_se: float = float("nan")
    r2: float = float("nan")
    efoldings: float = float("nan")
    note: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window"] = list(self.window)
        return d


def _linear_cb(t, y, w, lam):
    """Weighted least squares for (c, b) in y = c + b exp(-lam t), with c >= 0."""
    e = np.exp(-lam * (t - t[0]))
    a = np.stack([np.ones_like(t), e], axis=1)
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(a * sw[:, None], y * sw, rcond=None)
    if coef[0] < 0:
        # the plateau estimates a nonnegative norm; pin it at the boundary
        coef = np.array([0.0, np.sum(w * e * y) / np.sum(w * e * e)])
    res = y - a @ coef
    return coef, float(np.sum(w * res**2))


def fit_decay_plateau(series: Sequence[tuple[float, float, float]], rate_bounds: tuple[float, float] | None = None,
                      tol: float = 1e-10) -> DecayFit:
    """Fit y(t) = c + b exp(-lam t) to (t, value, se) points.

    For each lam, (c, b) solve a weighted linear least-squares problem
    (weights 1/se^2, or uniform without SEs); lam minimizes the weighted
    residual by golden-section search in log(lam) after a coarse scan.
    Parameter SEs come from the Gauss-Newton covariance, inflated by the
    reduced chi^2 when it exceeds 1.  A series whose exponential term does
    not beat a constant (amplitude within 2 SE of zero, or no decrease of
    the residual) is flagged non-identifiable with rate 0.
    """
    pts = sorted((float(t), float(v), float(s) if s is not None else float("nan")) for t, v, s in series)
    if len(pts) < 8:
        raise ValueError(f"decay fit needs >= 8 time points, got {len(pts)}")
    t, y, s = (np.array(c) for c in zip(*pts))
    have_se = bool(np.all(np.isfinite(s)))
    if have_se:
        # points known exactly (zero SE, e.g. t = 0 under the control variate) keep a large finite weight
        s = np.maximum(s, 1e-12 * max(float(np.max(np.abs(y))), 1e-300))
    w = 1.0 / s**2 if have_se else np.ones_like(t)
    window = (float(t[0]), float(t[-1]))
    span = t[-1] - t[0]
    if span <= 0:
        raise ValueError("time points must span a positive window")
    c0 = float(np.sum(w * y) / np.sum(w))
    sse0 = float(np.sum(w * (y - c0) ** 2))
    flat = DecayFit(c0, 0.0, 0.0, float(np.sqrt(np.mean((y - c0) ** 2))), window, False,
                    plateau_se=float(math.sqrt(1.0 / np.sum(w))) if have_se else float("nan"),
                    r2=0.0, efoldings=0.0, note="non-identifiable")
    if sse0 == 0.0 or np.ptp(y) == 0.0:
        return flat
    lo, hi = rate_bounds if rate_bounds is not None else (0.01 / span, 50.0 / max(np.min(np.diff(t)), 1e-12))
    grid = np.geomspace(lo, hi, 200)
    sse = np.array([_linear_cb(t, y, w, lam)[1] for lam in grid])
    k = int(np.argmin(sse))
    a, b = math.log(grid[max(k - 1, 0)]), math.log(grid[min(k + 1, len(grid) - 1)])
    g = (math.sqrt(5.0) - 1.0) / 2.0
    f = lambda u: _linear_cb(t, y, w, math.exp(u))[1]
    x1, x2 = b - g * (b - a), a + g * (b - a)
    f1, f2 = f(x1), f(x2)
    while b - a > tol:
        if f1 < f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - g * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + g * (b - a)
            f2 = f(x2)
    lam = math.exp(0.5 * (a + b))
    (c, bb), sse_min = _linear_cb(t, y, w, lam)
    # the fit uses exp(-lam (t - t0)); report the amplitude at t = 0
    amp = bb * math.exp(lam * t[0])
    e = np.exp(-lam * (t - t[0]))
    pred = c + bb * e
    jac = np.stack([np.ones_like(t), e, -bb * (t - t[0]) * e], axis=1)
    dof = len(t) - 3
    try:
        # SVD of the weighted Jacobian: weights may span many decades
        _, sv, vt = np.linalg.svd(np.sqrt(w)[:, None] * jac, full_matrices=False)
        if not sv[-1] > 1e-15 * sv[0]:
            raise np.linalg.LinAlgError("singular Jacobian")
        cov = (vt.T / sv**2) @ vt
        if have_se:
            cov *= max(1.0, sse_min / dof) if dof > 0 else 1.0
        else:
            cov *= sse_min / dof if dof > 0 else np.nan
        se_c, se_b, se_l = np.sqrt(np.maximum(np.diag(cov), 0.0))
    except np.linalg.LinAlgError:
        se_c = se_b = se_l = float("nan")
    resid = y - pred
    rms = float(np.sqrt(np.mean(resid**2)))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 0.0
    fit = DecayFit(float(c), float(amp), float(lam), rms, window, True, float(se_c),
                   float(se_b * math.exp(lam * t[0])), float(se_l), r2, float(lam * span))
    if not (abs(bb) > 2.0 * se_b) or sse_min >= sse0 * (1.0 - 1e-12) or lam <= lo * 1.0001:
        flat.r2 = r2
        flat.note = "non-identifiable: exponential term not resolved"
        return flat
    if lam * span < 3.0:
        fit.note = f"window spans only {lam * span:.2f} fitted e-foldings"
    return fit


# ---------------------------------------------------------------------------
# scan specification


@dataclass(frozen=True)
class DictionarySpec:
    r: int = 3
    q_prime: float = 12.0
    p: float = 1.0 / 6.0
    freq_axis: tuple[float, ...] = tuple(float(k) for k in range(-4, 5))
    sigmas: tuple[float, ...] = (1.0, 2.0, 4.0)

    @property
    def id(self) -> str:
        return f"windowed_fourier(r={self.r},q'={self.q_prime:g},p={self.p:.6g},xi={len(self.freq_axis)},sigma={list(self.sigmas)})"

    def build(self, dim: int) -> Dictionary:
        return _cached_dictionary(dim, self)


_DICT_CACHE: dict = {}


def _cached_dictionary(dim: int, spec: DictionarySpec) -> Dictionary:
    key = (dim, spec)
    if key not in _DICT_CACHE:
        _DICT_CACHE[key] = build_dictionary(dim, spec.r, spec.q_prime, spec.p, spec.freq_axis, spec.sigmas)
    return _DICT_CACHE[key]


@dataclass(frozen=True)
class ScanSpec:
    """One experiment: a model, a list of particle numbers and what to measure.

    ``control_variate`` couples every particle to a mean-field particle
    driven by the time-discrete mean-field law and sharing its noise
    (overdamped, d = 1); moment estimates then subtract the coupled
    U-statistics and add back their exact expectations.
    """

    kind: str
    base: ModelConfig
    N_list: tuple[int, ...]
    M: int
    init: InitSpec
    times: tuple[float, ...]
    m_list: tuple[int, ...] = (1, 2)
    dictionary: DictionarySpec = DictionarySpec()
    seed: int = 0
    force_mode: ForceMode | None = None
    control_variate: bool = False
    n_blocks: int | None = None
    job_size: int | None = None
    n_ref: int | None = None
    concentration_p: float = 1.0
    companion_iid: bool = False
    name: str = ""

    def __post_init__(self):
        if self.kind not in SCAN_KINDS:
            raise ConfigError(f"scan kind must be one of {SCAN_KINDS}, got {self.kind!r}")
        if self.M < 100:
            raise ConfigError(f"M must be >= 100, got {self.M}")
        ns = list(self.N_list)
        if any(b <= a for a, b in zip(ns, ns[1:])):
            raise ConfigError("N_list must be strictly increasing")
        if self.kind in ("chaos_scaling", "correlation_scaling", "concentration") and len(ns) < 3:
            raise ConfigError(f"{self.kind} needs at least 3 particle numbers")
        if not ns:
            raise ConfigError("N_list must be nonempty")
        if not self.times:
            raise ConfigError("times must be nonempty")
        if any(m < 1 for m in self.m_list):
            raise ConfigError("orders must be >= 1")
        if self.init.dim != self.base.phase_dim:
            raise ConfigError(f"init dimension {self.init.dim} does not match phase space {self.base.phase_dim}")
        if self.control_variate and (self.base.dynamics != "overdamped" or self.base.d != 1):
            raise ConfigError("the mean-field control variate needs overdamped dynamics with d = 1")
        if self.kind == "relax_to_gibbs" and self.base.d != 1:
            raise ConfigError("relax_to_gibbs needs d = 1")

    @property
    def mode(self) -> ForceMode:
        if self.force_mode is not None:
            return self.force_mode
        if self.base.potential.kind == "gaussian_bump" and self.base.d == 1:
            return ForceMode.factored(LATTICE_FEATURES, sampling="lattice")
        return ForceMode()

    @property
    def m_max(self) -> int:
        return max(self.m_list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolved_force_mode"] = asdict(self.mode)
        return d


def spec_from_dict(data: dict) -> ScanSpec:
    """Inverse of ScanSpec.to_dict (also used for configuration files)."""
    data = dict(data)
    base = dict(data.pop("base"))
    pot = base.pop("potential", None)
    if isinstance(pot, dict):
        modes = tuple((float(c), tuple(float(x) for x in xi)) for c, xi in pot.get("modes", ()))
        pot = PotentialSpec(pot.get("kind", "gaussian_bump"), float(pot.get("amplitude", 1.0)),
                            float(pot.get("width", 1.0)), modes)
    cfg = ModelConfig(**base, **({"potential": pot} if pot is not None else {}))
    init = data.pop("init")
    init = InitSpec(init.get("kind", "iid"), tuple(init["mean"]), tuple(tuple(r) for r in init["cov"]),
                    float(init.get("epsilon", 0.0)))
    dic = data.pop("dictionary", None)
    dic = DictionarySpec(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in dic.items()}) if dic else DictionarySpec()
    data.pop("resolved_force_mode", None)
    fm = data.pop("force_mode", None)
    fm = ForceMode(**fm) if fm else None
    for key in ("N_list", "times", "m_list"):
        if key in data:
            data[key] = tuple(data[key])
    return ScanSpec(base=cfg, init=init, dictionary=dic, force_mode=fm, **data)


# ---------------------------------------------------------------------------
# block-reduced replica statistics


def _block_ids(replicas: np.ndarray, m: int, g: int) -> np.ndarray:
    return (replicas.astype(np.int64) * g) // m


def collect_block_sums(cfg: ModelConfig, init: InitSpec, seed: int, M: int, times: Sequence[float], stat_fn,
                       n_blocks: int, mode: ForceMode, drive: MeanFieldDrive | None = None, threads: int = 1,
                       job_size: int | None = None):
    """Simulate M replicas and sum ``stat_fn(t_index, batch)`` (B, ...) over replica blocks.

    Block g holds replicas r with floor(r G / M) = g.  Sums are formed per
    job and then per block in job order, so the result does not depend on
    the number of threads.  Returns (sums (G, T, ...), counts (G,)).
    """
    g = int(n_blocks)

    def observer(t_index, t, batch):
        stats = np.asarray(stat_fn(t_index, batch), dtype=float)
        ids = _block_ids(batch.replicas, M, g)
        uniq, inv = np.unique(ids, return_inverse=True)
        out = np.zeros((len(uniq),) + stats.shape[1:])
        np.add.at(out, inv, stats)
        return uniq, out

    res = simulate_replicas(cfg, init, seed, np.arange(M), times, observer, mode=mode, threads=threads,
                            job_size=job_size, drive=drive)
    sums = None
    for job in res:
        for ti, (uniq, part) in enumerate(job):
            if sums is None:
                sums = np.zeros((g, len(times)) + part.shape[1:])
            sums[uniq, ti] += part
    counts = np.bincount(_block_ids(np.arange(M), M, g), minlength=g)
    return sums, counts


def dictionary_stat_fn(dic: Dictionary, centers: np.ndarray, n: int, m_max: int, control: bool):
    """Per-replica MomentTable statistics of a dictionary, centered per time."""
    tabs = dic.tables()
    kmax = max(m_max, 2)

    def fn(t_index, batch):
        z = np.ascontiguousarray(batch.phase)
        p = np.empty((z.shape[0], len(dic), kmax))
        evaluate_power_sums(z, *tabs, dic.p, centers[t_index], kmax, p)
        pc = None
        if control:
            pc = np.empty_like(p)
            evaluate_power_sums(np.ascontiguousarray(batch.xbar), *tabs, dic.p, centers[t_index], kmax, pc)
        return replica_stats(p, n, m_max, pc)

    return fn


# ---------------------------------------------------------------------------
# outputs


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def dumps(record: dict) -> str:
    return json.dumps(_clean(record), sort_keys=True, separators=(",", ":"))


def content_hash(obj) -> str:
    return hashlib.sha256(dumps(obj).encode()).hexdigest()


def source_hash() -> str:
    """Hash of the package sources, so cached results follow code changes."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for path in sorted(root.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


class ResultWriter:
    """Single ordered writer for results.jsonl; also keeps the records in memory."""

    def __init__(self, out_dir: str | os.PathLike | None):
        self.records: list[dict] = []
        self.fh = None
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            self.fh = open(Path(out_dir) / "results.jsonl", "w")

    def write(self, record: dict) -> None:
        rec = {"schema": SCHEMA, **record}
        self.records.append(json.loads(dumps(rec)))
        if self.fh is not None:
            self.fh.write(dumps(rec) + "\n")
            self.fh.flush()

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


@dataclass
class ScanResult:
    spec: ScanSpec
    records: list[dict]
    fits: list[dict]
    manifest: dict
    failures: list[dict] = field(default_factory=list)

    def proxies(self, metric: str, m: int | None = None, t: float | None = None, init_kind: str | None = None):
        out = [r for r in self.records if r.get("record") == "proxy" and r["metric"] == metric]
        if m is not None:
            out = [r for r in out if r["m"] == m]
        if t is not None:
            out = [r for r in out if abs(r["t"] - t) < 1e-9]
        if init_kind is not None:
            out = [r for r in out if r.get("init") == init_kind]
        return out

    def fit(self, **match) -> dict:
        for f in self.fits:
            if all(f.get(k) == v for k, v in match.items()):
                return f
        raise KeyError(f"no fit matching {match}")


def build_manifest(spec: ScanSpec, dic: Dictionary | None, extra: dict | None = None) -> dict:
    body = {
        "schema": SCHEMA,
        "tool": "mfchaos",
        "version": __version__,
        "spec": spec.to_dict(),
        "master_seed": spec.seed,
        "dictionary": dic.to_dict() if dic is not None else None,
        "source_hash": source_hash(),
        "numpy": np.__version__,
    }
    if extra:
        body.update(extra)
    body["content_hash"] = content_hash(body)
    return body


def _summary_rows(spec: ScanSpec, records: list[dict], fits: list[dict]) -> list[list]:
    rows = []
    for f in fits:
        base = [spec.kind, f.get("N", ""), f.get("m", ""), f.get("t_or_window", ""), f["metric"]]
        for key in f.get("fit_fields", []):
            val = f.get(key)
            rows.append(base + [val, f.get(f"{key}_se", ""), key, val])
    return rows


def write_summary(path, spec: ScanSpec, fits: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in _summary_rows(spec, [], fits):
        w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
    Path(path).write_text(buf.getvalue())


# ---------------------------------------------------------------------------
# mean-field references for a scan


def _meanfield_for(spec: ScanSpec, cfg: ModelConfig, dic: Dictionary, times, extra_observables=()):
    """Mean-field pairings (T, P) and, for the overdamped 1-D case, the reference itself."""
    obs = list(dic.functions) + list(extra_observables)
    ids = [o.id for o in obs]
    if cfg.dynamics == "overdamped" and cfg.d == 1:
        ref = scheme_propagator_1d(cfg, spec.init, times, obs, mode=spec.mode)
        return ref.table(ids, times), ref
    if not spec.init.is_product:
        raise ConfigError("kinetic mean-field references need product-form initial data")
    n_ref = spec.n_ref or max(10 * max(spec.N_list), 100_000)
    ref = meanfield_reference_ensemble(cfg, spec.init, n_ref, obs, times, seed=spec.seed ^ 0xA5A5,
                                       mode=spec.mode, richardson=False, max_experiment_n=max(spec.N_list))
    return ref.table(ids, times), ref


class _QObservable:
    def __init__(self, r: float):
        self.id = f"Q{r:g}"
        self.r = r

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        return (1.0 + np.sum(z * z, axis=-1)) ** (0.5 * self.r)


# ---------------------------------------------------------------------------
# scan driver


def run_scan(spec: ScanSpec, out_dir: str | os.PathLike | None = None, threads: int = 1,
             progress=None, cells: Iterable[int] | None = None) -> ScanResult:
    """Run every cell of a scan, stream records, then fit.

    Cells are (N, init) pairs processed in a fixed order; a failing cell is
    recorded and the scan continues.  ``cells`` restricts the run to the
    given cell indices (seeds stay those of the full scan) and skips fits.
    """
    only = None if cells is None else set(int(c) for c in cells)
    cfg0 = spec.base
    dic = spec.dictionary.build(cfg0.phase_dim) if spec.kind != "concentration" else None
    manifest = build_manifest(spec, dic)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "manifest.json").write_text(json.dumps(_clean(manifest), indent=1, sort_keys=True) + "\n")
    writer = ResultWriter(out_dir)
    writer.write({"record": "manifest", "content_hash": manifest["content_hash"], "scan_kind": spec.kind})
    started = time.time()
    failures: list[dict] = []
    try:
        if spec.kind == "concentration":
            _run_concentration(spec, writer, threads, failures, progress, only)
        elif spec.kind == "relax_to_gibbs":
            _run_gibbs(spec, dic, writer, threads, failures, progress, only)
        else:
            _run_pairings(spec, dic, writer, threads, failures, progress, only)
        fits = _fit_records(spec, writer.records) if only is None else []
        for f in fits:
            writer.write({"record": "fit", **f})
    finally:
        writer.close()
    manifest = dict(manifest)
    manifest["wall_seconds"] = time.time() - started
    if out_dir is not None:
        (Path(out_dir) / "manifest.json").write_text(json.dumps(_clean(manifest), indent=1, sort_keys=True) + "\n")
        write_summary(Path(out_dir) / "summary.csv", spec, fits)
    return ScanResult(spec, writer.records, fits, manifest, failures)


def n_cells(spec: ScanSpec) -> int:
    if spec.kind in ("chaos_scaling", "correlation_scaling", "decay_fit"):
        return len(_cells(spec))
    return len(spec.N_list)


def _cells(spec: ScanSpec):
    cells = [(n, spec.init) for n in spec.N_list]
    if spec.companion_iid and not spec.init.is_product:
        iid = matched_iid(spec.init, spec.base.d)
        cells += [(n, iid) for n in spec.N_list]
    return cells


def matched_iid(init: InitSpec, d: int) -> InitSpec:
    """Product law with the same one-particle marginal (Gaussian for latent shifts)."""
    if init.kind == "latent_shift":
        cov = np.array(init.cov)
        cov[:d, :d] += init.epsilon**2 * np.eye(d)
        return InitSpec(mean=init.mean, cov=tuple(map(tuple, cov)))
    if init.kind == "latent_scale":
        raise ConfigError("a matched product law for latent_scale is not Gaussian; use latent_shift")
    return init


def _failure(writer, failures, cell, n, err):
    rec = {"record": "cell_error", "cell": cell, "N": n, "error": type(err).__name__, "message": str(err)}
    writer.write(rec)
    failures.append(rec)


def _run_pairings(spec, dic, writer, threads, failures, progress, only):
    times = list(spec.times)
    m_max = max(spec.m_max, 1)
    refs = {}
    for cell, (n, init) in enumerate(_cells(spec)):
        if only is not None and cell not in only:
            continue
        cfg = spec.base.replace(n_particles=n)
        try:
            key = init
            if key not in refs:
                sub = replace(spec, init=init)
                mf, ref = _meanfield_for(sub, spec.base, dic, times)
                cm = None
                if spec.control_variate:
                    cm = control_moments(spec.base, init, ref, dic, times, mf, m_max, mode=spec.mode)
                refs[key] = (mf, ref, cm)
            mf, ref, cm = refs[key]
            control = spec.control_variate
            g = spec.n_blocks or min(spec.M, 1000)
            fn = dictionary_stat_fn(dic, mf, n, m_max, control)
            sums, counts = collect_block_sums(cfg, init, spec.seed + cell, spec.M, times, fn, g, spec.mode,
                                              drive=ref.drive if control else None, threads=threads,
                                              job_size=spec.job_size)
            table = MomentTable(tuple(dic.ids), tuple(times), n, m_max, sums, counts, mf, cm)
        except (SimulationBlowUp, ConvergenceError, FloatingPointError, ConfigError) as err:
            _failure(writer, failures, cell, n, err)
            continue
        init_kind = "iid" if init.is_product else init.kind
        _emit_pairings(spec, table, mf, writer, cell, n, init_kind)
        if progress:
            progress(f"cell {cell} N={n} init={init_kind} done")


def _emit_pairings(spec, table: MomentTable, mf, writer, cell, n, init_kind):
    ids = table.phi_ids
    for m in spec.m_list:
        metrics = []
        if spec.kind == "chaos_scaling":
            metrics.append(("F_minus_mu",) + table.uncentered_minus_product(m, mf))
        if m >= 2:
            metrics.append(("G_moebius",) + table.correlations(m, "moebius"))
            metrics.append(("G_cumulant",) + table.correlations(m, "cumulant"))
        for metric, val, se in metrics:
            best, arg = proxy_array(val)
            for ti, t in enumerate(table.times):
                k = int(arg[ti])
                writer.write({"record": "proxy", "scan_kind": spec.kind, "cell": cell, "N": n, "M": table.n_replicas,
                              "m": m, "t": t, "metric": metric, "init": init_kind,
                              "value": float(best[ti]), "se": float(se[ti, k]), "argmax": ids[k],
                              "noise_floor": float(np.median(se[ti]) * math.sqrt(2.0 * math.log(len(ids)))),
                              "pairings": val[ti].tolist(), "pairing_se": se[ti].tolist(),
                              "control_variate": bool(table.has_control and metric != "G_cumulant")})


def _run_gibbs(spec, dic, writer, threads, failures, progress, only):
    times = list(spec.times)
    try:
        gibbs = gibbs_fixed_point(spec.base)
    except ConvergenceError as err:
        _failure(writer, failures, -1, 0, err)
        return
    pair = gibbs.pair(dic)
    centers = np.tile(np.array([pair[i] for i in dic.ids]), (len(times), 1))
    writer.write({"record": "gibbs", "iterations": gibbs.iterations, "residual": gibbs.residual,
                  "c_M": gibbs.c_M, "beta": gibbs.beta})
    for cell, n in enumerate(spec.N_list):
        if only is not None and cell not in only:
            continue
        cfg = spec.base.replace(n_particles=n)
        try:
            fn = dictionary_stat_fn(dic, centers, n, 1, False)
            g = spec.n_blocks or min(spec.M, 1000)
            sums, counts = collect_block_sums(cfg, spec.init, spec.seed + cell, spec.M, times, fn, g, spec.mode,
                                              threads=threads, job_size=spec.job_size)
        except (SimulationBlowUp, FloatingPointError) as err:
            _failure(writer, failures, cell, n, err)
            continue
        table = MomentTable(tuple(dic.ids), tuple(times), n, 1, sums, counts, centers)
        a, se = table.moments()
        best, arg = proxy_array(a[..., 0])
        for ti, t in enumerate(times):
            k = int(arg[ti])
            writer.write({"record": "proxy", "scan_kind": spec.kind, "cell": cell, "N": n, "M": spec.M, "m": 1,
                          "t": t, "metric": "gibbs_distance", "init": "iid", "value": float(best[ti]),
                          "se": float(se[ti, k, 0]), "argmax": dic.ids[k],
                          "noise_floor": float(np.median(se[ti, :, 0]) * math.sqrt(2.0 * math.log(len(dic)))),
                          "pairings": a[ti, :, 0].tolist(), "pairing_se": se[ti, :, 0].tolist()})
        if progress:
            progress(f"cell {cell} N={n} done")


def _run_concentration(spec, writer, threads, failures, progress, only):
    times = list(spec.times)
    r = 2.0 * spec.concentration_p
    q = _QObservable(r)
    cfg0 = spec.base
    if cfg0.dynamics == "overdamped" and cfg0.d == 1:
        ref = scheme_propagator_1d(cfg0, spec.init, times, [q], mode=spec.mode)
    else:
        n_ref = spec.n_ref or max(10 * max(spec.N_list), 100_000)
        ref = meanfield_reference_ensemble(cfg0, spec.init, n_ref, [q], times, seed=spec.seed ^ 0xA5A5,
                                           mode=spec.mode, richardson=False)
    levels = np.array([ref.value(q.id, t) for t in times])
    for ti, t in enumerate(times):
        writer.write({"record": "level", "t": t, "L": float(levels[ti]), "r": r, "method": ref.method,
                      "se": ref.se.get((q.id, round(float(t), 12)))})
    ms = list(spec.m_list)

    def stat_fn(t_index, batch):
        qv = qr_per_replica(batch.phase, r)
        exc = np.maximum(qv - levels[t_index], 0.0)
        return np.stack([qv] + [exc**m for m in ms], axis=-1)

    for cell, n in enumerate(spec.N_list):
        if only is not None and cell not in only:
            continue
        cfg = cfg0.replace(n_particles=n)
        g = spec.n_blocks or min(spec.M, 1000)
        try:
            sums, counts = collect_block_sums(cfg, spec.init, spec.seed + cell, spec.M, times, stat_fn, g,
                                              spec.mode, threads=threads, job_size=spec.job_size)
        except (SimulationBlowUp, FloatingPointError) as err:
            _failure(writer, failures, cell, n, err)
            continue
        val, se = jackknife(sums, counts, lambda mean: mean)
        for ti, t in enumerate(times):
            for j, m in enumerate(ms):
                writer.write({"record": "proxy", "scan_kind": spec.kind, "cell": cell, "N": n, "M": spec.M, "m": m,
                              "t": t, "metric": "concentration", "init": "iid", "L": float(levels[ti]),
                              "value": float(val[ti, j + 1]), "se": float(se[ti, j + 1]),
                              "mean_Q": float(val[ti, 0]), "mean_Q_se": float(se[ti, 0])})
        if progress:
            progress(f"cell {cell} N={n} done")


# ---------------------------------------------------------------------------
# fits over records


def _fit_records(spec: ScanSpec, records: list[dict]) -> list[dict]:
    proxies = [r for r in records if r.get("record") == "proxy"]
    fits = []
    if spec.kind in ("chaos_scaling", "correlation_scaling", "concentration"):
        keys = sorted({(r["metric"], r["m"], r["t"], r.get("init", "iid")) for r in proxies})
        for metric, m, t, init_kind in keys:
            pts = [(r["N"], r["value"], r["se"]) for r in proxies
                   if (r["metric"], r["m"], r["t"], r.get("init", "iid")) == (metric, m, t, init_kind)]
            pts.sort()
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    sf = fit_loglog_slope(pts)
            except ValueError as err:
                fits.append({"fit_kind": "loglog", "metric": metric, "m": m, "t_or_window": t, "init": init_kind,
                             "error": str(err), "fit_fields": []})
                continue
            fits.append({"fit_kind": "loglog", "metric": metric, "m": m, "t_or_window": t, "init": init_kind,
                         **sf.to_dict(), "fit_fields": ["slope", "intercept", "r2", "slope_se"]})
    else:
        keys = sorted({(r["metric"], r["m"], r["N"], r.get("init", "iid")) for r in proxies})
        for metric, m, n, init_kind in keys:
            pts = [(r["t"], r["value"], r["se"]) for r in proxies
                   if (r["metric"], r["m"], r["N"], r.get("init", "iid")) == (metric, m, n, init_kind)]
            if len(pts) < 8:
                continue
            try:
                df = fit_decay_plateau(pts)
            except ValueError as err:
                fits.append({"fit_kind": "decay", "metric": metric, "m": m, "N": n, "init": init_kind,
                             "error": str(err), "fit_fields": []})
                continue
            fits.append({"fit_kind": "decay", "metric": metric, "m": m, "N": n, "init": init_kind,
                         "t_or_window": f"{df.window[0]:g}-{df.window[1]:g}", **df.to_dict(),
                         "fit_fields": ["plateau", "amplitude", "rate", "residual_rms", "plateau_se", "rate_se", "r2"]})
    return fits


def refit(records: Iterable[dict], kind: str, filters: dict | None = None, metric: str | None = None):
    """Re-run a fit on stored proxy records (the ``fit`` subcommand)."""
    recs = [r for r in records if r.get("record") == "proxy"]
    filters = filters or {}
    for k, v in filters.items():
        recs = [r for r in recs if str(r.get(k)) == str(v) or (isinstance(r.get(k), (int, float)) and
                                                               _num(v) is not None and r.get(k) == _num(v))]
    if metric is not None:
        recs = [r for r in recs if r["metric"] == metric]
    if kind == "loglog":
        return fit_loglog_slope(sorted((r["N"], r["value"], r["se"]) for r in recs))
    if kind == "decay":
        return fit_decay_plateau(sorted((r["t"], r["value"], r["se"]) for r in recs))
    raise ValueError(f"unknown fit kind {kind!r}")


def _num(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return None
