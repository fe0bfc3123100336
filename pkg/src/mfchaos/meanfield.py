"""Mean-field law by independent routes, and the Gibbs equilibrium.

* ``solve_mckean_vlasov_1d``: conservative finite-volume solver (overdamped,
  d = 1) with Scharfetter-Gummel fluxes and SSP-RK2 time stepping.
* ``meanfield_reference_ensemble``: one large particle system, with the
  finite-N bias estimated by a second run at half the size.
* ``scheme_propagator_1d``: the exact law of the time-discrete mean-field
  recursion that the overdamped integrator applies to a single particle.
  Its mode averages drive coupled mean-field particles, and its pairings
  carry exactly the time-step bias of the particle system.
* ``gibbs_fixed_point``: damped Picard iteration for the stationary state.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numba
import numpy as np
from scipy import fft as sfft
from scipy.special import ndtr

from .dynamics import (
    ForceMode,
    MeanFieldDrive,
    _KIND_COS,
    _KIND_COS_HARMONIC,
    _KIND_GAUSS,
    _KIND_NONE,
    output_steps,
    overdamped_coefficients,
    resolve_force,
    simulate_replicas,
)
from .model import ConfigError, InitSpec, ModelConfig, eval_potential_many
from .norms import default_dictionary


class ConvergenceError(ArithmeticError):
    """Iteration failed to converge; ``history`` holds the residuals."""

    def __init__(self, message: str, history: Sequence[float] = ()):
        super().__init__(message)
        self.history = list(history)


@dataclass(frozen=True)
class Observable:
    """A scalar function of the single-particle phase point."""

    id: str
    fn: Callable[[np.ndarray], np.ndarray]

    def __call__(self, z) -> np.ndarray:
        return np.asarray(self.fn(np.asarray(z, dtype=float)), dtype=float)


def _as_observables(observables) -> list:
    if hasattr(observables, "functions"):
        return list(observables.functions)
    return list(observables)


def default_observables(dim: int = 1) -> list:
    """The constant, the first two moments of x_1 and the default dictionary."""
    basic = [
        Observable("one", lambda z: np.ones(z.shape[:-1])),
        Observable("x1", lambda z: z[..., 0]),
        Observable("x1^2", lambda z: z[..., 0] ** 2),
    ]
    return basic + list(default_dictionary(dim).functions)


def _eval_on(obs, z: np.ndarray) -> np.ndarray:
    """Evaluate an observable on points (n, dim), returning (n,)."""
    out = np.asarray(obs(z), dtype=float)
    if out.shape != (len(z),):
        out = np.broadcast_to(out, (len(z),))
    return out


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class Grid1D:
    """Uniform cell-centered grid on [-half_width, half_width]."""

    half_width: float
    n_cells: int = 2048

    def __post_init__(self):
        if not (self.half_width > 0 and self.n_cells >= 8):
            raise ConfigError("grid needs half_width > 0 and at least 8 cells")

    @property
    def dx(self) -> float:
        return 2.0 * self.half_width / self.n_cells

    @property
    def centers(self) -> np.ndarray:
        return -self.half_width + (np.arange(self.n_cells) + 0.5) * self.dx

    @property
    def faces(self) -> np.ndarray:
        return -self.half_width + np.arange(self.n_cells + 1) * self.dx

    def coarsen(self) -> "Grid1D":
        return Grid1D(self.half_width, self.n_cells // 2)


def default_grid(cfg: ModelConfig, init: InitSpec | None = None, n_cells: int = 2048) -> Grid1D:
    """Domain wide enough that Gibbs and initial tails are below 1e-12."""
    beta = _effective_beta(cfg)
    half = 8.0 / math.sqrt(cfg.a * beta) + 1.0
    if init is not None:
        sd = math.sqrt(float(np.asarray(init.cov)[0, 0]))
        half = max(half, abs(init.mean[0]) + 8.0 * sd * (1.0 + 3.0 * init.epsilon) + 1.0)
    return Grid1D(float(math.ceil(half)), n_cells)


class _Convolver:
    """sum_j kernel(x_i + offset - x_j) rho_j dx on a uniform grid, by FFT."""

    def __init__(self, kernel: Callable[[np.ndarray], np.ndarray], grid: Grid1D, offset: float = 0.0,
                 n_out: int | None = None):
        g = grid.n_cells
        self.n_out = g if n_out is None else n_out
        lags = np.arange(-(g - 1), self.n_out) * grid.dx + offset
        self.k = np.asarray(kernel(lags), dtype=float)
        self.g = g
        self.nfft = sfft.next_fast_len(len(self.k) + g - 1, real=True)
        self.khat = sfft.rfft(self.k, self.nfft)
        self.dx = grid.dx

    def __call__(self, rho: np.ndarray) -> np.ndarray:
        full = sfft.irfft(sfft.rfft(rho, self.nfft) * self.khat, self.nfft)
        return full[self.g - 1: self.g - 1 + self.n_out] * self.dx


def _potential_1d(cfg: ModelConfig) -> tuple[Callable, Callable]:
    """W and W' as functions of a 1-D lag array."""
    pot = cfg.potential

    def w(r):
        return eval_potential_many(pot, np.asarray(r)[:, None])[0]

    def dw(r):
        return eval_potential_many(pot, np.asarray(r)[:, None])[1][:, 0]

    return w, dw


def _effective_beta(cfg: ModelConfig) -> float:
    # overdamped noise dB has generator (1/2) Laplacian, so the stationary
    # law is exp(-2 (A + kappa W * rho))
    return cfg.beta if cfg.dynamics == "kinetic" else 2.0


def _check_1d(cfg: ModelConfig) -> None:
    if cfg.d != 1:
        raise ConfigError("grid methods are implemented for d = 1 only")


# ---------------------------------------------------------------------------
# Gibbs equilibrium


@dataclass
class GibbsState:
    grid: Grid1D
    rho: np.ndarray
    velocity_var: float | None
    c_M: float
    beta: float
    iterations: int
    residual_history: list[float] = field(default_factory=list)

    @property
    def residual(self) -> float:
        return self.residual_history[-1] if self.residual_history else float("nan")

    def pair(self, observables, n_hermite: int = 48) -> dict[str, float]:
        """int phi dM for each observable (phase-space functions if kinetic)."""
        x = self.grid.centers
        w = self.rho * self.grid.dx
        out = {}
        if self.velocity_var is None:
            for obs in _as_observables(observables):
                out[obs.id] = float(np.dot(_eval_on(obs, x[:, None]), w))
            return out
        nodes, weights = np.polynomial.hermite_e.hermegauss(n_hermite)
        v = nodes * math.sqrt(self.velocity_var)
        weights = weights / weights.sum()
        z = np.stack(np.broadcast_arrays(x[:, None], v[None, :]), axis=-1).reshape(-1, 2)
        ww = (w[:, None] * weights[None, :]).ravel()
        for obs in _as_observables(observables):
            out[obs.id] = float(np.dot(_eval_on(obs, z), ww))
        return out


def gibbs_fixed_point(cfg: ModelConfig, grid: Grid1D | None = None, tol: float = 1e-10,
                      max_iter: int = 500, damping: float | None = None) -> GibbsState:
    """Stationary mean-field state rho = c exp(-beta (A + kappa W * rho)).

    Plain Picard is used unless the residual stops decreasing, after which
    the update is damped by 0.5 (or by ``damping`` from the start).  The
    uniqueness condition kappa beta sup|W| < 1 is checked first; when it
    fails the iteration is still run and a ConvergenceError carrying the
    residual history is raised.
    """
    _check_1d(cfg)
    beta = _effective_beta(cfg)
    grid = default_grid(cfg) if grid is None else grid
    x = grid.centers
    w, _ = _potential_1d(cfg)
    conv = _Convolver(w, grid)
    confinement = 0.5 * cfg.a * x**2

    def update(rho):
        u = confinement + cfg.kappa * conv(rho)
        e = np.exp(-beta * (u - u.min()))
        return e / (e.sum() * grid.dx), u

    rho, _ = update(np.zeros_like(x))
    history: list[float] = []
    lam = 1.0 if damping is None else float(damping)
    for it in range(1, max_iter + 1):
        new, u = update(rho)
        res = float(np.max(np.abs(new - rho)))
        history.append(res)
        if damping is None and len(history) > 2 and history[-1] > history[-2]:
            lam = 0.5
        rho = (1.0 - lam) * rho + lam * new
        if res < tol:
            break
    else:
        raise ConvergenceError(f"Gibbs iteration did not reach tol={tol} in {max_iter} iterations "
                               f"(residual {history[-1]:.3e})", history)
    condition = cfg.kappa * beta * cfg.potential.sup_abs()
    if condition >= 1.0:
        raise ConvergenceError(f"uniqueness condition kappa*beta*sup|W| = {condition:.3g} >= 1; "
                               "the fixed point found need not be the Gibbs state", history)
    c_m = 1.0 / float(np.sum(np.exp(-beta * (confinement + cfg.kappa * conv(rho)))) * grid.dx)
    vvar = 1.0 / cfg.beta if cfg.dynamics == "kinetic" else None
    return GibbsState(grid, rho, vvar, c_m, beta, it, history)


# ---------------------------------------------------------------------------
# reference container


@dataclass
class MeanFieldReference:
    """Pairings int phi d mu_t keyed by (observable id, t)."""

    method: str
    values: dict[tuple[str, float], float]
    se: dict[tuple[str, float], float] = field(default_factory=dict)
    bias_estimate: dict[tuple[str, float], float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    densities: dict[float, np.ndarray] = field(default_factory=dict)
    grid: Grid1D | None = None
    drive: MeanFieldDrive | None = None

    def value(self, phi_id: str, t: float) -> float:
        return self.values[(phi_id, _tkey(t))]

    def error(self, phi_id: str, t: float) -> float:
        """Total error bar: standard error and bias estimate in quadrature."""
        key = (phi_id, _tkey(t))
        return math.hypot(self.se.get(key, 0.0), self.bias_estimate.get(key, 0.0))

    def table(self, phi_ids: Sequence[str], times: Sequence[float]) -> np.ndarray:
        return np.array([[self.value(p, t) for p in phi_ids] for t in times])

    def to_records(self) -> list[dict]:
        recs = []
        for (pid, t), v in sorted(self.values.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            recs.append({"record": "meanfield", "method": self.method, "phi_id": pid, "t": t, "value": v,
                         "se": self.se.get((pid, t)), "bias": self.bias_estimate.get((pid, t)),
                         **{f"meta_{k}": val for k, val in self.meta.items()}})
        return recs

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.to_records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "MeanFieldReference":
        values, se, bias, method, meta = {}, {}, {}, None, {}
        with open(path) as fh:
            for line in fh:
                rec = json.loads(line)
                key = (rec["phi_id"], _tkey(rec["t"]))
                method = rec["method"]
                values[key] = rec["value"]
                if rec.get("se") is not None:
                    se[key] = rec["se"]
                if rec.get("bias") is not None:
                    bias[key] = rec["bias"]
                meta = {k[5:]: v for k, v in rec.items() if k.startswith("meta_")}
        return cls(method, values, se, bias, meta)


def _tkey(t: float) -> float:
    return round(float(t), 12)


def _initial_density(init: InitSpec, grid: Grid1D, cell_average: bool) -> np.ndarray:
    """One-particle initial density F^{N,1}_circ on the grid (a mixture for latent laws)."""
    if init.dim != 1:
        raise ConfigError("grid methods need a 1-D initial law")
    rho = np.zeros(grid.n_cells)
    for w, m, c in init.components():
        m, sd = float(m[0]), math.sqrt(float(c[0, 0]))
        if cell_average:
            rho += w * np.diff(ndtr((grid.faces - m) / sd)) / grid.dx
        else:
            rho += w * np.exp(-0.5 * ((grid.centers - m) / sd) ** 2) / (sd * math.sqrt(2.0 * math.pi))
    return rho / (rho.sum() * grid.dx)


def _pair_density(observables, grid: Grid1D, rho: np.ndarray) -> dict[str, float]:
    x = grid.centers[:, None]
    return {obs.id: float(np.dot(_eval_on(obs, x), rho) * grid.dx) for obs in observables}


# ---------------------------------------------------------------------------
# finite-volume McKean-Vlasov solver


def _bernoulli(z: np.ndarray) -> np.ndarray:
    """B(z) = z / (e^z - 1), continuous at 0."""
    small = np.abs(z) < 1e-8
    zz = np.where(small, 1.0, z)
    return np.where(small, 1.0 - 0.5 * z, zz / np.expm1(zz))


@dataclass
class _FVState:
    steps: int = 0
    substeps: int = 0
    max_mass_error: float = 0.0


def solve_mckean_vlasov_1d(cfg: ModelConfig, mu0: InitSpec, grid: Grid1D | None = None,
                           timegrid: Sequence[float] = (1.0,), observables=(), cfl: float = 0.45,
                           error_estimate: bool = True) -> MeanFieldReference:
    """Finite-volume solution of d_t mu = (1/2) mu'' - (mu b)', b = -kappa W' * mu - a x.

    Scharfetter-Gummel fluxes keep the scheme conservative and positivity
    preserving under the step bound dt <= cfl * dx^2 / (D max(B(-z) + B(z'))),
    enforced by sub-stepping.  With ``error_estimate`` the solve is repeated
    on a grid with half the cells and the difference of pairings is
    recorded as the bias estimate.
    """
    if cfg.dynamics != "overdamped":
        raise ConfigError("the grid solver is for overdamped dynamics")
    _check_1d(cfg)
    grid = default_grid(cfg, mu0) if grid is None else grid
    observables = _as_observables(observables)
    fine = _fv_run(cfg, mu0, grid, timegrid, observables, cfl)
    bias = {}
    if error_estimate:
        coarse = _fv_run(cfg, mu0, grid.coarsen(), timegrid, observables, cfl)
        bias = {k: abs(fine["values"][k] - coarse["values"][k]) for k in fine["values"]}
    return MeanFieldReference("grid_pde", fine["values"], {}, bias,
                              {"n_cells": grid.n_cells, "half_width": grid.half_width,
                               "steps": fine["state"].steps, "substeps": fine["state"].substeps,
                               "max_mass_error": fine["state"].max_mass_error},
                              fine["densities"], grid)


def _fv_run(cfg, mu0, grid, timegrid, observables, cfl):
    diff = 0.5
    dx = grid.dx
    xf = grid.faces[1:-1]
    _, dw = _potential_1d(cfg)
    conv = _Convolver(dw, grid, offset=0.5 * dx, n_out=grid.n_cells - 1)
    rho = _initial_density(mu0, grid, cell_average=True)
    state = _FVState()

    def rhs(r):
        b = -cfg.a * xf
        if cfg.kappa != 0.0:
            b = b - cfg.kappa * conv(r)
        z = b * dx / diff
        bp = _bernoulli(z)
        bm = bp + z  # B(-z) = B(z) + z
        flux = (diff / dx) * (bm * r[:-1] - bp * r[1:])
        out = np.zeros_like(r)
        out[:-1] -= flux / dx
        out[1:] += flux / dx
        return out, float(np.max(bm[1:] + bp[:-1])) if len(bm) > 1 else float(bm.max())

    values, densities = {}, {}
    t = 0.0
    times = sorted(float(v) for v in timegrid)
    for target in times:
        if target < t - 1e-12:
            raise ConfigError("timegrid must be nondecreasing")
        while t < target - 1e-14:
            # one nominal step of cfg.dt, split as the step bound requires
            h_nom = min(cfg.dt, target - t)
            k1, s = rhs(rho)
            n_sub = max(1, math.ceil(h_nom * diff * max(s, 2.0) / (cfl * dx * dx)))
            h = h_nom / n_sub
            state.steps += 1
            state.substeps += n_sub
            for sub in range(n_sub):
                if sub:
                    k1, _ = rhs(rho)
                r1 = rho + h * k1
                k2, _ = rhs(r1)
                rho = 0.5 * rho + 0.5 * (r1 + h * k2)
            t += h_nom
            state.max_mass_error = max(state.max_mass_error, abs(rho.sum() * dx - 1.0))
        densities[_tkey(target)] = rho.copy()
        for pid, v in _pair_density(observables, grid, rho).items():
            values[(pid, _tkey(target))] = v
    return {"values": values, "densities": densities, "state": state}


# ---------------------------------------------------------------------------
# time-discrete mean-field propagator


@numba.njit(cache=True)
def _push_gaussian(rho, x0, dx, target, sd, out):
    """out(y_i) = sum_j dx rho_j N(y_i; target_j, sd^2) on the grid x0 + i dx."""
    g = rho.shape[0]
    out[:] = 0.0
    reach = 12.0 * sd
    norm = dx / (sd * math.sqrt(2.0 * math.pi))
    inv = 1.0 / (sd * sd)
    for j in range(g):
        m = rho[j] * norm
        if m == 0.0:
            continue
        lo = int(math.floor((target[j] - reach - x0) / dx))
        hi = int(math.ceil((target[j] + reach - x0) / dx))
        if lo < 0:
            lo = 0
        if hi > g - 1:
            hi = g - 1
        for i in range(lo, hi + 1):
            u = x0 + i * dx - target[j]
            out[i] += m * math.exp(-0.5 * u * u * inv)


def scheme_propagator_1d(cfg: ModelConfig, mu0: InitSpec, timegrid: Sequence[float], observables=(),
                         mode: ForceMode | None = None, grid: Grid1D | None = None,
                         drive: MeanFieldDrive | None = None) -> MeanFieldReference:
    """Law of the discrete recursion y' = e^{-a dt} y + g F_mu(y) + s xi.

    This is the overdamped integrator applied to one particle in the field
    of its own law mu_n.  The density is carried on a grid through
    mu_{n+1}(y) = int mu_n(x) N(y; T_n(x), s^2) dx, which is exact up to
    quadrature.  The returned reference carries the mode averages of mu_n
    at every step as a MeanFieldDrive when the force is a cosine series.

    With a prescribed ``drive`` the force uses its mode averages instead of
    those of the propagated density, so the evolution is linear: this is
    the law of coupled particles started from ``mu0``.
    """
    if cfg.dynamics != "overdamped":
        raise ConfigError("the scheme propagator is for overdamped dynamics")
    _check_1d(cfg)
    mode = ForceMode() if mode is None else mode
    field_ = resolve_force(cfg, mode)
    decay, gain, sd = overdamped_coefficients(cfg)
    grid = default_grid(cfg, mu0) if grid is None else grid
    while grid.dx > 0.5 * sd:
        grid = Grid1D(grid.half_width, grid.n_cells * 2)
    x = grid.centers
    dx = grid.dx
    observables = _as_observables(observables)
    steps = output_steps(cfg, timegrid)
    n_total = int(steps.max()) if len(steps) else 0
    rho = _initial_density(mu0, grid, cell_average=False)

    cosine = field_.kind in (_KIND_COS, _KIND_COS_HARMONIC)
    if drive is not None:
        if not cosine and field_.kind != _KIND_NONE:
            raise ConfigError("a prescribed drive needs a cosine-series force")
        if drive.cos_mean.shape[0] < n_total + 1:
            raise ConfigError("prescribed drive is shorter than the time grid")
    if cosine:
        freqs = field_.freqs[:, 0]
        coefs = field_.coefs
        cos_tab = np.cos(np.outer(x, freqs))
        sin_tab = np.sin(np.outer(x, freqs))
        cmeans = np.empty((n_total + 1, len(freqs)))
        smeans = np.empty((n_total + 1, len(freqs)))
    elif field_.kind == _KIND_GAUSS:
        _, dw = _potential_1d(cfg)
        conv = _Convolver(dw, grid)
    values, densities = {}, {}
    out = np.empty_like(rho)
    mass = []
    wanted = {int(s): [] for s in steps}
    for i, s in enumerate(steps):
        wanted[int(s)].append(float(timegrid[i]))
    for n in range(n_total + 1):
        if cosine:
            w = rho * dx
            cmeans[n] = w @ cos_tab
            smeans[n] = w @ sin_tab
        if n in wanted:
            for t in wanted[n]:
                densities[_tkey(t)] = rho.copy()
                for pid, v in _pair_density(observables, grid, rho).items():
                    values[(pid, _tkey(t))] = v
        if n == n_total:
            break
        if cosine:
            amp = cfg.kappa * coefs * freqs
            cm, sm = (cmeans[n], smeans[n]) if drive is None else (drive.cos_mean[n], drive.sin_mean[n])
            force = sin_tab @ (amp * cm) - cos_tab @ (amp * sm)
        elif field_.kind == _KIND_GAUSS:
            force = -cfg.kappa * conv(rho)
        else:
            force = np.zeros_like(x)
        _push_gaussian(rho, x[0], dx, decay * x + gain * force, sd, out)
        rho, out = out, rho
        mass.append(abs(rho.sum() * dx - 1.0))
    if cosine:
        own = MeanFieldDrive(cmeans, smeans)
    elif field_.kind == _KIND_GAUSS:
        own = None
    else:
        own = MeanFieldDrive(np.zeros((n_total + 1, 0)), np.zeros((n_total + 1, 0)))
    meta = {"n_cells": grid.n_cells, "half_width": grid.half_width, "dt": cfg.dt,
            "max_mass_error": float(max(mass, default=0.0))}
    return MeanFieldReference("scheme_propagator", values, {}, {}, meta, densities, grid, own)


def control_moments(cfg: ModelConfig, init: InitSpec, reference: MeanFieldReference, observables,
                    timegrid: Sequence[float], centers: np.ndarray, m_max: int,
                    mode: ForceMode | None = None, n_nodes: int = 24) -> np.ndarray:
    """Exact E[U_j] of coupled mean-field particles for centered observables.

    Given the latent variable the coupled particles are i.i.d. with the
    linearly propagated law of that component, so
    E[U_j] = E_theta[(int (phi - center) d nu^theta_t)^j].  Returns an
    array (T, P, m_max).
    """
    observables = _as_observables(observables)
    centers = np.asarray(centers, dtype=float)
    comps = init.components(n_nodes) if not init.is_product else [(1.0, np.asarray(init.mean), np.asarray(init.cov))]
    out = np.zeros((len(timegrid), len(observables), m_max))
    if len(comps) == 1:
        h = reference.table([o.id for o in observables], timegrid) - centers
        return np.stack([h**j for j in range(1, m_max + 1)], axis=-1)
    for w, m, c in comps:
        comp = InitSpec(mean=tuple(np.atleast_1d(m)), cov=tuple(map(tuple, np.atleast_2d(c))))
        ref = scheme_propagator_1d(cfg, comp, timegrid, observables, mode=mode, grid=reference.grid,
                                   drive=reference.drive)
        h = ref.table([o.id for o in observables], timegrid) - centers
        out += w * np.stack([h**j for j in range(1, m_max + 1)], axis=-1)
    return out


# ---------------------------------------------------------------------------
# reference ensemble


def default_reference_mode(cfg: ModelConfig) -> ForceMode:
    if cfg.potential.kind != "gaussian_bump":
        return ForceMode()
    if cfg.d == 1:
        return ForceMode.factored(16, sampling="lattice")
    return ForceMode.factored(4096, feature_seed=0x5EED)


def _ensemble_pairings(cfg, init, n, observables, times, seed, mode, threads):
    """Mean and standard error of phi over the particles of one ensemble."""
    def observer(t_index, t, batch):
        z = batch.phase[0]
        row = np.empty((len(observables), 2))
        for k, obs in enumerate(observables):
            v = _eval_on(obs, z)
            row[k] = v.mean(), v.std(ddof=1) / math.sqrt(len(v)) if len(v) > 1 else float("nan")
        return row

    res = simulate_replicas(cfg.replace(n_particles=n), init, seed, [0], times, observer, mode=mode,
                            threads=threads)
    return np.stack(res[0])  # (T, P, 2)


def meanfield_reference_ensemble(cfg: ModelConfig, init: InitSpec, n_ref: int, observables,
                                 timegrid: Sequence[float], seed: int = 0, mode: ForceMode | None = None,
                                 richardson: bool = True, max_experiment_n: int | None = None,
                                 threads: int = 1) -> MeanFieldReference:
    """Pairings of one N_ref-particle ensemble, as a proxy for mu_t.

    Standard errors treat the particles as independent (their correlations
    are O(1/N_ref)).  With ``richardson`` a second ensemble of N_ref/2
    particles gives the finite-N bias estimate c/N_ref = v(N_ref/2) - v(N_ref).
    """
    if not init.is_product:
        raise ConfigError("reference ensembles need product-form (chaotic) initial data")
    observables = _as_observables(observables)
    mode = default_reference_mode(cfg) if mode is None else mode
    meta = {"N_ref": int(n_ref), "dt": cfg.dt, "seed": int(seed)}
    if max_experiment_n is not None and n_ref < 10 * max_experiment_n:
        msg = f"N_ref={n_ref} is below 10x the largest experiment N={max_experiment_n}"
        warnings.warn(msg)
        meta["warning"] = msg
    full = _ensemble_pairings(cfg, init, n_ref, observables, timegrid, seed, mode, threads)
    values, se, bias = {}, {}, {}
    half = None
    if richardson:
        half = _ensemble_pairings(cfg, init, n_ref // 2, observables, timegrid, seed + 1, mode, threads)
    for ti, t in enumerate(timegrid):
        for k, obs in enumerate(observables):
            key = (obs.id, _tkey(t))
            values[key] = float(full[ti, k, 0])
            se[key] = float(full[ti, k, 1])
            if half is not None:
                bias[key] = float(half[ti, k, 0] - full[ti, k, 0])
    return MeanFieldReference("reference_ensemble", values, se, bias, meta)
