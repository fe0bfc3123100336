"""Time integrators for the kinetic and overdamped mean-field particle systems.

Forces are either summed exactly over pairs (O(N^2) per ensemble) or
evaluated through a cosine series of the potential, where the mean-field sum
factorizes into per-mode averages of cos/sin (O(N K)).  Finite-Fourier
potentials always take the factored path since it is exact for them.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Literal, Sequence

import numba
import numpy as np

from .model import (
    ConfigError,
    CosineSeries,
    Ensemble,
    InitSpec,
    ModelConfig,
    PotentialSpec,
    RngLineage,
    SimulationBlowUp,
    draw_initial_phase,
    eval_potential_many,
)

BLOWUP_GUARD = 1e6

_KIND_NONE = 0
_KIND_GAUSS = 1
_KIND_COS = 2
_KIND_COS_HARMONIC = 3


@dataclass(frozen=True)
class ForceMode:
    """How the interaction sum is evaluated.

    ``fourier_factored`` replaces a Gaussian bump by a K-mode cosine series:
    ``sampling="random"`` draws random Fourier features from ``feature_seed``
    (unbiased in the features); ``sampling="lattice"`` (d = 1 only) uses the
    periodized spectral density on a frequency lattice, whose error is below
    1e-10 for separations well inside the period.
    """

    kind: Literal["exact_pairwise", "fourier_factored"] = "exact_pairwise"
    features: int = 0
    feature_seed: int = 0
    sampling: Literal["random", "lattice"] = "random"

    def __post_init__(self):
        if self.kind not in ("exact_pairwise", "fourier_factored"):
            raise ConfigError(f"unknown force mode {self.kind!r}")
        if self.kind == "fourier_factored":
            if self.features < 1:
                raise ConfigError("fourier_factored needs features >= 1")
            if self.sampling not in ("random", "lattice"):
                raise ConfigError(f"unknown feature sampling {self.sampling!r}")

    @classmethod
    def factored(cls, features: int, feature_seed: int = 0, sampling="random") -> "ForceMode":
        return cls("fourier_factored", features, feature_seed, sampling)


EXACT = ForceMode()


def gaussian_random_features(amplitude: float, width: float, d: int, k: int, seed: int) -> CosineSeries:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(0xFEA7,))))
    freqs = rng.standard_normal((k, d)) / width
    return CosineSeries(freqs, np.full(k, amplitude / k))


def lattice_period(width: float, k: int) -> float:
    # balances truncation exp(-(K dw l)^2/2) against aliasing exp(-P^2/(8 l^2))
    return 2.0 * math.sqrt(math.pi * k) * width


def gaussian_lattice_features(amplitude: float, width: float, k: int) -> CosineSeries:
    dw = 2.0 * math.pi / lattice_period(width, k)
    ks = np.arange(1, k + 1)
    scale = amplitude * dw * width / math.sqrt(2.0 * math.pi)
    coefs = 2.0 * scale * np.exp(-0.5 * (ks * dw * width) ** 2)
    return CosineSeries((ks * dw)[:, None], coefs, constant=scale, harmonic_base=dw)


@dataclass(frozen=True)
class ForceField:
    """Resolved force evaluator for a (potential, mode, d) triple."""

    kind: int
    d: int
    amplitude: float = 0.0
    width: float = 1.0
    series: CosineSeries | None = None

    @property
    def freqs(self) -> np.ndarray:
        return self.series.freqs if self.series is not None else np.zeros((0, self.d))

    @property
    def coefs(self) -> np.ndarray:
        return self.series.coefs if self.series is not None else np.zeros(0)

    @property
    def base(self) -> float:
        return self.series.harmonic_base if self.series is not None else 0.0

    def effective_potential(self) -> PotentialSpec | CosineSeries:
        """The potential the particles actually feel (a cosine series when factored)."""
        if self.kind == _KIND_GAUSS:
            return PotentialSpec.gaussian(self.amplitude, self.width)
        return self.series

    def potential_and_gradient(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        r = np.asarray(r, dtype=float).reshape(-1, self.d)
        if self.kind == _KIND_GAUSS:
            return eval_potential_many(PotentialSpec.gaussian(self.amplitude, self.width), r)
        if self.kind == _KIND_NONE:
            return np.zeros(len(r)), np.zeros_like(r)
        return self.series.value(r), self.series.gradient(r)


def resolve_force(cfg: ModelConfig, mode: ForceMode = EXACT) -> ForceField:
    pot = cfg.potential
    if mode.kind == "fourier_factored" and pot.kind != "gaussian_bump":
        raise ConfigError("fourier_factored force mode is only admissible for gaussian_bump potentials")
    if cfg.kappa == 0.0:
        return ForceField(_KIND_NONE, cfg.d)
    if pot.kind == "finite_fourier":
        series = pot.cosine_series(cfg.d)
        if series.n_modes == 0:
            return ForceField(_KIND_NONE, cfg.d)
        return ForceField(_KIND_COS, cfg.d, series=series)
    if mode.kind == "exact_pairwise":
        return ForceField(_KIND_GAUSS, cfg.d, pot.amplitude, pot.width)
    if mode.sampling == "lattice":
        if cfg.d != 1:
            raise ConfigError("lattice feature sampling is implemented for d = 1 only")
        series = gaussian_lattice_features(pot.amplitude, pot.width, mode.features)
        return ForceField(_KIND_COS_HARMONIC, 1, series=series)
    series = gaussian_random_features(pot.amplitude, pot.width, cfg.d, mode.features, mode.feature_seed)
    return ForceField(_KIND_COS, cfg.d, series=series)


# ---------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True, nogil=True)
def _force_gauss(x, kappa, amp, width, out):
    n, d = x.shape
    inv = 1.0 / (width * width)
    out[:, :] = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            r2 = 0.0
            for k in range(d):
                dx = x[i, k] - x[j, k]
                r2 += dx * dx
            g = amp * math.exp(-0.5 * r2 * inv) * inv
            for k in range(d):
                f = g * (x[i, k] - x[j, k])
                out[i, k] += f
                out[j, k] -= f
    s = kappa / n
    for i in range(n):
        for k in range(d):
            out[i, k] *= s


@numba.njit(cache=True, nogil=True)
def _mode_sums(x, freqs, cs, sn, csum, ssum):
    """Fill cs/sn (N, K) with cos/sin of every mode and csum/ssum with means."""
    n, d = x.shape
    nk = cs.shape[1]
    for k in range(nk):
        csum[k] = 0.0
        ssum[k] = 0.0
    for i in range(n):
        for k in range(nk):
            ph = 0.0
            for j in range(d):
                ph += freqs[k, j] * x[i, j]
            c = math.cos(ph)
            s = math.sin(ph)
            cs[i, k] = c
            sn[i, k] = s
            csum[k] += c
            ssum[k] += s
    for k in range(nk):
        csum[k] /= n
        ssum[k] /= n


@numba.njit(cache=True, nogil=True)
def _force_from_modes(freqs, coefs, kappa, cs, sn, csum, ssum, out):
    n, d = out.shape
    nk = cs.shape[1]
    out[:, :] = 0.0
    for i in range(n):
        for k in range(nk):
            amp = kappa * coefs[k] * (sn[i, k] * csum[k] - cs[i, k] * ssum[k])
            for j in range(d):
                out[i, j] += amp * freqs[k, j]


@numba.njit(cache=True, nogil=True)
def _harmonic_sums(x, base, c1, s1, csum, ssum):
    """Mode means of cos/sin(k base x), k = 1..K, from one sincos per particle."""
    n = x.shape[0]
    nk = csum.shape[0]
    for k in range(nk):
        csum[k] = 0.0
        ssum[k] = 0.0
    for i in range(n):
        th = base * x[i, 0]
        c1[i] = math.cos(th)
        s1[i] = math.sin(th)
    for i in range(n):
        ca = c1[i]
        sa = s1[i]
        c = ca
        s = sa
        for k in range(nk):
            csum[k] += c
            ssum[k] += s
            c, s = c * ca - s * sa, s * ca + c * sa
    for k in range(nk):
        csum[k] /= n
        ssum[k] /= n


@numba.njit(cache=True, nogil=True)
def _harmonic_force(base, coefs, kappa, c1, s1, csum, ssum, wc, ws, out):
    n = out.shape[0]
    nk = coefs.shape[0]
    for k in range(nk):
        w = kappa * coefs[k] * base * (k + 1)
        wc[k] = w * csum[k]
        ws[k] = w * ssum[k]
    for i in range(n):
        ca = c1[i]
        sa = s1[i]
        c = ca
        s = sa
        acc = 0.0
        for k in range(nk):
            acc += s * wc[k] - c * ws[k]
            c, s = c * ca - s * sa, s * ca + c * sa
        out[i, 0] = acc


@numba.njit(cache=True, nogil=True)
def _force(x, kind, kappa, amp, width, freqs, coefs, base, out, sc):
    """Interaction force into ``out`` using the scratch buffers ``sc``."""
    cs, sn, csum, ssum, c1, s1, wc, ws = sc
    if kind == _KIND_GAUSS:
        _force_gauss(x, kappa, amp, width, out)
    elif kind == _KIND_COS_HARMONIC:
        _harmonic_sums(x, base, c1, s1, csum, ssum)
        _harmonic_force(base, coefs, kappa, c1, s1, csum, ssum, wc, ws, out)
    elif kind == _KIND_COS:
        _mode_sums(x, freqs, cs, sn, csum, ssum)
        _force_from_modes(freqs, coefs, kappa, cs, sn, csum, ssum, out)
    else:
        out[:, :] = 0.0


@numba.njit(cache=True, nogil=True)
def _drift_given_modes(x, kind, kappa, freqs, coefs, base, mf_c, mf_s, out, sc):
    """Mean-field force at positions x given the law's mode means mf_c/mf_s."""
    cs, sn, csum, ssum, c1, s1, wc, ws = sc
    if kind == _KIND_NONE:
        out[:, :] = 0.0
    elif kind == _KIND_COS_HARMONIC:
        _harmonic_sums(x, base, c1, s1, csum, ssum)
        _harmonic_force(base, coefs, kappa, c1, s1, mf_c, mf_s, wc, ws, out)
    else:
        _mode_sums(x, freqs, cs, sn, csum, ssum)
        _force_from_modes(freqs, coefs, kappa, cs, sn, mf_c, mf_s, out)


@numba.njit(cache=True, nogil=True)
def _scratch(n, nk, kind):
    m = n if kind == _KIND_COS else 1
    return (np.empty((m, nk)), np.empty((m, nk)), np.empty(nk), np.empty(nk),
            np.empty(n), np.empty(n), np.empty(nk), np.empty(nk))


@numba.njit(cache=True, nogil=True)
def _guard_ok(z, guard):
    for i in range(z.shape[0]):
        for j in range(z.shape[1]):
            v = z[i, j]
            if not (abs(v) <= guard):
                return False
    return True


@numba.njit(cache=True, nogil=True)
def _advance_overdamped(x, noise, n_steps, decay, gain, sd, kind, kappa, amp, width,
                        freqs, coefs, base, guard, xbar, mf_c, mf_s, step0):
    """Exponential Euler steps for every replica.

    x: (B, N, d) updated in place; noise: (B, >=n_steps, N, d).
    xbar, if non-empty, is advanced with the same noise under the prescribed
    mean-field drift whose mode averages at global step n are mf_c[n], mf_s[n].
    Returns -1 on success, else the index b * n_steps + s of the first failure.
    """
    nb, n, d = x.shape
    nk = coefs.shape[0]
    f = np.empty((n, d))
    sc = _scratch(n, nk, kind)
    coupled = xbar.shape[0] > 0
    for b in range(nb):
        xb = x[b]
        for s in range(n_steps):
            _force(xb, kind, kappa, amp, width, freqs, coefs, base, f, sc)
            for i in range(n):
                for j in range(d):
                    xb[i, j] = decay * xb[i, j] + gain * f[i, j] + sd * noise[b, s, i, j]
            if not _guard_ok(xb, guard):
                return b * n_steps + s
            if coupled:
                yb = xbar[b]
                _drift_given_modes(yb, kind, kappa, freqs, coefs, base, mf_c[step0 + s], mf_s[step0 + s], f, sc)
                for i in range(n):
                    for j in range(d):
                        yb[i, j] = decay * yb[i, j] + gain * f[i, j] + sd * noise[b, s, i, j]
    return -1


@numba.njit(cache=True, nogil=True)
def _advance_kinetic(x, v, noise, n_steps, dt, a, ou_decay, ou_sd, kind, kappa, amp, width,
                     freqs, coefs, base, guard):
    """BAOAB steps: half kick, half drift, exact OU, half drift, half kick."""
    nb, n, d = x.shape
    nk = coefs.shape[0]
    f = np.empty((n, d))
    sc = _scratch(n, nk, kind)
    h = 0.5 * dt
    for b in range(nb):
        xb = x[b]
        vb = v[b]
        _force(xb, kind, kappa, amp, width, freqs, coefs, base, f, sc)
        for s in range(n_steps):
            for i in range(n):
                for j in range(d):
                    vb[i, j] += h * (f[i, j] - a * xb[i, j])
                    xb[i, j] += h * vb[i, j]
                    vb[i, j] = ou_decay * vb[i, j] + ou_sd * noise[b, s, i, j]
                    xb[i, j] += h * vb[i, j]
            _force(xb, kind, kappa, amp, width, freqs, coefs, base, f, sc)
            for i in range(n):
                for j in range(d):
                    vb[i, j] += h * (f[i, j] - a * xb[i, j])
            if not (_guard_ok(xb, guard) and _guard_ok(vb, guard)):
                return b * n_steps + s
    return -1


def _empty_mf():
    return np.zeros((0, 0, 1)), np.zeros((1, 0)), np.zeros((1, 0))


# ---------------------------------------------------------------------------
# single-ensemble API


@dataclass
class ForceResult:
    forces: np.ndarray
    error_bound: float


def _kernel_error(field: ForceField, cfg: ModelConfig, x: np.ndarray) -> float:
    """sup |grad W_eff - grad W| over separations spanned by the ensemble."""
    if field.kind in (_KIND_GAUSS, _KIND_NONE) or cfg.potential.kind != "gaussian_bump":
        return 0.0
    span = float(np.max(x.max(axis=0) - x.min(axis=0))) if len(x) > 1 else 0.0
    if cfg.d == 1:
        r = np.linspace(-span, span, 4001)[:, None]
    else:
        rng = np.random.default_rng(0)
        idx = rng.integers(0, len(x), size=(4096, 2))
        r = x[idx[:, 0]] - x[idx[:, 1]]
    _, g_exact = eval_potential_many(cfg.potential, r)
    g_eff = field.series.gradient(r)
    return float(cfg.kappa * np.max(np.abs(g_eff - g_exact)))


def mean_field_force(ensemble: Ensemble, cfg: ModelConfig, mode: ForceMode = EXACT) -> ForceResult:
    """F_i = -(kappa/N) sum_j grad W(x_i - x_j), including the vanishing j = i term."""
    field = resolve_force(cfg, mode)
    x = np.ascontiguousarray(ensemble.x, dtype=float)
    if x.shape[1] != cfg.d:
        raise ConfigError("ensemble dimension does not match cfg.d")
    out = np.empty_like(x)
    _force(x, field.kind, cfg.kappa, field.amplitude, field.width, field.freqs, field.coefs,
           field.base, out, _scratch(len(x), len(field.coefs), field.kind))
    return ForceResult(out, _kernel_error(field, cfg, x))


def _noise_array(noise, shape) -> np.ndarray:
    if isinstance(noise, np.random.Generator):
        return noise.standard_normal(shape)
    arr = np.asarray(noise, dtype=float)
    if arr.size != int(np.prod(shape)):
        raise ConfigError(f"noise has {arr.size} entries, expected shape {shape}")
    return arr.reshape(shape)


def overdamped_coefficients(cfg: ModelConfig) -> tuple[float, float, float]:
    """(decay, gain, sd) so that x' = decay x + gain F(x) + sd xi.

    The confinement -a x is integrated exactly, so with kappa = 0 the step is
    the exact transition of dY = -a Y dt + dB.
    """
    a, dt = cfg.a, cfg.dt
    decay = math.exp(-a * dt)
    gain = -math.expm1(-a * dt) / a
    sd = math.sqrt(-math.expm1(-2.0 * a * dt) / (2.0 * a))
    return decay, gain, sd


def kinetic_coefficients(cfg: ModelConfig) -> tuple[float, float]:
    """Exact OU velocity map for dV = -(beta/2) V dt + dB over one step."""
    gamma = 0.5 * cfg.beta
    ou_decay = math.exp(-gamma * cfg.dt)
    ou_sd = math.sqrt(-math.expm1(-2.0 * gamma * cfg.dt) / (2.0 * gamma))
    return ou_decay, ou_sd


def step_overdamped(ensemble: Ensemble, cfg: ModelConfig, noise, mode: ForceMode = EXACT) -> Ensemble:
    """One step of dY = (kappa/N) sum_j K(Y_i - Y_j) dt - a Y dt + dB with K = -grad W.

    ``noise`` is a Generator (e.g. ``RngLineage.noise_generator()``) or an
    array of N*d standard normals.
    """
    if cfg.dynamics != "overdamped":
        raise ConfigError("step_overdamped needs dynamics = overdamped")
    ensemble.check_consistent(cfg)
    field = resolve_force(cfg, mode)
    x = np.ascontiguousarray(ensemble.x, dtype=float).copy()[None]
    xi = _noise_array(noise, (1, 1) + x.shape[1:])
    decay, gain, sd = overdamped_coefficients(cfg)
    xbar, mfc, mfs = _empty_mf()
    status = _advance_overdamped(x, xi, 1, decay, gain, sd, field.kind, cfg.kappa, field.amplitude,
                                 field.width, field.freqs, field.coefs, field.base, BLOWUP_GUARD,
                                 xbar, mfc, mfs, 0)
    if status >= 0:
        raise SimulationBlowUp(ensemble.t + cfg.dt)
    return Ensemble(ensemble.t + cfg.dt, x[0])


def step_kinetic(ensemble: Ensemble, cfg: ModelConfig, noise, mode: ForceMode = EXACT) -> Ensemble:
    """One BAOAB step of dX = V dt, dV = F dt - (beta/2) V dt - a X dt + dB."""
    if cfg.dynamics != "kinetic":
        raise ConfigError("step_kinetic needs dynamics = kinetic")
    ensemble.check_consistent(cfg)
    field = resolve_force(cfg, mode)
    x = np.ascontiguousarray(ensemble.x, dtype=float).copy()[None]
    v = np.ascontiguousarray(ensemble.v, dtype=float).copy()[None]
    xi = _noise_array(noise, (1, 1) + x.shape[1:])
    ou_decay, ou_sd = kinetic_coefficients(cfg)
    status = _advance_kinetic(x, v, xi, 1, cfg.dt, cfg.a, ou_decay, ou_sd, field.kind, cfg.kappa,
                              field.amplitude, field.width, field.freqs, field.coefs, field.base,
                              BLOWUP_GUARD)
    if status >= 0:
        raise SimulationBlowUp(ensemble.t + cfg.dt)
    return Ensemble(ensemble.t + cfg.dt, x[0], v[0])


def step(ensemble: Ensemble, cfg: ModelConfig, noise, mode: ForceMode = EXACT) -> Ensemble:
    if cfg.dynamics == "kinetic":
        return step_kinetic(ensemble, cfg, noise, mode)
    return step_overdamped(ensemble, cfg, noise, mode)


# ---------------------------------------------------------------------------
# replica batches


@dataclass
class ReplicaBatch:
    """M independent ensembles advanced together; arrays are (M, N, d)."""

    t: float
    x: np.ndarray
    v: np.ndarray | None
    master_seed: int
    replicas: np.ndarray
    xbar: np.ndarray | None = None

    @property
    def phase(self) -> np.ndarray:
        if self.v is None:
            return self.x
        return np.concatenate([self.x, self.v], axis=2)

    def ensemble(self, k: int) -> Ensemble:
        return Ensemble(self.t, self.x[k].copy(), None if self.v is None else self.v[k].copy())


def output_steps(cfg: ModelConfig, times: Sequence[float]) -> np.ndarray:
    steps = np.rint(np.asarray(times, dtype=float) / cfg.dt).astype(np.int64)
    if np.any(np.abs(steps * cfg.dt - np.asarray(times)) > 1e-9 * max(1.0, max(times, default=1.0))):
        raise ConfigError(f"output times {list(times)} are not multiples of dt={cfg.dt}")
    if np.any(np.diff(steps) < 0) or (len(steps) and steps[0] < 0):
        raise ConfigError("output times must be nondecreasing and >= 0")
    return steps


@dataclass(frozen=True)
class MeanFieldDrive:
    """Mode averages of the mean-field law at every step, for coupled particles."""

    cos_mean: np.ndarray  # (n_steps + 1, K)
    sin_mean: np.ndarray


Observer = Callable[[int, float, ReplicaBatch], np.ndarray]


def _simulate_job(cfg, init, field, master_seed, replicas, steps, observer, drive, max_noise_bytes):
    n, d = cfg.n_particles, cfg.d
    nb = len(replicas)
    init_gens = [RngLineage(master_seed, int(r)).init_generator() for r in replicas]
    noise_gens = [RngLineage(master_seed, int(r)).noise_generator() for r in replicas]
    z = np.empty((nb, n, init.dim))
    for k, g in enumerate(init_gens):
        z[k] = draw_initial_phase(init, n, d, g)
    x = np.ascontiguousarray(z[:, :, :d])
    v = np.ascontiguousarray(z[:, :, d:]) if cfg.dynamics == "kinetic" else None
    xbar = x.copy() if drive is not None else None
    batch = ReplicaBatch(0.0, x, v, master_seed, np.asarray(replicas), xbar)
    per_step = nb * n * d * 8
    block = max(1, min(int(max_noise_bytes // per_step), 1 << 30))
    results = []
    done = 0
    if cfg.dynamics == "overdamped":
        decay, gain, sd = overdamped_coefficients(cfg)
    else:
        ou_decay, ou_sd = kinetic_coefficients(cfg)
    empty_x, empty_c, empty_s = _empty_mf()
    for t_index, target in enumerate(steps):
        while done < target:
            s = int(min(block, target - done))
            noise = np.empty((nb, s, n, d))
            for k, g in enumerate(noise_gens):
                noise[k] = g.standard_normal((s, n, d))
            if cfg.dynamics == "overdamped":
                if drive is not None:
                    args = (xbar, drive.cos_mean, drive.sin_mean, done)
                else:
                    args = (empty_x, empty_c, empty_s, 0)
                status = _advance_overdamped(x, noise, s, decay, gain, sd, field.kind, cfg.kappa,
                                             field.amplitude, field.width, field.freqs, field.coefs,
                                             field.base, BLOWUP_GUARD, *args)
            else:
                status = _advance_kinetic(x, v, noise, s, cfg.dt, cfg.a, ou_decay, ou_sd, field.kind,
                                          cfg.kappa, field.amplitude, field.width, field.freqs,
                                          field.coefs, field.base, BLOWUP_GUARD)
            if status >= 0:
                b, si = divmod(int(status), s)
                raise SimulationBlowUp((done + si + 1) * cfg.dt,
                                       f"blow-up in replica {replicas[b]} at t={(done + si + 1) * cfg.dt:.6g}")
            done += s
        batch.t = target * cfg.dt
        results.append(observer(t_index, batch.t, batch))
    return results


def simulate_replicas(cfg: ModelConfig, init: InitSpec, master_seed: int, replicas: Sequence[int],
                      times: Sequence[float], observer: Observer, *, mode: ForceMode = EXACT,
                      threads: int = 1, job_size: int | None = None, drive: MeanFieldDrive | None = None,
                      max_noise_bytes: int = 32 << 20) -> list[list[np.ndarray]]:
    """Simulate replicas and collect ``observer(t_index, t, batch)`` at each output time.

    Replicas are split into jobs of fixed size (independent of ``threads``);
    the returned list is ordered by job, then by output time, so the results
    never depend on scheduling.
    """
    if init.dim != cfg.phase_dim:
        raise ConfigError(f"init has dimension {init.dim}, phase space has {cfg.phase_dim}")
    if drive is not None and cfg.dynamics != "overdamped":
        raise ConfigError("coupled mean-field particles are implemented for overdamped dynamics")
    field = resolve_force(cfg, mode)
    if drive is not None and field.kind not in (_KIND_NONE, _KIND_COS, _KIND_COS_HARMONIC):
        raise ConfigError("coupled mean-field particles need a cosine-series force")
    steps = output_steps(cfg, times)
    replicas = np.asarray(replicas, dtype=np.int64)
    if job_size is None:
        job_size = max(1, min(len(replicas), (1 << 15) // max(1, cfg.n_particles)))
    jobs = [replicas[i:i + job_size] for i in range(0, len(replicas), job_size)]

    def run(job):
        return _simulate_job(cfg, init, field, master_seed, job, steps, observer, drive, max_noise_bytes)

    if threads <= 1 or len(jobs) == 1:
        return [run(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run, jobs))


def simulate(cfg: ModelConfig, init: InitSpec, lineage: RngLineage, times: Sequence[float],
             mode: ForceMode = EXACT) -> list[Ensemble]:
    """Trajectory of a single replica at the requested output times."""
    out: list[Ensemble] = []

    def keep(t_index, t, batch):
        out.append(batch.ensemble(0))
        return np.zeros(1)

    simulate_replicas(cfg, init, lineage.master_seed, [lineage.replica_index], times, keep, mode=mode)
    return out
