"""Domain types shared by every module: potentials, model configuration,
initial-data specifications, ensembles and the per-replica RNG lineage."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid model, potential, initial-data or run configuration."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class SimulationBlowUp(FloatingPointError):
    """Raised when a trajectory leaves the finite, guarded region."""

    def __init__(self, t: float, message: str = ""):
        self.t = t
        super().__init__(message or f"simulation blow-up at t={t:.6g}")


# ---------------------------------------------------------------------------
# interaction potentials


@dataclass(frozen=True)
class CosineSeries:
    """Even potential W(x) = sum_k coef[k] * cos(freqs[k] . x).

    Internal representation shared by ``finite_fourier`` potentials and by
    the Fourier-factored force path.  ``harmonic`` is set when the
    frequencies are ``(1..K) * base`` in one dimension, which lets the
    kernels build all modes from a single sincos.
    """

    freqs: np.ndarray  # (K, d)
    coefs: np.ndarray  # (K,)
    constant: float = 0.0
    harmonic_base: float = 0.0

    @property
    def harmonic(self) -> bool:
        return self.harmonic_base > 0.0

    @property
    def n_modes(self) -> int:
        return len(self.coefs)

    def value(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        phase = x @ self.freqs.T
        return self.constant + np.cos(phase) @ self.coefs

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        phase = x @ self.freqs.T
        return -(np.sin(phase) * self.coefs) @ self.freqs


@dataclass(frozen=True)
class PotentialSpec:
    """Even, bounded interaction potential.

    ``gaussian_bump``: W(x) = amplitude * exp(-|x|^2 / (2 width^2)).
    ``finite_fourier``: W(x) = sum_k c_k exp(i xi_k . x) with the modes paired
    (c, xi) <-> (c, -xi) so the sum is even and real; it equals
    sum_k c_k cos(xi_k . x).
    """

    kind: Literal["gaussian_bump", "finite_fourier"] = "gaussian_bump"
    amplitude: float = 1.0
    width: float = 1.0
    modes: tuple[tuple[float, tuple[float, ...]], ...] = ()

    def __post_init__(self):
        if self.kind == "gaussian_bump":
            if not (self.width > 0 and math.isfinite(self.width)):
                raise ConfigError(f"gaussian_bump width must be > 0, got {self.width}")
            if not math.isfinite(self.amplitude):
                raise ConfigError("gaussian_bump amplitude must be finite")
        elif self.kind == "finite_fourier":
            norm = []
            for c, xi in self.modes:
                xi = tuple(float(v) for v in np.atleast_1d(xi))
                if not math.isfinite(c) or not all(math.isfinite(v) for v in xi):
                    raise ConfigError("finite_fourier modes must be finite")
                norm.append((float(c), xi))
            object.__setattr__(self, "modes", tuple(norm))
            _check_pairing(self.modes)
        else:
            raise ConfigError(f"unknown potential kind {self.kind!r}")

    @classmethod
    def gaussian(cls, amplitude: float = 1.0, width: float = 1.0) -> "PotentialSpec":
        return cls("gaussian_bump", amplitude=amplitude, width=width)

    @classmethod
    def fourier(cls, modes) -> "PotentialSpec":
        return cls("finite_fourier", modes=tuple((c, tuple(np.atleast_1d(xi))) for c, xi in modes))

    def sup_abs(self) -> float:
        """Upper bound on sup |W| (exact for the Gaussian bump)."""
        if self.kind == "gaussian_bump":
            return abs(self.amplitude)
        return float(sum(abs(c) for c, _ in self.modes))

    def cosine_series(self, d: int) -> CosineSeries:
        if self.kind != "finite_fourier":
            raise ConfigError("only finite_fourier potentials have an exact cosine series")
        if not self.modes:
            return CosineSeries(np.zeros((0, d)), np.zeros(0))
        freqs = np.array([xi for _, xi in self.modes], dtype=float)
        if freqs.shape[1] != d:
            raise ConfigError(f"finite_fourier frequencies have dimension {freqs.shape[1]}, model has d={d}")
        coefs = np.array([c for c, _ in self.modes], dtype=float)
        nonzero = np.any(freqs != 0.0, axis=1)
        constant = float(coefs[~nonzero].sum())
        return CosineSeries(freqs[nonzero], coefs[nonzero], constant=constant)


def _check_pairing(modes) -> None:
    pending: dict[tuple[float, ...], list[float]] = {}
    for c, xi in modes:
        if all(v == 0.0 for v in xi):
            continue
        pending.setdefault(xi, []).append(c)
    for xi, cs in pending.items():
        partner = pending.get(tuple(-v for v in xi), [])
        if sorted(cs) != sorted(partner):
            raise ConfigError(
                f"finite_fourier mode xi={xi} lacks a partner (c, -xi) with equal coefficient;"
                " the series would not be even and real")


def eval_potential(spec: PotentialSpec, x) -> tuple[float, np.ndarray]:
    """Return ``(W(x), grad W(x))`` for a single position ``x``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if not np.all(np.isfinite(x)):
        raise DomainError(f"non-finite position {x!r}")
    if spec.kind == "gaussian_bump":
        w = spec.amplitude * math.exp(-float(x @ x) / (2.0 * spec.width**2))
        return w, -(x / spec.width**2) * w
    series = spec.cosine_series(len(x))
    return float(series.value(x)[0]), series.gradient(x)[0]


def eval_potential_many(spec: PotentialSpec, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`eval_potential` over rows of ``x`` with shape (n, d)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if not np.all(np.isfinite(x)):
        raise DomainError("non-finite positions")
    if spec.kind == "gaussian_bump":
        w = spec.amplitude * np.exp(-np.einsum("ij,ij->i", x, x) / (2.0 * spec.width**2))
        return w, -(x / spec.width**2) * w[:, None]
    series = spec.cosine_series(x.shape[1])
    return series.value(x), series.gradient(x)


# ---------------------------------------------------------------------------
# model configuration


@dataclass(frozen=True)
class ModelConfig:
    dynamics: Literal["kinetic", "overdamped"] = "overdamped"
    d: int = 1
    kappa: float = 0.2
    beta: float = 1.0
    a: float = 1.0
    potential: PotentialSpec = field(default_factory=PotentialSpec)
    n_particles: int = 100
    dt: float = 0.01
    t_final: float = 1.0

    def __post_init__(self):
        if self.dynamics not in ("kinetic", "overdamped"):
            raise ConfigError(f"dynamics must be 'kinetic' or 'overdamped', got {self.dynamics!r}")
        if not (isinstance(self.d, (int, np.integer)) and 1 <= self.d <= 3):
            raise ConfigError(f"d must be an integer in 1..3, got {self.d!r}")
        checks = [
            ("kappa", self.kappa >= 0),
            ("beta", self.beta > 0),
            ("a", self.a > 0),
            ("dt", self.dt > 0),
            ("t_final", self.t_final > 0),
        ]
        for name, ok in checks:
            value = getattr(self, name)
            if not (ok and math.isfinite(value)):
                raise ConfigError(f"invalid {name}={value!r}")
        if not (isinstance(self.n_particles, (int, np.integer)) and self.n_particles >= 1):
            raise ConfigError(f"n_particles must be an integer >= 1, got {self.n_particles!r}")

    @property
    def phase_dim(self) -> int:
        return 2 * self.d if self.dynamics == "kinetic" else self.d

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))

    def replace(self, **changes) -> "ModelConfig":
        from dataclasses import replace

        return replace(self, **changes)


# ---------------------------------------------------------------------------
# initial data


@dataclass(frozen=True)
class InitSpec:
    """Exchangeable initial law.

    ``iid``: particles i.i.d. Gaussian(mean, cov) in phase space.
    ``latent_shift``: iid base, then one standard Gaussian vector Theta per
    replica shifts every position by epsilon * Theta.
    ``latent_scale``: iid base, then one log-normal factor
    exp(epsilon * Theta - epsilon^2 / 2) per replica scales every phase
    coordinate.
    """

    kind: Literal["iid", "latent_shift", "latent_scale"] = "iid"
    mean: tuple[float, ...] = (0.0,)
    cov: tuple[tuple[float, ...], ...] = ((1.0,),)
    epsilon: float = 0.0

    def __post_init__(self):
        if self.kind not in ("iid", "latent_shift", "latent_scale"):
            raise ConfigError(f"unknown init kind {self.kind!r}")
        mean = tuple(float(v) for v in np.atleast_1d(self.mean))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (len(mean), len(mean)):
            raise ConfigError(f"init covariance shape {cov.shape} does not match mean length {len(mean)}")
        if not np.allclose(cov, cov.T):
            raise ConfigError("init covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise ConfigError("init covariance must be positive definite")
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", tuple(tuple(row) for row in cov.tolist()))

    @classmethod
    def gaussian(cls, mean: Sequence[float], var, kind="iid", epsilon=0.0) -> "InitSpec":
        """Gaussian base law; ``var`` may be a scalar, a diagonal or a matrix."""
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        var = np.asarray(var, dtype=float)
        if var.ndim == 0:
            cov = np.eye(len(mean)) * float(var)
        elif var.ndim == 1:
            cov = np.diag(var)
        else:
            cov = var
        return cls(kind=kind, mean=tuple(mean), cov=tuple(map(tuple, cov)), epsilon=epsilon)

    @property
    def dim(self) -> int:
        return len(self.mean)

    @property
    def is_product(self) -> bool:
        return self.kind == "iid" or self.epsilon == 0.0

    def chol(self) -> np.ndarray:
        return np.linalg.cholesky(np.asarray(self.cov))

    def components(self, n_nodes: int = 32, d: int | None = None) -> list[tuple[float, np.ndarray, np.ndarray]]:
        """Gaussian laws of one particle given the latent variable, with quadrature weights.

        Returns (weight, mean, cov) triples; conditionally on the latent
        variable the particles are i.i.d. with that Gaussian law, so the
        one-particle marginal is the weighted mixture.  ``d`` is the number
        of shifted position coordinates (default: all of them).
        """
        mean = np.asarray(self.mean)
        cov = np.asarray(self.cov)
        if self.is_product:
            return [(1.0, mean, cov)]
        nodes, weights = np.polynomial.hermite_e.hermegauss(n_nodes)
        weights = weights / weights.sum()
        if self.kind == "latent_scale":
            out = []
            for th, w in zip(nodes, weights):
                s = math.exp(self.epsilon * th - 0.5 * self.epsilon**2)
                out.append((float(w), mean * s, cov * s * s))
            return out
        d = self.dim if d is None else d
        out = []
        for idx in itertools.product(range(n_nodes), repeat=d):
            shift = np.zeros(self.dim)
            shift[:d] = self.epsilon * nodes[list(idx)]
            out.append((float(np.prod(weights[list(idx)])), mean + shift, cov))
        return out


@dataclass
class PhasePoint:
    x: np.ndarray
    v: np.ndarray | None = None


@dataclass
class Ensemble:
    """State of one N-particle system: positions (N, d), velocities or None."""

    t: float
    x: np.ndarray
    v: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        if self.v is not None:
            self.v = np.asarray(self.v, dtype=float).reshape(self.x.shape)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def phase(self) -> np.ndarray:
        """Phase-space coordinates z = (x, v), shape (N, phase_dim)."""
        if self.v is None:
            return self.x
        return np.concatenate([self.x, self.v], axis=1)

    @property
    def points(self) -> list[PhasePoint]:
        if self.v is None:
            return [PhasePoint(xi) for xi in self.x]
        return [PhasePoint(xi, vi) for xi, vi in zip(self.x, self.v)]

    def copy(self) -> "Ensemble":
        return Ensemble(self.t, self.x.copy(), None if self.v is None else self.v.copy())

    def permuted(self, perm) -> "Ensemble":
        return Ensemble(self.t, self.x[perm], None if self.v is None else self.v[perm])

    def check_consistent(self, cfg: ModelConfig) -> None:
        if self.x.shape != (cfg.n_particles, cfg.d):
            raise ConfigError(f"ensemble positions {self.x.shape} inconsistent with N={cfg.n_particles}, d={cfg.d}")
        if (cfg.dynamics == "kinetic") != (self.v is not None):
            raise ConfigError("ensemble velocities inconsistent with dynamics")


# ---------------------------------------------------------------------------
# random streams


_INIT_STREAM = 0
_NOISE_STREAM = 1


@dataclass(frozen=True)
class RngLineage:
    """Per-replica random streams.

    The stream of replica ``r`` is ``Philox`` keyed by
    ``SeedSequence(master_seed, spawn_key=(r, purpose))`` with purpose 0 for
    initial data and 1 for the Brownian increments.  Both depend on
    ``(master_seed, r)`` only, never on scheduling or thread count.
    """

    master_seed: int
    replica_index: int = 0

    def __post_init__(self):
        if not (0 <= int(self.master_seed) < 2**64):
            raise ConfigError("master_seed must be a 64-bit unsigned integer")
        if self.replica_index < 0:
            raise ConfigError("replica_index must be >= 0")

    def generator(self, purpose: int) -> np.random.Generator:
        seq = np.random.SeedSequence(int(self.master_seed), spawn_key=(int(self.replica_index), purpose))
        return np.random.Generator(np.random.Philox(seq))

    def init_generator(self) -> np.random.Generator:
        return self.generator(_INIT_STREAM)

    def noise_generator(self) -> np.random.Generator:
        return self.generator(_NOISE_STREAM)


def draw_initial_phase(init: InitSpec, n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Draw one replica's phase coordinates, shape (n, init.dim)."""
    if init.dim not in (d, 2 * d):
        raise ConfigError(f"init dimension {init.dim} matches neither d={d} nor 2d")
    z = rng.standard_normal((n, init.dim)) @ init.chol().T + np.asarray(init.mean)
    if init.kind == "latent_shift" and init.epsilon > 0:
        theta = rng.standard_normal(d)
        z[:, :d] += init.epsilon * theta
    elif init.kind == "latent_scale" and init.epsilon > 0:
        theta = rng.standard_normal()
        z *= math.exp(init.epsilon * theta - 0.5 * init.epsilon**2)
    return z


def draw_initial_ensemble(cfg: ModelConfig, init: InitSpec, lineage: RngLineage) -> Ensemble:
    if init.dim != cfg.phase_dim:
        raise ConfigError(f"init has dimension {init.dim}, phase space has {cfg.phase_dim}")
    z = draw_initial_phase(init, cfg.n_particles, cfg.d, lineage.init_generator())
    if cfg.dynamics == "kinetic":
        return Ensemble(0.0, z[:, : cfg.d], z[:, cfg.d :])
    return Ensemble(0.0, z)
