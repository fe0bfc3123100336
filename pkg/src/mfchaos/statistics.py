"""Partition combinatorics, U-statistics, cumulants and correlation estimates.

Correlations are always tested against tensorized observables: for a
scalar observable psi, the order-m moment is a_m = E[psi(Z^1)...psi(Z^m)]
over distinct particles, estimated per replica by the U-statistic of the
particle values and averaged over replicas.  The tested correlation
function is the Moebius sum over set partitions of {1..m} of these moments,
and the cumulant route is the plug-in cumulant of the replica means
X_r = (1/N) sum_i psi(Z^i_r).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

MAX_ORDER = 12


class InsufficientReplicas(ValueError):
    pass


class MissingMoments(KeyError):
    pass


@dataclass(frozen=True)
class Partition:
    blocks: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        seen = [i for b in self.blocks for i in b]
        if any(len(b) == 0 for b in self.blocks):
            raise ValueError("blocks must be nonempty")
        if len(seen) != len(set(seen)) or sorted(seen) != list(range(1, len(seen) + 1)):
            raise ValueError("blocks must be disjoint and cover {1..m}")

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(sorted((len(b) for b in self.blocks), reverse=True))


def _check_order(m: int) -> None:
    if not isinstance(m, (int, np.integer)) or m < 1:
        raise ValueError(f"order must be a positive integer, got {m!r}")
    if m > MAX_ORDER:
        raise ValueError(f"order {m} exceeds the partition-sum cap {MAX_ORDER}")


def set_partitions(m: int) -> list[Partition]:
    """All set partitions of {1..m}, blocks in order of their least element."""
    _check_order(m)
    return [Partition(p) for p in _partitions(m)]


@lru_cache(maxsize=None)
def _partitions(m: int) -> tuple:
    if m == 1:
        return (((1,),),)
    out = []
    for p in _partitions(m - 1):
        for k in range(len(p)):
            out.append(p[:k] + (p[k] + (m,),) + p[k + 1:])
        out.append(p + ((m,),))
    return tuple(out)


def moebius_coefficient(n_blocks: int) -> int:
    """(-1)^{k-1} (k-1)! for a partition with k blocks."""
    return (-1) ** (n_blocks - 1) * math.factorial(n_blocks - 1)


@lru_cache(maxsize=None)
def partition_shapes(m: int) -> tuple[tuple[tuple[int, ...], int], ...]:
    """Block-size multisets of {1..m} with the number of set partitions of each shape.

    Summing over shapes with these multiplicities equals the sum over all
    Bell(m) set partitions for any function of the block sizes.
    """
    _check_order(m)
    shapes = []

    def rec(rest, largest, acc):
        if rest == 0:
            shapes.append(tuple(acc))
            return
        for s in range(min(rest, largest), 0, -1):
            rec(rest - s, s, acc + [s])

    rec(m, m, [])
    out = []
    for shape in shapes:
        count = math.factorial(m)
        for s in shape:
            count //= math.factorial(s)
        for mult in Counter(shape).values():
            count //= math.factorial(mult)
        out.append((shape, count))
    return tuple(out)


def _moment_cumulant_recursion(values: np.ndarray, m_max: int, to_cumulants: bool) -> np.ndarray:
    """Partition sums for orders 1..m_max via kappa_n = a_n - sum_j C(n-1, j-1) kappa_j a_{n-j}.

    The recursion equals the sum over set partitions (grouping partitions by the
    block containing element 1) but avoids the cancellation of summing all
    Bell(m) signed terms, which costs several digits at m ~ 10.
    """
    a, k = [], []
    for n in range(1, m_max + 1):
        acc = values[..., n - 1].copy()
        for j in range(1, n):
            c = math.comb(n - 1, j - 1)
            if to_cumulants:
                acc -= c * k[j - 1] * a[n - j - 1]
            else:
                acc += c * values[..., j - 1] * a[n - j - 1]
        if to_cumulants:
            a.append(values[..., n - 1])
            k.append(acc)
        else:
            a.append(acc)
    return np.stack(k if to_cumulants else a, axis=-1)


def cumulants_from_moments(a) -> np.ndarray:
    """kappa_m = sum_pi (-1)^{#pi-1} (#pi-1)! prod_B a_{#B}, for m = 1..len(a).

    Works along the last axis, so stacked moment sequences are accepted.
    """
    a = np.asarray(a, dtype=float)
    _check_order(a.shape[-1])
    return _moment_cumulant_recursion(a, a.shape[-1], True)


def moments_from_cumulants(k) -> np.ndarray:
    """a_m = sum_pi prod_B kappa_{#B}."""
    k = np.asarray(k, dtype=float)
    _check_order(k.shape[-1])
    return _moment_cumulant_recursion(k, k.shape[-1], False)


def moebius_correlation(a, m: int) -> np.ndarray:
    """Tested correlation of order m from moments a_1..a_m (last axis)."""
    a = np.asarray(a, dtype=float)
    if a.shape[-1] < m:
        raise MissingMoments(f"order {m} needs moments a_1..a_{m}, got {a.shape[-1]}")
    _check_order(m)
    return _moment_cumulant_recursion(a[..., :m], m, True)[..., m - 1]


# -- U-statistics ---------------------------------------------------------------


def power_sums(values, kmax: int) -> np.ndarray:
    """p_k = sum_i v_i^k for k = 1..kmax, over the last axis of ``values``."""
    v = np.asarray(values, dtype=float)
    out = np.empty(v.shape[:-1] + (kmax,))
    acc = v.copy()
    for k in range(kmax):
        out[..., k] = acc.sum(axis=-1)
        acc *= v
    return out


def ustats_from_power_sums(p, n: int, m_max: int) -> np.ndarray:
    """U_1..U_{m_max} from power sums p_1..p_{m_max} of n values.

    Newton's identities give the elementary symmetric polynomials e_k, and
    U_k = e_k / binom(n, k) is the average over distinct k-subsets.
    """
    p = np.asarray(p, dtype=float)
    if m_max > n:
        raise ValueError(f"order {m_max} exceeds the number of particles {n}")
    if p.shape[-1] < m_max:
        raise ValueError("not enough power sums")
    e = [np.ones(p.shape[:-1])]
    for k in range(1, m_max + 1):
        acc = np.zeros(p.shape[:-1])
        for i in range(1, k + 1):
            acc = acc + (-1) ** (i - 1) * e[k - i] * p[..., i - 1]
        e.append(acc / k)
    return np.stack([e[k] / math.comb(n, k) for k in range(1, m_max + 1)], axis=-1)


def ustat_tested_moment(values: Sequence[float], m: int) -> float:
    """Average of prod_l v_{i_l} over ordered tuples of distinct indices."""
    v = np.asarray(values, dtype=float)
    if v.ndim != 1:
        raise ValueError("values must be one-dimensional")
    if m < 1:
        raise ValueError("m must be >= 1")
    if m > v.size:
        raise ValueError(f"m = {m} exceeds N = {v.size}")
    return float(ustats_from_power_sums(power_sums(v, m), v.size, m)[m - 1])


# -- per-replica statistics and moment tables --------------------------------


def replica_stat_columns(m_max: int, control: bool) -> list[str]:
    """Names of the per-replica statistics accumulated in a MomentTable."""
    cols = [f"U{j}" for j in range(1, m_max + 1)] + ["U1sq"]
    cols += [f"X{j}" for j in range(2, m_max + 1)]
    if control:
        cols += [f"V{j}" for j in range(1, m_max + 1)]
    return cols


def replica_stats(p, n: int, m_max: int, p_control=None) -> np.ndarray:
    """Per-replica statistic vectors from centered power sums.

    ``p`` has shape (..., k) with k >= max(m_max, 2).  ``p_control`` holds
    power sums of the coupled mean-field particles, if any.
    """
    p = np.asarray(p, dtype=float)
    m_top = min(m_max, n)
    u = ustats_from_power_sums(p, n, m_top)
    if m_top < m_max:
        u = np.concatenate([u, np.full(u.shape[:-1] + (m_max - m_top,), np.nan)], axis=-1)
    x = p[..., 0] / n
    cols = [u, (p[..., 1] / n)[..., None]]
    cols += [np.stack([x**j for j in range(2, m_max + 1)], axis=-1)] if m_max >= 2 else []
    if p_control is not None:
        uc = ustats_from_power_sums(np.asarray(p_control, dtype=float), n, m_top)
        if m_top < m_max:
            uc = np.concatenate([uc, np.full(uc.shape[:-1] + (m_max - m_top,), np.nan)], axis=-1)
        cols.append(uc)
    return np.concatenate(cols, axis=-1)


def block_sums(stats: np.ndarray, n_blocks: int) -> tuple[np.ndarray, np.ndarray]:
    """Sum per-replica statistics (leading axis) over contiguous replica groups."""
    m = stats.shape[0]
    edges = np.linspace(0, m, n_blocks + 1).round().astype(int)
    sums = np.add.reduceat(stats, edges[:-1], axis=0)
    return sums, np.diff(edges)


def default_n_blocks(n_replicas: int) -> int:
    return int(min(n_replicas, 1000))


def jackknife(block_sums: np.ndarray, counts: np.ndarray, fn: Callable[[np.ndarray], np.ndarray]):
    """Delete-a-group jackknife of a smooth function of replica means.

    Groups are contiguous and differ in size by at most one.  With one
    replica per group this is the leave-one-replica-out jackknife.
    Returns (estimate on all replicas, standard error).
    """
    counts = np.asarray(counts, dtype=float)
    g = len(counts)
    total = block_sums.sum(axis=0)
    n = counts.sum()
    est = fn(total / n)
    if g < 2:
        return est, np.full(np.shape(est), np.nan)
    shape = (g,) + (1,) * (block_sums.ndim - 1)
    loo = (total[None] - block_sums) / (n - counts).reshape(shape)
    reps = np.stack([fn(loo[i]) for i in range(g)])
    var = (g - 1) / g * np.sum((reps - reps.mean(axis=0)) ** 2, axis=0)
    return est, np.sqrt(var)


@dataclass
class CorrelationEstimate:
    m: int
    phi_id: str
    t: float
    value: float
    se: float
    route: str

    def __post_init__(self):
        if self.route not in ("moebius", "cumulant"):
            raise ValueError(f"unknown route {self.route!r}")

    def to_dict(self) -> dict:
        return {"m": self.m, "phi_id": self.phi_id, "t": self.t, "value": self.value, "se": self.se, "route": self.route}


@dataclass
class MomentTable:
    """Replica-block sums of per-replica statistics for every (t, phi).

    block_sums has shape (G, T, P, S) with S = len(columns).  Observables
    are centered by ``centers`` (T, P) before accumulation; ``control_means``
    (T, P, m_max) are the exact expectations of the control-variate columns
    V_j when coupled mean-field particles were simulated.
    """

    phi_ids: tuple[str, ...]
    times: tuple[float, ...]
    n_particles: int
    m_max: int
    block_sums: np.ndarray
    block_counts: np.ndarray
    centers: np.ndarray
    control_means: np.ndarray | None = None

    def __post_init__(self):
        self.block_sums = np.asarray(self.block_sums, dtype=float)
        self.block_counts = np.asarray(self.block_counts)
        cols = replica_stat_columns(self.m_max, self.control_means is not None)
        self.columns = {c: i for i, c in enumerate(cols)}
        expect = (len(self.times), len(self.phi_ids), len(cols))
        if self.block_sums.shape[1:] != expect:
            raise ValueError(f"block sums have shape {self.block_sums.shape[1:]}, expected {expect}")

    @classmethod
    def from_replica_stats(cls, stats, phi_ids, times, n_particles, m_max, centers,
                           control_means=None, n_blocks=None):
        stats = np.asarray(stats, dtype=float)
        g = default_n_blocks(stats.shape[0]) if n_blocks is None else n_blocks
        sums, counts = block_sums(stats, g)
        return cls(tuple(phi_ids), tuple(times), n_particles, m_max, sums, counts, np.asarray(centers, float),
                   control_means)

    @classmethod
    def merge(cls, tables: Sequence["MomentTable"]) -> "MomentTable":
        """Concatenate replica blocks from tables over disjoint replica ranges."""
        t0 = tables[0]
        return cls(t0.phi_ids, t0.times, t0.n_particles, t0.m_max,
                   np.concatenate([t.block_sums for t in tables]), np.concatenate([t.block_counts for t in tables]),
                   t0.centers, t0.control_means)

    @property
    def n_replicas(self) -> int:
        return int(self.block_counts.sum())

    @property
    def has_control(self) -> bool:
        return self.control_means is not None

    def _index(self, phi_id, t):
        try:
            return self.times.index(t), self.phi_ids.index(phi_id)
        except ValueError:
            raise MissingMoments(f"no moments for phi={phi_id!r}, t={t}") from None

    def _col(self, means, name):
        return means[..., self.columns[name]]

    def moments_fn(self, control: bool | None = None) -> Callable[[np.ndarray], np.ndarray]:
        """Map column means (..., S) to centered moments a_1..a_m (..., m)."""
        use_cv = self.has_control if control is None else control
        if use_cv and not self.has_control:
            raise ValueError("table has no control-variate columns")
        u = [self.columns[f"U{j}"] for j in range(1, self.m_max + 1)]
        if not use_cv:
            return lambda mean: mean[..., u]
        v = [self.columns[f"V{j}"] for j in range(1, self.m_max + 1)]
        cm = self.control_means
        return lambda mean: mean[..., u] - mean[..., v] + cm

    def moments(self, control: bool | None = None):
        """Centered moments a_j with jackknife SEs, shape (T, P, m_max)."""
        return jackknife(self.block_sums, self.block_counts, self.moments_fn(control))

    def uncentered_minus_product(self, m: int, mf_values: np.ndarray, control: bool | None = None):
        """Tested F^{N,m} - mu^{(x)m} pairing for every (t, phi).

        With psi = phi - c and mean-field value v = <phi, mu>, the pairing is
        sum_{j=0..m} binom(m, j) c^{m-j} a_j(psi) - v^m, a_0 = 1.
        """
        fn = self.moments_fn(control)
        c = self.centers
        vm = np.asarray(mf_values, dtype=float) ** m

        def pairing(mean):
            a = fn(mean)
            out = c**m - vm
            for j in range(1, m + 1):
                out = out + math.comb(m, j) * c ** (m - j) * a[..., j - 1]
            return out

        return jackknife(self.block_sums, self.block_counts, pairing)

    def correlations(self, m: int, route: str = "moebius", control: bool | None = None):
        """Tested G^{N,m} for every (t, phi) with jackknife SE."""
        if m > self.m_max:
            raise MissingMoments(f"table holds moments up to {self.m_max}, asked for {m}")
        if route == "moebius":
            fn = self.moments_fn(control)
            return jackknife(self.block_sums, self.block_counts, lambda mean: moebius_correlation(fn(mean), m))
        if route == "cumulant":
            if self.n_replicas < m + 1:
                raise InsufficientReplicas(f"cumulant of order {m} needs at least {m + 1} replicas")
            cols = [self.columns["U1"]] + [self.columns[f"X{j}"] for j in range(2, m + 1)]
            return jackknife(self.block_sums, self.block_counts,
                             lambda mean: cumulants_from_moments(mean[..., cols])[..., m - 1])
        raise ValueError(f"unknown route {route!r}")

    def correlation_moebius(self, m: int, phi_id: str, t: float, control: bool | None = None) -> CorrelationEstimate:
        ti, pi = self._index(phi_id, t)
        val, se = self.correlations(m, "moebius", control)
        return CorrelationEstimate(m, phi_id, t, float(val[ti, pi]), float(se[ti, pi]), "moebius")

    def correlation_cumulant(self, m: int, phi_id: str, t: float) -> CorrelationEstimate:
        ti, pi = self._index(phi_id, t)
        val, se = self.correlations(m, "cumulant")
        return CorrelationEstimate(m, phi_id, t, float(val[ti, pi]), float(se[ti, pi]), "cumulant")

    def route_identity_residual(self) -> np.ndarray:
        """Cumulant route minus (Moebius route + N^{-1} correction), at m = 2.

        Zero up to rounding on any data: E[X^2] - E[X]^2 = G2 + (a1(phi^2) - a2) / N
        with plug-in replica means and uncontrolled moments.
        """
        mean = self.block_sums.sum(axis=0) / self.n_replicas
        c = self.columns
        u1, u2, u1sq, x2 = (mean[..., c[k]] for k in ("U1", "U2", "U1sq", "X2"))
        cum = x2 - u1**2
        return cum - ((u2 - u1**2) + (u1sq - u2) / self.n_particles)

    def to_records(self, run_id: str = "") -> list[dict]:
        a, se = self.moments()
        recs = []
        for ti, t in enumerate(self.times):
            for pi, pid in enumerate(self.phi_ids):
                recs.append({"record": "moment_table", "run_id": run_id, "phi_id": pid, "t": t,
                             "N": self.n_particles, "M": self.n_replicas,
                             "center": float(self.centers[ti, pi]),
                             "a": a[ti, pi].tolist(), "se": se[ti, pi].tolist()})
        return recs


def correlation_cumulant(x, m: int, phi_id: str = "", t: float = float("nan"), n_blocks: int | None = None) -> CorrelationEstimate:
    """Plug-in sample cumulant of order m of replica scalars X_r, with jackknife SE."""
    x = np.asarray(x, dtype=float).ravel()
    _check_order(m)
    if x.size < m + 1:
        raise InsufficientReplicas(f"cumulant of order {m} needs at least {m + 1} replicas, got {x.size}")
    powers = np.stack([x**j for j in range(1, m + 1)], axis=-1)
    g = default_n_blocks(x.size) if n_blocks is None else n_blocks
    sums, counts = block_sums(powers, g)
    val, se = jackknife(sums, counts, lambda mean: cumulants_from_moments(mean)[..., m - 1])
    return CorrelationEstimate(m, phi_id, t, float(val), float(se), "cumulant")


def correlation_moebius(table: MomentTable, m: int, phi_id: str, t: float, control: bool | None = None) -> CorrelationEstimate:
    return table.correlation_moebius(m, phi_id, t, control)


# -- moment (concentration) estimates -----------------------------------------


def empirical_Qr(ensemble_or_points, r: float) -> float:
    """Particle average of <z>^r = (1 + |z|^2)^{r/2}."""
    z = getattr(ensemble_or_points, "phase", ensemble_or_points)
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    return float(np.mean((1.0 + np.sum(z * z, axis=-1)) ** (0.5 * r)))


def qr_per_replica(phase: np.ndarray, r: float) -> np.ndarray:
    """Q_r of each replica for phase arrays of shape (B, N, dim)."""
    return np.mean((1.0 + np.sum(phase * phase, axis=-1)) ** (0.5 * r), axis=-1)


@dataclass
class ConcentrationRow:
    m: int
    value: float
    se: float


def concentration_scan(q_values, L: float, m_list: Sequence[int], n_blocks: int | None = None) -> list[ConcentrationRow]:
    """E[(Q - L)_+^m] over replicas for each m, with standard errors.

    ``q_values`` are per-replica values of Q_{2p}(mu^N_t), e.g. from
    :func:`qr_per_replica`.
    """
    if L <= 0:
        raise ValueError("L must be > 0")
    q = np.asarray(q_values, dtype=float).ravel()
    exc = np.maximum(q - L, 0.0)
    rows = []
    for m in m_list:
        vals = exc**m
        se = float(vals.std(ddof=1) / math.sqrt(q.size)) if q.size > 1 else float("nan")
        rows.append(ConcentrationRow(int(m), float(vals.mean()), se))
    return rows
