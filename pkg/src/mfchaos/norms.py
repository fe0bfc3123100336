"""Windowed Fourier test functions and dual-norm proxies.

A test function is

    phi(z) = c^{-1} <z>^p exp(-|z|^2 / (2 sigma^2)) cos(xi . z + theta),

with c chosen so that the weighted function <z>^{-p} phi has unit
W^{r,q'} norm.  Pairings of a signed measure against a finite dictionary of
such functions give a lower bound of its weighted negative Sobolev norm.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numba
import numpy as np


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class TestFunction:
    id: str
    xi: tuple[float, ...]
    theta: float
    sigma: float
    p: float
    c: float = 1.0
    amplitude: float = 1.0

    __test__ = False  # not a pytest class

    @property
    def dim(self) -> int:
        return len(self.xi)

    def raw(self, z) -> np.ndarray:
        """<z>^p window(z) cos(xi . z + theta), without amplitude or normalization."""
        z = np.asarray(z, dtype=float)
        if z.ndim == 1 and self.dim == 1:
            z = z[:, None]
        r2 = np.sum(z * z, axis=-1)
        return (1.0 + r2) ** (0.5 * self.p) * np.exp(-0.5 * r2 / self.sigma**2) * np.cos(z @ np.asarray(self.xi) + self.theta)

    def __call__(self, z) -> np.ndarray:
        return (self.amplitude / self.c) * self.raw(z)


def _derivative_polys(xi: float, sigma: float, order: int) -> list[np.ndarray]:
    """P_n with d^n/dx^n exp(-x^2/(2 s^2) + i xi x) = P_n(x) exp(...), n = 0..order.

    Coefficients in increasing degree.
    """
    polys = [np.array([1.0 + 0j])]
    lin = np.array([1j * xi, -1.0 / sigma**2])  # i xi - x / s^2
    for _ in range(order):
        p = polys[-1]
        dp = p[1:] * np.arange(1, len(p)) if len(p) > 1 else np.array([0j])
        prod = np.convolve(p, lin)
        prod[: len(dp)] += dp
        polys.append(prod)
    return polys


def _multi_indices(dim: int, r: int):
    for alpha in itertools.product(range(r + 1), repeat=dim):
        if sum(alpha) <= r:
            yield alpha


def _sobolev_norm_on_grid(xi, theta, sigma, r, qp, h, extent) -> float:
    dim = len(xi)
    n = int(math.ceil(extent / h))
    grid = np.arange(-n, n + 1) * h
    axes_vals = []
    for k in range(dim):
        polys = _derivative_polys(xi[k], sigma, r)
        base = np.exp(-0.5 * grid**2 / sigma**2 + 1j * xi[k] * grid)
        axes_vals.append([np.polynomial.polynomial.polyval(grid, P) * base for P in polys])
    total = 0.0
    phase = np.exp(1j * theta)
    for alpha in _multi_indices(dim, r):
        vals = phase * axes_vals[0][alpha[0]]
        for k in range(1, dim):
            vals = np.multiply.outer(vals, axes_vals[k][alpha[k]])
        total += np.sum(np.abs(vals.real) ** qp) * h**dim
    return total ** (1.0 / qp)


def sobolev_norm(xi, theta, sigma, r, qp, rel_tol=1e-4, max_refine=6) -> float:
    """||exp(-|z|^2/(2 sigma^2)) cos(xi . z + theta)||_{W^{r,q'}}, by trapezoid quadrature.

    Refines the grid until two successive values agree to ``rel_tol``.
    """
    xi = tuple(float(v) for v in np.atleast_1d(xi))
    if not (isinstance(r, (int, np.integer)) and 0 <= r <= 4):
        raise ValueError(f"r must be an integer in 0..4, got {r!r}")
    if not qp >= 2:
        raise ValueError(f"q' must be >= 2 (1 < q <= 2), got {qp}")
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    kmax = max(abs(v) for v in xi)
    extent = sigma * (math.sqrt(80.0 / qp) + 2.0 + 0.5 * r)
    # |.|^q' of a windowed mode is band-limited to about q' |xi| plus the
    # window's bandwidth; trapezoid sums are spectrally accurate below that
    h = 2.0 * math.pi / (qp * kmax + 8.0 * math.sqrt(qp) / sigma + 2.0 * r)
    prev = _sobolev_norm_on_grid(xi, theta, sigma, r, qp, h, extent)
    for _ in range(max_refine):
        h /= 2.0
        cur = _sobolev_norm_on_grid(xi, theta, sigma, r, qp, h, extent)
        if abs(cur - prev) <= rel_tol * abs(cur):
            return cur
        prev = cur
    raise QuadratureError(f"W^{{{r},{qp}}} quadrature did not converge for xi={xi}, sigma={sigma}")


def normalize_testfn(xi, theta: float, sigma: float, r: int = 3, qp: float = 12.0, p: float = 1 / 6,
                     amplitude: float = 1.0, rel_tol: float = 1e-4, id: str | None = None) -> TestFunction:
    """Put the raw mode ``amplitude * <z>^p window cos(xi . z + theta)`` on the unit sphere.

    The weight <z>^p cancels against <z>^{-p} in the norm, so c is the
    W^{r,q'} norm of the windowed cosine times |amplitude|.
    """
    xi = tuple(float(v) for v in np.atleast_1d(xi))
    if amplitude == 0 or (not any(xi) and abs(math.cos(theta)) < 1e-12):
        raise ValueError("raw test function vanishes identically")
    c = abs(amplitude) * sobolev_norm(xi, theta, sigma, r, qp, rel_tol=rel_tol)
    if c == 0.0:
        raise ValueError("raw test function vanishes identically")
    if id is None:
        id = f"xi={','.join(f'{v:g}' for v in xi)};th={theta:.4g};s={sigma:g}"
    return TestFunction(id, xi, float(theta), float(sigma), float(p), c, float(amplitude))


@dataclass(frozen=True)
class Dictionary:
    functions: tuple[TestFunction, ...]
    r: int
    qp: float
    p: float
    freq_axis: tuple[float, ...]
    sigmas: tuple[float, ...]
    dim: int

    def __post_init__(self):
        if not self.functions:
            raise ValueError("dictionary must be nonempty")
        ids = [f.id for f in self.functions]
        if len(set(ids)) != len(ids):
            raise ValueError("dictionary ids must be unique")

    def __len__(self) -> int:
        return len(self.functions)

    @property
    def ids(self) -> list[str]:
        return [f.id for f in self.functions]

    def evaluate(self, z) -> np.ndarray:
        """All functions at points z (..., dim) -> (..., n_functions)."""
        z = np.asarray(z, dtype=float)
        return np.stack([f(z) for f in self.functions], axis=-1)

    def subset(self, ids: Sequence[str]) -> "Dictionary":
        keep = set(ids)
        return Dictionary(tuple(f for f in self.functions if f.id in keep), self.r, self.qp, self.p,
                          self.freq_axis, self.sigmas, self.dim)

    def to_dict(self) -> dict:
        return {
            "r": self.r, "q_prime": self.qp, "p": self.p, "dim": self.dim,
            "freq_axis": list(self.freq_axis), "sigmas": list(self.sigmas),
            "functions": [asdict(f) for f in self.functions],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Dictionary":
        funcs = tuple(TestFunction(f["id"], tuple(f["xi"]), f["theta"], f["sigma"], f["p"], f["c"],
                                   f.get("amplitude", 1.0))
                      for f in data["functions"])
        return cls(funcs, data["r"], data["q_prime"], data["p"], tuple(data["freq_axis"]),
                   tuple(data["sigmas"]), data["dim"])

    # -- kernel tables ------------------------------------------------------

    def tables(self):
        """Arrays describing the dictionary for :func:`evaluate_power_sums`."""
        axis = np.asarray(self.freq_axis, dtype=float)
        sig = np.asarray(self.sigmas, dtype=float)
        fidx = np.empty((len(self), self.dim), dtype=np.int64)
        sidx = np.empty(len(self), dtype=np.int64)
        phase = np.empty(len(self))
        inv_c = np.empty(len(self))
        for k, f in enumerate(self.functions):
            for a in range(self.dim):
                fidx[k, a] = int(np.argmin(np.abs(axis - f.xi[a])))
                if axis[fidx[k, a]] != f.xi[a]:
                    raise ValueError(f"{f.id}: frequency {f.xi[a]} not on the dictionary axis")
            sidx[k] = int(np.argmin(np.abs(sig - f.sigma)))
            phase[k] = f.theta
            inv_c[k] = f.amplitude / f.c
        return axis, sig, fidx, sidx, np.cos(phase) * inv_c, -np.sin(phase) * inv_c


def build_dictionary(dim: int, r: int = 3, qp: float = 12.0, p: float = 1 / 6,
                     freq_axis: Sequence[float] = tuple(range(-4, 5)),
                     sigmas: Sequence[float] = (1.0, 2.0, 4.0)) -> Dictionary:
    """Windowed Fourier dictionary on a frequency grid.

    Functions that coincide up to sign (xi, theta) ~ (-xi, theta) and the
    identically-zero (0, pi/2) are dropped, since |pairings| are unchanged.
    """
    freq_axis = tuple(float(v) for v in freq_axis)
    funcs = []
    for sigma in sigmas:
        for xi in itertools.product(freq_axis, repeat=dim):
            nz = [v for v in xi if v != 0.0]
            if nz and nz[0] < 0 and tuple(-v for v in xi) in set(itertools.product(freq_axis, repeat=dim)):
                continue
            for theta in (0.0, math.pi / 2):
                if not nz and theta != 0.0:
                    continue
                funcs.append(normalize_testfn(xi, theta, sigma, r, qp, p))
    return Dictionary(tuple(funcs), r, float(qp), float(p), freq_axis, tuple(float(s) for s in sigmas), dim)


_DICT_CACHE: dict = {}


def default_dictionary(dim: int, r: int = 3, qp: float = 12.0, p: float = 1 / 6) -> Dictionary:
    key = (dim, r, qp, p)
    if key not in _DICT_CACHE:
        _DICT_CACHE[key] = build_dictionary(dim, r, qp, p)
    return _DICT_CACHE[key]


@numba.njit(cache=True, nogil=True)
def evaluate_power_sums(z, axis, sig, fidx, sidx, wre, wim, p, center, kmax, out):
    """Power sums over particles of centered dictionary values.

    z: (B, N, dim); center: (n_phi,); out: (B, n_phi, kmax) receives
    sum_i (phi(z_i) - center)^k for k = 1..kmax.  ``wre``, ``wim`` carry
    the phase and normalization so phi = win * (wre Re e + wim Im e).
    """
    nb, n, dim = z.shape
    nf = axis.shape[0]
    ns = sig.shape[0]
    nphi = fidx.shape[0]
    ec = np.empty((dim, nf))
    es = np.empty((dim, nf))
    win = np.empty(ns)
    out[:, :, :] = 0.0
    for b in range(nb):
        for i in range(n):
            r2 = 0.0
            for a in range(dim):
                r2 += z[b, i, a] * z[b, i, a]
                for f in range(nf):
                    u = axis[f] * z[b, i, a]
                    ec[a, f] = math.cos(u)
                    es[a, f] = math.sin(u)
            weight = (1.0 + r2) ** (0.5 * p)
            for s in range(ns):
                win[s] = weight * math.exp(-0.5 * r2 / (sig[s] * sig[s]))
            for k in range(nphi):
                # real and imaginary parts of exp(i xi . z)
                re = ec[0, fidx[k, 0]]
                im = es[0, fidx[k, 0]]
                for a in range(1, dim):
                    c2 = ec[a, fidx[k, a]]
                    s2 = es[a, fidx[k, a]]
                    re, im = re * c2 - im * s2, re * s2 + im * c2
                val = win[sidx[k]] * (re * wre[k] + im * wim[k]) - center[k]
                acc = val
                for m in range(kmax):
                    out[b, k, m] += acc
                    acc *= val


def dual_norm_proxy(pairings: Mapping[str, float], dictionary: Dictionary) -> tuple[float, str]:
    """max over the dictionary of |pairing|, with the argmax id.

    A lower bound of the dual norm, since the dictionary is a finite subset of
    the unit ball.
    """
    if len(dictionary) == 0:
        raise ValueError("empty dictionary")
    missing = [i for i in dictionary.ids if i not in pairings]
    if missing:
        raise KeyError(f"pairings missing for {missing[:3]}")
    best_id = max(dictionary.ids, key=lambda i: abs(pairings[i]))
    return abs(float(pairings[best_id])), best_id


def proxy_array(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized proxy: max |values| over the last axis, and its argmax."""
    a = np.abs(values)
    return a.max(axis=-1), a.argmax(axis=-1)
