"""Noise schedules, forward noising, closed-form denoisers and ancestral sampling.

States are point clouds: ``coords`` (n, 3) and ``feats`` (n, d).  Coordinate
noise always lives in the zero centre-of-mass subspace, so centred inputs stay
centred through every operation here.

Batched routines take arrays with a leading batch axis, ``(B, n, 3)`` and
``(B, n, d)``.  Reductions are written as explicit broadcasts and sums (no
BLAS) so that a row's result does not depend on the batch it was computed in.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numba
import numpy as np
from scipy.special import logsumexp

from .errors import PreconditionError, RangeError, ScheduleError, ShapeError

CHUNK = 64


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise rates with the derived ``alpha`` and ``alpha_bar``.

    Arrays are 0-based: ``beta[t - 1]`` is the rate of step ``t``.  Use
    :meth:`abar` for 1-based access where ``abar(0) == 1``.
    """

    kind: str
    T: int
    beta: np.ndarray
    params: dict = field(default_factory=dict)
    alpha: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        if beta.shape != (self.T,):
            raise ScheduleError(f"beta has shape {beta.shape}, expected ({self.T},)")
        if not np.all((beta > 0) & (beta < 1)):
            raise ScheduleError("every beta_t must lie in (0, 1)")
        beta.setflags(write=False)
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        alpha.setflags(write=False)
        alpha_bar.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    def abar(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T, **self.params}

    @classmethod
    def from_dict(cls, data: dict) -> NoiseSchedule:
        data = dict(data)
        return build_schedule(data.pop("kind"), data.pop("T"), **data)


def build_schedule(kind: str = "linear", T: int = 1000, **params) -> NoiseSchedule:
    """Construct a schedule.

    Args:
        kind: ``constant`` (``beta``), ``linear`` (``beta_start``, ``beta_end``)
            or ``cosine`` (``s``, ``max_beta``).
        T: number of diffusion steps, at least 1.
        **params: rate bounds for the chosen kind; all rates must be in (0, 1).
    """
    if not isinstance(T, (int, np.integer)) or isinstance(T, bool) or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    T = int(T)

    def _rate(name, default):
        value = float(params.get(name, default))
        if not 0.0 < value < 1.0:
            raise ScheduleError(f"{name}={value} outside (0, 1)")
        return value

    if kind == "constant":
        allowed = {"beta"}
        b = _rate("beta", 0.01)
        beta = np.full(T, b)
        used = {"beta": b}
    elif kind == "linear":
        allowed = {"beta_start", "beta_end"}
        b0, b1 = _rate("beta_start", 1e-4), _rate("beta_end", 0.02)
        beta = np.linspace(b0, b1, T) if T > 1 else np.array([b0])
        used = {"beta_start": b0, "beta_end": b1}
    elif kind == "cosine":
        allowed = {"s", "max_beta"}
        s = float(params.get("s", 0.008))
        if s <= 0:
            raise ScheduleError(f"s={s} must be positive")
        max_beta = _rate("max_beta", 0.999)
        steps = np.arange(T + 1) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        abar = f / f[0]
        beta = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, max_beta)
        used = {"s": s, "max_beta": max_beta}
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    extra = set(params) - allowed
    if extra:
        raise ScheduleError(f"unexpected parameters for {kind} schedule: {sorted(extra)}")
    return NoiseSchedule(kind, T, beta, used)


# ---------------------------------------------------------------------------
# states


@dataclass
class State:
    coords: np.ndarray
    feats: np.ndarray
    t: int = 0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        self.feats = np.asarray(self.feats, dtype=float)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ShapeError(f"coords must be (n, 3), got {self.coords.shape}")
        if self.feats.ndim != 2 or self.feats.shape[0] != self.coords.shape[0]:
            raise ShapeError(f"feats must be (n, d) with n={self.coords.shape[0]}, got {self.feats.shape}")

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def d(self) -> int:
        return self.feats.shape[1]

    def copy(self) -> State:
        return State(self.coords.copy(), self.feats.copy(), self.t)

    def centered(self) -> State:
        return State(center(self.coords), self.feats.copy(), self.t)

    def to_dict(self) -> dict:
        return {"coords": self.coords.tolist(), "feats": self.feats.tolist(), "t": self.t}

    @classmethod
    def from_dict(cls, data: dict) -> State:
        return cls(np.array(data["coords"], dtype=float).reshape(-1, 3), np.array(data["feats"], dtype=float), int(data.get("t", 0)))


def center(coords: np.ndarray) -> np.ndarray:
    """Remove the per-axis mean over atoms (works on any leading batch shape)."""
    return coords - coords.mean(axis=-2, keepdims=True)


def dataset_to_json(dataset: Sequence[State]) -> list[dict]:
    return [{"coords": s.coords.tolist(), "feats": s.feats.tolist()} for s in dataset]


def dataset_from_json(records: list[dict]) -> list[State]:
    return [State(np.array(r["coords"], dtype=float).reshape(-1, 3), np.array(r["feats"], dtype=float)) for r in records]


# ---------------------------------------------------------------------------
# forward process


def forward_noise(
    state0: State,
    t_add: int,
    schedule: NoiseSchedule,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> State:
    """Sample ``q(M_t | M_0)`` in closed form.

    ``noise`` (shape (n, 3 + d)) replaces the random draw when given; its
    coordinate block is projected to zero mean like a fresh draw would be.
    """
    if state0.t != 0:
        raise PreconditionError(f"forward_noise expects a clean state, got t={state0.t}")
    if not 0 <= t_add <= schedule.T:
        raise RangeError(f"t_add={t_add} outside [0, {schedule.T}]")
    if t_add == 0:
        return state0.copy()
    n, d = state0.n, state0.d
    if noise is None:
        if rng is None:
            raise PreconditionError("forward_noise needs an rng or explicit noise")
        noise = rng.standard_normal((n, 3 + d))
    noise = np.asarray(noise, dtype=float)
    if noise.shape != (n, 3 + d):
        raise ShapeError(f"noise must be ({n}, {3 + d}), got {noise.shape}")
    ab = schedule.abar(t_add)
    a, s = math.sqrt(ab), math.sqrt(1.0 - ab)
    coords = a * state0.coords + s * center(noise[:, :3])
    feats = a * state0.feats + s * noise[:, 3:]
    return State(coords, feats, t_add)


# ---------------------------------------------------------------------------
# denoisers


class Denoiser(Protocol):
    supports_partial: bool

    def posterior_mean_batch(
        self, coords: np.ndarray, feats: np.ndarray, t: int, schedule: NoiseSchedule
    ) -> tuple[np.ndarray, np.ndarray]: ...


def posterior_mean(denoiser: Denoiser, state: State, schedule: NoiseSchedule) -> State:
    """Clean-state estimate ``E[M_0 | M_t]`` for a single state."""
    c, h = denoiser.posterior_mean_batch(state.coords[None], state.feats[None], state.t, schedule)
    return State(c[0], h[0], 0)


def _check_t(t: int, schedule: NoiseSchedule):
    if t < 1:
        raise PreconditionError("posterior mean requires t >= 1")
    if t > schedule.T:
        raise RangeError(f"t={t} exceeds T={schedule.T}")


def _group_by_size(coords_list, other_list):
    groups: dict[int, list[int]] = {}
    for j, c in enumerate(coords_list):
        groups.setdefault(c.shape[0], []).append(j)
    return {
        n: (np.stack([coords_list[j] for j in idx]), np.stack([other_list[j] for j in idx]))
        for n, idx in groups.items()
    }


class EmpiricalDenoiser:
    """Bayes-optimal denoiser for the empirical distribution of a dataset.

    Every coordinate and feature entry is treated as a continuous channel, so
    this is a pure kernel-weighted average of the dataset entries that share
    the query's atom count.
    """

    supports_partial = True

    def __init__(self, dataset: Sequence[State]):
        if not dataset:
            raise PreconditionError("dataset must be non-empty")
        d = {s.d for s in dataset}
        if len(d) != 1:
            raise ShapeError(f"dataset entries disagree on feature width: {sorted(d)}")
        self.d = d.pop()
        self.dataset = list(dataset)
        self._groups = {
            n: np.concatenate([c.reshape(len(c), -1), h.reshape(len(h), -1)], axis=1)
            for n, (c, h) in _group_by_size([s.coords for s in dataset], [s.feats for s in dataset]).items()
        }

    def _flat(self, n: int) -> np.ndarray:
        try:
            return self._groups[n]
        except KeyError:
            raise ShapeError(f"no dataset entry with {n} atoms") from None

    def log_weights(self, coords, feats, t, schedule) -> np.ndarray:
        _check_t(t, schedule)
        B, n, _ = coords.shape
        if feats.shape[-1] != self.d:
            raise ShapeError(f"feature width {feats.shape[-1]} != dataset width {self.d}")
        data = self._flat(n)
        z = np.concatenate([coords.reshape(B, -1), feats.reshape(B, -1)], axis=1)
        ab = schedule.abar(t)
        diff = z[:, None, :] - math.sqrt(ab) * data[None, :, :]
        return -np.sum(diff * diff, axis=2) / (2.0 * (1.0 - ab))

    def weights(self, coords, feats, t, schedule) -> np.ndarray:
        logw = self.log_weights(coords, feats, t, schedule)
        return np.exp(logw - logsumexp(logw, axis=1, keepdims=True))

    def posterior_mean_batch(self, coords, feats, t, schedule):
        coords = np.asarray(coords, dtype=float)
        feats = np.asarray(feats, dtype=float)
        B, n, _ = coords.shape
        w = self.weights(coords, feats, t, schedule)
        data = self._flat(n)
        mean = np.sum(w[:, :, None] * data[None, :, :], axis=1)
        return mean[:, : 3 * n].reshape(B, n, 3), mean[:, 3 * n :].reshape(B, n, self.d)


def empirical_posterior_mean(state_t: State, schedule: NoiseSchedule, dataset: Sequence[State]) -> State:
    """``sum_j w_j M_j`` with ``w_j ∝ exp(-|M_t - sqrt(abar) M_j|^2 / (2 (1 - abar)))``."""
    if not dataset:
        raise PreconditionError("dataset must be non-empty")
    for s in dataset:
        if s.coords.shape != state_t.coords.shape or s.feats.shape != state_t.feats.shape:
            raise ShapeError(f"dataset entry shape {s.coords.shape}/{s.feats.shape} != query {state_t.coords.shape}/{state_t.feats.shape}")
    if state_t.t < 1:
        raise PreconditionError("empirical_posterior_mean requires t >= 1")
    return posterior_mean(EmpiricalDenoiser(dataset), state_t, schedule)


class SmoothedDatasetDenoiser:
    """Exact posterior mean for a kernel-smoothed dataset distribution.

    Clean data are drawn by picking an entry ``j`` uniformly, jittering its
    coordinates with isotropic Gaussian noise of scale ``coord_bandwidth``
    (zero-CoM projected) and drawing each atom's type independently from
    ``type_prior[j, i]``.  With ``coord_bandwidth == 0`` and one-hot priors
    this is exactly :class:`EmpiricalDenoiser` over one-hot features.

    Args:
        coords: sequence of (n_j, 3) centred entry coordinates.
        type_prior: matching sequence of (n_j, d) per-atom type probabilities.
        coord_bandwidth: jitter scale in length units, >= 0.
    """

    supports_partial = True

    def __init__(self, coords: Sequence[np.ndarray], type_prior: Sequence[np.ndarray], coord_bandwidth: float = 0.0):
        if not coords:
            raise PreconditionError("dataset must be non-empty")
        if len(coords) != len(type_prior):
            raise ShapeError("coords and type_prior lengths differ")
        if coord_bandwidth < 0:
            raise PreconditionError("coord_bandwidth must be >= 0")
        widths = {p.shape[1] for p in type_prior}
        if len(widths) != 1:
            raise ShapeError(f"type priors disagree on width: {sorted(widths)}")
        self.d = widths.pop()
        self.bandwidth = float(coord_bandwidth)
        coords = [center(np.asarray(c, dtype=float)) for c in coords]
        priors = []
        for c, p in zip(coords, type_prior):
            p = np.asarray(p, dtype=float)
            if p.shape[0] != c.shape[0]:
                raise ShapeError("type_prior rows must match atom count")
            if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0):
                raise PreconditionError("type_prior rows must be probability vectors")
            priors.append(p)
        self._groups = {}
        for n, (c, p) in _group_by_size(coords, priors).items():
            with np.errstate(divide="ignore"):
                logp = np.log(p)
            self._groups[n] = (c.reshape(len(c), -1), logp, p)

    def _group(self, n):
        try:
            return self._groups[n]
        except KeyError:
            raise ShapeError(f"no dataset entry with {n} atoms") from None

    def posterior_mean_batch(self, coords, feats, t, schedule):
        _check_t(t, schedule)
        coords = np.ascontiguousarray(coords, dtype=float)
        feats = np.ascontiguousarray(feats, dtype=float)
        B, n, _ = coords.shape
        if feats.shape[-1] != self.d:
            raise ShapeError(f"feature width {feats.shape[-1]} != prior width {self.d}")
        mu, logp, prior = self._group(n)
        ab = schedule.abar(t)
        var_x = ab * self.bandwidth**2 + (1.0 - ab)
        c_hat, h_hat = _smoothed_kernel(
            coords.reshape(B, -1), feats, mu, prior, logp, math.sqrt(ab), 1.0 - ab, var_x, self.bandwidth**2
        )
        return c_hat.reshape(B, n, 3), h_hat

    def reverse_batch(self, coords, feats, t_start, schedule, noise, stochastic):
        """Fused ancestral trajectory for a batch at ``t_start`` (see :func:`denoise_batch`)."""
        coords = np.ascontiguousarray(coords, dtype=float)
        feats = np.ascontiguousarray(feats, dtype=float)
        B, n, _ = coords.shape
        if feats.shape[-1] != self.d:
            raise ShapeError(f"feature width {feats.shape[-1]} != prior width {self.d}")
        mu, logp, prior = self._group(n)
        abar = np.concatenate([[1.0], schedule.alpha_bar])
        if noise is None:
            noise = np.zeros((1, B, n, 3 + self.d))
        x, h = _smoothed_reverse(coords.reshape(B, -1), feats, np.ascontiguousarray(noise), int(t_start), abar,
                                 np.asarray(schedule.beta, dtype=float), mu, prior, logp, self.bandwidth**2,
                                 bool(stochastic and t_start > 1))
        return x.reshape(B, n, 3), h

    def posterior_mean_reference(self, coords, feats, t, schedule):
        """Vectorised numpy evaluation of the same posterior mean (slower; used to check the kernel)."""
        _check_t(t, schedule)
        coords = np.asarray(coords, dtype=float)
        feats = np.asarray(feats, dtype=float)
        B, n, _ = coords.shape
        mu, logp, prior = self._group(n)
        ab = schedule.abar(t)
        sa, noise_var = math.sqrt(ab), 1.0 - ab
        s2 = self.bandwidth**2
        var_x = ab * s2 + noise_var

        x = coords.reshape(B, -1)
        diff = x[:, None, :] - sa * mu[None, :, :]
        log_coord = -np.sum(diff * diff, axis=2) / (2.0 * var_x)  # (B, K)

        # per-atom type evidence sum_k pi_jik exp(a h_bik); terms constant in (j, k) dropped
        scaled = (sa / noise_var) * feats  # (B, n, d)
        top = scaled.max(axis=2, keepdims=True)
        ev = np.exp(scaled - top)
        atom_sum = ev[:, None, :, 0] * prior[None, :, :, 0]
        for k in range(1, self.d):
            atom_sum += ev[:, None, :, k] * prior[None, :, :, k]  # (B, K, n)
        with np.errstate(divide="ignore"):
            atom_log = np.log(atom_sum)
        bad = ~np.all(atom_sum > 1e-280, axis=(1, 2))
        if np.any(bad):
            # underflow: redo those rows with a max-shift per component
            logits = logp[None] + scaled[bad][:, None]
            atom_log[bad] = _lse(logits, axis=3) - top[bad][:, None, :, 0]
        logw = log_coord + np.sum(atom_log, axis=2)
        w = np.exp(logw - _lse(logw, axis=1)[:, None])

        shrink = s2 * sa / var_x
        mix = np.sum(w[:, :, None] * mu[None, :, :], axis=1)
        coords_hat = ((1.0 - shrink * sa) * mix + shrink * x).reshape(B, n, 3)
        with np.errstate(over="ignore", invalid="ignore"):
            scale = w[:, :, None] / np.where(atom_sum > 0, atom_sum, 1.0)  # (B, K, n)
            feats_hat = np.stack([np.sum(scale * prior[None, :, :, k], axis=1) for k in range(self.d)], axis=2)
            feats_hat *= ev
        if np.any(bad) or not np.all(np.isfinite(feats_hat)):
            logits = logp[None] + scaled[:, None]
            resp = np.exp(logits - _lse(logits, axis=3)[..., None])
            feats_hat = np.sum(w[:, :, None, None] * resp, axis=1)
        return coords_hat, feats_hat

    def sample(self, n: int, rng: np.random.Generator) -> State:
        """Exact draw from the smoothed data distribution (entries with ``n`` atoms)."""
        mu, _, p = self._group(n)
        j = rng.integers(len(mu))
        coords = mu[j].reshape(n, 3) + self.bandwidth * center(rng.standard_normal((n, 3)))
        types = np.array([rng.choice(self.d, p=row) for row in p[j]])
        return State(coords, np.eye(self.d)[types], 0)


@numba.njit(cache=True, nogil=True)
def _posterior_row(xb, hb, mu, prior, logp, sa, noise_var, var_x, s2, c_out, h_out,
                   scaled, top, ev, atom_sum, atom_log, logw):  # pragma: no cover - compiled
    """Posterior mean for one flattened row; writes into ``c_out`` (D,) and ``h_out`` (n, d)."""
    D = xb.shape[0]
    K = mu.shape[0]
    n, d = prior.shape[1], prior.shape[2]
    gain = sa / noise_var
    shrink = s2 * sa / var_x
    for i in range(n):
        m = -np.inf
        for k in range(d):
            v = gain * hb[i, k]
            scaled[i, k] = v
            if v > m:
                m = v
        top[i] = m
        for k in range(d):
            ev[i, k] = math.exp(scaled[i, k] - m)
    best = -np.inf
    for j in range(K):
        acc = 0.0
        for q in range(D):
            dd = xb[q] - sa * mu[j, q]
            acc += dd * dd
        lw = -acc / (2.0 * var_x)
        prod = 1.0
        for i in range(n):
            sm = 0.0
            for k in range(d):
                sm += ev[i, k] * prior[j, i, k]
            atom_sum[j, i] = sm
            if sm > 1e-280:
                prod *= sm
                if prod < 1e-150:
                    lw += math.log(prod)
                    prod = 1.0
            else:
                # underflow: exact log-sum-exp for this atom
                mm = -np.inf
                for k in range(d):
                    v = logp[j, i, k] + scaled[i, k]
                    if v > mm:
                        mm = v
                if mm == -np.inf:
                    atom_log[j, i] = -np.inf
                else:
                    acc2 = 0.0
                    for k in range(d):
                        acc2 += math.exp(logp[j, i, k] + scaled[i, k] - mm)
                    atom_log[j, i] = math.log(acc2) + mm - top[i]
                lw += atom_log[j, i]
        lw += math.log(prod)
        logw[j] = lw
        if lw > best:
            best = lw
    total = 0.0
    for j in range(K):
        logw[j] = math.exp(logw[j] - best)
        total += logw[j]
    for j in range(K):
        logw[j] /= total
    for q in range(D):
        acc = 0.0
        for j in range(K):
            acc += logw[j] * mu[j, q]
        c_out[q] = (1.0 - shrink * sa) * acc + shrink * xb[q]
    for i in range(n):
        for k in range(d):
            h_out[i, k] = 0.0
    for j in range(K):
        w = logw[j]
        if w == 0.0:
            continue
        for i in range(n):
            sm = atom_sum[j, i]
            if sm > 1e-280:
                r = w / sm
                for k in range(d):
                    h_out[i, k] += r * prior[j, i, k] * ev[i, k]
            else:
                for k in range(d):
                    h_out[i, k] += w * math.exp(logp[j, i, k] + scaled[i, k] - top[i] - atom_log[j, i])


@numba.njit(cache=True, nogil=True)
def _smoothed_kernel(x, h, mu, prior, logp, sa, noise_var, var_x, s2):  # pragma: no cover - compiled
    B, D = x.shape
    K = mu.shape[0]
    n, d = prior.shape[1], prior.shape[2]
    coords_hat = np.empty((B, D))
    feats_hat = np.empty((B, n, d))
    scaled = np.empty((n, d))
    top = np.empty(n)
    ev = np.empty((n, d))
    atom_sum = np.empty((K, n))
    atom_log = np.empty((K, n))
    logw = np.empty(K)
    for b in range(B):
        _posterior_row(x[b], h[b], mu, prior, logp, sa, noise_var, var_x, s2, coords_hat[b], feats_hat[b],
                       scaled, top, ev, atom_sum, atom_log, logw)
    return coords_hat, feats_hat


@numba.njit(cache=True, nogil=True)
def _smoothed_reverse(x, h, noise, t_start, abar, beta, mu, prior, logp, s2, stochastic):  # pragma: no cover
    """Full ancestral trajectory per row; same arithmetic as the generic loop."""
    B, D = x.shape
    K = mu.shape[0]
    n, d = prior.shape[1], prior.shape[2]
    x = x.copy()
    h = h.copy()
    c_hat = np.empty(D)
    h_hat = np.empty((n, d))
    scaled = np.empty((n, d))
    top = np.empty(n)
    ev = np.empty((n, d))
    atom_sum = np.empty((K, n))
    atom_log = np.empty((K, n))
    logw = np.empty(K)
    zc = np.empty(D)
    for b in range(B):
        xb = x[b]
        hb = h[b]
        for t in range(t_start, 0, -1):
            ab = abar[t]
            sa = math.sqrt(ab)
            noise_var = 1.0 - ab
            var_x = ab * s2 + noise_var
            _posterior_row(xb, hb, mu, prior, logp, sa, noise_var, var_x, s2, c_hat, h_hat,
                           scaled, top, ev, atom_sum, atom_log, logw)
            bt = beta[t - 1]
            root = math.sqrt(noise_var)
            coef = bt / root
            inv = 1.0 / math.sqrt(1.0 - bt)
            for q in range(D):
                eps = (xb[q] - sa * c_hat[q]) / root
                xb[q] = inv * (xb[q] - coef * eps)
            for i in range(n):
                for k in range(d):
                    eps = (hb[i, k] - sa * h_hat[i, k]) / root
                    hb[i, k] = inv * (hb[i, k] - coef * eps)
            if stochastic and t > 1:
                sigma = math.sqrt(bt)
                step = t_start - t
                for a in range(3):
                    mean = 0.0
                    for i in range(n):
                        mean += noise[step, b, i, a]
                    mean /= n
                    for i in range(n):
                        zc[3 * i + a] = noise[step, b, i, a] - mean
                for q in range(D):
                    xb[q] += sigma * zc[q]
                for i in range(n):
                    for k in range(d):
                        hb[i, k] += sigma * noise[step, b, i, 3 + k]
            for a in range(3):
                mean = 0.0
                for i in range(n):
                    mean += xb[3 * i + a]
                mean /= n
                for i in range(n):
                    xb[3 * i + a] -= mean
    return x, h


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    top = np.max(x, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.sum(np.exp(x - top), axis=axis)) + np.squeeze(top, axis=axis)


# ---------------------------------------------------------------------------
# reverse process


def _reverse(coords, feats, t_start, schedule, denoiser, noise, stochastic):
    """Ancestral sampling from ``t_start`` to 0; ``noise`` is (t_start - 1, B, n, 3 + d) or None."""
    fused = getattr(denoiser, "reverse_batch", None)
    if fused is not None:
        return fused(coords, feats, t_start, schedule, noise, stochastic)
    for t in range(t_start, 0, -1):
        c_hat, h_hat = denoiser.posterior_mean_batch(coords, feats, t, schedule)
        ab = schedule.abar(t)
        beta = float(schedule.beta[t - 1])
        alpha = float(schedule.alpha[t - 1])
        root = math.sqrt(1.0 - ab)
        sa = math.sqrt(ab)
        coef = beta / root
        inv = 1.0 / math.sqrt(alpha)
        eps_c = (coords - sa * c_hat) / root
        eps_h = (feats - sa * h_hat) / root
        coords = inv * (coords - coef * eps_c)
        feats = inv * (feats - coef * eps_h)
        if stochastic and t > 1:
            z = noise[t_start - t]
            sigma = math.sqrt(beta)
            coords = coords + sigma * center(z[..., :3])
            feats = feats + sigma * z[..., 3:]
        coords = center(coords)
    return coords, feats


def denoise_batch(
    coords: np.ndarray,
    feats: np.ndarray,
    t_start: int,
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    rngs: Sequence[np.random.Generator] | None = None,
    stochastic: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Reverse a batch of states that all sit at ``t_start``.

    Each row draws its per-step noise from its own generator, all at once and
    in step order, so a row's result is independent of the rest of the batch.
    """
    if not 1 <= t_start <= schedule.T:
        raise RangeError(f"t={t_start} outside [1, {schedule.T}]")
    coords = np.asarray(coords, dtype=float)
    feats = np.asarray(feats, dtype=float)
    B, n, _ = coords.shape
    noise = None
    if stochastic and t_start > 1:
        if rngs is None or len(rngs) != B:
            raise PreconditionError("stochastic denoising needs one rng per batch row")
        noise = np.stack([g.standard_normal((t_start - 1, n, 3 + feats.shape[-1])) for g in rngs], axis=1)
    return _reverse(coords, feats, t_start, schedule, denoiser, noise, stochastic)


def denoise_from(
    state_t: State,
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    rng: np.random.Generator | None = None,
    stochastic: bool = True,
) -> State:
    """Ancestral sampling of a single state down to ``t = 0``.

    Uses the mean of ``p(M_{t-1} | M_t)`` with ``eps_hat`` recovered from the
    denoiser's clean estimate and variance ``beta_t``; no noise is added on
    the final step.
    """
    c, h = denoise_batch(state_t.coords[None], state_t.feats[None], state_t.t, schedule, denoiser,
                         None if rng is None else [rng], stochastic)
    return State(c[0], h[0], 0)


def denoise_many(
    states: Sequence[State],
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    rngs: Sequence[np.random.Generator] | None,
    stochastic: bool = True,
    threads: int = 1,
) -> list[State]:
    """Denoise states of possibly different sizes and start steps.

    States are grouped by ``(n, t)`` and processed in fixed-size chunks, in
    parallel when ``threads > 1``; output order follows input order.
    """
    if rngs is not None and len(rngs) != len(states):
        raise PreconditionError("need one rng per state")
    groups: dict[tuple[int, int], list[int]] = {}
    for i, s in enumerate(states):
        groups.setdefault((s.n, s.t), []).append(i)
    jobs = []
    for (_, t), idx in groups.items():
        for k in range(0, len(idx), CHUNK):
            jobs.append((t, idx[k : k + CHUNK]))

    def work(job):
        t, idx = job
        c = np.stack([states[i].coords for i in idx])
        h = np.stack([states[i].feats for i in idx])
        g = None if rngs is None else [rngs[i] for i in idx]
        return idx, denoise_batch(c, h, t, schedule, denoiser, g, stochastic)

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    out: list[State | None] = [None] * len(states)
    for idx, (c, h) in results:
        for row, i in enumerate(idx):
            out[i] = State(c[row], h[row], 0)
    return out  # type: ignore[return-value]


def prior_sample(n: int, d: int, rng: np.random.Generator) -> State:
    """Draw ``M_T ~ N(0, I)`` with zero-CoM coordinates."""
    z = rng.standard_normal((n, 3 + d))
    return State(center(z[:, :3]), z[:, 3:], 0)


def sample_unconditional(
    n: int,
    d: int,
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    rngs: Sequence[np.random.Generator],
    threads: int = 1,
) -> list[State]:
    """Full-length reverse diffusion from Gaussian noise, one sample per rng."""
    starts = []
    for g in rngs:
        s = prior_sample(n, d, g)
        s.t = schedule.T
        starts.append(s)
    return denoise_many(starts, schedule, denoiser, rngs, stochastic=True, threads=threads)
