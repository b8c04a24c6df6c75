"""Federated averaging Langevin chains with correlated noise and device sampling.

Each client runs K local noisy-gradient steps between synchronizations; the
injected noise mixes a shared Gaussian vector (weight rho) with a private
per-client one (weight sqrt(1-rho^2)/sqrt(p_c)).  Synchronization averages the
participating clients and broadcasts the result to everyone.

Determinism contract: a chain's trajectory is a pure function of
(config, model, replication id).  All randomness comes from counter-based
streams and every reduction that mixes clients or coordinates runs in fixed
index order, so replications can be batched or distributed across processes
in any way without changing a single bit of the output.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import model as model_mod
from .model import GaussianModelSpec, LogisticModelSpec, subsample_size
from .streams import SHARED, Stream, key_grid, normals_for_keys, uniforms_for_keys

DIVERGENCE_LIMIT = 1e12

_NOISE_PURPOSE = "noise"
_SUBSAMPLE_PURPOSE = "subsample"
_DEVICE_PURPOSE = "devices"

# noise block sizes are chosen from a memory budget; the values produced are
# counter-based, so the choice never affects results.
_BLOCK_BUDGET_FLOATS = 2_000_000


class EngineError(ValueError):
    """Invalid run configuration."""


class ChainDivergenceError(RuntimeError):
    """A chain produced non-finite or runaway state."""

    def __init__(self, replication, iteration, client, value, kind="divergence"):
        self.replication = replication
        self.iteration = iteration
        self.client = client
        self.kind = kind
        if kind == "nan":
            msg = (
                f"non-finite state at iteration {iteration}, client {client}, "
                f"replication {replication}"
            )
        else:
            msg = (
                f"|theta| = {value:.3e} exceeded {DIVERGENCE_LIMIT:.0e} at iteration "
                f"{iteration}, client {client}, replication {replication}; "
                "consider reducing the step size eta"
            )
        super().__init__(msg)


# ---------------------------------------------------------------------------
# schedules and schemes


@dataclass(frozen=True)
class FixedStep:
    eta: float

    def __post_init__(self):
        if self.eta <= 0:
            raise EngineError("step size eta must be positive")


@dataclass(frozen=True)
class DecayingStep:
    """eta_k = 1 / (2 L + m k / 12)."""

    L: float
    m: float

    def __post_init__(self):
        if self.L <= 0 or self.m <= 0:
            raise EngineError("decaying schedule needs positive L and m")


Schedule = Union[FixedStep, DecayingStep]


def step_size(schedule: Schedule, k: int) -> float:
    if isinstance(schedule, FixedStep):
        return schedule.eta
    if isinstance(schedule, DecayingStep):
        return 1.0 / (2.0 * schedule.L + schedule.m * k / 12.0)
    raise EngineError(f"unknown schedule {schedule!r}")


def _step_sizes(schedule: Schedule, T: int) -> np.ndarray:
    if isinstance(schedule, FixedStep):
        return np.full(T, schedule.eta)
    return 1.0 / (2.0 * schedule.L + schedule.m * np.arange(T) / 12.0)


@dataclass(frozen=True)
class FullDevice:
    pass


@dataclass(frozen=True)
class SchemeI:
    """With-replacement sampling of S devices, each draw categorical by p_c."""

    s: int


@dataclass(frozen=True)
class SchemeII:
    """Uniform without-replacement sampling of S devices (balanced weights)."""

    s: int


Scheme = Union[FullDevice, SchemeI, SchemeII]


@dataclass(frozen=True)
class RunConfig:
    """One complete chain description; see module docstring for semantics."""

    n_clients: int
    weights: np.ndarray
    local_steps: int
    tau: float
    rho: float
    schedule: Schedule
    scheme: Scheme = field(default_factory=FullDevice)
    subsample_ratio: float = 1.0
    horizon: int = 0
    master_seed: int = 0
    init: Optional[np.ndarray] = None  # (d,) or (n_clients, d); default all-zero

    def __post_init__(self):
        if self.n_clients < 1:
            raise EngineError("n_clients must be >= 1")
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (self.n_clients,) or np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise EngineError("weights must be positive and sum to 1 within 1e-12")
        object.__setattr__(self, "weights", w)
        if self.local_steps < 1:
            raise EngineError("local_steps must be >= 1")
        if self.tau < 0:
            raise EngineError("tau must be nonnegative")
        if not 0.0 <= self.rho <= 1.0:
            raise EngineError("rho must lie in [0, 1]")
        if not 0.0 < self.subsample_ratio <= 1.0:
            raise EngineError("subsample_ratio must lie in (0, 1]")
        if self.horizon < 1 or self.horizon % self.local_steps != 0:
            raise EngineError("horizon must be a positive multiple of local_steps")
        if isinstance(self.scheme, (SchemeI, SchemeII)):
            if not 1 <= self.scheme.s <= self.n_clients:
                raise EngineError("partial schemes need 1 <= S <= n_clients")
        if isinstance(self.scheme, SchemeII) and np.max(np.abs(w - w[0])) > 1e-12:
            raise EngineError("scheme II requires balanced client weights")

    @staticmethod
    def for_model(model, **kwargs) -> "RunConfig":
        return RunConfig(n_clients=model.data.n_clients, weights=model.data.weights, **kwargs)

    @property
    def rounds(self) -> int:
        return self.horizon // self.local_steps


@dataclass
class ChainState:
    """Per-client states of one chain at one iteration."""

    thetas: np.ndarray  # (n_clients, d)
    iteration: int
    replication: int


@dataclass
class Trajectory:
    """Synchronized global states of one chain, one row per communication round."""

    replication: int
    rounds: np.ndarray  # r = 0..T/K
    iterations: np.ndarray  # r * K
    thetas: np.ndarray  # (rounds + 1, d)
    etas: np.ndarray  # step size used in the last local step of each round
    final_state: Optional[ChainState] = None
    client_states: Optional[np.ndarray] = None  # (T + 1, n_clients, d) when recorded


@dataclass
class BlockResult:
    """Raw output of a lockstep batch of chains."""

    records: np.ndarray  # (B, rounds + 1, d)
    etas_used: np.ndarray
    final_thetas: np.ndarray  # (B, n_clients, d)
    client_states: Optional[np.ndarray] = None  # (B, T + 1, n_clients, d)


# ---------------------------------------------------------------------------
# elementary operations (singled out so tests can drive them directly)


def injected_noise(shared: Stream, private: Stream, eta, tau, rho, p_c, dim) -> np.ndarray:
    """sqrt(2 eta tau rho^2) shared + sqrt(2 eta tau (1-rho^2)/p_c) private.

    Both streams are always consumed, even at rho in {0, 1}, matching the
    engine's fixed draw layout.
    """
    if eta <= 0 or tau < 0 or not 0 <= rho <= 1 or not 0 < p_c <= 1:
        raise EngineError("invalid noise parameters")
    a = np.sqrt(2.0 * eta * tau * rho * rho)
    b = np.sqrt(2.0 * eta * tau * (1.0 - rho * rho) / p_c)
    return a * shared.normals(dim) + b * private.normals(dim)


def local_step(theta_c: np.ndarray, grad_estimate: np.ndarray, noise: np.ndarray, eta: float) -> np.ndarray:
    """theta - eta * gradient estimate + injected noise."""
    return theta_c - eta * grad_estimate + noise


def sample_devices(scheme: Scheme, weights: np.ndarray, stream: Stream) -> np.ndarray:
    """Participating client indices for one synchronization.

    Scheme I returns S categorical draws by weight (duplicates possible);
    scheme II returns a uniform without-replacement subset, sorted.
    """
    n = len(weights)
    if isinstance(scheme, SchemeI):
        u = stream.uniforms(scheme.s)
        idx = np.searchsorted(np.cumsum(weights), u, side="right")
        return np.minimum(idx, n - 1)
    if isinstance(scheme, SchemeII):
        if scheme.s > n:
            raise EngineError("scheme II cannot select more devices than exist")
        u = stream.uniforms(n)
        return np.sort(np.argsort(u, kind="stable")[: scheme.s])
    raise EngineError("sample_devices requires a partial scheme")


def _participation_weights(scheme, weights, sampled) -> np.ndarray:
    if isinstance(scheme, FullDevice):
        return weights
    w = np.zeros(len(weights))
    np.add.at(w, np.asarray(sampled), 1.0 / scheme.s)
    return w


def _weighted_client_sum(w: np.ndarray, betas: np.ndarray) -> np.ndarray:
    """sum_c w[..., c] * betas[..., c, :] accumulated in client order."""
    out = w[..., 0, None] * betas[..., 0, :]
    for c in range(1, betas.shape[-2]):
        out = out + w[..., c, None] * betas[..., c, :]
    return out


def synchronize(betas: np.ndarray, weights: np.ndarray, scheme: Scheme, sampled=None) -> np.ndarray:
    """Aggregate client states: sum_c p_c beta^c (full) or (1/S) sum over sampled."""
    w = _participation_weights(scheme, weights, sampled)
    return _weighted_client_sum(w, betas)


# ---------------------------------------------------------------------------
# chain execution


def _client_tags(n: int):
    return list(range(n))


def _noise_scales(eta, tau, rho, weights):
    shared_scale = np.sqrt(2.0 * eta * tau * rho * rho)
    private_scale = np.sqrt(2.0 * eta * tau * (1.0 - rho * rho) / weights)
    return shared_scale, private_scale


def _grads(model, cfg: RunConfig, thetas: np.ndarray, sub_keys) -> np.ndarray:
    """Gradient estimates for all clients; thetas (B, N, d) -> (B, N, d)."""
    B, N, d = thetas.shape
    q = cfg.subsample_ratio
    if isinstance(model, GaussianModelSpec):
        if q == 1.0:
            return model_mod.gaussian_client_grads(model, thetas)
        out = np.empty_like(thetas)
        for c in range(N):
            n_c = model.data.clients[c].shape[0]
            size = subsample_size(q, n_c)
            u = uniforms_for_keys(sub_keys[:, c], n_c)
            idx = np.argsort(u, kind="stable", axis=-1)[:, :size]
            out[:, c, :] = model_mod.gaussian_client_grad_subset(model, c, thetas[:, c, :], idx, q)
        return out
    if isinstance(model, LogisticModelSpec):
        out = np.empty_like(thetas)
        for c in range(N):
            if q == 1.0:
                out[:, c, :] = model_mod.logistic_client_grad(model, c, thetas[:, c, :])
            else:
                n_c = model.data.clients[c].shape[0]
                size = subsample_size(q, n_c)
                u = uniforms_for_keys(sub_keys[:, c], n_c)
                idx = np.argsort(u, kind="stable", axis=-1)[:, :size]
                out[:, c, :] = model_mod.logistic_client_grad(model, c, thetas[:, c, :], idx=idx, q=q)
        return out
    raise EngineError(f"unsupported model type {type(model).__name__}")


def _check_state(thetas, reps, iteration):
    # max() propagates NaN, so one reduction covers both guards
    worst = float(np.abs(thetas).max())
    if not np.isfinite(worst):
        b, c = np.argwhere(~np.isfinite(thetas))[0][:2]
        raise ChainDivergenceError(int(reps[b]), iteration, int(c), np.nan, kind="nan")
    if worst > DIVERGENCE_LIMIT:
        b, c = np.argwhere(np.abs(thetas) == worst)[0][:2]
        raise ChainDivergenceError(int(reps[b]), iteration, int(c), worst)


def _initial_thetas(cfg: RunConfig, d: int, B: int) -> np.ndarray:
    if cfg.init is None:
        return np.zeros((B, cfg.n_clients, d))
    init = np.asarray(cfg.init, dtype=np.float64)
    if init.shape == (d,):
        init = np.broadcast_to(init, (cfg.n_clients, d))
    if init.shape != (cfg.n_clients, d):
        raise EngineError(f"init must have shape ({d},) or ({cfg.n_clients}, {d})")
    return np.broadcast_to(init, (B, cfg.n_clients, d)).copy()


def run_block(cfg: RunConfig, model, replications, record_client_states: bool = False) -> BlockResult:
    """Run a batch of chains in lockstep; bit-identical to running them one by one."""
    if model.data.n_clients != cfg.n_clients or np.max(np.abs(model.data.weights - cfg.weights)) > 1e-12:
        raise EngineError("config weights do not match the model's federation")
    reps = np.asarray(list(replications), dtype=np.int64)
    B = len(reps)
    N, d, T, K = cfg.n_clients, model.dim, cfg.horizon, cfg.local_steps
    tau, rho, q = cfg.tau, cfg.rho, cfg.subsample_ratio
    etas = _step_sizes(cfg.schedule, T)
    thetas = _initial_thetas(cfg, d, B)

    n_rounds = T // K
    records = np.empty((B, n_rounds + 1, d))
    etas_used = np.empty(n_rounds + 1)
    records[:, 0, :] = _weighted_client_sum(np.broadcast_to(cfg.weights, (B, N)), thetas)
    etas_used[0] = etas[0]
    states = None
    if record_client_states:
        states = np.empty((B, T + 1, N, d))
        states[:, 0] = thetas

    tags = _client_tags(N)
    pair_cols = 2 * ((d + 1) // 2)
    block = max(1, min(T, _BLOCK_BUDGET_FLOATS // max(1, B * (N + 1) * pair_cols)))
    partial = isinstance(cfg.scheme, (SchemeI, SchemeII))

    for k0 in range(0, T, block):
        k1 = min(T, k0 + block)
        iters = np.arange(k0, k1)
        priv_keys = key_grid(cfg.master_seed, reps, iters, tags, _NOISE_PURPOSE)
        priv = normals_for_keys(priv_keys, d)  # (B, block, N, d)
        shared_keys = key_grid(cfg.master_seed, reps, iters, [SHARED], _NOISE_PURPOSE)
        shared = normals_for_keys(shared_keys, d)  # (B, block, 1, d)
        sub_keys = None
        if q < 1.0:
            sub_keys = key_grid(cfg.master_seed, reps, iters, tags, _SUBSAMPLE_PURPOSE)

        eta = None
        for kb, k in enumerate(range(k0, k1)):
            if eta != float(etas[k]):
                eta = float(etas[k])
                shared_scale, private_scale = _noise_scales(eta, tau, rho, cfg.weights)
            grads = _grads(model, cfg, thetas, sub_keys[:, kb] if sub_keys is not None else None)
            # composed exactly like injected_noise + local_step so single-step
            # replays through those ops are bit-identical
            noise = shared_scale * shared[:, kb] + private_scale[:, None] * priv[:, kb]
            thetas = thetas - eta * grads + noise
            _check_state(thetas, reps, k)
            if (k + 1) % K == 0:
                if partial:
                    dev_keys = key_grid(cfg.master_seed, reps, [k + 1], [SHARED], _DEVICE_PURPOSE)[:, 0, 0]
                    w = np.zeros((B, N))
                    rows = np.repeat(np.arange(B), cfg.scheme.s)
                    if isinstance(cfg.scheme, SchemeI):
                        u = uniforms_for_keys(dev_keys, cfg.scheme.s)
                        chosen = np.minimum(
                            np.searchsorted(np.cumsum(cfg.weights), u.ravel(), side="right"), N - 1
                        )
                    else:
                        u = uniforms_for_keys(dev_keys, N)
                        chosen = np.sort(np.argsort(u, kind="stable", axis=-1)[:, : cfg.scheme.s], axis=-1).ravel()
                    np.add.at(w, (rows, chosen), 1.0 / cfg.scheme.s)
                else:
                    w = np.broadcast_to(cfg.weights, (B, N))
                theta_bar = _weighted_client_sum(w, thetas)
                thetas = np.broadcast_to(theta_bar[:, None, :], (B, N, d)).copy()
                r = (k + 1) // K
                records[:, r, :] = theta_bar
                etas_used[r] = eta
            if record_client_states:
                states[:, k + 1] = thetas

    return BlockResult(
        records=records,
        etas_used=etas_used,
        final_thetas=thetas,
        client_states=states,
    )


def run_chain(cfg: RunConfig, model, replication: int, record_client_states: bool = False) -> Trajectory:
    """Run one chain and return its per-round trajectory."""
    out = run_block(cfg, model, [replication], record_client_states)
    rounds = np.arange(out.records.shape[1])
    return Trajectory(
        replication=replication,
        rounds=rounds,
        iterations=rounds * cfg.local_steps,
        thetas=out.records[0],
        etas=out.etas_used,
        final_state=ChainState(out.final_thetas[0], cfg.horizon, replication),
        client_states=out.client_states[0] if record_client_states else None,
    )


def _block_task(args):
    cfg, model, rep_slice = args
    return run_block(cfg, model, rep_slice).records


def resolve_workers(workers: Optional[int]) -> int:
    """Map a worker request to a positive count; None/0 means all CPUs."""
    if workers is None or workers == 0:
        return os.cpu_count() or 1
    return max(1, int(workers))


def run_replicated(cfg: RunConfig, model, R: int, workers: int = 1) -> np.ndarray:
    """R independent chains (replications 0..R-1); returns (R, rounds + 1, d).

    The result is a pure function of (cfg, model, replication id): any worker
    count produces identical bits, replications are merely distributed across
    processes.
    """
    if R < 2:
        raise EngineError("run_replicated needs R >= 2")
    workers = resolve_workers(workers)
    if workers <= 1 or R < 2 * workers:
        return run_block(cfg, model, range(R)).records
    bounds = np.linspace(0, R, workers + 1).astype(int)
    slices = [range(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ProcessPoolExecutor(max_workers=len(slices)) as pool:
        parts = list(pool.map(_block_task, [(cfg, model, s) for s in slices]))
    return np.concatenate(parts, axis=0)
