"""Federated target distributions: datasets, gradient oracles, constants.

Two energy families are provided.  The Gaussian-location model has the
closed-form posterior used to measure sampling error, and the
ridge-regularized softmax regression model exercises the classification
metric pipeline on synthetic data.  Both expose per-client exact and
subsampled gradient oracles plus the smoothness / strong-convexity /
heterogeneity constants that feed the bound calculators.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .streams import Stream


class ModelError(ValueError):
    """Invalid model specification or unsupported model/operation pairing."""


def apply_matrix(vectors: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Row-vector times matrix with a fixed-order accumulation over columns.

    Equivalent to ``vectors @ matrix`` but summed coordinate by coordinate in
    index order, so the result is bitwise independent of how the leading axes
    are batched.  The engine relies on this to make batched replications
    bit-identical to one-at-a-time execution.
    """
    d = matrix.shape[0]
    out = vectors[..., 0, None] * matrix[0]
    for j in range(1, d):
        out = out + vectors[..., j, None] * matrix[j]
    return out


@dataclass(frozen=True)
class FederatedDataset:
    """Per-client point sets with count-derived client weights."""

    clients: tuple  # tuple of (n_c, d) float arrays
    weights: np.ndarray  # p_c = n_c / sum_i n_i
    labels: Optional[tuple] = None  # tuple of (n_c,) int arrays, classification only

    @staticmethod
    def from_clients(clients: Sequence[np.ndarray], labels: Optional[Sequence[np.ndarray]] = None) -> "FederatedDataset":
        if len(clients) == 0:
            raise ModelError("a federation needs at least one client")
        arrays = tuple(np.ascontiguousarray(np.atleast_2d(np.asarray(c, dtype=np.float64))) for c in clients)
        d = arrays[0].shape[1]
        for i, a in enumerate(arrays):
            if a.shape[0] == 0:
                raise ModelError(f"client {i} holds no points")
            if a.shape[1] != d:
                raise ModelError(f"client {i} has dimension {a.shape[1]}, expected {d}")
        counts = np.array([a.shape[0] for a in arrays], dtype=np.float64)
        weights = counts / counts.sum()
        lab = None
        if labels is not None:
            lab = tuple(np.asarray(l, dtype=np.int64) for l in labels)
            for i, (a, l) in enumerate(zip(arrays, lab)):
                if l.shape != (a.shape[0],):
                    raise ModelError(f"client {i}: labels do not match point count")
        return FederatedDataset(arrays, weights, lab)

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    @property
    def dim(self) -> int:
        return self.clients[0].shape[1]

    @property
    def counts(self) -> np.ndarray:
        return np.array([c.shape[0] for c in self.clients], dtype=np.int64)

    @property
    def total_points(self) -> int:
        return int(self.counts.sum())

    def validate(self) -> None:
        if np.any(self.weights <= 0):
            raise ModelError("all client weights must be positive")
        if abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise ModelError("client weights must sum to 1 within 1e-12")

    def is_balanced(self, tol: float = 1e-12) -> bool:
        return bool(np.max(np.abs(self.weights - self.weights[0])) <= tol)


def _check_spd(sigma: np.ndarray, what: str = "sigma") -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ModelError(f"{what} must be a square matrix")
    if np.max(np.abs(sigma - sigma.T)) > 1e-12:
        raise ModelError(f"{what} must be symmetric within 1e-12")
    eigvals = np.linalg.eigvalsh(sigma)
    if eigvals[0] <= 0.0:
        raise ModelError(f"{what} is not positive definite: smallest eigenvalue {eigvals[0]:.6e}")
    return sigma


@dataclass(frozen=True)
class GaussianModelSpec:
    """Gaussian-location energy: l(theta; x) = (theta-x)' Sigma^-1 (theta-x) / 2."""

    sigma: np.ndarray
    data: FederatedDataset
    tau: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "sigma", _check_spd(self.sigma))
        self.data.validate()
        if self.data.dim != self.sigma.shape[0]:
            raise ModelError("data dimension does not match sigma")
        if self.tau <= 0:
            raise ModelError("tau must be positive")
        object.__setattr__(self, "sigma_inv", np.linalg.inv(self.sigma))
        object.__setattr__(
            self, "client_means", np.stack([c.mean(axis=0) for c in self.data.clients])
        )

    @property
    def dim(self) -> int:
        return self.data.dim


@dataclass(frozen=True)
class LogisticModelSpec:
    """Softmax regression energy with a ridge term guaranteeing strong convexity.

    The parameter is the flattened (n_classes, n_features) weight matrix and
    l(theta; x, y) = cross-entropy + ridge/2 * ||theta||^2 per data point.
    """

    data: FederatedDataset
    ridge: float
    tau: float = 1.0
    n_classes: int = 0  # 0: infer from labels

    def __post_init__(self):
        self.data.validate()
        if self.data.labels is None:
            raise ModelError("logistic model requires labeled data")
        if self.ridge <= 0:
            raise ModelError("ridge must be > 0 so the energy is strongly convex")
        if self.tau <= 0:
            raise ModelError("tau must be positive")
        n_classes = self.n_classes
        max_label = max(int(l.max()) for l in self.data.labels)
        if n_classes == 0:
            n_classes = max_label + 1
            object.__setattr__(self, "n_classes", n_classes)
        if max_label >= n_classes or min(int(l.min()) for l in self.data.labels) < 0:
            raise ModelError(f"labels must lie in 0..{n_classes - 1}")

    @property
    def n_features(self) -> int:
        return self.data.dim

    @property
    def dim(self) -> int:
        """Dimension of the flattened parameter vector."""
        return self.n_classes * self.data.dim


@dataclass(frozen=True)
class EnergyConstants:
    """Regularity constants of the federated energy f = sum_c p_c f^c."""

    L: float
    m: float
    theta_star: np.ndarray
    gamma_het: float
    sigma_sg: float
    D: float

    @property
    def kappa(self) -> float:
        return self.L / self.m

    def __post_init__(self):
        if not (0 < self.m <= self.L):
            raise ModelError(f"need 0 < m <= L, got m={self.m}, L={self.L}")
        if self.gamma_het < 0 or self.sigma_sg < 0 or self.D < 0:
            raise ModelError("gamma_het, sigma_sg and D must be nonnegative")


def gen_gaussian_federation(
    n_clients: int,
    alpha: float,
    points_per_client,
    sigma: np.ndarray,
    seed: int,
    tau: float = 1.0,
) -> GaussianModelSpec:
    """Draw client centers from N(0, alpha I) and client points from N(center, sigma).

    ``points_per_client`` may be a single count or one count per client.
    Deterministic given ``seed``.
    """
    if n_clients < 1:
        raise ModelError("n_clients must be >= 1")
    sigma = _check_spd(sigma)
    d = sigma.shape[0]
    counts = np.broadcast_to(np.asarray(points_per_client, dtype=np.int64), (n_clients,))
    if np.any(counts < 1):
        raise ModelError("points_per_client must be >= 1")
    if alpha < 0:
        raise ModelError("alpha must be nonnegative")
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(sigma)
    clients = []
    for c in range(n_clients):
        center = np.sqrt(alpha) * rng.standard_normal(d)
        pts = center + rng.standard_normal((int(counts[c]), d)) @ chol.T
        clients.append(pts)
    return GaussianModelSpec(sigma=sigma, data=FederatedDataset.from_clients(clients), tau=tau)


def gen_logistic_federation(
    n_clients: int,
    alpha: float,
    points_per_client,
    n_features: int,
    n_classes: int,
    seed: int,
    ridge: float = 0.01,
    tau: float = 1.0,
    n_test: int = 500,
):
    """Synthetic classification federation plus a held-out test set.

    Features are drawn around per-client centers ~ N(0, alpha I); labels come
    from a fixed ground-truth softmax model, so predictive probabilities are
    learnable and roughly calibrated.  Returns (model, test_x, test_y).
    """
    if n_clients < 1 or n_features < 1 or n_classes < 2:
        raise ModelError("need n_clients >= 1, n_features >= 1, n_classes >= 2")
    counts = np.broadcast_to(np.asarray(points_per_client, dtype=np.int64), (n_clients,))
    rng = np.random.default_rng(seed)
    w_true = rng.standard_normal((n_classes, n_features))
    clients, labels = [], []
    for c in range(n_clients):
        center = np.sqrt(alpha) * rng.standard_normal(n_features)
        x = center + rng.standard_normal((int(counts[c]), n_features))
        y = _sample_labels(x, w_true, rng)
        clients.append(x)
        labels.append(y)
    test_x = rng.standard_normal((n_test, n_features))
    test_y = _sample_labels(test_x, w_true, rng)
    data = FederatedDataset.from_clients(clients, labels)
    model = LogisticModelSpec(data=data, ridge=ridge, tau=tau, n_classes=n_classes)
    return model, test_x, test_y


def _sample_labels(x: np.ndarray, w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    probs = softmax(x @ w.T)
    u = rng.random(x.shape[0])
    return (probs.cumsum(axis=1) < u[:, None]).sum(axis=1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(model: LogisticModelSpec, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Class probabilities under the flattened weight vector ``theta``."""
    w = np.asarray(theta, dtype=np.float64).reshape(model.n_classes, model.n_features)
    return softmax(x @ w.T)


# ---------------------------------------------------------------------------
# gradients


def _check_theta(model, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (model.dim,):
        raise ModelError(f"theta must have shape ({model.dim},); got {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise ModelError("theta must be finite")
    return theta


def client_grad(model, c: int, theta: np.ndarray) -> np.ndarray:
    """Exact per-client gradient (1/p_c) sum_i grad l(theta; x_{c,i})."""
    theta = _check_theta(model, theta)
    if isinstance(model, GaussianModelSpec):
        return gaussian_client_grads(model, theta[None, None, :])[0, c]
    if isinstance(model, LogisticModelSpec):
        return logistic_client_grad(model, c, theta[None, :])[0]
    raise ModelError(f"unsupported model type {type(model).__name__}")


def subsample_size(q: float, n_c: int) -> int:
    """Minibatch size floor(q * n_c), clamped to at least one point."""
    if not 0 < q <= 1:
        raise ModelError("subsample ratio must lie in (0, 1]")
    return max(1, int(np.floor(q * n_c)))


def subsample_indices(stream: Stream, n_c: int, size: int) -> np.ndarray:
    """Uniform without-replacement subset, chosen by ranking stream uniforms."""
    keys = stream.uniforms(n_c)
    return np.argsort(keys, kind="stable")[:size]


def client_grad_stochastic(model, c: int, theta: np.ndarray, q: float, stream: Stream) -> np.ndarray:
    """Minibatch gradient (1/(q p_c)) sum_{i in S} grad l(theta; x_{c,i}).

    S is a uniform without-replacement subset of size floor(q n_c) (>= 1),
    drawn from ``stream``; unbiased for `client_grad` whenever q n_c is an
    integer.  q = 1 returns exactly the exact gradient.
    """
    theta = _check_theta(model, theta)
    n_c = model.data.clients[c].shape[0]
    if q == 1.0:
        return client_grad(model, c, theta)
    size = subsample_size(q, n_c)
    idx = subsample_indices(stream, n_c, size)
    if isinstance(model, GaussianModelSpec):
        return gaussian_client_grad_subset(model, c, theta[None, :], idx[None, :], q)[0]
    if isinstance(model, LogisticModelSpec):
        return logistic_client_grad(model, c, theta[None, :], idx=idx, q=q)[0]
    raise ModelError(f"unsupported model type {type(model).__name__}")


def gaussian_client_grads(model: GaussianModelSpec, thetas: np.ndarray) -> np.ndarray:
    """Exact gradients for all clients; thetas (..., N, d) -> (..., N, d).

    grad f^c(theta) = n Sigma^-1 (theta - mean_c) because n_c / p_c equals the
    total point count for every client.
    """
    n = model.data.total_points
    diff = thetas - model.client_means
    return apply_matrix(diff, n * model.sigma_inv)


def gaussian_client_grad_subset(
    model: GaussianModelSpec, c: int, thetas: np.ndarray, idx: np.ndarray, q: float
) -> np.ndarray:
    """Minibatch gradients for client c; thetas (B, d), idx (B, size)."""
    pts = model.data.clients[c]
    size = idx.shape[1]
    ssum = pts[idx[:, 0]]
    for t in range(1, size):
        ssum = ssum + pts[idx[:, t]]
    p_c = model.data.weights[c]
    scale = 1.0 / (q * p_c)
    return apply_matrix(scale * (size * thetas - ssum), model.sigma_inv)


def logistic_client_grad(
    model: LogisticModelSpec, c: int, thetas: np.ndarray, idx: Optional[np.ndarray] = None, q: float = 1.0
) -> np.ndarray:
    """(Minibatch) gradients for client c; thetas (B, C*F) -> (B, C*F).

    All reductions run in fixed index order so results do not depend on the
    batch size B.
    """
    x = model.data.clients[c]
    y = model.data.labels[c]
    C, F = model.n_classes, model.n_features
    B = thetas.shape[0]
    w = thetas.reshape(B, C, F)
    if idx is None:
        scale = 1.0 / model.data.weights[c]
        grads = _softmax_ce_grad(w, x, y) + (model.ridge * x.shape[0]) * w
    else:
        scale = 1.0 / (q * model.data.weights[c])
        grads = np.zeros_like(w)
        if idx.ndim == 1:
            idx = np.broadcast_to(idx, (B, idx.shape[0]))
        for t in range(idx.shape[1]):
            grads = grads + _softmax_ce_grad(w, x[idx[:, t]][:, None, :], y[idx[:, t]][:, None])
        grads = grads + (model.ridge * idx.shape[1]) * w
    return (scale * grads).reshape(B, C * F)


def _softmax_ce_grad(w: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """sum_i (softmax(W x_i) - onehot(y_i)) outer x_i; w (B,C,F), x (n,F) or (B,n,F)."""
    if x.ndim == 2:
        x = np.broadcast_to(x, (w.shape[0],) + x.shape)
        y = np.broadcast_to(y, (w.shape[0], y.shape[0]))
    B, n, F = x.shape
    C = w.shape[1]
    grad = np.zeros((B, C, F))
    rows = np.arange(B)
    for i in range(n):
        xi = x[:, i, :]  # (B, F)
        logits = np.zeros((B, C))
        for f in range(F):
            logits = logits + w[:, :, f] * xi[:, f, None]
        probs = softmax(logits)
        probs[rows, y[:, i]] -= 1.0
        grad = grad + probs[:, :, None] * xi[:, None, :]
    return grad


def energy(model, theta: np.ndarray) -> float:
    """Total energy f(theta) = sum_c p_c f^c(theta) = sum_c l^c(theta), up to constants."""
    theta = _check_theta(model, theta)
    if isinstance(model, GaussianModelSpec):
        total = 0.0
        for pts in model.data.clients:
            diff = theta - pts
            total += 0.5 * float(np.sum(apply_matrix(diff, model.sigma_inv) * diff))
        return total
    if isinstance(model, LogisticModelSpec):
        w = theta.reshape(model.n_classes, model.n_features)
        total = 0.0
        for x, y in zip(model.data.clients, model.data.labels):
            logits = x @ w.T
            lse = np.log(np.exp(logits - logits.max(axis=1, keepdims=True)).sum(axis=1)) + logits.max(axis=1)
            total += float(np.sum(lse - logits[np.arange(len(y)), y]))
            total += 0.5 * model.ridge * float(theta @ theta) * x.shape[0]
        return total
    raise ModelError(f"unsupported model type {type(model).__name__}")


# ---------------------------------------------------------------------------
# constants and the closed-form target


def constants(
    model,
    theta0_radius: float,
    subsample_ratio: float = 1.0,
    probe_points: int = 20,
    mc_draws: int = 200,
    seed: int = 0,
) -> EnergyConstants:
    """Smoothness/convexity constants, minimizer, heterogeneity and noise scale.

    ``theta0_radius`` is the largest initial distance max_c |theta_0^c - theta_*|;
    it is stored as D = radius / sqrt(d) so that |theta_0 - theta_*|^2 <= d D^2.
    The stochastic-gradient scale is zero at full batch; otherwise it is a
    Monte Carlo maximum of E|grad_err|^2 / d over a probe grid around the
    minimizer, inflated by a 1.5 safety factor.
    """
    if theta0_radius < 0:
        raise ModelError("theta0_radius must be nonnegative")
    if isinstance(model, GaussianModelSpec):
        n = model.data.total_points
        eigvals = np.linalg.eigvalsh(model.sigma_inv)
        L = n * float(eigvals[-1])
        m = n * float(eigvals[0])
        theta_star = np.concatenate(model.data.clients).mean(axis=0)
    elif isinstance(model, LogisticModelSpec):
        n = model.data.total_points
        L = 0.0
        for c, x in enumerate(model.data.clients):
            lam = float(np.linalg.eigvalsh(x.T @ x)[-1])
            L = max(L, (0.5 * lam + x.shape[0] * model.ridge) / model.data.weights[c])
        m = n * model.ridge
        theta_star = _newton_minimize(model)
    else:
        raise ModelError(f"unsupported model type {type(model).__name__}")

    gamma_het = max(
        float(np.linalg.norm(client_grad(model, c, theta_star)))
        for c in range(model.data.n_clients)
    )
    d = model.dim
    sigma_sg = _estimate_sigma_sg(model, theta_star, subsample_ratio, probe_points, mc_draws, seed)
    return EnergyConstants(
        L=L,
        m=m,
        theta_star=theta_star,
        gamma_het=gamma_het,
        sigma_sg=sigma_sg,
        D=theta0_radius / np.sqrt(d),
    )


def _estimate_sigma_sg(model, theta_star, q, probe_points, mc_draws, seed) -> float:
    if q >= 1.0:
        return 0.0
    d = model.dim
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in range(probe_points):
        theta = theta_star + rng.standard_normal(d) / np.sqrt(d)
        for c in range(model.data.n_clients):
            exact = client_grad(model, c, theta)
            sq = 0.0
            for draw in range(mc_draws):
                stream = Stream(seed + 7919 * (p * 104729 + c * 1299709 + draw))
                g = client_grad_stochastic(model, c, theta, q, stream)
                sq += float(np.sum((g - exact) ** 2))
            worst = max(worst, sq / mc_draws / d)
    return float(np.sqrt(1.5 * worst))


def _newton_minimize(model: LogisticModelSpec, tol: float = 1e-10, max_iter: int = 200) -> np.ndarray:
    """Damped Newton on the total energy; errors out if it fails to converge."""
    C, F = model.n_classes, model.n_features
    dim = C * F
    theta = np.zeros(dim)
    x_all = np.concatenate(model.data.clients)
    y_all = np.concatenate(model.data.labels)
    n = x_all.shape[0]
    for _ in range(max_iter):
        w = theta.reshape(C, F)
        probs = softmax(x_all @ w.T)
        resid = probs.copy()
        resid[np.arange(n), y_all] -= 1.0
        grad = (resid.T @ x_all).reshape(dim) + n * model.ridge * theta
        gnorm = float(np.linalg.norm(grad))
        if gnorm < tol:
            return theta
        hess = np.zeros((dim, dim))
        for i in range(n):
            p = probs[i]
            s = np.diag(p) - np.outer(p, p)
            hess += np.kron(s, np.outer(x_all[i], x_all[i]))
        hess += n * model.ridge * np.eye(dim)
        step = np.linalg.solve(hess, grad)
        f0 = energy(model, theta)
        t = 1.0
        while t > 1e-8 and energy(model, theta - t * step) > f0 - 1e-4 * t * float(grad @ step):
            t *= 0.5
        theta = theta - t * step
    raise ModelError(f"Newton solve did not reach gradient norm {tol} in {max_iter} iterations")


def target_posterior(model):
    """Closed-form posterior N(mean of all points, tau/n * sigma) of the Gaussian model."""
    from .metrics import GaussianSummary

    if not isinstance(model, GaussianModelSpec):
        raise ModelError("target_posterior is only defined for the Gaussian model")
    n = model.data.total_points
    mean = np.concatenate(model.data.clients).mean(axis=0)
    return GaussianSummary(mean=mean, cov=(model.tau / n) * model.sigma)


# ---------------------------------------------------------------------------
# dataset serialization


def save_dataset_csv(data: FederatedDataset, path) -> None:
    """One row per point: client_id, x_1..x_d and, when present, label."""
    d = data.dim
    header = ["client_id"] + [f"x_{j + 1}" for j in range(d)]
    if data.labels is not None:
        header.append("label")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for c, pts in enumerate(data.clients):
            for i in range(pts.shape[0]):
                row = [c] + [repr(float(v)) for v in pts[i]]
                if data.labels is not None:
                    row.append(int(data.labels[c][i]))
                writer.writerow(row)


def load_dataset_csv(path) -> FederatedDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "client_id":
            raise ModelError(f"{path}: missing dataset header row")
        has_label = header[-1] == "label"
        d = len(header) - 1 - (1 if has_label else 0)
        by_client: dict = {}
        for row in reader:
            cid = int(row[0])
            pts, labs = by_client.setdefault(cid, ([], []))
            pts.append([float(v) for v in row[1 : 1 + d]])
            if has_label:
                labs.append(int(row[1 + d]))
        ids = sorted(by_client)
        clients = [np.array(by_client[c][0]) for c in ids]
        labels = [np.array(by_client[c][1], dtype=np.int64) for c in ids] if has_label else None
        return FederatedDataset.from_clients(clients, labels)
