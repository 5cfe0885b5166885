"""Client objectives: quadratic point clouds, logistic models, and a small MLP.

Every objective exposes the same surface: full loss, full gradient, and a
mini-batch gradient that takes explicit sample indices (so all randomness
stays with the caller).  The full gradient is defined as the batch gradient
over all indices, which makes "full batch equals full gradient" hold
bit-for-bit rather than approximately.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

ParamVector = np.ndarray  # 1-D float64, fixed length per objective


@dataclass
class ClientDataset:
    """Feature matrix plus integer labels for one client (or a global pool)."""

    features: np.ndarray
    labels: np.ndarray
    client_id: int = -1

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ConfigError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ConfigError(
                f"labels shape {self.labels.shape} does not match "
                f"{self.features.shape[0]} samples"
            )
        if self.features.shape[0] == 0:
            raise ConfigError("dataset is empty")
        if not np.all(np.isfinite(self.features)):
            raise ConfigError("features contain non-finite values")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _check_params(w: np.ndarray, dim: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (dim,):
        raise ConfigError(f"parameter vector has shape {w.shape}, expected ({dim},)")
    return w


def _augment(features: np.ndarray) -> np.ndarray:
    """Append a constant-1 column so the bias rides inside the weight vector."""
    return np.hstack([features, np.ones((features.shape[0], 1))])


class Objective:
    """Base type; subclasses fill in loss/gradient and smoothness metadata."""

    kind: str = ""

    def __init__(self, dataset: ClientDataset):
        self.dataset = dataset
        self._all_indices = np.arange(dataset.n)

    @property
    def dim(self) -> int:
        raise NotImplementedError

    @property
    def smoothness(self) -> float:
        """Upper bound L on the gradient Lipschitz constant."""
        raise NotImplementedError

    def loss(self, w: ParamVector) -> float:
        raise NotImplementedError

    def batch_grad(self, w: ParamVector, indices: np.ndarray) -> ParamVector:
        raise NotImplementedError

    def grad(self, w: ParamVector) -> ParamVector:
        return self.batch_grad(w, self._all_indices)

    def grad_variance(self, batch_size: int) -> float | None:
        """Analytic E||batch grad - full grad||^2 where known, else None."""
        return None

    def predict(self, w: ParamVector, features: np.ndarray) -> np.ndarray | None:
        """Hard labels for classification objectives, None for regression."""
        return None


class QuadraticObjective(Objective):
    """f(w) = (1/n) sum_j 0.5 ||w - x_j||^2, the mean squared pull to each point.

    The gradient is w minus the batch mean, the optimum is the dataset mean,
    and the smoothness constant is exactly 1.
    """

    kind = "quadratic"

    def __init__(self, dataset: ClientDataset):
        super().__init__(dataset)
        self.mean = dataset.features.mean(axis=0)
        # Total variance of the points around their mean, summed over
        # coordinates; drives the exact batch-mean variance below.
        self._spread = float(np.mean(np.sum((dataset.features - self.mean) ** 2, axis=1)))

    @property
    def dim(self) -> int:
        return self.dataset.dim

    @property
    def smoothness(self) -> float:
        return 1.0

    @property
    def optimum(self) -> ParamVector:
        return self.mean.copy()

    def loss(self, w: ParamVector) -> float:
        w = _check_params(w, self.dim)
        diff = w[None, :] - self.dataset.features
        return float(0.5 * np.mean(np.sum(diff * diff, axis=1)))

    def batch_grad(self, w: ParamVector, indices: np.ndarray) -> ParamVector:
        w = _check_params(w, self.dim)
        return w - self.dataset.features[indices].mean(axis=0)

    def grad_variance(self, batch_size: int) -> float | None:
        # Sampling b of n points uniformly without replacement: the batch
        # mean has variance (spread/b) * (n-b)/(n-1), the finite-population
        # correction of the usual sigma^2/b law.
        n = self.dataset.n
        b = int(batch_size)
        if b <= 0:
            raise ConfigError(f"batch_size must be positive, got {b}")
        if b >= n:
            return 0.0
        return self._spread * (n - b) / (b * (n - 1))


def _log_sigmoid(z: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -z)


class LogisticObjective(Objective):
    """L2-regularized logistic regression with the bias folded into w.

    Two classes use a single sigmoid head on w in R^{d+1}; more classes use a
    softmax head on a (C x (d+1)) weight matrix stored flattened.  Smoothness:
    the sigmoid Hessian is bounded by max_j ||x_j||^2 / 4 plus the ridge
    weight; the softmax logit Hessian has spectral norm at most 1/2, so the
    multiclass bound uses /2 instead of /4.
    """

    kind = "logistic"

    def __init__(self, dataset: ClientDataset, num_classes: int = 2, reg: float = 0.0):
        super().__init__(dataset)
        if num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
        if reg < 0:
            raise ConfigError(f"reg must be >= 0, got {reg}")
        if dataset.labels.min() < 0 or dataset.labels.max() >= num_classes:
            raise ConfigError("labels out of range for num_classes")
        self.num_classes = int(num_classes)
        self.reg = float(reg)
        self._x = _augment(dataset.features)
        self._y = dataset.labels
        self._max_row_norm2 = float(np.max(np.sum(self._x * self._x, axis=1)))

    @property
    def dim(self) -> int:
        cols = self._x.shape[1]
        return cols if self.num_classes == 2 else self.num_classes * cols

    @property
    def smoothness(self) -> float:
        curvature = 0.25 if self.num_classes == 2 else 0.5
        return curvature * self._max_row_norm2 + self.reg

    def loss(self, w: ParamVector) -> float:
        w = _check_params(w, self.dim)
        if self.num_classes == 2:
            z = self._x @ w
            data = -np.mean(self._y * _log_sigmoid(z) + (1 - self._y) * _log_sigmoid(-z))
        else:
            logits = self._x @ w.reshape(self.num_classes, -1).T
            lse = np.logaddexp.reduce(logits, axis=1)
            data = np.mean(lse - logits[np.arange(len(self._y)), self._y])
        return float(data + 0.5 * self.reg * np.dot(w, w))

    def batch_grad(self, w: ParamVector, indices: np.ndarray) -> ParamVector:
        w = _check_params(w, self.dim)
        x = self._x[indices]
        y = self._y[indices]
        if self.num_classes == 2:
            p = 1.0 / (1.0 + np.exp(-(x @ w)))
            return x.T @ (p - y) / len(y) + self.reg * w
        mat = w.reshape(self.num_classes, -1)
        logits = x @ mat.T
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(len(y)), y] -= 1.0
        return (p.T @ x / len(y) + self.reg * mat).ravel()

    def predict(self, w: ParamVector, features: np.ndarray) -> np.ndarray:
        w = _check_params(w, self.dim)
        x = _augment(np.asarray(features, dtype=np.float64))
        if self.num_classes == 2:
            return (x @ w >= 0.0).astype(np.int64)
        return np.argmax(x @ w.reshape(self.num_classes, -1).T, axis=1).astype(np.int64)


class MlpObjective(Objective):
    """One-hidden-layer tanh network with a softmax head, trained by backprop.

    Deliberately tiny (at most 1000 parameters): it exists to exercise the
    simulator on a nonconvex loss, not to chase accuracy.  The smoothness
    value is an empirical probe, not a certified bound.
    """

    kind = "mlp"

    MAX_PARAMS = 1000

    def __init__(
        self,
        dataset: ClientDataset,
        num_classes: int = 2,
        hidden: int = 16,
        reg: float = 0.0,
        smoothness: float | None = None,
    ):
        super().__init__(dataset)
        if num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
        if hidden < 1:
            raise ConfigError(f"hidden must be >= 1, got {hidden}")
        if reg < 0:
            raise ConfigError(f"reg must be >= 0, got {reg}")
        if dataset.labels.min() < 0 or dataset.labels.max() >= num_classes:
            raise ConfigError("labels out of range for num_classes")
        self.num_classes = int(num_classes)
        self.hidden = int(hidden)
        self.reg = float(reg)
        self._x = _augment(dataset.features)
        self._y = dataset.labels
        d1 = self._x.shape[1]
        self._n1 = self.hidden * d1
        total = self._n1 + self.num_classes * (self.hidden + 1)
        if total > self.MAX_PARAMS:
            raise ConfigError(
                f"mlp would have {total} parameters, limit is {self.MAX_PARAMS}"
            )
        self._total = total
        self._smoothness = smoothness

    @property
    def dim(self) -> int:
        return self._total

    @property
    def smoothness(self) -> float:
        if self._smoothness is None:
            self._smoothness = self._probe_smoothness()
        return self._smoothness

    def _probe_smoothness(self) -> float:
        # Max gradient-difference ratio over fixed random pairs, padded by 2x.
        # Good enough for step-size warnings; never used in convergence math.
        rng = np.random.Generator(np.random.Philox(0x5E0071))
        best = 1.0
        for _ in range(64):
            w1 = rng.normal(scale=1.0, size=self.dim)
            w2 = w1 + rng.normal(scale=0.1, size=self.dim)
            num = np.linalg.norm(self.grad(w1) - self.grad(w2))
            den = np.linalg.norm(w1 - w2)
            if den > 0:
                best = max(best, num / den)
        return 2.0 * best

    def _unpack(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d1 = self._x.shape[1]
        w1 = w[: self._n1].reshape(self.hidden, d1)
        w2 = w[self._n1 :].reshape(self.num_classes, self.hidden + 1)
        return w1, w2

    def _forward(self, w1: np.ndarray, w2: np.ndarray, x: np.ndarray):
        act = np.tanh(x @ w1.T)
        act1 = np.hstack([act, np.ones((act.shape[0], 1))])
        return act, act1, act1 @ w2.T

    def loss(self, w: ParamVector) -> float:
        w = _check_params(w, self.dim)
        w1, w2 = self._unpack(w)
        _, _, logits = self._forward(w1, w2, self._x)
        lse = np.logaddexp.reduce(logits, axis=1)
        data = np.mean(lse - logits[np.arange(len(self._y)), self._y])
        return float(data + 0.5 * self.reg * np.dot(w, w))

    def batch_grad(self, w: ParamVector, indices: np.ndarray) -> ParamVector:
        w = _check_params(w, self.dim)
        w1, w2 = self._unpack(w)
        x = self._x[indices]
        y = self._y[indices]
        act, act1, logits = self._forward(w1, w2, x)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(len(y)), y] -= 1.0
        p /= len(y)
        g2 = p.T @ act1
        back = (p @ w2[:, : self.hidden]) * (1.0 - act * act)
        g1 = back.T @ x
        return np.concatenate([g1.ravel(), g2.ravel()]) + self.reg * w

    def predict(self, w: ParamVector, features: np.ndarray) -> np.ndarray:
        w = _check_params(w, self.dim)
        w1, w2 = self._unpack(w)
        x = _augment(np.asarray(features, dtype=np.float64))
        _, _, logits = self._forward(w1, w2, x)
        return np.argmax(logits, axis=1).astype(np.int64)


def make_objective(kind: str, dataset: ClientDataset, **params) -> Objective:
    """Build one client objective; unknown kinds raise ConfigError."""
    if kind == "quadratic":
        if params:
            raise ConfigError(f"quadratic takes no extra parameters, got {params}")
        return QuadraticObjective(dataset)
    if kind == "logistic":
        return LogisticObjective(dataset, **params)
    if kind == "mlp":
        return MlpObjective(dataset, **params)
    raise ConfigError(f"unknown objective kind {kind!r}")


def global_optimum(objectives: list[Objective]) -> ParamVector | None:
    """Exact minimizer of the uniform average of quadratic objectives.

    The average objective's gradient is w minus the mean of the client means,
    so that mean is the optimum regardless of per-client dataset sizes.
    Returns None when any objective is not quadratic.
    """
    if not objectives:
        raise ConfigError("no objectives given")
    if not all(isinstance(o, QuadraticObjective) for o in objectives):
        return None
    dims = {o.dim for o in objectives}
    if len(dims) != 1:
        raise ConfigError(f"objectives disagree on dimension: {sorted(dims)}")
    return np.mean([o.mean for o in objectives], axis=0)


def estimate_grad_variance(
    objective: Objective,
    w: ParamVector,
    batch_size: int,
    draws: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Monte Carlo E||batch grad - full grad||^2 with its standard error."""
    full = objective.grad(w)
    n = objective.dataset.n
    b = min(int(batch_size), n)
    samples = np.empty(draws)
    for r in range(draws):
        idx = rng.choice(n, size=b, replace=False)
        diff = objective.batch_grad(w, idx) - full
        samples[r] = np.dot(diff, diff)
    return float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(draws))
