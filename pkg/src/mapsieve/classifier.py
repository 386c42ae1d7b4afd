"""Binary map-matching classifier: a 3-layer MLP trained with BCE + Adam.

The network scores one encoding vector at a time during deployment but all
internal math is batched.  Training is single-threaded and bit-reproducible
under a fixed seed; trained models are immutable in practice (the training
loop owns the only mutable copy).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict

import numpy as np

ENCODING_MODES = ("concat", "disparity", "query_only")

# Forward outputs are nudged strictly inside (0, 1); float64 sigmoid would
# otherwise round to exactly 1.0 for logits above ~37.
_SCORE_MARGIN = 1e-12
_LOSS_CLAMP = 1e-7


@dataclass
class TrainConfig:
    """Hyperparameters for the training loop.

    ``operating_threshold`` is the decision threshold the validation F1 is
    scored at; ``val_score_source`` picks whether validation F1 uses fused
    scores (default) or raw classifier scores.
    """

    learning_rate: float = 0.0005
    dropout: float = 0.25
    batch_size: int = 64
    max_epochs: int = 100
    patience_epochs: int = 2
    seed: int = 0
    operating_threshold: float = 0.25
    hidden1: int = 512
    hidden2: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_score_source: str = "fused"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must lie in [0, 1)")
        if self.patience_epochs < 1:
            raise ValueError("patience_epochs must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if not (0.0 < self.operating_threshold < 1.0):
            raise ValueError("operating_threshold must lie in (0, 1)")
        if self.val_score_source not in ("fused", "classifier"):
            raise ValueError("val_score_source must be 'fused' or 'classifier'")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class ClassifierModel:
    """Weights of the 3-layer MLP plus the metadata needed to deploy it."""

    w1: np.ndarray  # (H1, D_in)
    b1: np.ndarray  # (H1,)
    w2: np.ndarray  # (H2, H1)
    b2: np.ndarray  # (H2,)
    w3: np.ndarray  # (1, H2)
    b3: np.ndarray  # (1,)
    encoding_mode: str = "concat"
    gem_p: float = 3.0
    dropout_rate: float = 0.25

    def __post_init__(self):
        if self.encoding_mode not in ENCODING_MODES:
            raise ValueError(f"unknown encoding mode {self.encoding_mode!r}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError("dropout_rate must lie in [0, 1)")
        h1, d_in = self.w1.shape
        h2 = self.w2.shape[0]
        if self.b1.shape != (h1,) or self.w2.shape != (h2, h1):
            raise ValueError("dimension chain mismatch between layer 1 and 2")
        if self.b2.shape != (h2,) or self.w3.shape != (1, h2) or self.b3.shape != (1,):
            raise ValueError("dimension chain mismatch between layer 2 and output")
        for name in ("w1", "b1", "w2", "b2", "w3", "b3"):
            arr = getattr(self, name)
            if not np.isfinite(arr).all():
                raise ValueError(f"non-finite values in parameter {name}")

    @property
    def dims(self) -> list[int]:
        return [self.w1.shape[1], self.w1.shape[0], self.w2.shape[0], 1]

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            "w1": self.w1,
            "b1": self.b1,
            "w2": self.w2,
            "b2": self.b2,
            "w3": self.w3,
            "b3": self.b3,
        }

    def copy(self) -> "ClassifierModel":
        return copy.deepcopy(self)

    def predict(self, encodings: np.ndarray) -> np.ndarray:
        """Deterministic inference scores for an (N, D_in) batch or a single vector."""
        return forward(self, encodings)


def init_model(
    d_in: int,
    hidden1: int = 512,
    hidden2: int = 128,
    seed: int = 0,
    *,
    encoding_mode: str = "concat",
    gem_p: float = 3.0,
    dropout_rate: float = 0.25,
) -> ClassifierModel:
    """Seeded init: fan-in-scaled symmetric uniform weights, zero biases."""
    if min(d_in, hidden1, hidden2) < 1:
        raise ValueError("layer dims must be >= 1")
    rng = np.random.default_rng(seed)

    def layer(n_out, n_in):
        bound = 1.0 / np.sqrt(n_in)
        return rng.uniform(-bound, bound, size=(n_out, n_in))

    return ClassifierModel(
        w1=layer(hidden1, d_in),
        b1=np.zeros(hidden1),
        w2=layer(hidden2, hidden1),
        b2=np.zeros(hidden2),
        w3=layer(1, hidden2),
        b3=np.zeros(1),
        encoding_mode=encoding_mode,
        gem_p=gem_p,
        dropout_rate=dropout_rate,
    )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _as_batch(encodings: np.ndarray, d_in: int) -> tuple[np.ndarray, bool]:
    e = np.asarray(encodings, dtype=np.float64)
    single = e.ndim == 1
    if single:
        e = e[None, :]
    if e.ndim != 2 or e.shape[1] != d_in:
        raise ValueError(f"encoding dim mismatch: model expects {d_in}, got {e.shape}")
    return e, single


def _forward_cached(model: ClassifierModel, e: np.ndarray, train_mode: bool, rng) -> tuple[np.ndarray, dict]:
    """Batched forward pass; returns scores and the cache backward() needs."""
    rate = model.dropout_rate if train_mode else 0.0
    if rate > 0.0 and rng is None:
        raise ValueError("train-mode forward with dropout needs an rng")
    z1 = e @ model.w1.T + model.b1
    a1 = np.maximum(z1, 0.0)
    if rate > 0.0:
        mask1 = (rng.random(a1.shape) >= rate) / (1.0 - rate)
        a1 = a1 * mask1
    else:
        mask1 = None
    z2 = a1 @ model.w2.T + model.b2
    a2 = np.maximum(z2, 0.0)
    if rate > 0.0:
        mask2 = (rng.random(a2.shape) >= rate) / (1.0 - rate)
        a2 = a2 * mask2
    else:
        mask2 = None
    z3 = (a2 @ model.w3.T + model.b3)[:, 0]
    x = np.clip(_sigmoid(z3), _SCORE_MARGIN, 1.0 - _SCORE_MARGIN)
    cache = {"e": e, "z1": z1, "a1": a1, "mask1": mask1, "z2": z2, "a2": a2, "mask2": mask2, "x": x}
    return x, cache


def forward(model: ClassifierModel, encodings, train_mode: bool = False, rng=None):
    """Score encodings with the MLP; scalar in (0, 1) per input.

    Dropout (inverted scaling) is applied after each ReLU only in train
    mode; inference is deterministic.
    """
    e, single = _as_batch(encodings, model.input_dim)
    x, _ = _forward_cached(model, e, train_mode, rng)
    return float(x[0]) if single else x


def bce_loss(x, y):
    """Binary cross-entropy -[y log x + (1-y) log(1-x)], x clamped to [1e-7, 1-1e-7]."""
    x = np.clip(np.asarray(x, dtype=np.float64), _LOSS_CLAMP, 1.0 - _LOSS_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    out = -(y * np.log(x) + (1.0 - y) * np.log1p(-x))
    return float(out) if out.ndim == 0 else out


def loss_and_gradients(
    model: ClassifierModel, encodings, labels, train_mode: bool = False, rng=None
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean batch BCE loss and its gradients w.r.t. every parameter.

    The backward pass reuses the dropout masks drawn by its own forward
    pass, so one call is one consistent stochastic step.
    """
    e, _ = _as_batch(encodings, model.input_dim)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.shape[0] != e.shape[0]:
        raise ValueError(f"batch size mismatch: {e.shape[0]} encodings vs {y.shape[0]} labels")
    n = e.shape[0]
    x, cache = _forward_cached(model, e, train_mode, rng)
    loss = float(np.mean(bce_loss(x, y)))

    dz3 = (x - y)[:, None] / n  # (N, 1); sigmoid+BCE gradient
    g_w3 = dz3.T @ cache["a2"]
    g_b3 = dz3.sum(axis=0)
    da2 = dz3 @ model.w3
    if cache["mask2"] is not None:
        da2 = da2 * cache["mask2"]
    dz2 = da2 * (cache["z2"] > 0.0)
    g_w2 = dz2.T @ cache["a1"]
    g_b2 = dz2.sum(axis=0)
    da1 = dz2 @ model.w2
    if cache["mask1"] is not None:
        da1 = da1 * cache["mask1"]
    dz1 = da1 * (cache["z1"] > 0.0)
    g_w1 = dz1.T @ e
    g_b1 = dz1.sum(axis=0)
    grads = {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2, "w3": g_w3, "b3": g_b3}
    return loss, grads


def backward(model: ClassifierModel, encodings, labels, train_mode: bool = False, rng=None):
    """Mean-over-batch BCE gradients (runs the paired forward internally)."""
    return loss_and_gradients(model, encodings, labels, train_mode, rng)[1]


@dataclass
class OptimizerState:
    """Adam accumulators; shapes mirror the model parameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(
    model: ClassifierModel, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
) -> OptimizerState:
    zeros = {k: np.zeros_like(p) for k, p in model.parameters().items()}
    return OptimizerState(
        m=zeros, v={k: np.zeros_like(p) for k, p in model.parameters().items()},
        step=0, beta1=beta1, beta2=beta2, eps=eps,
    )


def adam_step(model: ClassifierModel, state: OptimizerState, grads: dict, lr: float) -> None:
    """One bias-corrected Adam update, applied to the model in place."""
    params = model.parameters()
    if set(grads) != set(params):
        raise ValueError("gradient keys do not match model parameters")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {k}: {g.shape} vs {p.shape}")
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_f1: float


@dataclass
class TrainResult:
    model: ClassifierModel
    best_epoch: int
    best_val_f1: float
    history: list[EpochStats] = field(default_factory=list)


def train(
    train_pairs: tuple[np.ndarray, np.ndarray],
    config: TrainConfig,
    validate_fn,
    *,
    initial_model: ClassifierModel | None = None,
    encoding_mode: str = "concat",
    gem_p: float = 3.0,
) -> TrainResult:
    """Early-stopped mini-batch training.

    ``train_pairs`` is (encodings (N, D), labels (N,)).  After every epoch
    ``validate_fn(model)`` reports the validation F1 at the operating
    threshold (normally fused with the detector scores, see
    ``evaluate.make_validation_scorer``); training stops once it fails to
    improve for ``patience_epochs`` consecutive epochs, and the model of
    the best epoch is returned.
    """
    encodings = np.asarray(train_pairs[0], dtype=np.float64)
    labels = np.asarray(train_pairs[1], dtype=np.float64).reshape(-1)
    if encodings.ndim != 2 or encodings.shape[0] == 0:
        raise ValueError("empty or malformed training set")
    if labels.shape[0] != encodings.shape[0]:
        raise ValueError("training encodings and labels disagree in length")

    if initial_model is None:
        model = init_model(
            encodings.shape[1],
            config.hidden1,
            config.hidden2,
            config.seed,
            encoding_mode=encoding_mode,
            gem_p=gem_p,
            dropout_rate=config.dropout,
        )
    else:
        model = initial_model.copy()
        if model.input_dim != encodings.shape[1]:
            raise ValueError("initial model input dim does not match the training encodings")

    rng = np.random.default_rng(config.seed)
    opt = init_optimizer(model, config.beta1, config.beta2, config.adam_eps)
    n = encodings.shape[0]

    best_model = model.copy()
    best_f1 = -np.inf
    best_epoch = 0
    stale = 0
    history: list[EpochStats] = []

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = loss_and_gradients(
                model, encodings[idx], labels[idx], train_mode=True, rng=rng
            )
            adam_step(model, opt, grads, config.learning_rate)
            loss_sum += loss * idx.size
        train_loss = loss_sum / n

        val_f1 = float(validate_fn(model))
        history.append(EpochStats(epoch=epoch, train_loss=train_loss, val_f1=val_f1))
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_epoch = epoch
            best_model = model.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience_epochs:
                break

    return TrainResult(model=best_model, best_epoch=best_epoch, best_val_f1=best_f1, history=history)
