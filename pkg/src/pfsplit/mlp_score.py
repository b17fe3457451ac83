"""From-scratch MLP noise predictor trained with Adam.

The network maps (x, t) -> predicted noise, with t appended as one raw
input coordinate. The training loss is the mean per-dimension squared
error against the forward-process noise; its achievable minimum for
Gaussian data is computed by optimal_loss_oracle, since the conditional
noise variance is available in closed form.

Everything is plain numpy: forward, backprop, Adam, and the exponential
learning-rate decay are spelled out so training is bit-reproducible given
(seed, config).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.integrate import quad
from scipy.special import erf

from .errors import ConfigError, NumericError
from .schedules import NoiseSchedule, LinearBetaSchedule, eval_schedule
from .score_fields import GaussianData, ScoreField

__all__ = [
    "MLPParams",
    "TrainConfig",
    "LossReport",
    "MLPScoreField",
    "ACTIVATION",
    "ADAM_BETA1",
    "ADAM_BETA2",
    "ADAM_EPS",
    "init_params",
    "mlp_forward",
    "loss_and_grads",
    "train_noise_predictor",
    "optimal_loss_oracle",
    "save_checkpoint",
    "load_checkpoint",
]

ACTIVATION = "gelu"
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_CHECKPOINT_TAG = "pfsplit-mlp-v1"

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gelu(z: np.ndarray) -> np.ndarray:
    return 0.5 * z * (1.0 + erf(z * _INV_SQRT2))


def _gelu_grad(z: np.ndarray) -> np.ndarray:
    phi = np.exp(-0.5 * z * z) * _INV_SQRT2PI
    return 0.5 * (1.0 + erf(z * _INV_SQRT2)) + z * phi


@dataclass(eq=False)
class MLPParams:
    """Layer sizes run input (d+1) -> hidden widths -> output d; weights are
    (n_in, n_out) matrices applied as x @ W + b."""

    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = ACTIVATION

    def __post_init__(self) -> None:
        if len(self.layer_sizes) < 2:
            raise ConfigError("need at least input and output layer sizes")
        if self.activation != ACTIVATION:
            raise ConfigError(f"unsupported activation {self.activation!r}")
        for arr in self.weights + self.biases:
            if not np.all(np.isfinite(arr)):
                raise NumericError("non-finite network parameters")

    @property
    def dim(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "MLPParams":
        return MLPParams(self.layer_sizes, [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.activation)


@dataclass(frozen=True)
class TrainConfig:
    n_train: int = 50_000
    n_iters: int = 15_000
    lr_start: float = 1e-5
    lr_end: float = 1e-6
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self) -> None:
        if not (self.lr_start >= self.lr_end > 0.0):
            raise ConfigError(f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if min(self.n_train, self.batch_size) <= 0 or self.n_iters < 0:
            raise ConfigError("n_train and batch_size must be positive, n_iters >= 0")

    def to_dict(self) -> dict:
        return {
            "n_train": self.n_train, "n_iters": self.n_iters,
            "lr_start": self.lr_start, "lr_end": self.lr_end,
            "batch_size": self.batch_size, "seed": self.seed,
        }


@dataclass(eq=False)
class LossReport:
    """Per-iteration minibatch losses plus the quantities worth comparing:
    the full-training-set loss, a fresh-sample loss, and the achievable
    minimum for the data/schedule pair."""

    losses: np.ndarray
    final_loss: float
    final_loss_fresh: float
    optimal_loss: float
    activation: str = ACTIVATION
    optimizer: dict = dc_field(default_factory=lambda: {
        "name": "adam", "beta1": ADAM_BETA1, "beta2": ADAM_BETA2, "eps": ADAM_EPS,
        "lr_decay": "exponential"})


def init_params(layer_sizes, rng: np.random.Generator) -> MLPParams:
    """Fan-in-scaled normal weights, zero biases."""
    sizes = tuple(int(s) for s in layer_sizes)
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.standard_normal((n_in, n_out)) / np.sqrt(n_in))
        biases.append(np.zeros(n_out))
    return MLPParams(layer_sizes=sizes, weights=weights, biases=biases)


def _stack_inputs(params: MLPParams, x: np.ndarray, t) -> tuple[np.ndarray, tuple]:
    x = np.asarray(x, dtype=float)
    orig_shape = x.shape
    x2d = np.atleast_2d(x)
    if x2d.shape[1] != params.layer_sizes[0] - 1:
        raise ConfigError(
            f"input dim {x2d.shape[1]} does not match network input size "
            f"{params.layer_sizes[0]} (= d + 1 with time appended)")
    tcol = np.broadcast_to(np.asarray(t, dtype=float), (x2d.shape[0],))
    return np.concatenate([x2d, tcol[:, None]], axis=1), orig_shape


def mlp_forward(params: MLPParams, x: np.ndarray, t) -> np.ndarray:
    """Noise prediction for x of shape (d,) or (n, d); t scalar or (n,)."""
    z, orig_shape = _stack_inputs(params, x, t)
    h = z
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i != last:
            h = _gelu(h)
    return h.reshape(orig_shape)


def loss_and_grads(params: MLPParams, x: np.ndarray, t: np.ndarray,
                   target: np.ndarray):
    """Mean per-dimension squared error and its parameter gradients."""
    z, _ = _stack_inputs(params, x, t)
    last = len(params.weights) - 1
    hs = [z]          # layer inputs
    pre = []          # pre-activations of hidden layers
    h = z
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ w + b
        if i != last:
            pre.append(a)
            h = _gelu(a)
            hs.append(h)
        else:
            h = a
    resid = h - np.atleast_2d(target)
    loss = float(np.mean(resid * resid))
    g = (2.0 / resid.size) * resid
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    for i in range(last, -1, -1):
        grads_w[i] = hs[i].T @ g
        grads_b[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ params.weights[i].T) * _gelu_grad(pre[i - 1])
    return loss, grads_w, grads_b


def _full_loss(params: MLPParams, x: np.ndarray, t: np.ndarray,
               target: np.ndarray, chunk: int = 8192) -> float:
    total = 0.0
    n = x.shape[0]
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        pred = mlp_forward(params, x[lo:hi], t[lo:hi])
        total += float(np.sum((pred - target[lo:hi]) ** 2))
    return total / (n * target.shape[1])


def train_noise_predictor(cfg: TrainConfig, hidden, data: GaussianData,
                          sched: NoiseSchedule) -> tuple[MLPParams, LossReport]:
    """Train the noise predictor on freshly sampled forward-process triples.

    hidden is the sequence of hidden-layer widths, e.g. (200, 200). Training
    draws (x0, t, xi), forms x_t = alpha x0 + sigma xi, and minimizes the
    per-dimension squared error of the noise prediction with Adam under an
    exponential learning-rate decay. Aborts with NumericError if the loss
    becomes non-finite or exceeds 10x its initial value.
    """
    hidden = tuple(int(w) for w in hidden)
    if any(w <= 0 for w in hidden):
        raise ConfigError(f"hidden widths must be positive, got {hidden}")
    d = data.dim
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))

    x0 = data.sample(cfg.n_train, rng)
    ts = rng.uniform(0.0, 1.0, cfg.n_train)
    xi = rng.standard_normal((cfg.n_train, d))
    alphas, sigmas = _schedule_arrays(sched, ts)
    xt = alphas[:, None] * x0 + sigmas[:, None] * xi

    params = init_params((d + 1, *hidden, d), rng)
    m_w = [np.zeros_like(w) for w in params.weights]
    v_w = [np.zeros_like(w) for w in params.weights]
    m_b = [np.zeros_like(b) for b in params.biases]
    v_b = [np.zeros_like(b) for b in params.biases]

    losses = np.empty(cfg.n_iters)
    initial_loss = None
    decay = cfg.lr_end / cfg.lr_start
    for k in range(cfg.n_iters):
        lr = cfg.lr_start * decay ** (k / cfg.n_iters)
        idx = rng.integers(0, cfg.n_train, cfg.batch_size)
        loss, gw, gb = loss_and_grads(params, xt[idx], ts[idx], xi[idx])
        losses[k] = loss
        if initial_loss is None:
            initial_loss = loss
        if not np.isfinite(loss) or loss > 10.0 * initial_loss:
            raise NumericError(
                f"training diverged at iteration {k}: loss {loss:.4g} "
                f"(initial {initial_loss:.4g})")
        step = k + 1
        bc1 = 1.0 - ADAM_BETA1 ** step
        bc2 = 1.0 - ADAM_BETA2 ** step
        for i in range(len(params.weights)):
            m_w[i] = ADAM_BETA1 * m_w[i] + (1.0 - ADAM_BETA1) * gw[i]
            v_w[i] = ADAM_BETA2 * v_w[i] + (1.0 - ADAM_BETA2) * gw[i] ** 2
            params.weights[i] -= lr * (m_w[i] / bc1) / (np.sqrt(v_w[i] / bc2) + ADAM_EPS)
            m_b[i] = ADAM_BETA1 * m_b[i] + (1.0 - ADAM_BETA1) * gb[i]
            v_b[i] = ADAM_BETA2 * v_b[i] + (1.0 - ADAM_BETA2) * gb[i] ** 2
            params.biases[i] -= lr * (m_b[i] / bc1) / (np.sqrt(v_b[i] / bc2) + ADAM_EPS)

    final_loss = _full_loss(params, xt, ts, xi)
    x0f = data.sample(cfg.n_train, rng)
    tsf = rng.uniform(0.0, 1.0, cfg.n_train)
    xif = rng.standard_normal((cfg.n_train, d))
    af, sf = _schedule_arrays(sched, tsf)
    final_fresh = _full_loss(params, af[:, None] * x0f + sf[:, None] * xif, tsf, xif)

    report = LossReport(
        losses=losses,
        final_loss=final_loss,
        final_loss_fresh=final_fresh,
        optimal_loss=optimal_loss_oracle(data, sched),
    )
    return params, report


def _schedule_arrays(sched: NoiseSchedule, ts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(sched, LinearBetaSchedule):
        la = -0.5 * sched.beta0 * ts - 0.25 * (sched.beta1 - sched.beta0) * ts * ts
        alphas = np.exp(la)
        sigmas = np.sqrt(-np.expm1(2.0 * la))
        return alphas, sigmas
    evs = [sched.eval(float(t)) for t in ts]
    return np.array([e.alpha for e in evs]), np.array([e.sigma for e in evs])


def optimal_loss_oracle(data: GaussianData, sched: NoiseSchedule) -> float:
    """Achievable minimum of the noise-prediction loss.

    Conditioned on (x_t, t) the noise is still Gaussian with covariance
    I - sigma^2 (alpha^2 Sigma + sigma^2 I)^-1, so the minimum of the
    per-dimension loss is the time average of its normalized trace,
    integrated by adaptive quadrature.
    """
    lam = np.linalg.eigvalsh(data.sigma_mat)
    d = data.dim

    def integrand(t: float) -> float:
        ev = eval_schedule(sched, t)
        a2 = ev.alpha * ev.alpha
        s2 = ev.sigma * ev.sigma
        return 1.0 - (s2 / d) * float(np.sum(1.0 / (a2 * lam + s2)))

    val, _ = quad(integrand, 0.0, 1.0, epsabs=1e-9, limit=200)
    return float(val)


class MLPScoreField(ScoreField):
    """Learned noise predictor exposed through the ScoreField interface.

    The score view divides by sigma(t) and is therefore unusable at
    sigma = 0; samplers never evaluate the drift exactly there.
    """

    kind = "learned-mlp"

    def __init__(self, params: MLPParams, sched: NoiseSchedule) -> None:
        self.params = params
        self.sched = sched

    @property
    def dim(self) -> int:
        return self.params.dim

    def noise(self, x: np.ndarray, t: float) -> np.ndarray:
        return mlp_forward(self.params, x, t)

    def score(self, x: np.ndarray, t: float) -> np.ndarray:
        sigma = eval_schedule(self.sched, t).sigma
        return -self.noise(x, t) / sigma


def save_checkpoint(path, params: MLPParams, train_config: TrainConfig | None = None) -> None:
    """Self-describing container: format tag, layer sizes, activation id,
    row-major weights/biases, and the training config."""
    payload = {
        "format": np.array(_CHECKPOINT_TAG),
        "layer_sizes": np.array(params.layer_sizes, dtype=np.int64),
        "activation": np.array(params.activation),
        "train_config": np.array(json.dumps(train_config.to_dict() if train_config else None)),
    }
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        payload[f"w{i}"] = np.ascontiguousarray(w)
        payload[f"b{i}"] = np.ascontiguousarray(b)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> tuple[MLPParams, dict | None]:
    with np.load(path, allow_pickle=False) as npz:
        tag = str(npz["format"])
        if tag != _CHECKPOINT_TAG:
            raise ConfigError(f"unrecognized checkpoint format {tag!r} in {path}")
        sizes = tuple(int(s) for s in npz["layer_sizes"])
        weights = [np.array(npz[f"w{i}"]) for i in range(len(sizes) - 1)]
        biases = [np.array(npz[f"b{i}"]) for i in range(len(sizes) - 1)]
        params = MLPParams(layer_sizes=sizes, weights=weights, biases=biases,
                           activation=str(npz["activation"]))
        cfg = json.loads(str(npz["train_config"]))
    return params, cfg
