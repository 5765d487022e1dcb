"""Dense network mapping (whitened field coefficients, controls) to
reduced state coefficients, with exact control Jacobians.

Everything is plain numpy. The control Jacobian of the network is
propagated in forward mode (one tangent per control), and the gradient
of the Jacobian-matching loss term is obtained by a reverse sweep over
the augmented primal+tangent graph, so memory scales with
(batch, d_Z, width) rather than with the full state dimension.

Array conventions: activations are (batch, width); tangents are
(batch, d_Z, width); layer l maps width n_in -> n_out with weight
W (n_out, n_in) and bias b (n_out,). The output layer is linear.
"""

from dataclasses import dataclass, field

import numpy as np

from . import rng


class TrainingDivergedError(Exception):
    def __init__(self, message, epoch=None, batch_index=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index


# ---------------------------------------------------------------------------
# activations


class _Elementwise:
    def __init__(self, f, d1, d2):
        self.f, self.d1, self.d2 = f, d1, d2


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_ACTIVATIONS = {
    "tanh": _Elementwise(
        np.tanh,
        lambda x: 1.0 - np.tanh(x) ** 2,
        lambda x: -2.0 * np.tanh(x) * (1.0 - np.tanh(x) ** 2),
    ),
    "softplus": _Elementwise(
        lambda x: np.logaddexp(0.0, x),
        _sigmoid,
        lambda x: _sigmoid(x) * (1.0 - _sigmoid(x)),
    ),
    "sigmoid": _Elementwise(
        _sigmoid,
        lambda x: _sigmoid(x) * (1.0 - _sigmoid(x)),
        lambda x: _sigmoid(x) * (1.0 - _sigmoid(x)) * (1.0 - 2.0 * _sigmoid(x)),
    ),
    "identity": _Elementwise(
        lambda x: x,
        lambda x: np.ones_like(x),
        lambda x: np.zeros_like(x),
    ),
}

# per-layer vector softmax, selectable for fidelity experiments
_SOFTMAX = "softmax"


@dataclass(frozen=True)
class NetworkSpec:
    r_m: int
    d_z: int
    r_u: int
    hidden: tuple
    activation: str = "tanh"

    def __post_init__(self):
        if self.r_m < 1 or self.d_z < 1 or self.r_u < 1:
            raise ValueError("all widths must be positive")
        if any(w < 1 for w in self.hidden):
            raise ValueError("hidden widths must be positive")
        if self.activation not in _ACTIVATIONS and self.activation != _SOFTMAX:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))

    @property
    def input_width(self) -> int:
        return self.r_m + self.d_z

    @property
    def layer_widths(self) -> tuple:
        return (self.input_width,) + self.hidden + (self.r_u,)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1600
    batch_size: int = 32
    lr: float = 1e-3
    lr_drop_factor: float = 0.25
    lr_drop_epoch: int = 800
    jacobian_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.jacobian_weight < 0:
            raise ValueError("jacobian weight must be >= 0")


@dataclass
class TrainingDataset:
    m_r: np.ndarray            # (n, r_M)
    z: np.ndarray              # (n, d_Z)
    u_r: np.ndarray            # (n, r_U)
    j_r: np.ndarray = None     # (n, r_U, d_Z) or None
    metadata: dict = field(default_factory=dict)
    state_norm_sq: np.ndarray = None  # (n,) ||u||_M^2 per sample, optional
    trunc_norm_sq: np.ndarray = None  # (n,) POD truncation residual^2, optional

    def __post_init__(self):
        n = self.m_r.shape[0]
        if self.z.shape[0] != n or self.u_r.shape[0] != n:
            raise ValueError("inconsistent record counts")
        if self.j_r is not None and self.j_r.shape != (n, self.u_r.shape[1], self.z.shape[1]):
            raise ValueError("control Jacobian data has wrong shape")

    @property
    def n(self) -> int:
        return self.m_r.shape[0]

    @property
    def has_jacobian(self) -> bool:
        return self.j_r is not None

    def subset(self, idx) -> "TrainingDataset":
        return TrainingDataset(
            m_r=self.m_r[idx], z=self.z[idx], u_r=self.u_r[idx],
            j_r=None if self.j_r is None else self.j_r[idx],
            metadata=dict(self.metadata),
            state_norm_sq=None if self.state_norm_sq is None else self.state_norm_sq[idx],
            trunc_norm_sq=None if self.trunc_norm_sq is None else self.trunc_norm_sq[idx],
        )


@dataclass
class SurrogateModel:
    spec: NetworkSpec
    weights: list                # W per layer, (n_out, n_in)
    biases: list                 # b per layer, (n_out,)
    input_scale: np.ndarray      # (r_M,) whitening of the field coefficients
    output_mean: np.ndarray      # (r_U,)
    output_std: np.ndarray       # (r_U,)
    basis_ids: dict = field(default_factory=dict)

    # -- primal -------------------------------------------------------------

    def _scale_inputs(self, m_r, z):
        X = np.concatenate([m_r * self.input_scale, z], axis=-1)
        return np.atleast_2d(X)

    def _forward_scaled(self, X):
        """Return per-layer caches (A_in, S, A_out); output layer is linear."""
        act = self.spec.activation
        caches = []
        A = X
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            S = A @ W.T + b
            if l == last:
                A_out = S
            elif act == _SOFTMAX:
                E = np.exp(S - S.max(axis=1, keepdims=True))
                A_out = E / E.sum(axis=1, keepdims=True)
            else:
                A_out = _ACTIVATIONS[act].f(S)
            caches.append((A, S, A_out))
            A = A_out
        return caches

    def forward(self, m_r: np.ndarray, z: np.ndarray) -> np.ndarray:
        return self.forward_batch(m_r[None, :], z[None, :])[0]

    def forward_batch(self, m_r: np.ndarray, z: np.ndarray) -> np.ndarray:
        if m_r.shape[-1] != self.spec.r_m or z.shape[-1] != self.spec.d_z:
            raise ValueError("input widths do not match the network spec")
        caches = self._forward_scaled(self._scale_inputs(m_r, z))
        return self.output_mean + self.output_std * caches[-1][2]

    # -- forward-mode control Jacobian ---------------------------------------

    def _tangent_seed(self, batch: int) -> np.ndarray:
        T = np.zeros((batch, self.spec.d_z, self.spec.input_width))
        for k in range(self.spec.d_z):
            T[:, k, self.spec.r_m + k] = 1.0
        return T

    def _forward_with_tangents(self, X):
        """Caches (A_in, S, A_out, T_in, U, T_out, dot) per layer."""
        act = self.spec.activation
        caches = []
        A = X
        T = self._tangent_seed(X.shape[0])
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            S = A @ W.T + b
            U = T @ W.T
            dot = None
            if l == last:
                A_out, T_out = S, U
            elif act == _SOFTMAX:
                E = np.exp(S - S.max(axis=1, keepdims=True))
                A_out = E / E.sum(axis=1, keepdims=True)
                dot = np.einsum("bn,bkn->bk", A_out, U)
                T_out = A_out[:, None, :] * (U - dot[:, :, None])
            else:
                A_out = _ACTIVATIONS[act].f(S)
                T_out = _ACTIVATIONS[act].d1(S)[:, None, :] * U
            caches.append((A, S, A_out, T, U, T_out, dot))
            A, T = A_out, T_out
        return caches

    def z_jacobian(self, m_r: np.ndarray, z: np.ndarray) -> np.ndarray:
        return self.z_jacobian_batch(m_r[None, :], z[None, :])[0]

    def z_jacobian_batch(self, m_r: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Exact d(output)/d(controls), shape (batch, r_U, d_Z)."""
        caches = self._forward_with_tangents(self._scale_inputs(m_r, z))
        T = caches[-1][5]  # (batch, d_Z, r_U), scaled frame
        return self.output_std[None, :, None] * T.transpose(0, 2, 1)

    # -- parameter utilities --------------------------------------------------

    def copy_params(self):
        return [w.copy() for w in self.weights], [b.copy() for b in self.biases]


def init_model(spec: NetworkSpec, seed: int, input_scale=None,
               output_mean=None, output_std=None) -> SurrogateModel:
    """Glorot-uniform weights, zero biases, deterministic per seed."""
    g = rng.substream(seed, rng.STREAM_NET_INIT)
    weights, biases = [], []
    widths = spec.layer_widths
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        lim = np.sqrt(6.0 / (n_in + n_out))
        weights.append(g.uniform(-lim, lim, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return SurrogateModel(
        spec=spec, weights=weights, biases=biases,
        input_scale=np.ones(spec.r_m) if input_scale is None else np.asarray(input_scale, float),
        output_mean=np.zeros(spec.r_u) if output_mean is None else np.asarray(output_mean, float),
        output_std=np.ones(spec.r_u) if output_std is None else np.asarray(output_std, float),
    )


# ---------------------------------------------------------------------------
# loss and exact weight gradient


def loss_and_grad(model: SurrogateModel, batch: TrainingDataset,
                  jacobian_weight: float):
    """Batch-mean squared state error plus weighted squared Jacobian error.

    Both terms live in the output-scaled frame. Returns the loss and its
    exact gradient with respect to all weights and biases, as two lists
    shaped like model.weights / model.biases.
    """
    lam = float(jacobian_weight)
    if lam > 0 and not batch.has_jacobian:
        raise ValueError("jacobian_weight > 0 requires Jacobian data in the batch")
    B = batch.n
    X = model._scale_inputs(batch.m_r, batch.z)
    Y = (batch.u_r - model.output_mean) / model.output_std

    act = model.spec.activation
    nlayers = len(model.weights)
    gW = [np.zeros_like(w) for w in model.weights]
    gb = [np.zeros_like(b) for b in model.biases]

    if lam == 0.0:
        caches = model._forward_scaled(X)
        E = caches[-1][2] - Y
        loss = float(np.sum(E * E)) / B
        GA = (2.0 / B) * E
        for l in range(nlayers - 1, -1, -1):
            A_in, S, A_out = caches[l]
            if l == nlayers - 1:
                GS = GA
            elif act == _SOFTMAX:
                gs = np.einsum("bn,bn->b", A_out, GA)
                GS = A_out * (GA - gs[:, None])
            else:
                GS = _ACTIVATIONS[act].d1(S) * GA
            gW[l] = GS.T @ A_in
            gb[l] = GS.sum(axis=0)
            if l > 0:
                GA = GS @ model.weights[l]
        return loss, gW, gb

    # scaled-frame Jacobian targets, tangent layout (batch, d_Z, r_U)
    Jt = batch.j_r.transpose(0, 2, 1) / model.output_std[None, None, :]
    caches = model._forward_with_tangents(X)
    E = caches[-1][2] - Y
    ET = caches[-1][5] - Jt
    loss = (float(np.sum(E * E)) + lam * float(np.sum(ET * ET))) / B

    GA = (2.0 / B) * E
    GT = (2.0 * lam / B) * ET
    for l in range(nlayers - 1, -1, -1):
        A_in, S, A_out, T_in, U, T_out, dot = caches[l]
        if l == nlayers - 1:
            GS, GU = GA, GT
        elif act == _SOFTMAX:
            gdot = np.einsum("bn,bkn->bk", A_out, GT)
            GU = A_out[:, None, :] * (GT - gdot[:, :, None])
            GA = GA + np.einsum("bkn,bkn->bn", GT, U - dot[:, :, None]) \
                 - np.einsum("bk,bkn->bn", gdot, U)
            gs = np.einsum("bn,bn->b", A_out, GA)
            GS = A_out * (GA - gs[:, None])
        else:
            d1 = _ACTIVATIONS[act].d1(S)
            GU = d1[:, None, :] * GT
            GS = d1 * GA + _ACTIVATIONS[act].d2(S) * np.einsum("bkn,bkn->bn", U, GT)
        n_out, n_in = model.weights[l].shape
        gW[l] = GS.T @ A_in + (
            GU.reshape(-1, n_out).T @ T_in.reshape(-1, n_in)
        )
        gb[l] = GS.sum(axis=0)
        if l > 0:
            GA = GS @ model.weights[l]
            GT = GU @ model.weights[l]
    return loss, gW, gb


# ---------------------------------------------------------------------------
# training


def train(dataset: TrainingDataset, spec: NetworkSpec, config: TrainConfig,
          input_whitening: np.ndarray = None):
    """Adam training; deterministic per config.seed. Returns (model, history).

    The field-coefficient inputs are whitened by `input_whitening` (the
    reciprocal root covariance eigenvalues); when omitted the factors are
    estimated from the per-column standard deviation of the data. Outputs
    are centered per component and scaled by one global standard
    deviation, which keeps the loss proportional to the plain reduced-
    frame squared error (per-component standardization blows up the
    weight of the noise-like trailing basis directions and measurably
    hurts generalization).
    """
    if dataset.m_r.shape[1] != spec.r_m or dataset.z.shape[1] != spec.d_z \
            or dataset.u_r.shape[1] != spec.r_u:
        raise ValueError("dataset dimensions do not match the network spec")
    if config.jacobian_weight > 0 and not dataset.has_jacobian:
        raise ValueError("jacobian-informed training requires Jacobian data")

    if input_whitening is None:
        col_std = dataset.m_r.std(axis=0)
        input_whitening = 1.0 / np.where(col_std > 1e-12, col_std, 1.0)
    out_mean = dataset.u_r.mean(axis=0)
    global_std = (dataset.u_r - out_mean).std()
    out_std = np.full(spec.r_u, global_std if global_std > 1e-12 else 1.0)

    model = init_model(spec, config.seed, input_scale=input_whitening,
                       output_mean=out_mean, output_std=out_std)

    mW = [np.zeros_like(w) for w in model.weights]
    vW = [np.zeros_like(w) for w in model.weights]
    mB = [np.zeros_like(b) for b in model.biases]
    vB = [np.zeros_like(b) for b in model.biases]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    history = []

    n = dataset.n
    for epoch in range(config.epochs):
        lr = config.lr * (config.lr_drop_factor if epoch >= config.lr_drop_epoch else 1.0)
        order = rng.substream(config.seed, rng.STREAM_NET_SHUFFLE, epoch).permutation(n)
        epoch_loss = 0.0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            loss, gW, gb = loss_and_grad(model, dataset.subset(idx),
                                         config.jacobian_weight)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"nonfinite loss at epoch {epoch}, batch {bi}",
                    epoch=epoch, batch_index=bi,
                )
            epoch_loss += loss * idx.size
            step += 1
            c1 = 1.0 - beta1 ** step
            c2 = 1.0 - beta2 ** step
            for l in range(len(model.weights)):
                mW[l] = beta1 * mW[l] + (1 - beta1) * gW[l]
                vW[l] = beta2 * vW[l] + (1 - beta2) * gW[l] ** 2
                model.weights[l] -= lr * (mW[l] / c1) / (np.sqrt(vW[l] / c2) + eps)
                mB[l] = beta1 * mB[l] + (1 - beta1) * gb[l]
                vB[l] = beta2 * vB[l] + (1 - beta2) * gb[l] ** 2
                model.biases[l] -= lr * (mB[l] / c1) / (np.sqrt(vB[l] / c2) + eps)
        history.append(epoch_loss / n)
    return model, history


# ---------------------------------------------------------------------------
# error metrics


@dataclass(frozen=True)
class SurrogateErrors:
    state_rel_l2: float     # full-space relative M-norm error (mean over set)
    jac_rel_hs: float       # mean relative Frobenius error of the Jacobian
    reduced_rel_l2: float   # reduced-frame part alone (lower bound on state)


def evaluate_errors(model: SurrogateModel, test: TrainingDataset) -> SurrogateErrors:
    """Mean relative state and Jacobian errors over a test set.

    The reduced-frame error is augmented by the per-sample POD truncation
    residual recorded with the dataset, so state_rel_l2 is the relative
    error of the lifted prediction against the true full state.
    """
    if test.n == 0:
        raise ValueError("empty test set")
    if not test.has_jacobian:
        raise ValueError("test set must carry Jacobian data")
    if test.state_norm_sq is None or test.trunc_norm_sq is None:
        raise ValueError("test set must carry per-sample state/truncation norms")

    pred = model.forward_batch(test.m_r, test.z)
    red_sq = np.sum((pred - test.u_r) ** 2, axis=1)
    denom = np.sqrt(np.maximum(test.state_norm_sq, 1e-300))
    state_rel = np.sqrt(red_sq + test.trunc_norm_sq) / denom
    reduced_rel = np.sqrt(red_sq) / denom

    jac = model.z_jacobian_batch(test.m_r, test.z)
    num = np.linalg.norm((jac - test.j_r).reshape(test.n, -1), axis=1)
    den = np.linalg.norm(test.j_r.reshape(test.n, -1), axis=1)
    jac_rel = num / np.maximum(den, 1e-300)

    return SurrogateErrors(
        state_rel_l2=float(state_rel.mean()),
        jac_rel_hs=float(jac_rel.mean()),
        reduced_rel_l2=float(reduced_rel.mean()),
    )
