"""Neural building blocks on top of :mod:`vbones.autodiff`."""

from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .formats import read_checkpoint, write_checkpoint
from .mesh import adjacency_to_edges

logger = logging.getLogger(__name__)

ROT6D_EPS = 1e-6


class ParameterSet:
    """Ordered, uniquely named trainable tensors with seeded initialisation."""

    def __init__(self, seed: int = 0):
        self._rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}
        self.specs: dict[str, str] = {}
        self.trainable: dict[str, bool] = {}

    def add(self, name: str, shape: tuple, init: str = "uniform", fan_in: int | None = None,
            trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "uniform":
            bound = 1.0 / np.sqrt(fan_in or shape[0])
            data = self._rng.uniform(-bound, bound, shape)
        elif init == "orthogonal":
            data = _orthogonal_blocks(self._rng, shape)
        elif init == "identity":
            data = np.eye(shape[0], shape[1])
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=trainable, name=name)
        self._params[name] = t
        self.specs[name] = init
        self.trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def trainable_items(self):
        return [(n, t) for n, t in self._params.items() if self.trainable[n]]

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, arr in state.items():
            if n not in self._params:
                raise KeyError(f"unknown parameter {n!r} in checkpoint")
            if self._params[n].shape != np.shape(arr):
                raise ValueError(f"{n}: shape {np.shape(arr)} != {self._params[n].shape}")
            self._params[n].data = np.array(arr, dtype=np.float64)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.data.size for t in self._params.values())


def _orthogonal_blocks(rng, shape):
    """Orthogonal square blocks tiled along the last axis."""
    rows, cols = shape
    out = np.empty(shape)
    for start in range(0, cols, rows):
        q, r = np.linalg.qr(rng.normal(size=(rows, rows)))
        q *= np.sign(np.diag(r))
        out[:, start:start + rows] = q[:, : min(rows, cols - start)]
    return out


# -- layers --------------------------------------------------------------------


def add_dense(params: ParameterSet, prefix: str, n_in: int, n_out: int) -> None:
    params.add(f"{prefix}.w", (n_in, n_out), "uniform", fan_in=n_in)
    params.add(f"{prefix}.b", (n_out,), "zeros")


def dense(x, params: ParameterSet, prefix: str) -> Tensor:
    return ad.matmul(x, params[f"{prefix}.w"]) + params[f"{prefix}.b"]


def add_mlp(params: ParameterSet, prefix: str, widths: list[int]) -> None:
    for k, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        add_dense(params, f"{prefix}.{k}", a, b)


def mlp(x, params: ParameterSet, prefix: str, layers: int, final_relu: bool = False) -> Tensor:
    """Shared-weight perceptron applied row-wise; ReLU between layers."""
    for k in range(layers):
        x = dense(x, params, f"{prefix}.{k}")
        if k < layers - 1 or final_relu:
            x = ad.relu(x)
    return x


def add_gru(params: ParameterSet, prefix: str, n_in: int, hidden: int) -> None:
    params.add(f"{prefix}.wx", (n_in, 3 * hidden), "uniform", fan_in=n_in)
    params.add(f"{prefix}.wh", (hidden, 2 * hidden), "orthogonal")
    params.add(f"{prefix}.whc", (hidden, hidden), "orthogonal")
    params.add(f"{prefix}.b", (3 * hidden,), "zeros")


def gru_input_projection(x, params: ParameterSet, prefix: str) -> Tensor:
    """The input half of every gate, ``x W_x + b``; can be batched over time."""
    return ad.matmul(x, params[f"{prefix}.wx"]) + params[f"{prefix}.b"]


def gru_cell(x, h, params: ParameterSet, prefix: str, projected=None) -> Tensor:
    """One GRU step.

    z = sigma(W_z [x, h] + b_z), r = sigma(W_r [x, h] + b_r),
    c = tanh(W_c [x, r*h] + b_c), h' = (1 - z) h + z c.

    ``projected`` may carry a precomputed ``gru_input_projection(x)``.
    """
    h = ad.as_tensor(h)
    H = h.shape[-1]
    xp = gru_input_projection(x, params, prefix) if projected is None else projected
    if xp.shape[-1] != 3 * H:
        raise ad.ShapeError(f"gru_cell: input projection {xp.shape} vs hidden {h.shape}")
    hp = ad.matmul(h, params[f"{prefix}.wh"])
    z = ad.sigmoid(xp[..., :H] + hp[..., :H])
    r = ad.sigmoid(xp[..., H:2 * H] + hp[..., H:])
    c = ad.tanh(xp[..., 2 * H:] + ad.matmul(r * h, params[f"{prefix}.whc"]))
    return h + z * (c - h)


class Graph:
    """Directed edge lists for message passing, grouped by receiving node.

    Isolated nodes receive a self loop, so EdgeConv falls back to
    ``MLP(x_i || 0)`` for them.
    """

    def __init__(self, adjacency: list[np.ndarray]):
        src, dst = adjacency_to_edges(adjacency)
        n = len(adjacency)
        iso = np.setdiff1d(np.arange(n), dst)
        if len(iso):
            src = np.concatenate([src, iso])
            dst = np.concatenate([dst, iso])
            order = np.argsort(dst, kind="stable")
            src, dst = src[order], dst[order]
        self.src, self.dst, self.n = src, dst, n

    def batched(self, copies: int) -> "Graph":
        """Block-diagonal replication for evaluating several frames at once."""
        g = object.__new__(Graph)
        off = (np.arange(copies) * self.n)[:, None]
        g.src = (self.src[None] + off).ravel()
        g.dst = (self.dst[None] + off).ravel()
        g.n = self.n * copies
        return g


def edgeconv(x, graph: Graph, params: ParameterSet, prefix: str, layers: int = 1) -> Tensor:
    """h'_i = max over j in N(i) of MLP(x_i || x_j - x_i).

    For a single-layer MLP the max commutes with the ReLU and with the
    x_i-only part of the affine map, so the product with the weights is taken
    per node and only the x_j part is gathered along edges. The result equals
    :func:`edgeconv_direct`.
    """
    x = ad.as_tensor(x)
    if x.shape[0] != graph.n:
        raise ad.ShapeError(f"edgeconv: {x.shape[0]} node rows for a graph of {graph.n} nodes")
    if layers != 1:
        return edgeconv_direct(x, graph, params, prefix, layers)
    w, b = params[f"{prefix}.0.w"], params[f"{prefix}.0.b"]
    F = x.shape[1]
    if w.shape[0] != 2 * F:
        raise ad.ShapeError(f"edgeconv: weights {w.shape} for {F} input features")
    own = ad.matmul(x, w[:F] - w[F:]) + b
    nbr = ad.scatter_max(ad.gather(ad.matmul(x, w[F:]), graph.src), graph.dst, graph.n)
    return ad.relu(own + nbr)


def edgeconv_direct(x, graph: Graph, params: ParameterSet, prefix: str, layers: int = 1) -> Tensor:
    """Edge-level evaluation: run the MLP on every edge, then take the max."""
    x = ad.as_tensor(x)
    xi = ad.gather(x, graph.dst)
    xj = ad.gather(x, graph.src)
    e = ad.concat([xi, xj - xi], axis=-1)
    m = mlp(e, params, prefix, layers, final_relu=True)
    return ad.scatter_max(m, graph.dst, graph.n)


def rotation_from_6d(six) -> Tensor:
    """Gram-Schmidt map from (..., 6) to rotation matrices (..., 3, 3).

    The first three numbers give the first column direction, the last three
    the second column after orthogonalisation. A small multiple of the
    canonical basis is added first so all-zero input maps to the identity.
    """
    six = ad.as_tensor(six)
    if six.shape[-1] != 6:
        raise ad.ShapeError(f"rotation_from_6d: last axis must be 6, got {six.shape}")
    a1 = six[..., 0:3] + np.array([ROT6D_EPS, 0.0, 0.0])
    a2 = six[..., 3:6] + np.array([0.0, ROT6D_EPS, 0.0])
    b1 = a1 / ad.reshape(ad.norm(a1), a1.shape[:-1] + (1,))
    proj = ad.reshape(ad.sum_(b1 * a2, axis=-1), a1.shape[:-1] + (1,))
    u2 = a2 - proj * b1
    b2 = u2 / ad.reshape(ad.norm(u2), a1.shape[:-1] + (1,))
    b3 = ad.cross(b1, b2)
    return ad.stack([b1, b2, b3], axis=-1)


def lbs_operator(skin_model) -> np.ndarray:
    """Constant (V, 4B) matrix turning stacked transforms into skinned vertices."""
    W = skin_model.weights
    P = skin_model.rest_pose
    Ph = np.concatenate([P, np.ones((len(P), 1))], axis=1)
    return (W[:, :, None] * Ph[:, None, :]).reshape(len(W), -1)


def lbs_layer(skin_model, rotations, translations, operator: np.ndarray | None = None) -> Tensor:
    """Differentiable LBS: rotations (T, B, 3, 3), translations (T, B, 3) -> (T, V, 3).

    The rig is constant; gradients reach only the bone transforms.
    """
    rotations, translations = ad.as_tensor(rotations), ad.as_tensor(translations)
    B = skin_model.bone_count
    T = rotations.shape[0]
    if rotations.shape[1:] != (B, 3, 3) or translations.shape != (T, B, 3):
        raise ad.ShapeError(
            f"lbs_layer: rotations {rotations.shape}, translations {translations.shape} "
            f"for {B} bones")
    Q = lbs_operator(skin_model) if operator is None else operator
    M = ad.concat([rotations, ad.reshape(translations, (T, B, 3, 1))], axis=-1)
    Mt = ad.reshape(ad.transpose(M, (0, 1, 3, 2)), (T, 4 * B, 3))
    return ad.matmul(Q, Mt)


# -- optimisation ----------------------------------------------------------------


def adam_step(value, grad, m, v, lr, beta1, beta2, eps, t):
    """One bias-corrected Adam update; returns (value, m, v)."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    mhat = m / (1 - beta1**t)
    vhat = v / (1 - beta2**t)
    return value - lr * mhat / (np.sqrt(vhat) + eps), m, v


class Adam:
    def __init__(self, params: ParameterSet, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.trainable_items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.trainable_items()}
        self.skipped = 0

    def step(self) -> bool:
        """Apply one update from the accumulated grads; skip it on non-finite grads."""
        items = self.params.trainable_items()
        for n, p in items:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                self.skipped += 1
                logger.warning("non-finite gradient in %s; skipping Adam step", n)
                return False
        self.t += 1
        for n, p in items:
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            p.data, self.m[n], self.v[n] = adam_step(
                p.data, g, self.m[n], self.v[n], self.lr, self.beta1, self.beta2, self.eps, self.t)
        return True

    def state(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(float(self.t))}
        for n in self.m:
            out[f"m/{n}"] = self.m[n]
            out[f"v/{n}"] = self.v[n]
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if "t" in state:
            self.t = int(state["t"])
        for n in self.m:
            if f"m/{n}" in state:
                self.m[n] = state[f"m/{n}"].copy()
                self.v[n] = state[f"v/{n}"].copy()


def save_parameters(path, params: ParameterSet, optimizer: Adam | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    arrays = params.state()
    for k, v in (extra or {}).items():
        arrays[f"buffer/{k}"] = np.asarray(v, dtype=np.float64)
    write_checkpoint(path, arrays, optimizer.state() if optimizer else None)


def load_parameters(path, params: ParameterSet, optimizer: Adam | None = None) -> dict[str, np.ndarray]:
    """Load weights (and optimizer state); returns the stored non-trainable buffers."""
    arrays, opt = read_checkpoint(path)
    buffers = {k[len("buffer/"):]: v for k, v in arrays.items() if k.startswith("buffer/")}
    params.load_state({k: v for k, v in arrays.items() if not k.startswith("buffer/")})
    if optimizer is not None and opt:
        optimizer.load_state(opt)
    return buffers
