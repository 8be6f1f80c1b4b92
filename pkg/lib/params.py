"""
Parameter storage, the Adam optimizer and the dense building blocks the
networks are assembled from.
"""

import logging
from collections.abc import Callable, Iterator
from dataclasses import dataclass

import numpy as np

from lib.errors import ShapeError
from lib.rng import RngStream
from lib.tensor import Tensor, matmul, silu, swapaxes

logger = logging.getLogger(__name__)

Activation = Callable[[Tensor], Tensor]


@dataclass
class AdamState:
    """First and second moment estimates of one parameter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParamStore:
    """
    Named collection of learnable tensors with their Adam state.

    Paths are unique and kept in insertion order, which is also the order
    used when parameters are serialised.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._adam: dict[str, AdamState] = {}

    def add(self, path: str, value: np.ndarray) -> Tensor:
        """
        Register a new parameter.

        Args:
            path: Unique parameter path (e.g. "encoder.0.weight")
            value: Initial value

        Returns:
            The tracked leaf tensor
        """
        if path in self._params:
            raise ValueError(f"Duplicate parameter path: {path}")
        tensor = Tensor(value, requires_grad=True)
        self._params[path] = tensor
        self._adam[path] = AdamState(np.zeros_like(tensor.data), np.zeros_like(tensor.data))
        return tensor

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def adam_state(self, path: str) -> AdamState:
        return self._adam[path]

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.zero_grad()

    def set_trainable(self, trainable: bool) -> None:
        """Toggle gradient recording for every parameter (frozen stores record nothing)."""
        for tensor in self._params.values():
            tensor.requires_grad = trainable
            tensor.zero_grad()

    def layout(self) -> list[dict]:
        """Path, shape and Adam step count of every parameter, in store order."""
        return [
            {"path": path, "shape": list(t.shape), "step": self._adam[path].step}
            for path, t in self._params.items()
        ]

    def flat_state(self) -> np.ndarray:
        """Parameters followed by their Adam moments, per path, as one float64 vector."""
        chunks = []
        for path, tensor in self._params.items():
            state = self._adam[path]
            chunks.extend([tensor.data.ravel(), state.m.ravel(), state.v.ravel()])
        if not chunks:
            return np.zeros(0, dtype=np.float64)
        return np.concatenate(chunks).astype(np.float64)

    def load_flat_state(self, layout: list[dict], flat: np.ndarray) -> None:
        """
        Restore values written by `flat_state`.

        The whole blob is validated before any parameter is touched.
        """
        expected = [(p, tuple(t.shape)) for p, t in self._params.items()]
        found = [(entry["path"], tuple(entry["shape"])) for entry in layout]
        if expected != found:
            raise ValueError("Parameter layout does not match this model")
        total = sum(3 * int(np.prod(shape)) for _, shape in expected)
        if flat.size != total:
            raise ValueError(f"Expected {total} values, found {flat.size}")

        offset = 0
        for entry in layout:
            path = entry["path"]
            tensor = self._params[path]
            size = tensor.data.size
            parts = []
            for _ in range(3):
                parts.append(flat[offset : offset + size].reshape(tensor.shape).copy())
                offset += size
            tensor.data[...] = parts[0]
            self._adam[path] = AdamState(parts[1], parts[2], int(entry["step"]))


def adam_step(
    store: ParamStore,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """
    Apply one bias-corrected Adam update to every parameter and clear gradients.

    Raises:
        ValueError: If a parameter has no gradient
    """
    missing = [path for path, t in store.items() if t.grad is None]
    if missing:
        raise ValueError(f"Missing gradient for parameter: {missing[0]}")

    beta1, beta2 = betas
    for path, tensor in store.items():
        grad = tensor.grad
        assert grad is not None
        state = store.adam_state(path)
        state.step += 1
        state.m = beta1 * state.m + (1.0 - beta1) * grad
        state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
        m_hat = state.m / (1.0 - beta1**state.step)
        v_hat = state.v / (1.0 - beta2**state.step)
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        tensor.zero_grad()


def _uniform_init(rng: RngStream, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class Linear:
    """Affine layer x @ W + b with a shared weight matrix."""

    def __init__(
        self, store: ParamStore, path: str, in_dim: int, out_dim: int, rng: RngStream,
        zero: bool = False,
    ):
        self.in_dim = in_dim
        self.out_dim = out_dim
        if zero:
            weight = np.zeros((in_dim, out_dim))
            bias = np.zeros(out_dim)
        else:
            weight = _uniform_init(rng.split(path, 0), in_dim, (in_dim, out_dim))
            bias = _uniform_init(rng.split(path, 1), in_dim, (out_dim,))
        self.weight = store.add(f"{path}.weight", weight)
        self.bias = store.add(f"{path}.bias", bias)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError("linear", x.shape, self.weight.shape)
        return matmul(x, self.weight) + self.bias


class MLP:
    """
    Stack of Linear layers with an activation between them.

    Args:
        dims: Layer widths including input and output, e.g. [6, 128, 128, 24]
        zero_last: Zero-initialise the output layer
    """

    def __init__(
        self,
        store: ParamStore,
        path: str,
        dims: list[int],
        rng: RngStream,
        activation: Activation = silu,
        zero_last: bool = False,
    ):
        self.activation = activation
        last = len(dims) - 2
        self.layers = [
            Linear(store, f"{path}.{k}", dims[k], dims[k + 1], rng, zero=zero_last and k == last)
            for k in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < len(self.layers) - 1:
                x = self.activation(x)
        return x


class PerLatentMLP:
    """
    One independent 2-layer network per latent, evaluated in a single pass.

    Weights are stacked along a leading latent axis, so no parameter is
    shared between latents. The shared input x (B, in_dim) is seen by every
    network; an optional per-latent input extra (B, M) adds one more input
    feature to network i, equivalent to concatenating extra[:, i] to x.

    Output shape is (B, M, out_dim).
    """

    def __init__(
        self,
        store: ParamStore,
        path: str,
        n_latents: int,
        in_dim: int,
        hidden: int,
        out_dim: int,
        rng: RngStream,
        extra_dim: int = 0,
        activation: Activation = silu,
    ):
        self.n_latents = n_latents
        self.in_dim = in_dim
        self.extra_dim = extra_dim
        self.activation = activation
        fan_in = in_dim + extra_dim
        m = n_latents
        self.w_in = store.add(f"{path}.0.weight", _uniform_init(rng.split(path, 0), fan_in, (m, in_dim, hidden)))
        self.w_extra = (
            store.add(f"{path}.0.extra", _uniform_init(rng.split(path, 1), fan_in, (m, 1, hidden)))
            if extra_dim
            else None
        )
        self.b_in = store.add(f"{path}.0.bias", _uniform_init(rng.split(path, 2), fan_in, (m, hidden)))
        self.w_out = store.add(f"{path}.1.weight", _uniform_init(rng.split(path, 3), hidden, (m, hidden, out_dim)))
        self.b_out = store.add(f"{path}.1.bias", _uniform_init(rng.split(path, 4), hidden, (m, out_dim)))

    def __call__(self, x: Tensor, extra: Tensor | None = None) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError("per_latent_mlp", x.shape, (self.n_latents, self.in_dim))
        h = matmul(x, self.w_in)  # (M, B, hidden)
        if self.w_extra is not None:
            if extra is None or extra.shape != (x.shape[0], self.n_latents):
                raise ShapeError(
                    "per_latent_mlp", x.shape, None if extra is None else extra.shape
                )
            per_latent = swapaxes(extra.reshape(x.shape[0], self.n_latents, 1), 0, 1)
            h = h + matmul(per_latent, self.w_extra)
        h = self.activation(swapaxes(h, 0, 1) + self.b_in)  # (B, M, hidden)
        out = matmul(swapaxes(h, 0, 1), self.w_out)  # (M, B, out)
        return swapaxes(out, 0, 1) + self.b_out
