"""Small building blocks on top of the tape: Module, Linear, MLP and a GRU-style cell."""

from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from dmosapo.core import autodiff as ad
from dmosapo.core.autodiff import Value


class Module:
    """Parameter container.

    Parameters are discovered from instance attributes in definition order:
    ``Value`` objects, nested ``Module`` objects, and lists of either.
    """

    def named_parameters(self, prefix: str = "") -> Dict[str, Value]:
        found: Dict[str, Value] = {}
        for name, attr in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(attr, Value):
                found[full] = attr
            elif isinstance(attr, Module):
                found.update(attr.named_parameters(prefix=f"{full}."))
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        found.update(item.named_parameters(prefix=f"{full}.{i}."))
                    elif isinstance(item, Value):
                        found[f"{full}.{i}"] = item
        return found

    def parameters(self) -> List[Value]:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"State dict is missing parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"Parameter '{name}' has shape {p.shape}, state has {arr.shape}")
            p.data = arr.copy()

    @contextmanager
    def frozen(self) -> Iterator["Module"]:
        """Treat parameters as constants: gradients still flow *through* the module
        to its inputs but nothing accumulates on its own parameters."""
        params = self.parameters()
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p in params:
                p.requires_grad = True


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, scale: float = 1.0):
        bound = scale / np.sqrt(max(n_in, 1))
        self.weight = Value(rng.uniform(-bound, bound, size=(n_in, n_out)), requires_grad=True)
        self.bias = Value(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Value) -> Value:
        return ad.matmul(ad.as_value(x), self.weight) + self.bias


class MLP(Module):
    def __init__(
        self,
        sizes: Sequence[int],
        rng: np.random.Generator,
        activation: str = "tanh",
        out_scale: float = 1.0,
    ):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.layers = [
            Linear(n_in, n_out, rng, scale=out_scale if i == len(sizes) - 2 else 1.0)
            for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        self.activation = activation

    def _act(self, x: Value) -> Value:
        if self.activation == "tanh":
            return ad.tanh(x)
        if self.activation == "softplus":
            return ad.softplus(x)
        raise ValueError(f"Unknown activation '{self.activation}'")

    def hidden(self, x) -> Value:
        """Activations of the last hidden layer."""
        h = ad.as_value(x)
        for layer in self.layers[:-1]:
            h = self._act(layer(h))
        return h

    def __call__(self, x) -> Value:
        return self.layers[-1](self.hidden(x))


class GRUCell(Module):
    """GRU-style recurrent update h' = (1 - u) * h + u * c."""

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator):
        self.gates = Linear(n_in + n_hidden, 2 * n_hidden, rng)
        self.candidate_in = Linear(n_in, n_hidden, rng)
        self.candidate_h = Linear(n_hidden, n_hidden, rng)
        self.n_hidden = n_hidden

    def __call__(self, x: Value, h: Value) -> Value:
        gates = ad.sigmoid(self.gates(ad.concat([x, h], axis=-1)))
        reset = gates[..., : self.n_hidden]
        update = gates[..., self.n_hidden:]
        cand = ad.tanh(self.candidate_in(x) + self.candidate_h(reset * h))
        return (1.0 - update) * h + update * cand


class LinearCell(Module):
    """Affine update h' = h W_h + x W_x + b; used for Jacobian unit checks."""

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator, n_action: Optional[int] = None):
        self.state_in = Linear(n_hidden, n_hidden, rng)
        n_action = n_action if n_action is not None else 0
        self.stoch_in = Linear(n_in - n_action, n_hidden, rng) if n_in - n_action > 0 else None
        self.action_in = Linear(n_action, n_hidden, rng) if n_action > 0 else None
        self.n_action = n_action

    def __call__(self, x: Value, h: Value) -> Value:
        out = self.state_in(h)
        split = x.shape[-1] - self.n_action
        if self.stoch_in is not None:
            out = out + self.stoch_in(x[..., :split])
        if self.action_in is not None:
            out = out + ad.matmul(x[..., split:], self.action_in.weight)
        return out
