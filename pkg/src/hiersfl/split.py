"""Cut a classifier into client and server halves and run the exchange.

The client keeps layers ``[0, cut_index)`` and sends its cut-layer output
("smashed data") with labels to the server; the server finishes the forward
pass, computes the loss and returns dL/d(smashed data).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import nn
from .errors import ContractViolation, InputError

BYTES_PER_VALUE = 8


class Half(NamedTuple):
    stack: nn.LayerStack
    params: nn.ParamVector


@dataclass(frozen=True)
class SplitSpec:
    cut_index: int = 1

    def check(self, stack: nn.LayerStack) -> None:
        if not 1 <= self.cut_index <= len(stack) - 1:
            raise InputError(
                f"cut_index {self.cut_index} outside [1, {len(stack) - 1}] for a {len(stack)}-layer stack"
            )


@dataclass(eq=False)
class SmashedData:
    client_id: int
    activations: np.ndarray
    labels: np.ndarray
    # Client-side forward cache; stays on the client and is not charged as traffic.
    client_cache: list[np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.activations.shape[0] != len(self.labels):
            raise ContractViolation("smashed activations rows must equal label count")

    @property
    def byte_size(self) -> int:
        return (self.activations.size + len(self.labels)) * BYTES_PER_VALUE


@dataclass(eq=False)
class CutGradient:
    client_id: int
    gradient: np.ndarray

    @property
    def byte_size(self) -> int:
        return self.gradient.size * BYTES_PER_VALUE


def smashed_bytes(rows: int, cols: int) -> int:
    return (rows * cols + rows) * BYTES_PER_VALUE


def cut_gradient_bytes(rows: int, cols: int) -> int:
    return rows * cols * BYTES_PER_VALUE


def split(stack: nn.LayerStack, params: nn.ParamVector, spec: SplitSpec) -> tuple[Half, Half]:
    spec.check(stack)
    if params.shapes != stack.shapes:
        raise ContractViolation("params do not match the stack being split")
    cut = spec.cut_index
    n_client = stack[:cut].num_params
    client = Half(stack[:cut], nn.ParamVector(params.values[:n_client].copy(), params.shapes[:cut]))
    server = Half(stack[cut:], nn.ParamVector(params.values[n_client:].copy(), params.shapes[cut:]))
    return client, server


def join(client_params: nn.ParamVector, server_params: nn.ParamVector) -> nn.ParamVector:
    return nn.ParamVector.concat([client_params, server_params])


def client_forward(client_half: Half, batch, labels, client_id: int = 0) -> SmashedData:
    acts, out = nn.forward(client_half.stack, client_half.params, batch)
    return SmashedData(client_id, out, np.asarray(labels), acts)


def server_step(server_half: Half, smashed: SmashedData) -> tuple[float, CutGradient, nn.ParamVector]:
    """Finish forward, compute loss, and backprop to the cut layer."""
    stack, params = server_half
    if smashed.activations.shape[1] != stack.layers[0].in_dim:
        raise ContractViolation(
            f"smashed data has {smashed.activations.shape[1]} columns, "
            f"server expects {stack.layers[0].in_dim}"
        )
    acts, probs = nn.forward(stack, params, smashed.activations)
    loss = nn.loss_cross_entropy(probs, smashed.labels)
    grad, d_cut = nn.backward_with_input_grad(stack, params, acts, smashed.labels)
    return loss, CutGradient(smashed.client_id, d_cut), grad


def client_backward(client_half: Half, smashed: SmashedData, cut_grad: CutGradient) -> nn.ParamVector:
    if smashed.client_cache is None:
        raise ContractViolation("smashed data carries no client forward cache")
    return nn.backward_from_cut(client_half.stack, client_half.params, cut_grad.gradient, smashed.client_cache)
