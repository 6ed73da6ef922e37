"""Finite-difference gradient checks shared by the model tests and the acceptance run.

A ReLU network is piecewise linear in both its input and its parameters, and a
central difference straddling a kink measures neither side's slope. Components
whose ReLU on/off states or max-pool winners differ between ``+h`` and ``-h``
are therefore skipped and counted instead of compared.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pathattr.model import (
    LayerSpec,
    activation_pattern,
    batch_loss,
    forward,
    init_params,
    input_gradient,
    parameter_gradient,
)

from oracles import relative_error

STEP = 1e-4


def _same_pattern(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class CheckResult:
    max_input_error: float = 0.0
    max_param_error: float = 0.0
    compared: int = 0
    skipped: int = 0


def check_triple(params, image, class_index, result: CheckResult, guard=True) -> None:
    """Compare every input and parameter gradient component against central differences."""
    spec = params.spec
    relu = spec.activation == "relu"

    analytic = input_gradient(params, image, class_index).reshape(-1)
    flat = image.reshape(-1).copy()
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += STEP
        down[i] -= STEP
        xu, xd = up.reshape(image.shape), down.reshape(image.shape)
        if guard and relu and not _same_pattern(activation_pattern(params, xu[None]), activation_pattern(params, xd[None])):
            result.skipped += 1
            continue
        fd = (forward(params, xu).logits[class_index] - forward(params, xd).logits[class_index]) / (2 * STEP)
        err = relative_error(analytic[i], fd)
        result.compared += 1
        result.max_input_error = max(result.max_input_error, err)

    labels = np.array([class_index, (class_index + 1) % spec.num_classes])
    batch = np.stack([image, 1.0 - image])
    grads = parameter_gradient(params, (batch, labels))
    for name, tensor in params.tensors.items():
        g = grads[name].reshape(-1)
        for i in range(tensor.size):
            shifted = []
            for sign in (1.0, -1.0):
                t = tensor.copy().reshape(-1)
                t[i] += sign * STEP
                shifted.append(params.replace({**params.tensors, name: t.reshape(tensor.shape)}))
            if guard and relu and not _same_pattern(activation_pattern(shifted[0], batch), activation_pattern(shifted[1], batch)):
                result.skipped += 1
                continue
            fd = (batch_loss(shifted[0], batch, labels) - batch_loss(shifted[1], batch, labels)) / (2 * STEP)
            err = relative_error(g[i], fd)
            result.compared += 1
            result.max_param_error = max(result.max_param_error, err)


def random_triples(count: int, seed: int, activation: str = "relu"):
    """Small networks (8x8 input) so every component can be checked."""
    rng = np.random.default_rng(seed)
    spec = LayerSpec(input_shape=(1, 8, 8), conv_channels=(2, 3), dense_widths=(8,), num_classes=3,
                     activation=activation)
    for t in range(count):
        params = init_params(spec, seed=int(rng.integers(2**31)))
        # non-zero biases so the check covers them too
        params = params.replace({
            n: v + (rng.normal(0, 0.1, v.shape) if n.endswith(".bias") else 0.0)
            for n, v in params.tensors.items()
        })
        image = rng.uniform(0, 1, spec.input_shape)
        yield params, image, int(rng.integers(spec.num_classes))
