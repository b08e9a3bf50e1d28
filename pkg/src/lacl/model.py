"""Encoder + projector network shared by the query and key branches.

The encoder maps a patch vector to a backbone feature ``z`` through one hidden
ReLU layer; the projector is linear -> ReLU -> linear, and its output is L2
normalized to give the contrastive embedding. Inputs may be a single vector
or a batch of row vectors; gradients returned by :func:`backward` are summed
over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateVectorError,
    InvalidInputError,
    InvalidStateError,
    ShapeMismatchError,
    TrainingDivergedError,
)
from .mathutils import NORM_FLOOR

# Declaration order; checkpoints serialize tensors in this order.
PARAM_NAMES = (
    "enc_w1", "enc_b1", "enc_w2", "enc_b2",
    "proj_w1", "proj_b1", "proj_w2", "proj_b2",
)


@dataclass(frozen=True)
class ModelDims:
    input_dim: int = 32
    hidden_dim: int = 64
    backbone_dim: int = 32
    proj_hidden: int = 32
    contrast_dim: int = 16

    def __post_init__(self):
        for name, value in self.as_tuple_items():
            if int(value) != value or value < 1:
                raise InvalidInputError(f"{name} must be a positive integer, got {value}")

    def as_tuple_items(self):
        return (
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("backbone_dim", self.backbone_dim),
            ("proj_hidden", self.proj_hidden),
            ("contrast_dim", self.contrast_dim),
        )

    def as_tuple(self) -> tuple[int, ...]:
        return tuple(v for _, v in self.as_tuple_items())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d = self
        return {
            "enc_w1": (d.hidden_dim, d.input_dim),
            "enc_b1": (d.hidden_dim,),
            "enc_w2": (d.backbone_dim, d.hidden_dim),
            "enc_b2": (d.backbone_dim,),
            "proj_w1": (d.proj_hidden, d.backbone_dim),
            "proj_b1": (d.proj_hidden,),
            "proj_w2": (d.contrast_dim, d.proj_hidden),
            "proj_b2": (d.contrast_dim,),
        }


@dataclass
class ModelParams:
    """Weights of one branch (or a gradient / velocity of the same shape)."""

    dims: ModelDims
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = self.dims.shapes()
        if set(self.tensors) != set(PARAM_NAMES):
            raise ShapeMismatchError(f"expected tensors {PARAM_NAMES}, got {sorted(self.tensors)}")
        for name in PARAM_NAMES:
            arr = np.asarray(self.tensors[name], dtype=np.float64)
            if arr.shape != shapes[name]:
                raise ShapeMismatchError(f"{name}: expected {shapes[name]}, got {arr.shape}")
            self.tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @classmethod
    def zeros(cls, dims: ModelDims) -> "ModelParams":
        return cls(dims, {n: np.zeros(s) for n, s in dims.shapes().items()})

    @classmethod
    def init(cls, dims: ModelDims, rng: np.random.Generator) -> "ModelParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
        tensors = {}
        for name, shape in dims.shapes().items():
            if len(shape) == 2:
                bound = 1.0 / np.sqrt(shape[1])
                tensors[name] = rng.uniform(-bound, bound, size=shape)
            else:
                tensors[name] = np.zeros(shape)
        return cls(dims, tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, {n: t.copy() for n, t in self.tensors.items()})

    def items(self):
        return ((n, self.tensors[n]) for n in PARAM_NAMES)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for _, t in self.items()])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors.values())

    def check_compatible(self, other: "ModelParams") -> None:
        if self.dims != other.dims:
            raise ShapeMismatchError(f"dims differ: {self.dims} vs {other.dims}")


@dataclass
class ForwardTrace:
    z: np.ndarray
    projection: np.ndarray
    # Retained only when keep_trace is set.
    x: np.ndarray | None = None
    h_pre: np.ndarray | None = None
    u_pre: np.ndarray | None = None
    proj_raw: np.ndarray | None = None
    proj_norm: np.ndarray | None = None
    params: ModelParams | None = field(default=None, repr=False)
    single: bool = False

    @property
    def has_trace(self) -> bool:
        return self.params is not None


def _relu(x):
    return np.maximum(x, 0.0)


def encode(params: ModelParams, x) -> np.ndarray:
    """Backbone feature z = f(x), without the projector."""
    arr, single = _check_input(params, x)
    h = _relu(arr @ params["enc_w1"].T + params["enc_b1"])
    z = h @ params["enc_w2"].T + params["enc_b2"]
    return z[0] if single else z


def forward(params: ModelParams, x, keep_trace: bool = False) -> ForwardTrace:
    arr, single = _check_input(params, x)
    h_pre = arr @ params["enc_w1"].T + params["enc_b1"]
    z = _relu(h_pre) @ params["enc_w2"].T + params["enc_b2"]
    u_pre = z @ params["proj_w1"].T + params["proj_b1"]
    raw = _relu(u_pre) @ params["proj_w2"].T + params["proj_b2"]
    norm = np.linalg.norm(raw, axis=1, keepdims=True)
    if np.any(norm < NORM_FLOOR):
        raise DegenerateVectorError("projector output has (near-)zero norm")
    proj = raw / norm
    out = ForwardTrace(z=z[0] if single else z, projection=proj[0] if single else proj, single=single)
    if keep_trace:
        out.x, out.h_pre, out.u_pre = arr, h_pre, u_pre
        out.proj_raw, out.proj_norm = raw, norm
        out.params = params
    return out


def backward(trace: ForwardTrace, grad_wrt_projection) -> ModelParams:
    """Gradients of a scalar objective wrt every parameter, given dL/d(projection).

    Includes the normalization Jacobian (I - p p^T) / ||raw||.
    """
    if not trace.has_trace:
        raise InvalidStateError("backward needs a forward trace produced with keep_trace=True")
    p = trace.params
    g = np.asarray(grad_wrt_projection, dtype=np.float64)
    g = g.reshape(1, -1) if trace.single else g
    proj = trace.proj_raw / trace.proj_norm
    if g.shape != proj.shape:
        raise ShapeMismatchError(f"upstream gradient shape {g.shape} != projection shape {proj.shape}")

    d_raw = (g - proj * np.sum(g * proj, axis=1, keepdims=True)) / trace.proj_norm
    u = _relu(trace.u_pre)
    grads = {"proj_w2": d_raw.T @ u, "proj_b2": d_raw.sum(axis=0)}
    d_u = (d_raw @ p["proj_w2"]) * (trace.u_pre > 0)
    z = _relu(trace.h_pre) @ p["enc_w2"].T + p["enc_b2"]
    grads["proj_w1"] = d_u.T @ z
    grads["proj_b1"] = d_u.sum(axis=0)
    d_z = d_u @ p["proj_w1"]
    h = _relu(trace.h_pre)
    grads["enc_w2"] = d_z.T @ h
    grads["enc_b2"] = d_z.sum(axis=0)
    d_h = (d_z @ p["enc_w2"]) * (trace.h_pre > 0)
    grads["enc_w1"] = d_h.T @ trace.x
    grads["enc_b1"] = d_h.sum(axis=0)
    return ModelParams(p.dims, grads)


def sgd_step(
    params: ModelParams,
    grads: ModelParams,
    velocity: ModelParams | None = None,
    lr: float = 0.01,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
) -> tuple[ModelParams, ModelParams]:
    """One momentum-SGD update. Returns ``(new_params, new_velocity)``.

    velocity <- momentum * velocity + grads + weight_decay * params
    params   <- params - lr * velocity
    """
    params.check_compatible(grads)
    if velocity is None:
        velocity = ModelParams.zeros(params.dims)
    new_v, new_p = {}, {}
    for name, w in params.items():
        v = momentum * velocity[name] + grads[name] + weight_decay * w
        new_v[name] = v
        new_p[name] = w - lr * v
    out = ModelParams(params.dims, new_p)
    if not out.is_finite():
        raise TrainingDivergedError("parameter update produced non-finite values")
    return out, ModelParams(params.dims, new_v)


def ema_update(theta_q: ModelParams, theta_k: ModelParams, m: float) -> ModelParams:
    """Key-branch update theta_k <- m * theta_q + (1 - m) * theta_k.

    Note the coefficient placement: ``m`` weights the *query* branch, so a slow
    key branch needs a small ``m`` (e.g. 0.001).
    """
    theta_q.check_compatible(theta_k)
    if not 0.0 <= m < 1.0:
        raise InvalidInputError(f"m must lie in [0, 1), got {m}")
    if m == 0.0:
        return theta_k.copy()
    return ModelParams(
        theta_k.dims,
        {n: m * theta_q[n] + (1.0 - m) * theta_k[n] for n in PARAM_NAMES},
    )


def _check_input(params: ModelParams, x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != params.dims.input_dim:
        raise ShapeMismatchError(
            f"input must have trailing dimension {params.dims.input_dim}, got shape {np.shape(x)}"
        )
    return arr, single
