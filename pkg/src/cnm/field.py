"""Sinusoidal MLP signed-distance field with exact spatial and parameter gradients.

The spatial gradient is propagated forward alongside the activations (one
Jacobian column per input coordinate), so any loss built from it can be
differentiated with respect to the weights by a single reverse pass.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

DTYPE = torch.float64
MAGIC = b"CNM1"
EXP_CLAMP = 40.0

UNLABELED = 0


class DivergenceError(FloatingPointError):
    """Raised when a loss term becomes NaN or infinite."""

    def __init__(self, term: str, message: str = ""):
        self.term = term
        super().__init__(message or f"non-finite value in loss term '{term}'")


def validate_dims(dims: Sequence[int], inputs=(2, 3)) -> Tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if len(dims) < 3:
        raise ValueError("dims needs an input width, at least one hidden width and an output width")
    if dims[0] not in inputs:
        raise ValueError(f"input dimension must be 2 or 3, got {dims[0]}")
    if dims[-1] != 1:
        raise ValueError(f"output dimension must be 1, got {dims[-1]}")
    if any(d < 1 for d in dims):
        raise ValueError("layer widths must be positive")
    return dims


def param_count(dims: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


@dataclass
class NetworkParams:
    """Weights ``(out, in)`` and biases per layer plus the sine frequency."""

    weights: List[torch.Tensor]
    biases: List[torch.Tensor]
    omega0: float = 30.0

    @property
    def dims(self) -> Tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def tensors(self) -> List[torch.Tensor]:
        return [*self.weights, *self.biases]

    def num_params(self) -> int:
        return sum(t.numel() for t in self.tensors)

    def copy(self) -> "NetworkParams":
        return NetworkParams([w.detach().clone() for w in self.weights],
                             [b.detach().clone() for b in self.biases], self.omega0)

    def requires_grad_(self, flag: bool = True) -> "NetworkParams":
        for t in self.tensors:
            t.requires_grad_(flag)
        return self

    def flat(self) -> np.ndarray:
        return np.concatenate([t.detach().numpy().ravel() for t in self.tensors])

    def equal(self, other: "NetworkParams") -> bool:
        return self.omega0 == other.omega0 and all(
            a.shape == b.shape and torch.equal(a.detach(), b.detach())
            for a, b in zip(self.tensors, other.tensors))

    @classmethod
    def from_arrays(cls, weights, biases, omega0: float = 30.0) -> "NetworkParams":
        return cls([torch.as_tensor(np.asarray(w, dtype=np.float64)).clone() for w in weights],
                   [torch.as_tensor(np.asarray(b, dtype=np.float64)).reshape(-1).clone() for b in biases],
                   float(omega0))


def init_siren(dims: Sequence[int], omega0: float = 30.0, seed: int = 0) -> NetworkParams:
    """SIREN initialisation.

    First layer weights ~ U(-1/n_in, 1/n_in); deeper weights
    ~ U(-sqrt(6/n_in)/omega0, +sqrt(6/n_in)/omega0). Biases use the
    ``nn.Linear`` default U(-1/sqrt(n_in), 1/sqrt(n_in)).
    """
    dims = validate_dims(dims)
    if not omega0 > 0:
        raise ValueError("omega0 must be positive")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for layer, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / n_in if layer == 0 else np.sqrt(6.0 / n_in) / omega0
        weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        b = 1.0 / np.sqrt(n_in)
        biases.append(rng.uniform(-b, b, size=n_out))
    return NetworkParams.from_arrays(weights, biases, omega0)


def _as_points(params: NetworkParams, x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        t = x.to(DTYPE)
    else:
        t = torch.as_tensor(np.asarray(x, dtype=np.float64))
    if t.shape[-1] != params.dims[0]:
        raise ValueError(f"point dimension {t.shape[-1]} does not match network input {params.dims[0]}")
    if not torch.isfinite(t).all():
        raise ValueError("non-finite input coordinates")
    return t


def field_values(params: NetworkParams, x: torch.Tensor) -> torch.Tensor:
    """f(x) for a batch ``(N, d)``; differentiable w.r.t. the parameters."""
    h = x
    w0 = params.omega0
    for W, b in zip(params.weights[:-1], params.biases[:-1]):
        h = torch.sin(w0 * (h @ W.T + b))
    return (h @ params.weights[-1].T + params.biases[-1])[..., 0]


def field_values_and_gradients(params: NetworkParams, x: torch.Tensor):
    """``(f, grad_x f)`` for a batch ``(N, d)``.

    ``J[k]`` holds d h / d x_k with shape (N, width) and is pushed through each
    layer by the chain rule, so the returned gradient stays differentiable
    with respect to the weights.
    """
    n, d = x.shape
    h = x
    J = None
    w0 = params.omega0
    for W, b in zip(params.weights[:-1], params.biases[:-1]):
        a = w0 * (h @ W.T + b)
        dz = W.T.unsqueeze(1).expand(d, n, W.shape[0]) if J is None else (J.reshape(d * n, -1) @ W.T).reshape(d, n, -1)
        h = torch.sin(a)
        J = (w0 * torch.cos(a)) * dz
    W, b = params.weights[-1], params.biases[-1]
    value = (h @ W.T + b)[..., 0]
    if J is None:
        return value, W.expand(n, d)
    grad = (J.reshape(d * n, -1) @ W[0]).reshape(d, n).T
    return value, grad


def forward(params: NetworkParams, x) -> np.ndarray:
    """Evaluate f at one point ``(d,)`` (returns a float) or a batch ``(N, d)``."""
    t = _as_points(params, x)
    single = t.ndim == 1
    with torch.no_grad():
        out = field_values(params, t.reshape(-1, t.shape[-1])).numpy()
    return float(out[0]) if single else out


def evaluate_batched(params: NetworkParams, x, chunk: int = 65536) -> np.ndarray:
    """f over a large point array, in chunks."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(len(x))
    with torch.no_grad():
        for i in range(0, len(x), chunk):
            out[i:i + chunk] = field_values(params, _as_points(params, x[i:i + chunk])).numpy()
    return out


@dataclass
class FieldEval:
    value: np.ndarray
    gradient: np.ndarray


def forward_with_gradient(params: NetworkParams, x, chunk: int = 65536) -> FieldEval:
    t = _as_points(params, x)
    single = t.ndim == 1
    t = t.reshape(-1, t.shape[-1])
    vals, grads = [], []
    with torch.no_grad():
        for i in range(0, len(t), chunk):
            v, g = field_values_and_gradients(params, t[i:i + chunk])
            vals.append(v.numpy())
            grads.append(g.numpy())
    value = np.concatenate(vals) if vals else np.zeros(0)
    gradient = np.concatenate(grads) if grads else np.zeros((0, t.shape[-1]))
    if single:
        return FieldEval(float(value[0]), gradient[0])
    return FieldEval(value, gradient)


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

@dataclass
class LossWeights:
    data: float = 3000.0
    normal: float = 100.0
    eikonal: float = 50.0
    off: float = 100.0

    def __post_init__(self):
        if min(self.data, self.normal, self.eikonal, self.off) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBatch:
    """One optimisation batch.

    ``off_labels`` holds +1 (positive), -1 (negative) or 0 (unlabeled, plain
    ``exp(-alpha |f|)`` penalty). ``surface_weights`` scales every term of a
    surface sample; counts in the means are not reweighted. The eikonal mean
    runs over every point it is applied to, surface and off-surface alike.
    """

    surface_points: np.ndarray
    surface_normals: np.ndarray
    off_points: np.ndarray = None
    off_labels: np.ndarray = None
    surface_weights: Optional[np.ndarray] = None
    weights: LossWeights = field(default_factory=LossWeights)
    alpha: float = 100.0
    apply_data: bool = True
    apply_normal: bool = True
    apply_eikonal: bool = True
    eikonal_off_surface: bool = True
    surface_eikonal: Optional[np.ndarray] = None  # per-sample override of apply_eikonal

    def __post_init__(self):
        d = np.shape(self.surface_points)[-1] if np.ndim(self.surface_points) == 2 else np.shape(self.off_points)[-1]
        self.surface_points = np.asarray(self.surface_points, dtype=np.float64).reshape(-1, d)
        self.surface_normals = np.asarray(self.surface_normals, dtype=np.float64).reshape(-1, d)
        if self.off_points is None:
            self.off_points = np.zeros((0, d))
        self.off_points = np.asarray(self.off_points, dtype=np.float64).reshape(-1, d)
        if self.off_labels is None:
            self.off_labels = np.zeros(len(self.off_points), dtype=np.int8)
        self.off_labels = np.asarray(self.off_labels, dtype=np.int8).reshape(-1)
        if len(self.off_labels) != len(self.off_points):
            raise ValueError("one label per off-surface point is required")
        if not np.all(np.isin(self.off_labels, (-1, 0, 1))):
            raise ValueError("off-surface labels must be -1, 0 or +1")
        if len(self.surface_points) != len(self.surface_normals):
            raise ValueError("surface points and normals differ in length")
        if len(self.surface_points) + len(self.off_points) == 0:
            raise ValueError("empty batch")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")


TERMS = ("data", "normal", "eikonal", "off")


def _check(term: str, value: torch.Tensor) -> None:
    if not torch.isfinite(value).all():
        raise DivergenceError(term)


def loss_terms(params: NetworkParams, batch: LossBatch) -> Dict[str, torch.Tensor]:
    """Per-term losses (unweighted) and the weighted ``total`` as tensors."""
    zero = torch.zeros((), dtype=DTYPE)
    terms = {k: zero for k in TERMS}
    ns = len(batch.surface_points)
    no = len(batch.off_points)
    eik_parts = []

    if ns:
        xs = torch.as_tensor(batch.surface_points)
        n = torch.as_tensor(batch.surface_normals)
        w = torch.ones(ns, dtype=DTYPE) if batch.surface_weights is None else torch.as_tensor(
            np.asarray(batch.surface_weights, dtype=np.float64))
        f, g = field_values_and_gradients(params, xs)
        _check("data", f)
        _check("normal", g)
        if batch.apply_data:
            terms["data"] = (w * f.abs()).mean()
        if batch.apply_normal:
            terms["normal"] = (w * (g - n).abs().sum(dim=-1)).mean()
        if batch.apply_eikonal:
            eik = w * (g.norm(dim=-1) - 1.0).abs()
            if batch.surface_eikonal is not None:
                eik = eik[torch.as_tensor(np.asarray(batch.surface_eikonal, dtype=bool))]
            eik_parts.append(eik)

    if no:
        xo = torch.as_tensor(batch.off_points)
        lab = torch.as_tensor(batch.off_labels.astype(np.float64))
        if batch.eikonal_off_surface:
            fo, go = field_values_and_gradients(params, xo)
            _check("eikonal", go)
            eik_parts.append((go.norm(dim=-1) - 1.0).abs())
        else:
            fo = field_values(params, xo)
        _check("off", fo)
        # unlabeled: -alpha|f|; positive: -alpha f; negative: +alpha f
        arg = torch.where(lab == 0, -batch.alpha * fo.abs(), -batch.alpha * lab * fo)
        terms["off"] = torch.exp(arg.clamp(-EXP_CLAMP, EXP_CLAMP)).mean()

    if eik_parts:
        eik = torch.cat(eik_parts)
        if eik.numel():
            terms["eikonal"] = eik.mean()

    lw = batch.weights
    total = lw.data * terms["data"] + lw.normal * terms["normal"] + lw.eikonal * terms["eikonal"] + lw.off * terms["off"]
    for k in TERMS:
        _check(k, terms[k])
    _check("total", total)
    terms["total"] = total
    return terms


def loss_and_param_grads(params: NetworkParams, batch: LossBatch):
    """Return ``(terms, grads)``: float per term (plus ``total``) and one gradient tensor per parameter tensor."""
    leaves = [t.detach().requires_grad_(True) for t in params.tensors]
    k = len(params.weights)
    p = NetworkParams(leaves[:k], leaves[k:], params.omega0)
    terms = loss_terms(p, batch)
    grads = torch.autograd.grad(terms["total"], leaves, allow_unused=True)
    grads = [torch.zeros_like(l) if g is None else g for g, l in zip(grads, leaves)]
    for g in grads:
        _check("total", g)
    return {k: float(v.detach()) for k, v in terms.items()}, grads


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: List[torch.Tensor]
    v: List[torch.Tensor]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: NetworkParams, lr: float = 1e-4, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls([torch.zeros_like(t) for t in params.tensors],
                   [torch.zeros_like(t) for t in params.tensors], 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params: NetworkParams, grads: Sequence[torch.Tensor]):
    """Bias-corrected Adam update, applied in place; returns ``(params, state)``."""
    tensors = params.tensors
    if len(grads) != len(tensors) or len(state.m) != len(tensors):
        raise ValueError("gradient list does not match the parameter list")
    for p, g, m in zip(tensors, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {tuple(p.shape)}, grad {tuple(g.shape)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(tensors, grads, state.m, state.v):
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(state.lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return params, state


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def write_params(fh: BinaryIO, params: NetworkParams) -> None:
    dims = params.dims
    fh.write(MAGIC)
    fh.write(struct.pack("<I", len(dims) - 1))
    fh.write(struct.pack(f"<{len(dims)}I", *dims))
    fh.write(struct.pack("<d", params.omega0))
    for W, b in zip(params.weights, params.biases):
        fh.write(W.detach().numpy().astype("<f4").tobytes(order="C"))
        fh.write(b.detach().numpy().astype("<f4").tobytes())


def read_params(fh: BinaryIO) -> NetworkParams:
    if fh.read(4) != MAGIC:
        raise ValueError("not a CNM1 checkpoint")
    (n_layers,) = struct.unpack("<I", fh.read(4))
    dims = struct.unpack(f"<{n_layers + 1}I", fh.read(4 * (n_layers + 1)))
    validate_dims(dims, inputs=(1, 2, 3))
    (omega0,) = struct.unpack("<d", fh.read(8))
    weights, biases = [], []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        W = np.frombuffer(fh.read(4 * n_in * n_out), dtype="<f4")
        b = np.frombuffer(fh.read(4 * n_out), dtype="<f4")
        if W.size != n_in * n_out or b.size != n_out:
            raise ValueError("truncated checkpoint")
        weights.append(W.reshape(n_out, n_in))
        biases.append(b)
    return NetworkParams.from_arrays(weights, biases, omega0)


def save_checkpoint(path, params: NetworkParams, sections: Optional[Dict[bytes, bytes]] = None) -> None:
    """Network block followed by optional tagged sections ``tag(4) | length(u64) | payload``."""
    with open(path, "wb") as fh:
        write_params(fh, params)
        for tag, payload in (sections or {}).items():
            if len(tag) != 4:
                raise ValueError("section tags are 4 bytes")
            fh.write(tag)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def load_checkpoint(path) -> Tuple[NetworkParams, Dict[bytes, bytes]]:
    with open(path, "rb") as fh:
        params = read_params(fh)
        sections = {}
        while True:
            tag = fh.read(4)
            if not tag:
                break
            (n,) = struct.unpack("<Q", fh.read(8))
            payload = fh.read(n)
            if len(tag) != 4 or len(payload) != n:
                raise ValueError(f"{path}: truncated section")
            sections[tag] = payload
    return params, sections


def quantize(params: NetworkParams) -> NetworkParams:
    """Round every parameter to float32, i.e. what a checkpoint stores."""
    return NetworkParams([w.detach().to(torch.float32).to(DTYPE) for w in params.weights],
                         [b.detach().to(torch.float32).to(DTYPE) for b in params.biases], params.omega0)
