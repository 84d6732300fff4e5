"""Dense kernels, parameter registry, Adam, finite-difference checks and the 2-D projector.

Tensors are ``torch`` tensors; reverse-mode gradients come from autograd and are
validated against the central finite differences in :func:`finite_difference_grad`.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
import torch

log = logging.getLogger(__name__)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _require(cond: bool, op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _require(a.dim() >= 1 and b.dim() >= 1 and a.shape[-1] == b.shape[-2 if b.dim() > 1 else 0], "matmul", a, b)
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _require(a.shape == b.shape, "add", a, b)
    return a + b


def scale(a: torch.Tensor, c: float) -> torch.Tensor:
    return a * c


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    return torch.softmax(x, dim=-1)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def concat(tensors: list[torch.Tensor], dim: int = 0) -> torch.Tensor:
    first = tensors[0]
    for t in tensors[1:]:
        same = t.dim() == first.dim() and all(
            t.shape[i] == first.shape[i] for i in range(t.dim()) if i != dim % t.dim()
        )
        _require(same, "concat", first, t)
    return torch.cat(tensors, dim=dim)


def gather_rows(table: torch.Tensor, ids) -> torch.Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError(f"gather_rows: ids out of range for table of shape {tuple(table.shape)}")
    return table[ids]


class _CSRMatmul(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, mat, mat_t):
        ctx.mat_t = mat_t
        return torch.from_numpy(np.asarray(mat @ x.detach().numpy()))

    @staticmethod
    def backward(ctx, grad):
        return torch.from_numpy(np.asarray(ctx.mat_t @ grad.detach().contiguous().numpy())), None, None


def csr_matmul(mat: sp.csr_matrix, x: torch.Tensor, mat_t: sp.csr_matrix | None = None) -> torch.Tensor:
    """Sparse (CSR) times dense with autograd support for the dense operand."""
    if mat.shape[1] != x.shape[0]:
        raise ShapeError(f"csr_matmul: incompatible shapes {mat.shape} and {tuple(x.shape)}")
    if mat_t is None:
        mat_t = mat.T.tocsr()
    return _CSRMatmul.apply(x.contiguous(), mat, mat_t)


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1):
            raise ValueError(f"invalid Adam settings {self}")


class ParamRegistry:
    """Named trainable tensors plus Adam moments.

    ``pinned_rows`` lists rows that are kept at zero (e.g. the padding row of the
    perturbation factors); their gradients are discarded before every update.
    """

    def __init__(self, dtype: torch.dtype = torch.float64):
        self.dtype = dtype
        self.params: OrderedDict[str, torch.Tensor] = OrderedDict()
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        self.step = 0
        self.frozen: set[str] = set()
        self.pinned_rows: dict[str, list[int]] = {}

    def add(self, name: str, value, pinned_rows: list[int] | None = None) -> torch.Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name}")
        t = torch.as_tensor(value, dtype=self.dtype).clone().requires_grad_(True)
        self.params[name] = t
        self.m[name] = torch.zeros_like(t, requires_grad=False)
        self.v[name] = torch.zeros_like(t, requires_grad=False)
        if pinned_rows:
            self.pinned_rows[name] = list(pinned_rows)
            with torch.no_grad():
                t[pinned_rows] = 0
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def backprop(self, loss: torch.Tensor) -> dict[str, torch.Tensor]:
        """Populate ``.grad`` for every parameter (zeros where unreachable) and return them."""
        self.zero_grad()
        if loss.requires_grad:
            loss.backward()
        grads = {}
        for name, p in self.params.items():
            if p.grad is None or name in self.frozen:
                p.grad = torch.zeros_like(p)
            for row in self.pinned_rows.get(name, ()):
                p.grad[row] = 0
            if not torch.isfinite(p.grad).all():
                raise NonFiniteError(f"non-finite gradient for parameter {name}")
            grads[name] = p.grad
        return grads

    def state_arrays(self, with_optimizer: bool = False) -> dict[str, np.ndarray]:
        out = {f"param.{k}": v.detach().numpy().copy() for k, v in self.params.items()}
        if with_optimizer:
            for k in self.params:
                out[f"adam_m.{k}"] = self.m[k].numpy().copy()
                out[f"adam_v.{k}"] = self.v[k].numpy().copy()
            out["adam_step"] = np.uint64(self.step)
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            key = f"param.{name}"
            if key not in arrays:
                raise KeyError(f"missing parameter {name} in checkpoint")
            src = np.asarray(arrays[key])
            if tuple(src.shape) != tuple(p.shape):
                raise ShapeError(
                    f"parameter {name}: checkpoint shape {tuple(src.shape)}, model expects {tuple(p.shape)}"
                )
            with torch.no_grad():
                p.copy_(torch.as_tensor(src, dtype=self.dtype))
            if f"adam_m.{name}" in arrays:
                self.m[name] = torch.as_tensor(arrays[f"adam_m.{name}"], dtype=self.dtype).clone()
                self.v[name] = torch.as_tensor(arrays[f"adam_v.{name}"], dtype=self.dtype).clone()
        if "adam_step" in arrays:
            self.step = int(arrays["adam_step"])

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.params.items()}

    def restore(self, snap: dict[str, torch.Tensor]) -> None:
        with torch.no_grad():
            for k, v in snap.items():
                self.params[k].copy_(v)


def adam_step(registry: ParamRegistry, cfg: AdamConfig = AdamConfig()) -> None:
    """Bias-corrected Adam update using the gradients currently stored on the parameters."""
    registry.step += 1
    t = registry.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    with torch.no_grad():
        for name, p in registry.params.items():
            if name in registry.frozen or p.grad is None:
                continue
            g = p.grad
            m = registry.m[name]
            v = registry.v[name]
            m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
            denom = (v / bc2).sqrt_().add_(cfg.eps)
            p.sub_(cfg.lr * (m / bc1) / denom)
            for row in registry.pinned_rows.get(name, ()):
                p[row] = 0


def finite_difference_grad(
    loss_fn: Callable[[], torch.Tensor], param: torch.Tensor, h: float = 1e-5
) -> torch.Tensor:
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``param`` (modified in place)."""
    grad = torch.zeros_like(param, requires_grad=False)
    flat = param.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(loss_fn())
            flat[i] = orig - h
            down = float(loss_fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, rtol: float = 1e-3, atol: float = 1e-6) -> float:
    """max |a - n| / (atol/rtol + max(|a|, |n|)); below ``rtol`` iff |a - n| < atol + rtol*max(|a|, |n|)."""
    diff = (analytic - numeric).abs()
    denom = atol / rtol + torch.maximum(analytic.abs(), numeric.abs())
    return float((diff / denom).max()) if diff.numel() else 0.0


def gradcheck(
    loss_fn: Callable[[], torch.Tensor],
    registry: ParamRegistry,
    names: list[str] | None = None,
    h: float = 1e-5,
    rtol: float = 1e-3,
    atol: float = 1e-6,
) -> dict[str, float]:
    """Per-parameter relative error between autograd and central finite differences."""
    if registry.dtype != torch.float64:
        raise TypeError("gradient checks require a float64 registry")
    analytic = {k: g.clone() for k, g in registry.backprop(loss_fn()).items()}
    report = {}
    for name in names or registry.names():
        numeric = finite_difference_grad(loss_fn, registry[name], h)
        for row in registry.pinned_rows.get(name, ()):
            numeric[row] = 0
        report[name] = relative_error(analytic[name], numeric, rtol, atol)
    return report


def _sign_fix(vec: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(vec) > 1e-12)
    if len(nz) and vec[nz[0]] < 0:
        return -vec
    return vec


def top2_svd_project(emb: np.ndarray, iters: int = 500, tol: float = 1e-10, seed: int = 0) -> np.ndarray:
    """Project rows of ``emb`` onto its top-2 right singular vectors.

    Singular vectors come from power iteration on the Gram matrix with deflation;
    each is signed so its first non-zero entry is positive.
    """
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[1] < 2:
        raise ShapeError(f"top2_svd_project: need an (n, d>=2) matrix, got {emb.shape}")
    gram = emb.T @ emb
    rng = np.random.default_rng(seed)
    vectors = []
    for _ in range(2):
        vec = rng.standard_normal(gram.shape[0])
        for prev in vectors:
            vec -= (vec @ prev) * prev
        vec /= np.linalg.norm(vec)
        converged = False
        for _ in range(iters):
            nxt = gram @ vec
            for prev in vectors:
                nxt -= (nxt @ prev) * prev
            norm = np.linalg.norm(nxt)
            if norm == 0.0:
                converged = True  # remaining spectrum is zero; any orthogonal direction works
                break
            nxt /= norm
            if min(np.linalg.norm(nxt - vec), np.linalg.norm(nxt + vec)) < tol:
                vec = nxt
                converged = True
                break
            vec = nxt
        if not converged:
            log.warning("power iteration did not converge in %d iterations; using last iterate", iters)
        vectors.append(_sign_fix(vec))
    basis = np.stack(vectors, axis=1)
    return emb @ basis


def init_normal(gen: torch.Generator, shape, std: float = 0.02, dtype=torch.float64) -> torch.Tensor:
    return torch.randn(*shape, generator=gen, dtype=torch.float64).mul_(std).to(dtype)


def check_finite(name: str, value: torch.Tensor) -> None:
    if not torch.isfinite(value).all():
        raise NonFiniteError(f"{name} is not finite")

