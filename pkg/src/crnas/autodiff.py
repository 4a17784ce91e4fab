"""Tensor operations with reverse-mode gradients.

PyTorch supplies the tensor storage and the autograd tape; this module adds
the pieces its stock ops do not cover with the semantics we need:

* :func:`clip` with a zero subgradient at (and beyond) the bounds,
* hexcone RGB/HSV conversion with hue in radians,
* image rotation by bilinear sampling that is differentiable in the angle,
* a small :class:`Graph` wrapper that reports shape errors by node name and
  refuses to propagate non-finite values.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import torch
from torch import Tensor, nn

TWO_PI = 2.0 * math.pi


class ShapeError(ValueError):
    """Input shapes incompatible with an op."""

    def __init__(self, node: str, message: str):
        super().__init__(f"shape mismatch at node '{node}': {message}")
        self.node = node


class NumericError(FloatingPointError):
    """A NaN or Inf appeared where a finite value is required."""


class GraphStateError(RuntimeError):
    """Graph used out of order (e.g. backward before forward)."""


def check_finite(t: Tensor, where: str) -> Tensor:
    if not torch.isfinite(t).all():
        bad = int((~torch.isfinite(t)).sum())
        raise NumericError(f"{bad} non-finite value(s) in {where}")
    return t


class Graph:
    """Dynamic reverse-mode tape around a callable.

    The tape is rebuilt on every :meth:`forward`; :meth:`backward` may be
    called once per forward.
    """

    def __init__(self, fn: Callable[..., Tensor], name: str = "graph"):
        self.fn = fn
        self.name = name
        self._inputs: dict[str, Tensor] | None = None
        self._output: Tensor | None = None
        self._node = name

    def _track(self, module: nn.Module) -> list:
        handles = []
        for mod_name, sub in module.named_modules():
            label = f"{self.name}.{mod_name}" if mod_name else self.name

            def hook(_m, _args, label=label):
                self._node = label

            handles.append(sub.register_forward_pre_hook(hook))
        return handles

    def forward(self, **inputs: Tensor) -> Tensor:
        self._inputs = dict(inputs)
        self._node = self.name
        handles = self._track(self.fn) if isinstance(self.fn, nn.Module) else []
        try:
            out = self.fn(**inputs)
        except RuntimeError as exc:
            msg = str(exc)
            if "size" in msg or "shape" in msg or "dimension" in msg:
                raise ShapeError(self._node, msg) from exc
            raise
        finally:
            for h in handles:
                h.remove()
        check_finite(out, f"output of {self.name}")
        self._output = out
        return out

    def backward(self, seed: Tensor | None = None) -> dict[str, Tensor]:
        """Gradients of ``seed . output`` for every input that requires grad."""
        if self._output is None or self._inputs is None:
            raise GraphStateError(f"backward called on '{self.name}' before forward")
        out, self._output = self._output, None
        if seed is None:
            if out.numel() != 1:
                raise ShapeError(self.name, "seed required for non-scalar output")
            seed = torch.ones_like(out)
        if seed.shape != out.shape:
            raise ShapeError(self.name, f"seed {tuple(seed.shape)} vs output {tuple(out.shape)}")
        leaves = {k: v for k, v in self._inputs.items() if v.requires_grad}
        if not leaves:
            return {}
        grads = torch.autograd.grad(out, list(leaves.values()), seed, allow_unused=True)
        result = {}
        for (k, v), g in zip(leaves.items(), grads):
            g = torch.zeros_like(v) if g is None else g
            result[k] = check_finite(g, f"gradient of '{k}'")
        return result


def sgd_step(params: Sequence[Tensor], grads: Sequence[Tensor], lr: float) -> Sequence[Tensor]:
    """In-place ``p <- p - lr * g``."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if len(params) != len(grads):
        raise ShapeError("sgd_step", f"{len(params)} params but {len(grads)} grads")
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if p.shape != g.shape:
                raise ShapeError(f"sgd_step[{i}]", f"{tuple(p.shape)} vs {tuple(g.shape)}")
            p.sub_(lr * g)
    return params


class _Clip(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lo, hi):
        ctx.save_for_backward(x, lo, hi)
        return torch.minimum(torch.maximum(x, lo), hi)

    @staticmethod
    def backward(ctx, grad):
        x, lo, hi = ctx.saved_tensors
        inside = (x > lo) & (x < hi)
        return grad * inside, None, None


def clip(x: Tensor, lo: float | Tensor, hi: float | Tensor) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient is zero wherever the bound is touched."""
    lo = torch.as_tensor(lo, dtype=x.dtype, device=x.device)
    hi = torch.as_tensor(hi, dtype=x.dtype, device=x.device)
    return _Clip.apply(x, lo, hi)


def _safe_div(num: Tensor, den: Tensor) -> Tensor:
    ok = den != 0
    return torch.where(ok, num / torch.where(ok, den, torch.ones_like(den)), torch.zeros_like(num))


def rgb_to_hsv(img: Tensor) -> Tensor:
    """(..., 3, H, W) RGB in [0, 1] -> HSV with hue in [0, 2*pi)."""
    r, g, b = img.unbind(-3)
    v, argmax = img.max(dim=-3)
    c = v - img.min(dim=-3).values
    s = _safe_div(c, v)
    h_r = torch.remainder(_safe_div(g - b, c), 6.0)
    h_g = _safe_div(b - r, c) + 2.0
    h_b = _safe_div(r - g, c) + 4.0
    h = torch.where(argmax == 0, h_r, torch.where(argmax == 1, h_g, h_b))
    h = torch.where(c > 0, h, torch.zeros_like(h)) * (math.pi / 3.0)
    # remainder can return exactly 6.0 for tiny negative inputs
    h = torch.where(h >= TWO_PI, h - TWO_PI, h)
    return torch.stack([h, s, v], dim=-3)


def hsv_to_rgb(hsv: Tensor) -> Tensor:
    h, s, v = hsv.unbind(-3)
    sector = h * (3.0 / math.pi)

    def channel(n: float) -> Tensor:
        k = torch.remainder(sector + n, 6.0)
        w = torch.clamp(torch.minimum(k, 4.0 - k), 0.0, 1.0)
        return v - v * s * w

    return torch.stack([channel(5.0), channel(3.0), channel(1.0)], dim=-3)


def rotate(img: Tensor, degrees: Tensor) -> Tensor:
    """Rotate each image in a (B, C, H, W) batch about its centre.

    Output pixel (i, j) samples the input at
    ``i' = c + cos(t)(i - c) + sin(t)(j - c)``,
    ``j' = c - sin(t)(i - c) + cos(t)(j - c)``
    with bilinear interpolation and zero padding. Gradients reach both the
    image and the per-image angle.
    """
    bsz, ch, height, width = img.shape
    degrees = torch.as_tensor(degrees, dtype=img.dtype, device=img.device).reshape(-1)
    if degrees.numel() == 1:
        degrees = degrees.expand(bsz)
    theta = degrees * (math.pi / 180.0)
    cos_t = torch.cos(theta).view(-1, 1, 1)
    sin_t = torch.sin(theta).view(-1, 1, 1)
    ci, cj = (height - 1) / 2.0, (width - 1) / 2.0
    ii = (torch.arange(height, dtype=img.dtype, device=img.device) - ci).view(1, -1, 1)
    jj = (torch.arange(width, dtype=img.dtype, device=img.device) - cj).view(1, 1, -1)
    src_i = ci + cos_t * ii + sin_t * jj
    src_j = cj - sin_t * ii + cos_t * jj
    return bilinear_sample(img, src_i, src_j)


def bilinear_sample(img: Tensor, src_i: Tensor, src_j: Tensor) -> Tensor:
    """Sample ``img`` at fractional row/column coordinates of shape (B, H, W)."""
    bsz, ch, height, width = img.shape
    i0 = torch.floor(src_i.detach())
    j0 = torch.floor(src_j.detach())
    di = src_i - i0
    dj = src_j - j0
    flat = img.reshape(bsz, ch, height * width)
    out = torch.zeros((bsz, ch) + src_i.shape[1:], dtype=img.dtype, device=img.device)
    for oi, oj, w in (
        (0, 0, (1 - di) * (1 - dj)),
        (0, 1, (1 - di) * dj),
        (1, 0, di * (1 - dj)),
        (1, 1, di * dj),
    ):
        ri = (i0 + oi).long()
        rj = (j0 + oj).long()
        valid = (ri >= 0) & (ri < height) & (rj >= 0) & (rj < width)
        idx = (ri.clamp(0, height - 1) * width + rj.clamp(0, width - 1)).reshape(bsz, 1, -1)
        vals = flat.gather(2, idx.expand(bsz, ch, idx.shape[-1])).reshape(out.shape)
        out = out + vals * (w * valid).unsqueeze(1)
    return out


def numerical_gradient(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> Tensor:
    """Central finite differences of scalar ``f`` at ``x``."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + step
            up = float(f(x))
            flat[k] = orig - step
            down = float(f(x))
            flat[k] = orig
            gflat[k] = (up - down) / (2 * step)
    return grad


def max_relative_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-6) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over all entries."""
    diff = (analytic - numeric).abs()
    scale = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(diff, floor))
    return float((diff / scale).max())
