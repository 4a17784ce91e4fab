"""White-box attacks used as robustness evaluations.

Every attack takes ``model`` as a callable ``x -> logits`` and returns an
:class:`AttackResult`. Pixel attacks work in [0, 1]; semantic attacks
optimise one scalar per image (hue shift, saturation factor, rotation angle,
brightness offset, contrast factor) by iterated gradient sign steps clipped
to the attack interval.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from .autodiff import NumericError, TWO_PI, clip, hsv_to_rgb, rgb_to_hsv, rotate

Model = Callable[[Tensor], Tensor]

KINDS = (
    "clean",
    "hue",
    "saturation",
    "rotation",
    "brightness",
    "contrast",
    "caa",
    "fgsm_linf",
    "pgd_linf",
    "mi_linf",
    "pgd_l2",
    "mi_l2",
)
SEMANTIC = ("hue", "saturation", "rotation", "brightness", "contrast")
LP = ("fgsm_linf", "pgd_linf", "mi_linf", "pgd_l2", "mi_l2")

# outer limits for semantic intervals
LEGAL_RANGE = {
    "hue": (-TWO_PI, TWO_PI),
    "saturation": (0.0, 2.0),
    "rotation": (-180.0, 180.0),
    "brightness": (-1.0, 1.0),
    "contrast": (0.0, 2.0),
}
IDENTITY = {"hue": 0.0, "saturation": 1.0, "rotation": 0.0, "brightness": 0.0, "contrast": 1.0}


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    eps: float = 0.0
    interval: tuple[float, float] | None = None
    steps: int = 1
    step_size: float | None = None
    loss: str = "ce"
    kappa: float = 0.0
    momentum: float = 1.0
    random_start: bool = False
    init: str = "random"
    seed: int = 0
    sequence: tuple["AttackSpec", ...] = field(default=())

    def __post_init__(self):
        if self.kind not in KINDS:
            raise AttackError(f"unknown attack kind {self.kind!r}")
        if self.steps < 1:
            raise AttackError("steps must be >= 1")
        if self.eps < 0:
            raise AttackError("eps must be >= 0")
        if self.loss not in ("ce", "cw"):
            raise AttackError(f"unknown loss {self.loss!r}")
        if self.kappa < 0 or self.momentum < 0:
            raise AttackError("kappa and momentum must be >= 0")
        if self.step_size is not None and self.step_size <= 0:
            raise AttackError("step_size must be positive")
        if self.init not in ("random", "identity"):
            raise AttackError(f"unknown init {self.init!r}")
        if self.kind in SEMANTIC:
            if self.interval is None:
                raise AttackError(f"{self.kind} needs an interval")
            lo, hi = self.interval
            legal_lo, legal_hi = LEGAL_RANGE[self.kind]
            if lo > hi:
                raise AttackError(f"interval bounds out of order: {self.interval}")
            if lo < legal_lo or hi > legal_hi:
                raise AttackError(f"{self.kind} interval {self.interval} outside [{legal_lo}, {legal_hi}]")
        if self.kind == "caa" and not self.sequence:
            raise AttackError("composite attack needs a non-empty sequence")

    @property
    def alpha(self) -> float:
        """Step size, defaulting to eps/4 for pixel attacks and 2.5 half-widths / T for semantic ones."""
        if self.step_size is not None:
            return self.step_size
        if self.kind in SEMANTIC:
            lo, hi = self.interval
            return 2.5 * (hi - lo) / 2 / self.steps
        if self.kind == "fgsm_linf":
            return self.eps
        return self.eps / 4


@dataclass
class AttackResult:
    x_adv: Tensor
    success: Tensor  # bool per example: prediction != label
    loss: Tensor  # per-example loss at x_adv
    params: Tensor | None = None  # final semantic parameter per example

    @property
    def correct(self) -> Tensor:
        return ~self.success


def cw_loss(logits: Tensor, y: Tensor, kappa: float = 0.0) -> Tensor:
    """``max(max_{i != y} z_i - z_y, -kappa)`` per example."""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise AttackError("CW loss needs at least two classes")
    if kappa < 0:
        raise AttackError("kappa must be >= 0")
    true = logits.gather(1, y.view(-1, 1)).squeeze(1)
    others = logits.masked_fill(F.one_hot(y, logits.shape[1]).bool(), float("-inf"))
    return torch.clamp(others.max(1).values - true, min=-kappa)


def example_loss(logits: Tensor, y: Tensor, kind: str = "ce", kappa: float = 0.0) -> Tensor:
    if kind == "cw":
        return cw_loss(logits, y, kappa)
    return F.cross_entropy(logits, y, reduction="none")


def _grad(model: Model, inputs: Tensor, make_x: Callable[[Tensor], Tensor], y: Tensor,
          loss: str, kappa: float) -> Tensor:
    inputs = inputs.detach().requires_grad_(True)
    with torch.enable_grad():
        value = example_loss(model(make_x(inputs)), y, loss, kappa).sum()
        (g,) = torch.autograd.grad(value, inputs)
    if not torch.isfinite(g).all():
        raise NumericError("non-finite attack gradient")
    return g


def _finish(model: Model, x_adv: Tensor, y: Tensor, loss: str, kappa: float,
            params: Tensor | None = None) -> AttackResult:
    x_adv = x_adv.detach()
    with torch.no_grad():
        logits = model(x_adv)
        per = example_loss(logits, y, loss, kappa)
    return AttackResult(x_adv, logits.argmax(1) != y, per, params)


def _flat_norm(t: Tensor, p: float) -> Tensor:
    return t.flatten(1).norm(p=p, dim=1).view(-1, *([1] * (t.ndim - 1)))


def project_linf(x: Tensor, x0: Tensor, eps: float) -> Tensor:
    return torch.clamp(torch.minimum(torch.maximum(x, x0 - eps), x0 + eps), 0.0, 1.0)


def project_l2(delta: Tensor, eps: float) -> Tensor:
    """Radially shrink each example's perturbation onto the l2 ball."""
    norm = _flat_norm(delta, 2)
    scale = torch.where(norm > eps, eps / torch.where(norm > 0, norm, torch.ones_like(norm)), torch.ones_like(norm))
    return delta * scale


def l2_direction(g: Tensor) -> Tensor:
    """Unit-l2 direction per example; zero where the gradient vanishes."""
    norm = _flat_norm(g, 2)
    return torch.where(norm > 0, g / torch.where(norm > 0, norm, torch.ones_like(norm)), torch.zeros_like(g))


def _identity(t: Tensor) -> Tensor:
    return t


def fgsm(model: Model, x: Tensor, y: Tensor, eps: float = 1 / 255, loss: str = "ce",
         kappa: float = 0.0) -> AttackResult:
    if eps < 0:
        raise AttackError("eps must be >= 0")
    x = x.detach()
    g = _grad(model, x, _identity, y, loss, kappa)
    x_adv = torch.clamp(x + eps * torch.sign(g), 0.0, 1.0)
    return _finish(model, x_adv, y, loss, kappa)


def _random_start(x: Tensor, eps: float, norm: str, seed: int) -> Tensor:
    gen = torch.Generator().manual_seed(seed)
    noise = torch.rand(x.shape, generator=gen, dtype=x.dtype) * 2 - 1
    if norm == "linf":
        return project_linf(x + eps * noise, x, eps)
    return torch.clamp(x + project_l2(eps * noise, eps), 0.0, 1.0)


def _iterate(model: Model, x: Tensor, y: Tensor, eps: float, alpha: float, steps: int, norm: str,
             momentum: float | None, random_start: bool, seed: int, loss: str, kappa: float) -> AttackResult:
    if eps < 0:
        raise AttackError("eps must be >= 0")
    if alpha < 0:
        raise AttackError("step size must be >= 0")
    if steps < 1:
        raise AttackError("steps must be >= 1")
    x0 = x.detach()
    x_adv = _random_start(x0, eps, norm, seed) if random_start else x0.clone()
    acc = torch.zeros_like(x0)
    for _ in range(steps):
        g = _grad(model, x_adv, _identity, y, loss, kappa)
        if momentum is not None:
            if momentum:
                acc = momentum * acc + g / torch.clamp(_flat_norm(g, 1), min=1e-12)
            else:
                # the step direction is scale-free, so without history the
                # l1 normalisation is a no-op; skipping it keeps the
                # trajectory bit-identical to plain PGD
                acc = g
            g = acc
        if norm == "linf":
            x_adv = project_linf(x_adv + alpha * torch.sign(g), x0, eps)
        else:
            delta = project_l2(x_adv + alpha * l2_direction(g) - x0, eps)
            x_adv = torch.clamp(x0 + delta, 0.0, 1.0)
    return _finish(model, x_adv, y, loss, kappa)


def pgd_linf(model: Model, x: Tensor, y: Tensor, eps: float = 1 / 255, alpha: float | None = None,
             steps: int = 7, random_start: bool = False, seed: int = 0, loss: str = "ce",
             kappa: float = 0.0) -> AttackResult:
    alpha = eps / 4 if alpha is None else alpha
    return _iterate(model, x, y, eps, alpha, steps, "linf", None, random_start, seed, loss, kappa)


def pgd_l2(model: Model, x: Tensor, y: Tensor, eps: float = 1 / 255, alpha: float | None = None,
           steps: int = 7, random_start: bool = False, seed: int = 0, loss: str = "ce",
           kappa: float = 0.0) -> AttackResult:
    alpha = eps / 4 if alpha is None else alpha
    return _iterate(model, x, y, eps, alpha, steps, "l2", None, random_start, seed, loss, kappa)


def mi_attack(model: Model, x: Tensor, y: Tensor, eps: float = 1 / 255, alpha: float | None = None,
              steps: int = 7, momentum: float = 1.0, norm: str = "linf", random_start: bool = False,
              seed: int = 0, loss: str = "ce", kappa: float = 0.0) -> AttackResult:
    """Momentum iterative attack: ``g <- mu * g + grad / ||grad||_1``."""
    if momentum < 0:
        raise AttackError("momentum must be >= 0")
    if norm not in ("linf", "l2"):
        raise AttackError(f"unknown norm {norm!r}")
    alpha = eps / 4 if alpha is None else alpha
    return _iterate(model, x, y, eps, alpha, steps, norm, momentum, random_start, seed, loss, kappa)


def apply_semantic(kind: str, x: Tensor, delta: Tensor) -> Tensor:
    """Apply per-image semantic parameter ``delta`` (shape (B,)) to ``x``."""
    d = delta.view(-1, 1, 1)
    if kind == "hue":
        hsv = rgb_to_hsv(x)
        h = clip(hsv[:, 0] + d, 0.0, TWO_PI)
        out = hsv_to_rgb(torch.stack([h, hsv[:, 1], hsv[:, 2]], dim=1))
    elif kind == "saturation":
        hsv = rgb_to_hsv(x)
        s = clip(hsv[:, 1] * d, 0.0, 1.0)
        out = hsv_to_rgb(torch.stack([hsv[:, 0], s, hsv[:, 2]], dim=1))
    elif kind == "brightness":
        out = clip(x + d.unsqueeze(1), 0.0, 1.0)
    elif kind == "contrast":
        out = clip(x * d.unsqueeze(1), 0.0, 1.0)
    elif kind == "rotation":
        out = rotate(x, delta)
    else:
        raise AttackError(f"unknown semantic kind {kind!r}")
    return out


def semantic_attack(model: Model, x: Tensor, y: Tensor, kind: str, interval: tuple[float, float],
                    steps: int = 1, alpha: float | None = None, init: str = "random", seed: int = 0,
                    loss: str = "ce", kappa: float = 0.0) -> AttackResult:
    spec = AttackSpec(kind, interval=tuple(interval), steps=steps, step_size=alpha, init=init,
                      seed=seed, loss=loss, kappa=kappa)
    lo, hi = spec.interval
    x = x.detach()
    if init == "random":
        gen = torch.Generator().manual_seed(seed)
        delta = lo + (hi - lo) * torch.rand(len(x), generator=gen, dtype=x.dtype)
    else:
        delta = torch.full((len(x),), min(max(IDENTITY[kind], lo), hi), dtype=x.dtype)
    for _ in range(steps):
        g = _grad(model, delta, lambda d: apply_semantic(kind, x, d), y, loss, kappa)
        delta = torch.clamp(delta + spec.alpha * torch.sign(g), lo, hi)
    with torch.no_grad():
        x_adv = torch.clamp(apply_semantic(kind, x, delta), 0.0, 1.0)
    return _finish(model, x_adv, y, loss, kappa, delta)


def composite_attack(model: Model, x: Tensor, y: Tensor, sequence: Sequence[AttackSpec]) -> AttackResult:
    """Fixed-order composition: each stage attacks the previous stage's output."""
    if not sequence:
        raise AttackError("composite attack needs a non-empty sequence")
    current = x.detach()
    result = None
    for spec in sequence:
        if spec.kind in ("clean", "caa"):
            raise AttackError(f"{spec.kind} cannot be a composite stage")
        result = run_attack(model, current, y, spec)
        current = result.x_adv
    return result


def run_attack(model: Model, x: Tensor, y: Tensor, spec: AttackSpec) -> AttackResult:
    common = dict(loss=spec.loss, kappa=spec.kappa)
    if spec.kind == "clean":
        return _finish(model, x, y, spec.loss, spec.kappa)
    if spec.kind in SEMANTIC:
        return semantic_attack(model, x, y, spec.kind, spec.interval, spec.steps, spec.alpha,
                               spec.init, spec.seed, **common)
    if spec.kind == "caa":
        return composite_attack(model, x, y, spec.sequence)
    if spec.kind == "fgsm_linf":
        return fgsm(model, x, y, spec.eps, **common)
    lp = dict(eps=spec.eps, alpha=spec.alpha, steps=spec.steps, random_start=spec.random_start,
              seed=spec.seed, **common)
    if spec.kind == "pgd_linf":
        return pgd_linf(model, x, y, **lp)
    if spec.kind == "pgd_l2":
        return pgd_l2(model, x, y, **lp)
    norm = "linf" if spec.kind == "mi_linf" else "l2"
    return mi_attack(model, x, y, momentum=spec.momentum, norm=norm, **lp)


# Magnitudes and iteration counts of the standard twelve evaluations.
TABLE_EPS = 1 / 255
TABLE_INTERVALS = {
    "hue": (-math.pi, math.pi),
    "saturation": (0.7, 1.3),
    "rotation": (-10.0, 10.0),
    "brightness": (-0.2, 0.2),
    "contrast": (0.7, 1.3),
}
LP_STEPS = 7


def default_spec(kind: str, seed: int = 0) -> AttackSpec:
    if kind in SEMANTIC:
        return AttackSpec(kind, interval=TABLE_INTERVALS[kind], steps=1, seed=seed)
    if kind == "clean":
        return AttackSpec("clean")
    if kind == "fgsm_linf":
        return AttackSpec(kind, eps=TABLE_EPS, steps=1)
    if kind == "caa":
        stages = tuple(default_spec(k, seed + i) for i, k in enumerate(SEMANTIC))
        # one iteration per stage; the l_inf stage spends its whole budget at once
        stages += (AttackSpec("pgd_linf", eps=TABLE_EPS, steps=1, step_size=TABLE_EPS),)
        return AttackSpec("caa", sequence=stages, seed=seed)
    return AttackSpec(kind, eps=TABLE_EPS, steps=LP_STEPS, seed=seed)


def default_suite(seed: int = 0) -> list[AttackSpec]:
    """The twelve evaluations in canonical order."""
    return [default_spec(kind, seed) for kind in KINDS]


def with_seed(spec: AttackSpec, seed: int) -> AttackSpec:
    if spec.kind == "caa":
        return replace(spec, seed=seed, sequence=tuple(with_seed(s, seed + i) for i, s in enumerate(spec.sequence)))
    return replace(spec, seed=seed)
