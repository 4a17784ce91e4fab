"""Weight-sharing supernet over the 8-op cell search space.

Each cell owns one weight bank per edge slot (node, slot); a bank holds an
instance of every candidate op. A genome picks one op per slot, so a forward
pass touches exactly one bank entry per slot. Ops take their stride at call
time because in a reduction cell the same slot runs at stride 2 when fed
from a cell input and at stride 1 otherwise.
"""
from __future__ import annotations

import copy
from collections import OrderedDict
import hashlib
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import checkpoint, genome as gn
from .autodiff import NumericError
from .data import Dataset

log = logging.getLogger(__name__)


class ReLUConvBN(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 1, bias=False)
        self.bn = nn.BatchNorm2d(c_out, affine=False)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(F.relu(x)))


class FactorizedReduce(nn.Module):
    """Halve spatial size with two offset strided 1x1 convs."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out // 2, 1, stride=2, bias=False)
        self.conv2 = nn.Conv2d(c_in, c_out - c_out // 2, 1, stride=2, bias=False)
        self.bn = nn.BatchNorm2d(c_out, affine=False)

    def forward(self, x: Tensor) -> Tensor:
        x = F.relu(x)
        shifted = F.pad(x[:, :, 1:, 1:], (0, 1, 0, 1))
        return self.bn(torch.cat([self.conv1(x), self.conv2(shifted)], dim=1))


class Zero(nn.Module):
    def forward(self, x: Tensor, stride: int = 1) -> Tensor:
        return x[:, :, ::stride, ::stride].mul(0.0)


class Pool(nn.Module):
    def __init__(self, kind: str):
        super().__init__()
        self.kind = kind

    def forward(self, x: Tensor, stride: int = 1) -> Tensor:
        if self.kind == "max":
            return F.max_pool2d(x, 3, stride, 1)
        return F.avg_pool2d(x, 3, stride, 1, count_include_pad=False)


class Skip(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.reduce = FactorizedReduce(c, c)

    def forward(self, x: Tensor, stride: int = 1) -> Tensor:
        return x if stride == 1 else self.reduce(x)


class SepConv(nn.Module):
    """ReLU, depthwise kxk (optionally dilated), pointwise 1x1, BN."""

    def __init__(self, c: int, kernel: int, dilation: int = 1):
        super().__init__()
        self.kernel, self.dilation = kernel, dilation
        self.depthwise = nn.Conv2d(c, c, kernel, groups=c, bias=False)
        self.pointwise = nn.Conv2d(c, c, 1, bias=False)
        self.bn = nn.BatchNorm2d(c, affine=False)

    def forward(self, x: Tensor, stride: int = 1) -> Tensor:
        pad = self.dilation * (self.kernel - 1) // 2
        x = F.conv2d(F.relu(x), self.depthwise.weight, None, stride, pad, self.dilation, x.shape[1])
        return self.bn(self.pointwise(x))


def make_op(name: str, c: int) -> nn.Module:
    if name == "none":
        return Zero()
    if name == "max_pool_3x3":
        return Pool("max")
    if name == "avg_pool_3x3":
        return Pool("avg")
    if name == "skip_connect":
        return Skip(c)
    if name == "sep_conv_3x3":
        return SepConv(c, 3)
    if name == "sep_conv_5x5":
        return SepConv(c, 5)
    if name == "dil_conv_3x3":
        return SepConv(c, 3, dilation=2)
    if name == "dil_conv_5x5":
        return SepConv(c, 5, dilation=2)
    raise ValueError(f"unknown op {name!r}")


NUM_SLOTS = gn.NUM_NODES * gn.EDGES_PER_NODE
EXTRACT_CACHE = 8
CALIBRATION_KEY = "calibration"


class SuperCell(nn.Module):
    def __init__(self, c_pp: int, c_p: int, c: int, reduction: bool, reduction_prev: bool):
        super().__init__()
        self.reduction = reduction
        self.pre0 = FactorizedReduce(c_pp, c) if reduction_prev else ReLUConvBN(c_pp, c)
        self.pre1 = ReLUConvBN(c_p, c)
        self.banks = nn.ModuleList(
            nn.ModuleList(make_op(name, c) for name in gn.OPS) for _ in range(NUM_SLOTS)
        )

    def forward(self, s0: Tensor, s1: Tensor, edges: Sequence[tuple[int, int]]) -> Tensor:
        states = [self.pre0(s0), self.pre1(s1)]
        for t in range(gn.NUM_NODES):
            total = 0
            for e in range(gn.EDGES_PER_NODE):
                slot = t * gn.EDGES_PER_NODE + e
                op, src = edges[slot]
                stride = 2 if self.reduction and src < 2 else 1
                total = total + self.banks[slot][op](states[src], stride)
            states.append(total)
        return torch.cat(states[2:], dim=1)


@dataclass
class NetConfig:
    channels: int = 8
    layers: int = 4
    num_classes: int = 10
    in_channels: int = 3
    stem_multiplier: int = 3
    stem_stride: int = 2

    def reduction_layers(self) -> tuple[int, ...]:
        return tuple(sorted({self.layers // 3, 2 * self.layers // 3}))


def _cell_edges(g: Sequence[int], reduction: bool) -> list[tuple[int, int]]:
    cell = 1 if reduction else 0
    return [
        (g[gn.gene_position(cell, t, e, 0)], g[gn.gene_position(cell, t, e, 1)])
        for t in range(gn.NUM_NODES)
        for e in range(gn.EDGES_PER_NODE)
    ]


class Supernet(nn.Module):
    def __init__(self, cfg: NetConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or NetConfig()
        c_stem = cfg.stem_multiplier * cfg.channels
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, c_stem, 3, stride=cfg.stem_stride, padding=1, bias=False), nn.BatchNorm2d(c_stem)
        )
        c_pp, c_p, c = c_stem, c_stem, cfg.channels
        reduce_at = cfg.reduction_layers()
        self.cells = nn.ModuleList()
        reduction_prev = False
        for i in range(cfg.layers):
            reduction = i in reduce_at
            if reduction:
                c *= 2
            self.cells.append(SuperCell(c_pp, c_p, c, reduction, reduction_prev))
            reduction_prev = reduction
            c_pp, c_p = c_p, gn.NUM_NODES * c
        self.classifier = nn.Linear(c_p, cfg.num_classes)
        self.calibration: Tensor | None = None
        self._extracted: OrderedDict = OrderedDict()

    def forward(self, x: Tensor, g: Sequence[int]) -> Tensor:
        normal, reduce = _cell_edges(g, False), _cell_edges(g, True)
        s0 = s1 = self.stem(x)
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1, reduce if cell.reduction else normal)
        return self.classifier(s1.mean(dim=(2, 3)))


def extract(net: "Supernet", g: Sequence[int]) -> "Network":
    """Standalone eval-mode copy of sub-network ``g``.

    When the supernet carries a calibration batch, batch-norm statistics are
    re-estimated for this path and then frozen; shared running statistics
    accumulated over random paths do not fit any single path. Results are
    cached per genome, so repeated extraction is bit-identical.
    """
    g = gn.check(g)
    cached = net._extracted.get(g)
    if cached is not None:
        net._extracted.move_to_end(g)
        return cached
    sub = Network(g, source=net)
    if net.calibration is not None:
        recalibrate(sub, net.calibration)
    sub.eval()
    sub.requires_grad_(False)
    net._extracted[g] = sub
    while len(net._extracted) > EXTRACT_CACHE:
        net._extracted.popitem(last=False)
    return sub


def extract_and_infer(net: "Supernet", g: Sequence[int], batch: Tensor) -> Tensor:
    """Eval-mode logits of the sub-network ``g``; differentiable in ``batch``."""
    if batch.ndim != 4 or batch.shape[1] != net.cfg.in_channels:
        raise ValueError(f"batch shape {tuple(batch.shape)} does not match stem")
    return extract(net, g)(batch)


def recalibrate(model: nn.Module, images: Tensor, batch_size: int = 256) -> None:
    """Replace batch-norm running statistics with exact averages over ``images``."""
    norms = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None
    model.train()
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            model(images[start : start + batch_size])
    for m, mom in zip(norms, saved):
        m.momentum = mom
    model.eval()


class StandaloneCell(nn.Module):
    def __init__(self, pre0: nn.Module, pre1: nn.Module, reduction: bool, edges, ops: list[nn.Module]):
        super().__init__()
        self.pre0, self.pre1 = pre0, pre1
        self.reduction = reduction
        self.sources = [src for _, src in edges]
        self.ops = nn.ModuleList(ops)

    def forward(self, s0: Tensor, s1: Tensor) -> Tensor:
        states = [self.pre0(s0), self.pre1(s1)]
        for t in range(gn.NUM_NODES):
            out = None
            for e in range(gn.EDGES_PER_NODE):
                k = t * gn.EDGES_PER_NODE + e
                src = self.sources[k]
                y = self.ops[k](states[src], 2 if self.reduction and src < 2 else 1)
                out = y if out is None else out + y
            states.append(out)
        return torch.cat(states[2:], dim=1)


class Network(nn.Module):
    """Network holding only the ops a genome selects."""

    def __init__(self, g: Sequence[int], cfg: NetConfig | None = None, source: Supernet | None = None):
        super().__init__()
        self.genome = gn.check(g)
        template = source if source is not None else Supernet(cfg)
        self.cfg = template.cfg
        self.stem = copy.deepcopy(template.stem)
        cells = []
        for cell in template.cells:
            edges = _cell_edges(self.genome, cell.reduction)
            ops = [copy.deepcopy(cell.banks[k][op]) for k, (op, _) in enumerate(edges)]
            cells.append(StandaloneCell(copy.deepcopy(cell.pre0), copy.deepcopy(cell.pre1),
                                        cell.reduction, edges, ops))
        self.cells = nn.ModuleList(cells)
        self.classifier = copy.deepcopy(template.classifier)

    def forward(self, x: Tensor) -> Tensor:
        s0 = s1 = self.stem(x)
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1)
        return self.classifier(s1.mean(dim=(2, 3)))


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 32
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 3e-4
    seed: int = 0
    sampling: str = "uniform"
    adversarial: bool = False
    adversarial_eps: float = 1 / 255
    calibration: int = 256

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.sampling != "uniform":
            raise ValueError(f"unsupported path sampling {self.sampling!r}")


def train_model(model: nn.Module, data: Dataset, cfg: TrainConfig, sample_path=None) -> list[float]:
    """Mini-batch SGD on cross-entropy; returns mean loss per epoch.

    ``sample_path(rng)`` returns the callable trained at each step; the
    supernet uses it to draw a fresh single path per mini-batch.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    if int(data.labels.max()) >= data.num_classes:
        raise ValueError("labels exceed class count")
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    history = []
    for epoch in range(cfg.epochs):
        total, seen = 0.0, 0
        for step, (x, y) in enumerate(data.batches(cfg.batch_size, gen)):
            fn = sample_path(rng) if sample_path else model
            if cfg.adversarial:
                from .attacks import fgsm

                model.eval()
                x = fgsm(fn, x, y, cfg.adversarial_eps).x_adv
            model.train()
            opt.zero_grad(set_to_none=True)
            loss = F.cross_entropy(fn(x), y)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch} step {step} (lr={cfg.lr})")
            loss.backward()
            nn.utils.clip_grad_norm_(params, 5.0)
            opt.step()
            total += loss.item() * len(y)
            seen += len(y)
        history.append(total / seen)
        log.info("epoch %d loss %.4f", epoch, history[-1])
    model.eval()
    return history


def train_supernet(data: Dataset, cfg: TrainConfig, net_cfg: NetConfig | None = None) -> tuple[Supernet, list[float]]:
    """Uniform single-path training: one random genome per mini-batch."""
    net_cfg = net_cfg or NetConfig(num_classes=data.num_classes, in_channels=data.images.shape[1])
    torch.manual_seed(cfg.seed)
    net = Supernet(net_cfg)

    def sample_path(rng):
        g = gn.random_genome(rng)
        return lambda x: net(x, g)

    history = train_model(net, data, cfg, sample_path)
    net.calibration = data.images[: cfg.calibration].clone()
    net._extracted.clear()
    return net, history


def accuracy(model, data: Dataset, batch_size: int = 256) -> float:
    correct = 0
    with torch.no_grad():
        for x, y in data.batches(batch_size):
            correct += int((model(x).argmax(1) == y).sum())
    return correct / len(data)


def state_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_supernet(path: str | Path, net: Supernet, meta: dict | None = None) -> None:
    payload = {"kind": "supernet", "net": asdict(net.cfg), **(meta or {})}
    state = OrderedDict(net.state_dict())
    if net.calibration is not None:
        state[CALIBRATION_KEY] = net.calibration
    checkpoint.save(path, state, checkpoint.SUPERNET_MAGIC, payload)


def load_supernet(path: str | Path) -> tuple[Supernet, dict]:
    state, meta = checkpoint.load(path, checkpoint.SUPERNET_MAGIC)
    net = Supernet(NetConfig(**meta["net"]))
    calibration = state.pop(CALIBRATION_KEY, None)
    checkpoint.restore(net, state)
    net.calibration = calibration
    net.eval()
    return net, meta
