"""MLP surrogate from genome to comprehensive robust accuracy.

Pretrained on cheap low-fidelity pairs, then fine-tuned on the growing
archive of high-fidelity pairs (the whole archive is replayed each time).

Hidden biases start at 1 so most units begin active and the network starts
close to a linear model of the one-hot features; the output layer starts as
the constant mean target. Pretraining decays weights (not biases), and
fine-tuning penalises distance from the pretrained weights (L2-SP) so a small
archive shifts the model without erasing what the low-fidelity data taught.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import checkpoint, genome as gn

log = logging.getLogger(__name__)

FEATURES = sum(gn.CARDINALITIES)
GRAD_CLIP = 5.0
HIDDEN_BIAS = 1.0
WEIGHT_DECAY = 1.0
ANCHOR_PENALTY = 1e-2

Pair = tuple[Sequence[int], float]


class SurrogateError(RuntimeError):
    pass


def features(genomes: Sequence[Sequence[int]]) -> torch.Tensor:
    return torch.from_numpy(np.stack([gn.one_hot(g) for g in genomes])).float()


@dataclass
class SurrogateModel:
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0
    net: nn.Module | None = None
    history: list[dict] = field(default_factory=list)
    archive: list[tuple[tuple[int, ...], float]] = field(default_factory=list)
    anchor: list[torch.Tensor] | None = None

    def build(self, offset: float = 0.0) -> None:
        torch.manual_seed(self.seed)
        layers: list[nn.Module] = []
        width = FEATURES
        for h in self.hidden:
            layers += [nn.Linear(width, h), nn.ReLU()]
            width = h
        head = nn.Linear(width, 1)
        with torch.no_grad():
            for layer in layers[::2]:
                layer.bias.fill_(HIDDEN_BIAS)
            head.weight.zero_()
            head.bias.fill_(offset)
        self.net = nn.Sequential(*layers, head)

    @property
    def fitted(self) -> bool:
        return self.net is not None and bool(self.history)

    def _train(self, pairs: Sequence[Pair], epochs: int, opt: torch.optim.Optimizer, tag: str) -> float:
        genomes = [gn.check(g) for g, _ in pairs]
        targets = torch.tensor([float(t) for _, t in pairs]).view(-1, 1)
        x = features(genomes)
        params = list(self.net.parameters())
        self.net.train()
        for _ in range(epochs):
            opt.zero_grad()
            loss = torch.mean((self.net(x) - targets) ** 2)
            if self.anchor is not None:
                loss = loss + ANCHOR_PENALTY * sum(((p - a) ** 2).sum() for p, a in zip(params, self.anchor))
            loss.backward()
            nn.utils.clip_grad_norm_(params, GRAD_CLIP)
            opt.step()
        self.net.eval()
        with torch.no_grad():
            mse = float(torch.mean((self.net(x) - targets) ** 2))
        if not np.isfinite(mse):
            raise SurrogateError(f"non-finite training loss during {tag}")
        self.history.append({"stage": tag, "pairs": len(pairs), "epochs": epochs, "mse": mse})
        log.info("surrogate %s: %d pairs, mse %.3e", tag, len(pairs), mse)
        return mse

    def predict(self, g: Sequence[int]) -> float:
        return float(self.predict_many([g])[0])

    def predict_many(self, genomes: Sequence[Sequence[int]]) -> np.ndarray:
        if not self.fitted:
            raise SurrogateError("surrogate has not been fitted")
        with torch.no_grad():
            return self.net(features([gn.check(g) for g in genomes])).view(-1).double().numpy()

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        if not self.fitted:
            raise SurrogateError("cannot save an unfitted surrogate")
        payload = {
            "kind": "surrogate",
            "hidden": list(self.hidden),
            "seed": self.seed,
            "history": self.history,
            "archive": [[gn.to_text(g), ra] for g, ra in self.archive],
            **(meta or {}),
        }
        state = dict(self.net.state_dict())
        if self.anchor is not None:
            state.update({f"anchor.{i}": a for i, a in enumerate(self.anchor)})
        checkpoint.save(path, state, checkpoint.SURROGATE_MAGIC, payload)

    @classmethod
    def load(cls, path: str | Path) -> tuple["SurrogateModel", dict]:
        state, meta = checkpoint.load(path, checkpoint.SURROGATE_MAGIC)
        model = cls(hidden=tuple(meta["hidden"]), seed=meta["seed"], history=list(meta["history"]),
                    archive=[(gn.parse(g), float(ra)) for g, ra in meta["archive"]])
        model.build()
        anchors = sorted((k for k in state if k.startswith("anchor.")), key=lambda k: int(k.split(".")[1]))
        if anchors:
            model.anchor = [state.pop(k) for k in anchors]
        checkpoint.restore(model.net, state)
        model.net.eval()
        return model, meta


def _check_pairs(pairs: Sequence[Pair]) -> None:
    for g, ra in pairs:
        gn.check(g)
        if not 0.0 <= float(ra) <= 1.0:
            raise ValueError(f"target {ra} outside [0, 1]")


def fit_low_fidelity(pairs: Sequence[Pair], epochs: int = 500, lr: float = 3e-3, seed: int = 0,
                     hidden: tuple[int, ...] = (64, 64)) -> SurrogateModel:
    if len(pairs) < 2:
        raise ValueError("need at least two training pairs")
    _check_pairs(pairs)
    distinct = {tuple(g) for g, _ in pairs}
    if len(distinct) == 1 and len({float(t) for _, t in pairs}) > 1:
        warnings.warn("identical genomes with distinct targets; surrogate can only learn their mean")
    targets = [float(t) for _, t in pairs]
    # exact for constant targets, where a rounded mean would leave a residual
    offset = targets[0] if len(set(targets)) == 1 else float(np.mean(targets))
    model = SurrogateModel(hidden=tuple(hidden), seed=seed)
    model.build(offset)
    named = list(model.net.named_parameters())
    opt = torch.optim.AdamW([
        {"params": [p for n, p in named if n.endswith("weight")], "weight_decay": WEIGHT_DECAY},
        {"params": [p for n, p in named if n.endswith("bias")], "weight_decay": 0.0},
    ], lr=lr)
    model._train(pairs, epochs, opt, "low")
    model.anchor = [p.detach().clone() for p in model.net.parameters()]
    return model


def finetune_high_fidelity(model: SurrogateModel, new_pairs: Sequence[Pair], epochs: int = 100,
                           lr: float = 1e-3) -> SurrogateModel:
    """Append ``new_pairs`` to the model's archive and retrain on the whole archive."""
    if not model.fitted:
        raise SurrogateError("fine-tuning requires a fitted surrogate")
    if not new_pairs:
        return model
    _check_pairs(new_pairs)
    model.archive.extend((gn.check(g), float(ra)) for g, ra in new_pairs)
    model._train(model.archive, epochs, torch.optim.Adam(model.net.parameters(), lr=lr), "high")
    return model


def predict(model: SurrogateModel, g: Sequence[int]) -> float:
    return model.predict(g)
