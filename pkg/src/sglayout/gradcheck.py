"""Seeded finite-difference checks of every layer and the composed training loss."""

from __future__ import annotations

import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .model import GraphConv, LayoutModel, ModelConfig
from .nn import (BatchNorm2d, Conv2d, GradCheckReport, Linear, Module, ReLU, Sigmoid,
                 Tensor, UpsampleNearest2x, grad_check, relu_pattern)
from .scenegraph import PREDICATES, ObjectNode, RelationEdge, SceneGraph
from .geometry import BoundingBox
from .train import TrainConfig, TrainSample, batch_loss


@dataclass
class SuiteResult:
    tolerance: float
    reports: "OrderedDict[str, GradCheckReport]" = field(default_factory=OrderedDict)
    seconds: float = 0.0

    @property
    def max_error(self) -> float:
        return max((r.max_error for r in self.reports.values()), default=0.0)

    @property
    def checked(self) -> int:
        return sum(r.checked for r in self.reports.values())

    @property
    def skipped(self) -> int:
        return sum(r.skipped for r in self.reports.values())

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports.values())

    def summary(self) -> str:
        lines = [f"{name:32s} {r.max_error:.3e}  {'ok' if r.passed else 'FAIL'}"
                 for name, r in self.reports.items()]
        lines.append(f"{len(self.reports)} checks, {self.checked} entries ({self.skipped} skipped "
                     f"at kinks), max relative error {self.max_error:.3e}, {self.seconds:.1f}s: "
                     f"{'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def _jitter(module: Module, rng: np.random.Generator, scale: float = 0.1):
    """Move parameters off their initial values; zero biases can park a ReLU exactly on its kink."""
    for _, p in module.named_parameters():
        p.data += rng.normal(scale=scale, size=p.shape)


def _check_module(module: Module, x: np.ndarray, rng: np.random.Generator, train: bool,
                  tolerance: float) -> GradCheckReport:
    """Check parameter and input gradients of L = sum(module(x) * R) for a fixed random R."""
    _jitter(module, rng)
    for m in module.modules():
        if isinstance(m, BatchNorm2d):
            m.update_stats = False
            m._buffers["running_mean"][...] = rng.normal(size=m.channels)
            m._buffers["running_var"][...] = rng.uniform(0.5, 2.0, size=m.channels)
    xt = Tensor(x)
    proj = rng.normal(size=module.forward(x, train).shape)

    def closure():
        module.zero_grad()
        out = module.forward(xt.data, train)
        xt.grad = module.backward(proj)
        return float((out * proj).sum())

    tensors = OrderedDict(named for named in module.named_parameters())
    tensors["input"] = xt
    return grad_check(closure, tensors, tolerance=tolerance, pattern=lambda: relu_pattern(module))


def _random_graph(rng: np.random.Generator, categories: list[str]) -> SceneGraph:
    n = int(rng.integers(2, 6))
    objects = []
    for i in range(n):
        x0, y0 = rng.uniform(0, 60, size=2)
        w, h = rng.uniform(4, 60, size=2)
        objects.append(ObjectNode(i, categories[rng.integers(len(categories))], None,
                                  BoundingBox(x0, y0, x0 + w, y0 + h)))
    edges = set()
    for _ in range(int(rng.integers(1, 2 * n))):
        s, o = rng.choice(n, size=2, replace=False)
        edges.add((int(s), PREDICATES[rng.integers(len(PREDICATES))], int(o)))
    rels = tuple(RelationEdge(s, p, o) for s, p, o in edges)
    return SceneGraph((128, 128), tuple(objects), rels)


def _check_model(rng: np.random.Generator, tolerance: float, max_entries: int) -> GradCheckReport:
    from .synth import synth_vocabulary
    vocab = synth_vocabulary()
    names = [c.name for c in vocab.categories]
    cfg = ModelConfig(d_in=4, d_out=4, hidden=6, layers=2, ep_hidden=6, mask_dim=3,
                      layout_size=16, seed=int(rng.integers(2 ** 31)))
    model = LayoutModel(vocab, cfg)
    _jitter(model, rng)
    model.set_update_stats(False)
    samples = []
    for _ in range(int(rng.integers(1, 3))):
        g = _random_graph(rng, names)
        n = len(g.objects)
        samples.append(TrainSample(g, rng.uniform(0, 1, size=(n, 10)),
                                   (rng.uniform(size=(n, 16, 16)) > 0.5).astype(float)))
    tcfg = TrainConfig()

    def closure():
        model.zero_grad()
        return batch_loss(model, samples, tcfg).loss_total

    return grad_check(closure, OrderedDict(model.named_parameters()), tolerance=tolerance,
                      max_entries=max_entries, seed=int(rng.integers(2 ** 31)),
                      pattern=lambda: relu_pattern(model))


def _check_graphconv(rng, tolerance):
    d, hd = int(rng.integers(2, 5)), int(rng.integers(2, 6))
    n = int(rng.integers(2, 6))
    t = int(rng.integers(1, 7))
    edges = np.stack([rng.integers(n, size=t), rng.integers(n, size=t)], axis=1)
    conv = GraphConv(d, hd, rng)
    _jitter(conv, rng)
    obj, pred = Tensor(rng.normal(size=(n, d))), Tensor(rng.normal(size=(t, d)))
    po, pp = rng.normal(size=(n, d)), rng.normal(size=(t, d))

    def closure():
        conv.zero_grad()
        o, p = conv.forward((obj.data, pred.data, edges), True)
        obj.grad, pred.grad = conv.backward((po, pp))
        return float((o * po).sum() + (p * pp).sum())

    tensors = OrderedDict(conv.named_parameters())
    tensors.update(obj=obj, pred=pred)
    return grad_check(closure, tensors, tolerance=tolerance, pattern=lambda: relu_pattern(conv))


def run_suite(seed: int = 0, shapes: int = 20, tolerance: float = 1e-4,
              model_entries: int = 3) -> SuiteResult:
    """Check each layer type on ``shapes`` random shapes, plus the composed loss."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    result = SuiteResult(tolerance)
    for s in range(shapes):
        n = int(rng.integers(1, 4))
        a, b = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h, w = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        cases = [
            ("linear", Linear(a, b, rng), rng.normal(size=(n, a)), False),
            ("relu", ReLU(), rng.normal(size=(n, a)), False),
            ("sigmoid", Sigmoid(), rng.normal(scale=3.0, size=(n, a)), False),
            ("conv3x3", Conv2d(c_in, c_out, 3, rng), rng.normal(size=(n, c_in, h, w)), False),
            ("conv1x1", Conv2d(c_in, c_out, 1, rng), rng.normal(size=(n, c_in, h, w)), False),
            ("batchnorm.train", BatchNorm2d(c_in), rng.normal(size=(n + 1, c_in, h, w)), True),
            ("batchnorm.eval", BatchNorm2d(c_in), rng.normal(size=(n, c_in, h, w)), False),
            ("upsample2x", UpsampleNearest2x(), rng.normal(size=(n, c_in, h, w)), False),
        ]
        for name, module, x, train in cases:
            if isinstance(module, BatchNorm2d):
                module.gamma.data[...] = rng.uniform(0.5, 2.0, size=c_in)
                module.beta.data[...] = rng.normal(size=c_in)
            result.reports[f"{name}[{s}]"] = _check_module(module, x, rng, train, tolerance)
        result.reports[f"graphconv[{s}]"] = _check_graphconv(rng, tolerance)
        result.reports[f"model.loss[{s}]"] = _check_model(rng, tolerance, model_entries)
    result.seconds = time.perf_counter() - start
    return result
