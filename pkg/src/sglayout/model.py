"""Layout network: graph convolution, extreme-point head and mask network."""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeMismatch, UnknownVocab
from .geometry import ExtremePoints, bbox_from_extreme_points
from .metrics import LayoutPrediction
from .nn import (BatchNorm2d, Conv2d, Linear, Module, ReLU, Sequential, Sigmoid, Tensor,
                 UpsampleNearest2x, load_checkpoint, mlp, save_checkpoint)
from .scenegraph import PREDICATES, SceneGraph, Vocabulary

ModelOutput = LayoutPrediction

N_UPSAMPLE = 4  # 1x1 seed doubled four times gives the 16x16 mask


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 128
    d_out: int = 128
    hidden: int = 512
    layers: int = 5
    ep_hidden: int = 512
    mask_dim: int = 128
    mask_k: int = 16
    layout_size: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("d_in", "d_out", "hidden", "layers", "ep_hidden", "mask_dim", "layout_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_in != self.d_out:
            raise ValueError("d_in must equal d_out (isolated nodes pass through unchanged)")
        if self.mask_k != 2 ** N_UPSAMPLE:
            raise ValueError(f"mask_k must be {2 ** N_UPSAMPLE}")

    @classmethod
    def paper(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        base = dict(d_in=32, d_out=32, hidden=64, ep_hidden=64, mask_dim=32, layout_size=64)
        base.update(kw)
        return cls(**base)


@dataclass
class GraphBatch:
    """Several graphs packed into one disjoint graph."""

    obj_rows: np.ndarray       # (O,) category row per object
    pred_rows: np.ndarray      # (T,) predicate row per edge
    edges: np.ndarray          # (T, 2) subject, object in packed numbering
    offsets: np.ndarray        # (G + 1,) object ranges per graph

    @property
    def n_objects(self) -> int:
        return len(self.obj_rows)


def encode_graphs(graphs: Sequence[SceneGraph], vocab: Vocabulary) -> GraphBatch:
    obj_rows, pred_rows, edges, offsets = [], [], [], [0]
    pred_row = {p: i for i, p in enumerate(PREDICATES)}
    for g in graphs:
        base = offsets[-1]
        for o in g.objects:
            if o.category not in vocab:
                raise UnknownVocab(f"category {o.category!r} not in vocabulary")
            obj_rows.append(vocab.row(o.category))
        for e in g.relations:
            pred_rows.append(pred_row[e.predicate])
            edges.append((base + e.subject, base + e.object))
        offsets.append(base + len(g.objects))
    return GraphBatch(np.array(obj_rows, dtype=np.int64), np.array(pred_rows, dtype=np.int64),
                      np.array(edges, dtype=np.int64).reshape(-1, 2), np.array(offsets))


class GraphConv(Module):
    """One message-passing layer over (subject, predicate, object) triples.

    Each triple's concatenated vectors go through a two-stage MLP that emits
    a subject candidate, a new predicate vector and an object candidate.
    Candidates are averaged per node and passed through a node MLP. Nodes
    without edges keep their input vector.
    """

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.dim, self.hidden = dim, hidden
        self.net1 = self.add_child("net1", mlp([3 * dim, hidden, 2 * hidden + dim], rng))
        self.net2 = self.add_child("net2", mlp([hidden, hidden, dim], rng))

    def forward(self, inputs, train=False):
        obj, pred, edges = inputs
        n, d, hd = len(obj), self.dim, self.hidden
        if len(edges) == 0:
            self._cache = (n, edges, None, None)
            return obj.copy(), pred.copy()
        s, o = edges[:, 0], edges[:, 1]
        out = self.net1.forward(np.concatenate([obj[s], pred, obj[o]], axis=1), train)
        new_s, new_p, new_o = out[:, :hd], out[:, hd:hd + d], out[:, hd + d:]
        counts = np.bincount(s, minlength=n) + np.bincount(o, minlength=n)
        pooled = np.zeros((n, hd))
        np.add.at(pooled, s, new_s)
        np.add.at(pooled, o, new_o)
        connected = np.flatnonzero(counts)
        pooled = pooled[connected] / counts[connected, None]
        new_obj = obj.copy()
        new_obj[connected] = self.net2.forward(pooled, train)
        self._cache = (n, edges, connected, counts)
        return new_obj, new_p

    def backward(self, grad):
        g_obj, g_pred = grad
        n, edges, connected, counts = self._need_cache()
        if connected is None:
            return g_obj.copy(), g_pred.copy()
        d, hd = self.dim, self.hidden
        s, o = edges[:, 0], edges[:, 1]
        g_obj_in = g_obj.copy()
        g_obj_in[connected] = 0.0
        g_pooled = np.zeros((n, hd))
        g_pooled[connected] = self.net2.backward(g_obj[connected]) / counts[connected, None]
        g_out = np.concatenate([g_pooled[s], g_pred, g_pooled[o]], axis=1)
        g_t = self.net1.backward(g_out)
        np.add.at(g_obj_in, s, g_t[:, :d])
        np.add.at(g_obj_in, o, g_t[:, 2 * d:])
        return g_obj_in, g_t[:, d:2 * d]


class GCN(Module):
    def __init__(self, n_categories: int, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        d = cfg.d_in
        self.obj_embed = Tensor(rng.normal(0.0, 1.0, size=(n_categories, d)))
        self.pred_embed = Tensor(rng.normal(0.0, 1.0, size=(len(PREDICATES), d)))
        self._params.update(obj_embed=self.obj_embed, pred_embed=self.pred_embed)
        self.convs = [self.add_child(f"conv{i}", GraphConv(d, cfg.hidden, rng))
                      for i in range(cfg.layers)]

    def forward(self, batch: GraphBatch, train=False):
        obj = self.obj_embed.data[batch.obj_rows]
        pred = self.pred_embed.data[batch.pred_rows]
        for conv in self.convs:
            obj, pred = conv.forward((obj, pred, batch.edges), train)
        self._cache = batch
        return obj

    def backward(self, grad):
        batch = self._need_cache()
        g_obj, g_pred = grad, np.zeros((len(batch.pred_rows), self.pred_embed.shape[1]))
        for conv in reversed(self.convs):
            g_obj, g_pred = conv.backward((g_obj, g_pred))
        np.add.at(self.obj_embed.grad, batch.obj_rows, g_obj)
        np.add.at(self.pred_embed.grad, batch.pred_rows, g_pred)
        return None


class MaskNet(Module):
    """Embedding plus extreme points -> 16x16 soft mask."""

    def __init__(self, d: int, channels: int, rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        self.project = self.add_child("project", Linear(d + 10, channels, rng))
        blocks = []
        for _ in range(N_UPSAMPLE):
            blocks += [UpsampleNearest2x(), BatchNorm2d(channels), Conv2d(channels, channels, 3, rng),
                       ReLU()]
        blocks += [Conv2d(channels, 1, 1, rng), Sigmoid()]
        self.body = self.add_child("body", Sequential(*blocks))

    def forward(self, x, train=False):
        seed = self.project.forward(x, train)
        self._cache = True
        out = self.body.forward(seed.reshape(len(x), self.channels, 1, 1), train)
        return out[:, 0]

    def backward(self, grad):
        self._need_cache()
        g = self.body.backward(grad[:, None])
        return self.project.backward(g.reshape(len(g), self.channels))


class LayoutModel(Module):
    """GCN embeddings feed an extreme-point head; the mask net sees both."""

    def __init__(self, vocab: Vocabulary, cfg: ModelConfig):
        super().__init__()
        self.vocab, self.cfg = vocab, cfg
        rng = np.random.default_rng(cfg.seed)
        self.gcn = self.add_child("gcn", GCN(len(vocab), cfg, rng))
        self.ep_head = self.add_child("ep_head", mlp([cfg.d_out, cfg.ep_hidden, 10], rng,
                                                     final_relu=False))
        self.mask_net = self.add_child("mask_net", MaskNet(cfg.d_out, cfg.mask_dim, rng))

    def set_update_stats(self, flag: bool):
        for m in self.modules():
            if isinstance(m, BatchNorm2d):
                m.update_stats = flag

    def forward(self, batch: GraphBatch, train=False):
        """Returns raw extreme points (N, 10) and soft masks (N, K, K).

        The mask net is conditioned on the raw points in train mode and on
        points clamped to [0, 1] in eval mode.
        """
        emb = self.gcn.forward(batch, train)
        eps = self.ep_head.forward(emb, train)
        if train:
            cond_eps, inside = eps, None
        else:
            cond_eps = np.clip(eps, 0.0, 1.0)
            inside = (eps >= 0.0) & (eps <= 1.0)
        masks = self.mask_net.forward(np.concatenate([emb, cond_eps], axis=1), train)
        self._cache = (emb.shape[1], inside)
        return eps, masks

    def backward(self, grad):
        g_eps, g_masks = grad
        d, inside = self._need_cache()
        g_cond = self.mask_net.backward(g_masks)
        g_emb = g_cond[:, :d]
        g_ep_cond = g_cond[:, d:]
        if inside is not None:
            g_ep_cond = np.where(inside, g_ep_cond, 0.0)
        g_emb = g_emb + self.ep_head.backward(g_eps + g_ep_cond)
        self.gcn.backward(g_emb)

    def predict_batch(self, graphs: Sequence[SceneGraph]) -> list[ModelOutput]:
        batch = encode_graphs(graphs, self.vocab)
        eps, masks = self.forward(batch, train=False)
        eps = np.clip(eps, 0.0, 1.0)
        outs = []
        for g, (a, b) in enumerate(zip(batch.offsets[:-1], batch.offsets[1:])):
            pts = [ExtremePoints.from_array(row, "normalized") for row in eps[a:b]]
            boxes, flags = zip(*(bbox_from_extreme_points(p) for p in pts))
            outs.append(ModelOutput(pts, list(boxes), masks[a:b].copy(), list(flags)))
        return outs

    def predict(self, graph: SceneGraph) -> ModelOutput:
        return self.predict_batch([graph])[0]

    # ---- persistence ----

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())
        state.update((name, b.copy()) for name, b in self.named_buffers())
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ShapeMismatch(f"checkpoint keys differ: missing {missing}, unexpected {extra}")
        for name, arr in state.items():
            target = params[name].data if name in params else buffers[name]
            if target.shape != arr.shape:
                raise ShapeMismatch(f"{name}: checkpoint shape {arr.shape} vs model {target.shape}")
            target[...] = arr

    def config_json(self) -> dict:
        c = asdict(self.cfg)
        return {"d_in": c["d_in"], "d_out": c["d_out"], "hidden": c["hidden"],
                "layers": c["layers"], "mask_k": c["mask_k"], "ep_hidden": c["ep_hidden"],
                "mask_dim": c["mask_dim"], "layout_size": c["layout_size"], "seed": c["seed"],
                "categories": self.vocab.to_json()}

    def save(self, path):
        save_checkpoint(path, self.state_dict())
        with open(sidecar_path(path), "w") as f:
            json.dump(self.config_json(), f, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "LayoutModel":
        with open(sidecar_path(path)) as f:
            meta = json.load(f)
        vocab = Vocabulary.from_json(meta.pop("categories"))
        model = cls(vocab, ModelConfig(**meta))
        model.load_state_dict(load_checkpoint(path))
        return model


def sidecar_path(ckpt_path) -> str:
    return f"{ckpt_path}.json"
