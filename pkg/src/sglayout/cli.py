"""Command-line entry point: ``sglayout <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from .composition import category_colors, mask_from_ppm, mask_to_ppm, render_layout, write_ppm
from .dataset import Dataset, read_dataset, write_dataset
from .errors import SGLError
from .gradcheck import run_suite
from .ingest import ingest_annotations, patches_from_annotations, scenes_from_annotations
from .metrics import evaluate
from .model import LayoutModel, ModelConfig
from .retrieval import build_index, query_descriptor, query_topk, read_index, write_index
from .scenegraph import parse_scene_graph
from .synth import SynthConfig, synth_generate, synth_patch_corpus, synth_vocabulary
from .train import TrainConfig, train, write_curve_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("sglayout")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _parent(path):
    Path(path).resolve().parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path, doc):
    _parent(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def _dataclass_from(cls, base, overrides: dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    return base(**overrides)


def load_train_config(path) -> tuple[ModelConfig, TrainConfig]:
    """``{"preset": "desk"|"paper", "model": {...}, "train": {...}}``; every key optional."""
    doc = _load_json(path) if path else {}
    preset = doc.get("preset", "desk")
    if preset not in ("desk", "paper"):
        raise UsageError(f"unknown preset {preset!r}")
    model_base = ModelConfig.desk if preset == "desk" else ModelConfig.paper
    train_base = TrainConfig.desk if preset == "desk" else TrainConfig
    return (_dataclass_from(ModelConfig, model_base, doc.get("model", {})),
            _dataclass_from(TrainConfig, train_base, doc.get("train", {})))


# ---- commands ---------------------------------------------------------------------

def cmd_build_dataset(args) -> int:
    if args.synthetic == bool(args.annotations):
        raise UsageError("build-dataset needs exactly one of --annotations or --synthetic")
    if args.synthetic:
        cfg = SynthConfig(seed=args.seed, num_scenes=args.scenes, augment=args.augment)
        samples = [s.sample for s in synth_generate(cfg)]
        patches = synth_patch_corpus(args.seed + 1, args.patches_per_category,
                                     first_id=0) if args.patches_per_category else []
        vocab = synth_vocabulary()
    else:
        stuff = [int(v) for v in args.stuff_ids.split(",")] if args.stuff_ids else None
        aset = ingest_annotations(args.annotations, stuff)
        samples = scenes_from_annotations(aset, augment=args.augment)
        patches = patches_from_annotations(aset)
        vocab = aset.vocabulary()
        if aset.skipped_crowd:
            print(f"warning: skipped {aset.skipped_crowd} crowd/RLE annotations", file=sys.stderr)
    write_dataset(args.out, vocab, samples, patches)
    print(f"wrote {len(samples)} scenes and {len(patches)} patches to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    mcfg, tcfg = load_train_config(args.config)
    data = read_dataset(args.dataset)
    model = LayoutModel(data.vocab, mcfg)
    result = train(data.samples, model, tcfg, log=lambda m: print(m, file=sys.stderr))
    model.save(_parent(args.out))
    curve = args.curve or f"{args.out}.curve.csv"
    write_curve_csv(_parent(curve), result.curve)
    first, last = result.curve[0].loss_total, result.curve[-1].loss_total
    print(f"trained {len(result.curve)} steps: loss {first:.4f} -> {last:.4f}; saved {args.out}")
    return EXIT_OK


def _gt_boxes(graph):
    w, h = graph.image_size
    return [b.normalized(w, h) for b in graph.boxes()]


def cmd_eval(args) -> int:
    if bool(args.model) == args.oracle:
        raise UsageError("eval needs exactly one of --model or --oracle")
    data = read_dataset(args.dataset)
    graphs = [s.graph for s in data.samples]
    gt = [_gt_boxes(g) for g in graphs]
    if args.oracle:
        preds = gt
    else:
        model = LayoutModel.load(args.model)
        preds = [p for i in range(0, len(graphs), 32) for p in model.predict_batch(graphs[i:i + 32])]
    report = evaluate(graphs, preds, gt)
    _write_json(args.report, report.to_dict())
    print(f"relation score {report.relation_score:.4f}, avg IoU {report.avg_iou:.4f}")
    return EXIT_OK


def _read_graph(path):
    with open(path, encoding="utf-8") as f:
        return parse_scene_graph(f.read())


def cmd_predict(args) -> int:
    model = LayoutModel.load(args.model)
    graph = _read_graph(args.graph)
    pred = model.predict(graph)
    size = args.size or model.cfg.layout_size
    colors = category_colors([o.category for o in graph.objects], model.vocab)
    write_ppm(_parent(args.out), render_layout(pred, colors, size, size, octagons=args.octagons))
    print(f"wrote {size}x{size} layout to {args.out}")
    return EXIT_OK


def cmd_index(args) -> int:
    data: Dataset = read_dataset(args.dataset)
    if not data.patches:
        raise SGLError(f"{args.dataset}: dataset has no patches")
    out_dir = Path(_parent(args.out)).resolve().parent
    records = []
    for r in data.patches:
        ref = os.path.relpath((data.root / r.mask_ref).resolve(), out_dir) if r.mask_ref else None
        records.append(type(r)(r.patch_id, r.category, r.image_id, r.bbox, r.descriptor,
                               r.image_size, ref))
    index = build_index(records)
    write_index(args.out, index)
    print(f"indexed {len(records)} patches in {len(index.counts)} categories")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    index = read_index(args.index)
    graph = _read_graph(args.graph)
    if not 0 <= args.object < len(graph.objects):
        raise UsageError(f"--object must be in [0, {len(graph.objects) - 1}]")
    model = LayoutModel.load(args.model)
    pred = model.predict(graph)
    category = graph.objects[args.object].category
    desc = query_descriptor(pred.extreme_points[args.object])
    ranked = query_topk(index, category, desc, args.k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = Path(args.index).resolve().parent
    results = []
    for rank, (pid, dist) in enumerate(ranked, start=1):
        ref = index.records[pid].mask_ref
        name = None
        if ref is not None:
            name = f"rank{rank:02d}_{pid}.ppm"
            mask_to_ppm(out / name, mask_from_ppm(base / ref))
        results.append({"rank": rank, "id": pid, "distance": dist, "mask": name})
    _write_json(out / "ranking.json", {"category": category, "object": args.object,
                                       "descriptor": [float(v) for v in desc], "results": results})
    print(f"retrieved {len(results)} {category} patches into {out}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    doc = _load_json(args.config) if args.config else {}
    unknown = sorted(set(doc) - {"seed", "shapes", "tolerance", "model_entries"})
    if unknown:
        raise UsageError(f"unknown grad-check keys: {', '.join(unknown)}")
    result = run_suite(**doc)
    print(result.summary())
    return EXIT_OK if result.passed else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sglayout", description="Scene graph to layout toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("build-dataset", help="build a dataset directory")
    b.add_argument("--annotations", help="COCO-style annotation JSON")
    b.add_argument("--synthetic", action="store_true", help="generate seeded synthetic scenes")
    b.add_argument("--seed", type=int, default=42)
    b.add_argument("--scenes", type=int, default=200)
    b.add_argument("--patches-per-category", type=int, default=100,
                   help="synthetic retrieval patches per thing category (0 for none)")
    b.add_argument("--stuff-ids", help="comma-separated stuff category ids (default: id >= 92)")
    b.add_argument("--augment", action="store_true", help="add heuristic depth/support edges")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_dataset)

    t = sub.add_parser("train", help="train a layout model")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True, help="checkpoint path (a .json sidecar is written next to it)")
    t.add_argument("--config", help="JSON with optional preset/model/train sections")
    t.add_argument("--curve", help="loss curve CSV (default: <out>.curve.csv)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="relation score and box IoU report")
    e.add_argument("--dataset", required=True)
    e.add_argument("--model")
    e.add_argument("--oracle", action="store_true", help="score ground-truth boxes as predictions")
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="render a predicted layout as PPM")
    r.add_argument("--graph", required=True)
    r.add_argument("--model", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--size", type=int, help="output side length (default: model layout size)")
    r.add_argument("--octagons", action="store_true", help="outline predicted octagons")
    r.set_defaults(func=cmd_predict)

    i = sub.add_parser("index", help="build a retrieval index from a dataset's patches")
    i.add_argument("--dataset", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_index)

    q = sub.add_parser("retrieve", help="retrieve patches for one predicted object")
    q.add_argument("--index", required=True)
    q.add_argument("--graph", required=True)
    q.add_argument("--model", required=True)
    q.add_argument("--object", type=int, required=True)
    q.add_argument("--k", type=int, default=5)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_retrieve)

    g = sub.add_parser("grad-check", help="finite-difference gradient checks")
    g.add_argument("--config", help="JSON with optional seed/shapes/tolerance/model_entries")
    g.set_defaults(func=cmd_grad_check)
    return p


def _threads() -> int:
    raw = os.environ.get("SGL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SGL_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"SGL_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except UsageError as exc:
        print(f"sglayout: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SGLError, OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"sglayout: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
