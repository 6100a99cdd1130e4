"""Command line surface.

Subcommands: forward, mask-forward, segment, ablate, auc, explain, align,
diagnostics, pad-demo. Exit codes: 0 success, 2 I/O error, 3 validation
error, 4 numerical failure. Every run is deterministic given --seed, at any
--threads value, and all file outputs are written atomically.
"""

import argparse
import json
import sys

import numpy as np

from . import evaluation, lime, netpbm, perturb, segmentation
from . import graph as graph_mod
from . import masking
from .errors import FileFormatError, GraphError, NumericalError


def _emit(out_path, text: str):
    if out_path:
        netpbm.atomic_write_text(out_path, text)
    else:
        sys.stdout.write(text)


def _triplet(text: str):
    parts = text.split(",")
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated values, got '{text}'")
    return tuple(float(p) for p in parts)


def _float_list(text: str):
    return [float(p) for p in text.split(",") if p]


def _int_list(text: str):
    return [int(p) for p in text.split(",") if p]


def _load_model(args):
    with open(args.graph, "r", encoding="utf-8") as f:
        g = graph_mod.load_graph(f.read())
    store = graph_mod.read_weights_file(args.weights)
    return g, store


def _normalization(args):
    return perturb.Normalization(_triplet(args.mean), _triplet(args.std))


def _load_image(path, g=None):
    img = netpbm.read_ppm(path)
    if g is not None and tuple(img.shape) != g.input_shape:
        raise ValueError(
            f"image '{path}' has shape {tuple(img.shape)}, graph expects {g.input_shape}")
    return img


def _make_segmenter(args):
    if args.alg == "grid":
        params = {"patch_size": args.patch}
        return (lambda img: segmentation.grid_patches(img.shape[1], img.shape[2], args.patch),
                params)
    if args.alg == "slic":
        params = {"n_segments": args.n_segments, "compactness": args.compactness,
                  "max_iters": args.max_iters}
        return (lambda img: segmentation.slic(img, args.n_segments, args.compactness,
                                              args.max_iters), params)
    if args.alg == "quickshift":
        params = {"kernel_size": args.kernel_size, "max_dist": args.max_dist,
                  "ratio": args.ratio}
        return (lambda img: segmentation.quickshift(img, args.kernel_size, args.max_dist,
                                                    args.ratio), params)
    raise ValueError(f"unknown segmentation algorithm '{args.alg}'")


def _add_seg_args(p, require_alg=False):
    p.add_argument("--alg", choices=("grid", "slic", "quickshift"), required=require_alg)
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--n-segments", type=int, default=196)
    p.add_argument("--compactness", type=float, default=10.0)
    p.add_argument("--max-iters", type=int, default=10)
    p.add_argument("--kernel-size", type=float, default=2.0)
    p.add_argument("--max-dist", type=float, default=200.0)
    p.add_argument("--ratio", type=float, default=0.2)


def _softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _result_json(logits, features, with_features: bool) -> str:
    order = np.argsort(-np.asarray(logits, dtype=np.float64), kind="stable")
    out = {
        "logits": [float(v) for v in logits],
        "top5": [int(i) for i in order[: min(5, len(logits))]],
    }
    if with_features:
        out["features"] = [float(v) for v in features]
    return json.dumps(out) + "\n"


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(c) if isinstance(c, str) else repr(float(c)) for c in row))
    _emit(path, "\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# subcommands

def cmd_forward(args):
    g, store = _load_model(args)
    img = _load_image(args.image, g)
    x = perturb.normalize(img, _normalization(args))
    logits, feats = graph_mod.forward(g, store, x)
    _emit(args.out, _result_json(logits, feats, args.features))


def cmd_mask_forward(args):
    g, store = _load_model(args)
    img = _load_image(args.image, g)
    mask = netpbm.read_mask_pgm(args.mask)
    strategy = perturb.parse_strategy(args.strategy, _normalization(args))
    logits, feats = perturb.evaluate(g, store, img, mask, strategy)
    _emit(args.out, _result_json(logits, feats, args.features))


def cmd_segment(args):
    img = netpbm.read_ppm(args.image)
    segmenter, params = _make_segmenter(args)
    seg = segmenter(img)
    segmentation.write_segment_map(args.out + ".pgm", args.out + ".json", seg,
                                   args.alg, params)


def cmd_ablate(args):
    g, store = _load_model(args)
    items = evaluation.load_manifest(args.manifest)
    for i, item in enumerate(items):
        if tuple(item.image01.shape) != g.input_shape:
            raise ValueError(f"manifest item {i}: image shape {tuple(item.image01.shape)} "
                             f"does not match graph input {g.input_shape}")
    segmenter, _ = _make_segmenter(args)
    strategy = perturb.parse_strategy(args.strategy, _normalization(args))
    hierarchy = None
    if args.hierarchy:
        with open(args.hierarchy, "r", encoding="utf-8") as f:
            hierarchy = evaluation.Hierarchy.parse(f.read())
    points = evaluation.ablation_curve(
        g, store, items, segmenter, strategy, args.order,
        fractions=args.fractions, hierarchy=hierarchy,
        seed=args.seed, threads=args.threads)
    _write_csv(args.out,
               ["fraction", "accuracy", "class_entropy", "taxonomy_similarity",
                "unchanged_fraction"],
               [(p.fraction_masked, p.accuracy, p.class_entropy, p.taxonomy_similarity,
                 p.unchanged_fraction) for p in points])


_CURVE_HEADER = "fraction,accuracy,class_entropy,taxonomy_similarity,unchanged_fraction"


def _read_curve_csv(path):
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0] != _CURVE_HEADER:
        raise FileFormatError(f"'{path}' is not an ablation curve CSV")
    rows = [[float(c) for c in ln.split(",")] for ln in lines[1:]]
    return np.asarray(rows, dtype=np.float64)


def cmd_auc(args):
    import os

    metric_names = ["accuracy", "class_entropy", "taxonomy_similarity", "unchanged_fraction"]
    rows = []
    for path in args.curves:
        table = _read_curve_csv(path)
        fr = table[:, 0]
        aucs = [evaluation.auc(zip(fr, table[:, k + 1])) for k in range(4)]
        name = os.path.splitext(os.path.basename(path))[0]
        rows.append([name] + aucs)
    if args.mean:
        avg = np.mean([r[1:] for r in rows], axis=0)
        rows = [[args.label] + [float(v) for v in avg]]
    _write_csv(args.out, ["name"] + metric_names, rows)


def cmd_explain(args):
    g, store = _load_model(args)
    img = _load_image(args.image, g)
    norm = _normalization(args)
    strategy = perturb.parse_strategy(args.strategy, norm)
    if args.segments:
        seg = segmentation.read_segment_map(args.segments)
        if seg.labels.shape != tuple(img.shape[1:]):
            raise ValueError(f"segment map '{args.segments}' shape {seg.labels.shape} "
                             f"does not match image {tuple(img.shape[1:])}")
    elif args.alg:
        seg = _make_segmenter(args)[0](img)
    else:
        raise ValueError("explain needs --segments or --alg")

    if args.target_class is not None:
        target = args.target_class
    else:
        logits, _ = graph_mod.forward(g, store, perturb.normalize(img, norm))
        target = int(np.argmax(logits))

    def scorer(mask):
        logits, _ = perturb.evaluate(g, store, img, mask, strategy)
        if args.use_logit:
            return float(logits[target])
        return float(_softmax(logits)[target])

    expl = lime.lime_explain(scorer, seg, n_samples=args.n_samples,
                             keep_prob=args.keep_prob, ridge_lambda=args.ridge,
                             seed=args.seed, target_class=target, threads=args.threads)
    lime.write_explanation(args.out_json, expl)
    if args.out_overlay:
        overlay = lime.render_overlay(img, seg, expl, args.top_k)
        netpbm.write_ppm(args.out_overlay, overlay)


def cmd_align(args):
    rows = []
    with open(args.manifest, "r", encoding="utf-8") as f:
        entries = [json.loads(ln) for ln in f if ln.strip()]
    if not entries:
        raise ValueError(f"align manifest '{args.manifest}' is empty")
    import os

    base = os.path.dirname(os.path.abspath(args.manifest))

    def respath(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    for i, entry in enumerate(entries):
        for key in ("segments", "object_mask", "explanations"):
            if key not in entry:
                raise ValueError(f"align manifest entry {i}: missing '{key}'")
        seg = segmentation.read_segment_map(respath(entry["segments"]))
        obj = netpbm.read_pgm(respath(entry["object_mask"]))
        gt = lime.ground_truth(seg, obj)
        row = {}
        for label, path in entry["explanations"].items():
            row[label] = lime.alignment_score(gt, lime.read_explanation(respath(path)))
        rows.append(row)

    rates = lime.win_rate(rows)
    out_rows = []
    for label in rows[0]:
        defined = [r[label] for r in rows if r[label] is not None]
        mean_alignment = float(np.mean(defined)) if defined else float("nan")
        out_rows.append([label, mean_alignment, rates[label]])
    _write_csv(args.out, ["strategy", "mean_alignment", "win_rate"], out_rows)


def cmd_diagnostics(args):
    import os

    g, store = _load_model(args)
    strategy = perturb.parse_strategy(args.strategy, _normalization(args))
    images = [(os.path.splitext(os.path.basename(p))[0], _load_image(p, g))
              for p in args.images]

    if args.mode == "linearity":
        rows = []
        vals = []
        for name, img in images:
            c = evaluation.linearity_test(g, store, img, args.patch_size, strategy,
                                          threads=args.threads)
            rows.append([name, float(args.patch_size), c])
            vals.append(c)
        rows.append(["mean", float(args.patch_size), float(np.mean(vals))])
        _write_csv(args.out, ["image", "patch_size", "linearity_cosine"], rows)
    elif args.mode == "collapse":
        if len(images) < 2 or len(images) % 2:
            raise ValueError("collapse mode needs an even number (>= 2) of images, "
                             "consumed as consecutive pairs")
        pairs = [(images[i][1], images[i + 1][1]) for i in range(0, len(images), 2)]
        curve = evaluation.collapse_test(g, store, pairs, args.sizes, strategy,
                                         threads=args.threads)
        _write_csv(args.out, ["size", "mean_cosine_delta"],
                   [(float(n), d) for n, d in curve])
    elif args.mode == "magnitude":
        curve = evaluation.magnitude_test(g, store, [img for _, img in images],
                                          args.sizes, strategy, threads=args.threads)
        _write_csv(args.out, ["size", "mean_feature_norm"],
                   [(float(n), v) for n, v in curve])
    else:
        raise ValueError(f"unknown diagnostics mode '{args.mode}'")


def cmd_pad_demo(args):
    img = netpbm.read_ppm(args.image)
    mask = netpbm.read_mask_pgm(args.mask)
    steps = masking.neighbor_pad_steps(img, mask, args.k)
    for i, (frame, _) in enumerate(steps):
        netpbm.write_ppm(f"{args.out}_{i:02d}.ppm", np.clip(frame, 0.0, 1.0))


# --------------------------------------------------------------------------

def _build_parser():
    top = argparse.ArgumentParser(prog="layermask",
                                  description="CNN inference with layer masking, plus "
                                              "segmentation, LIME and evaluation tools")
    sub = top.add_subparsers(dest="command", required=True)

    def add_model(p):
        p.add_argument("--graph", required=True)
        p.add_argument("--weights", required=True)
        p.add_argument("--mean", default="0.485,0.456,0.406",
                       help="per-channel normalization mean (pixel units)")
        p.add_argument("--std", default="0.229,0.224,0.225")

    def add_common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("forward", help="plain inference on a PPM image")
    add_model(p)
    p.add_argument("--image", required=True)
    p.add_argument("--features", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("mask-forward", help="inference under a masking strategy")
    add_model(p)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True, help="PGM P5 mask; >=128 means unmasked")
    p.add_argument("--strategy", default="layermask")
    p.add_argument("--features", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_mask_forward)

    p = sub.add_parser("segment", help="write a segment map (PGM P2 + JSON sidecar)")
    p.add_argument("--image", required=True)
    _add_seg_args(p, require_alg=True)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("ablate", help="segment ablation curve over a dataset manifest")
    add_model(p)
    add_common(p)
    p.add_argument("--manifest", required=True)
    _add_seg_args(p, require_alg=True)
    p.add_argument("--strategy", default="layermask")
    p.add_argument("--order", choices=evaluation.ABLATION_MODES, default="random")
    p.add_argument("--fractions", type=_float_list,
                   default=list(evaluation.FRACTION_GRID))
    p.add_argument("--hierarchy", help="optional 'child parent' taxonomy file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("auc", help="area under curve for ablation CSVs")
    p.add_argument("curves", nargs="+")
    p.add_argument("--mean", action="store_true", help="emit one averaged row")
    p.add_argument("--label", default="mean")
    p.add_argument("--out")
    p.set_defaults(func=cmd_auc)

    p = sub.add_parser("explain", help="LIME scores + overlay for one image")
    add_model(p)
    add_common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--segments", help="segment map PGM P2 (from `segment`)")
    _add_seg_args(p)
    p.add_argument("--strategy", default="layermask")
    p.add_argument("--n-samples", type=int, default=500)
    p.add_argument("--keep-prob", type=float, default=0.5)
    p.add_argument("--ridge", type=float, default=1e-6)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--target-class", type=int)
    p.add_argument("--use-logit", action="store_true",
                   help="explain the raw logit instead of the softmax probability")
    p.add_argument("--out-json", required=True)
    p.add_argument("--out-overlay")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("align", help="alignment scores and win rates for explanations")
    p.add_argument("--manifest", required=True,
                   help="JSONL: {segments, object_mask, explanations:{label:path}}")
    p.add_argument("--out")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("diagnostics", help="linearity / collapse / magnitude curves")
    add_model(p)
    add_common(p)
    p.add_argument("--mode", choices=("linearity", "collapse", "magnitude"), required=True)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--patch-size", type=int, default=16)
    p.add_argument("--sizes", type=_int_list, default=[8, 16, 24, 32])
    p.add_argument("--strategy", default="layermask")
    p.add_argument("--out")
    p.set_defaults(func=cmd_diagnostics)

    p = sub.add_parser("pad-demo", help="write each neighbor-padding iteration as a PPM")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("-k", type=int, default=3)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_pad_demo)

    return top


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except FileFormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except (GraphError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
