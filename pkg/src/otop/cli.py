"""``otop`` command line: synthesize, train offline, lower, predict online-style, evaluate.

Exit codes: 0 success, 1 usage error, 2 I/O or format error, 3 numeric or
validation failure.  Every command prints one JSON summary line on stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import baselines, lowering, metrics, mscnn, synthgen, trainer
from .errors import ArgumentError, FormatError, GenerationError, OtopError
from .raster import BandSemantics, Raster, TilePair, looks_sr_scaled, normalize_sr, read_raster, write_raster

log = logging.getLogger("otop")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-5
TIE_BAND = 1e-4


class UsageError(Exception):
    pass


class CheckFailed(OtopError):
    """A numeric acceptance check (equivalence, gradient agreement) failed."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _summary(command, **fields):
    print(json.dumps({"command": command, **fields}, sort_keys=True, default=float))


def _load_image(path) -> Raster:
    img = read_raster(path)
    return normalize_sr(img) if looks_sr_scaled(img) else img


def render_overlay(image: Raster, mask: Raster, out, bands: BandSemantics = BandSemantics(),
                   opacity: float = 0.6) -> np.ndarray:
    """Write a NIR-R-G false-colour PNG with water tinted blue; returns the RGB array."""
    from PIL import Image

    if image.shape[1:] != mask.shape[1:]:
        raise ArgumentError(f"image {image.shape[1:]} and mask {mask.shape[1:]} differ in size")
    rgb = np.empty((image.height, image.width, 3), dtype=np.float64)
    for i, b in enumerate((bands.nir_idx, bands.red_idx, bands.green_idx)):
        band = image.data[b].astype(np.float64)
        finite = band[np.isfinite(band)]
        lo, hi = (np.percentile(finite, [2, 98]) if finite.size else (0.0, 1.0))
        span = hi - lo if hi > lo else 1.0
        rgb[..., i] = np.clip((np.nan_to_num(band, nan=lo) - lo) / span, 0, 1) * 255
    water = mask.data[0] == 1
    blue = np.array([0.0, 0.0, 255.0])
    rgb[water] = (1 - opacity) * rgb[water] + opacity * blue
    arr = np.round(rgb).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(out, format="PNG")
    return arr


# --- commands -------------------------------------------------------------------

def cmd_synth(a):
    spec = synthgen.SceneSpec.from_file(a.spec)
    if a.count < 1:
        raise ArgumentError("--count must be >= 1")
    scenes = synthgen.gen_scenes(spec, a.count, a.seed)
    synthgen.write_scenes(scenes, a.out)
    _summary("synth", status="ok", count=a.count, out=str(a.out),
             water_fraction=round(float(np.mean([s.water_fraction for s in scenes])), 6))


def _train_config(path):
    doc = json.loads(Path(path).read_text())
    net = doc.pop("network", None)
    cfg = trainer.TrainConfig.from_dict(doc)
    network = mscnn.NetworkConfig(**net) if net is not None else mscnn.NetworkConfig()
    return cfg, network


def cmd_train(a):
    cfg, network = _train_config(a.config)
    tiles = synthgen.load_tiles(a.data)
    if not tiles:
        raise ArgumentError(f"no usable 256x256 tiles in {a.data}")
    tiles = [t if not looks_sr_scaled(t.image) else
             TilePair(normalize_sr(t.image), t.mask, t.origin) for t in tiles]
    params, history = trainer.train(cfg, tiles, network)
    out = Path(a.out)
    mscnn.save_params_file(params, out)
    hist = out.with_suffix(".history.csv")
    hist.write_text(history.to_csv())
    _summary("train", status="ok", out=str(out), history=str(hist), iters=cfg.max_iters,
             final_loss=history.records[-1][2], tiles=len(tiles))


def _predict(params, image, engine, mode, threads):
    if engine == "direct":
        prob = mscnn.forward(params, image).prob
        return prob, mscnn.predict_mask(prob)
    graph = lowering.lower(params, mode)
    res = lowering.execute_graph(graph, image, threads)
    return res.prob, res.mask


def cmd_predict(a):
    params = mscnn.load_params_file(a.weights)
    image = _load_image(a.input)
    prob, mask = _predict(params, image, a.engine, a.mode, a.threads)
    write_raster(mask, a.out)
    if a.prob:
        write_raster(prob, a.prob)
    if a.overlay:
        render_overlay(image, mask, a.overlay)
    _summary("predict", status="ok", engine=a.engine, mode=a.mode, out=str(a.out),
             water_pixels=int(mask.data.sum()))


def cmd_lower(a):
    params = mscnn.load_params_file(a.weights)
    graph = lowering.lower(params, a.mode)
    Path(a.out).write_text(lowering.serialize_graph(graph))
    counts = lowering.count_ops(graph)
    _summary("lower", status="ok", mode=a.mode, nodes=len(graph.nodes),
             primitive_only=lowering.primitive_closure(graph), out=str(a.out),
             convolve2d=counts.get("Convolve2D", 0))


def cmd_run_graph(a):
    graph = lowering.parse_graph(Path(a.graph).read_text())
    image = _load_image(a.input)
    res = lowering.execute_graph(graph, image, a.threads)
    write_raster(res.mask, a.out)
    _summary("run-graph", status="ok", nodes=len(graph.nodes), out=str(a.out),
             water_pixels=int(res.mask.data.sum()))


def cmd_eval(a):
    report = metrics.evaluate(read_raster(a.pred), read_raster(a.ref))
    if a.csv:
        print(metrics.CSV_HEADER)
        print(report.to_csv())
        return
    c = report.counts
    _summary("eval", status="ok", tp=c.tp, fp=c.fp, fn=c.fn, tn=c.tn, oe=report.oe, ce=report.ce,
             kappa=report.kappa, f1=report.f1, iou=report.iou)


def cmd_mndwi(a):
    image = _load_image(a.input)
    bands = BandSemantics(green_idx=a.green, swir1_idx=a.swir,
                          **_free_roles(image.bands, a.green, a.swir))
    index = baselines.mndwi(image, bands)
    if a.sweep:
        ref = read_raster(a.sweep)
        res = baselines.sweep_threshold(index, ref, "kappa")
        t, extra = res.best_t, {"best_score": res.best_score, "degenerate": res.degenerate,
                                "thresholds": len(res.curve)}
    else:
        t, extra = a.threshold, {}
    mask = baselines.threshold_mask(index, t)
    if a.out:
        write_raster(mask, a.out)
    _summary("mndwi", status="ok", threshold=t, water_pixels=int(mask.data.sum()), **extra)


def _free_roles(bands, green, swir):
    """Give the roles MNDWI does not read indices distinct from green/swir1."""
    spare = [i for i in range(max(bands, 6 + 2)) if i not in (green, swir)]
    return dict(zip(("blue_idx", "red_idx", "nir_idx", "swir2_idx"), spare))


def cmd_rf_train(a):
    tiles = synthgen.load_tiles(a.data)
    if not tiles:
        raise ArgumentError(f"no usable tiles in {a.data}")
    X, y = baselines.pixel_samples(tiles, seed=a.seed)
    forest = baselines.rf_train(X, y, n_trees=a.trees, seed=a.seed)
    Path(a.out).write_text(forest.to_json())
    _summary("rf-train", status="ok", trees=a.trees, samples=int(y.size), out=str(a.out))


def cmd_rf_predict(a):
    forest = baselines.Forest.from_json(Path(a.model).read_text())
    mask = baselines.rf_predict(forest, _load_image(a.input))
    write_raster(mask, a.out)
    _summary("rf-predict", status="ok", out=str(a.out), water_pixels=int(mask.data.sum()))


def cmd_gradcheck(a):
    cfg = mscnn.NetworkConfig.tiny(a.scales, a.width)
    err = trainer.grad_check(cfg, a.seed, 1e-6)
    ok = err <= GRADCHECK_TOL
    _summary("gradcheck", status="ok" if ok else "fail", max_rel_error=err, tol=GRADCHECK_TOL)
    if not ok:
        raise CheckFailed(f"gradient check error {err:.3e} exceeds {GRADCHECK_TOL}")


def cmd_compare(a):
    params = mscnn.load_params_file(a.weights)
    forest = baselines.Forest.from_json(Path(a.rf).read_text())
    graph = lowering.lower(params, "faithful")
    rows = ["scene,method," + metrics.CSV_HEADER]
    mismatches = 0
    files = synthgen.scene_files(a.data)
    if not files:
        raise ArgumentError(f"no scenes in {a.data}")
    for ip, mp in files:
        image, ref = _load_image(ip), read_raster(mp)
        name = ip.stem.replace("image_", "")
        res = lowering.execute_graph(graph, image, a.threads)
        direct = mscnn.forward(params, image).prob
        off_tie = np.abs(direct.data[1] - 0.5) > TIE_BAND
        mismatches += int(np.count_nonzero((res.mask.data[0] != mscnn.predict_mask(direct).data[0]) & off_tie))
        index = baselines.mndwi(image)
        t = baselines.sweep_threshold(index, ref, "kappa").best_t
        preds = {"otop": res.mask, "mndwi": baselines.threshold_mask(index, t),
                 "rf": baselines.rf_predict(forest, image)}
        for method, pred in preds.items():
            rows.append(f"{name},{method}," + metrics.evaluate(pred, ref).to_csv())
    Path(a.out).write_text("\n".join(rows) + "\n")
    _summary("compare", status="ok" if mismatches == 0 else "fail", scenes=len(files),
             graph_direct_mismatches=mismatches, out=str(a.out))
    if mismatches:
        raise CheckFailed(f"graph and direct masks differ at {mismatches} non-tie pixels")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="otop", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="worker cap for graph execution")
    # repeated on every subcommand; SUPPRESS keeps a global value from being reset
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker cap for graph execution")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(func=func)
        return sp

    sp = add("synth", cmd_synth, "generate synthetic scenes")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--seed", type=int, required=True)

    sp = add("train", cmd_train, "train the network offline")
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    sp = add("predict", cmd_predict, "predict a water mask")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--prob")
    sp.add_argument("--overlay", help="optional PNG with water tinted blue")
    sp.add_argument("--engine", choices=("direct", "graph"), default="direct")
    sp.add_argument("--mode", choices=("faithful", "fused"), default="faithful")

    sp = add("lower", cmd_lower, "compile weights to an op graph")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--mode", choices=("faithful", "fused"), required=True)
    sp.add_argument("--out", required=True)

    sp = add("run-graph", cmd_run_graph, "execute an op graph")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "score a mask against a reference")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--csv", action="store_true")

    sp = add("mndwi", cmd_mndwi, "MNDWI threshold baseline")
    sp.add_argument("--input", required=True)
    sp.add_argument("--green", type=int, required=True)
    sp.add_argument("--swir", type=int, required=True)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--threshold", type=float)
    g.add_argument("--sweep", metavar="REF")
    sp.add_argument("--out", help="optional mask output")

    sp = add("rf-train", cmd_rf_train, "train the random forest baseline")
    sp.add_argument("--data", required=True)
    sp.add_argument("--trees", type=int, required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)

    sp = add("rf-predict", cmd_rf_predict, "random forest prediction")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference gradient check")
    sp.add_argument("--scales", type=int, required=True)
    sp.add_argument("--width", type=int, required=True)
    sp.add_argument("--seed", type=int, required=True)

    sp = add("compare", cmd_compare, "OTOP vs MNDWI vs RF on a scene directory")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--rf", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    return p


def run_command(argv) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"otop: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (FormatError, OSError, json.JSONDecodeError) as exc:
        print(f"otop {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArgumentError, GenerationError, CheckFailed, ArithmeticError, OtopError) as exc:
        print(f"otop {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main():
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
