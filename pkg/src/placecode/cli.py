"""Operator surface: dataset synthesis, training, indexing, querying,
localization evaluation, and plot emission.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every subcommand echoes its fully resolved configuration before running.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np
import torch

from . import networks as N
from . import retrieval as R
from . import synthdata as S
from .errors import DataError, NumericError, UsageError, ValidationError
from .losses import TERM_NAMES, LossReport
from .networks import ImageBatch
from .training import (TrainConfig, load_checkpoint, read_config_file,
                       run_training)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _echo(label: str, payload: dict):
    print(f"resolved {label}: {json.dumps(payload, sort_keys=True)}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    _echo("configuration", {
        "out": args.out, "places": args.places, "domains": args.domains,
        "views": args.views, "size": args.size, "seed": args.seed,
    })
    manifest = S.build_synthetic_dataset(
        args.places, args.domains, args.views,
        np.random.default_rng(args.seed), args.out, size=args.size,
    )
    print(f"wrote {len(manifest.records)} records under {args.out}")
    return EXIT_OK


def _resolve_train_config(args) -> TrainConfig:
    values: dict = {}
    if args.config:
        values.update(read_config_file(args.config))
    for assignment in args.set or []:
        if "=" not in assignment:
            raise UsageError(f"--set expects key=value, got {assignment!r}")
        key, value = assignment.split("=", 1)
        values[key.strip()] = value.strip()
    if args.steps is not None:
        values["total_steps"] = args.steps
    if args.batch_size is not None:
        values["batch_size"] = args.batch_size
    if args.seed is not None:
        values["seed"] = args.seed
    if args.ablation == "appearance-only":
        values["anti_occlusion_enabled"] = False
    elif args.ablation == "occlusion-only":
        values["appearance_enabled"] = False
    try:
        return TrainConfig.from_flat_dict(values)
    except ValidationError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = _resolve_train_config(args)
    _echo("configuration", cfg.as_flat_dict())
    dataset = S.load_image_folder(args.data)
    ckpt = run_training(cfg, dataset, args.out_dir, resume_from=args.resume,
                        quiet=False)
    print(f"final checkpoint: {ckpt}")
    return EXIT_OK


def cmd_index(args) -> int:
    _echo("configuration", {"checkpoint": args.checkpoint, "data": args.data,
                            "out": args.out})
    model, cfg, _ = load_checkpoint(args.checkpoint)
    model.eval()
    dataset = S.load_image_folder(args.data)
    index = R.build_index(model, cfg, dataset)
    R.save_index(index, args.out)
    print(f"indexed {len(index)} descriptors of length "
          f"{index.descriptors.shape[1]} -> {args.out}")
    return EXIT_OK


def cmd_query(args) -> int:
    _echo("configuration", {"index": args.index, "checkpoint": args.checkpoint,
                            "image": args.image, "top_k": args.top_k})
    model, cfg, _ = load_checkpoint(args.checkpoint)
    model.eval()
    index = R.load_index(args.index)
    if not os.path.exists(args.image):
        raise DataError(f"query image not found: {args.image}")
    from PIL import Image
    with Image.open(args.image) as im:
        im = im.convert("RGB").resize((cfg.crop_size, cfg.crop_size), Image.BILINEAR)
        pixels = torch.from_numpy(
            np.asarray(im, dtype=np.float32) / 255.0).permute(2, 0, 1) * 2 - 1
    for record_id, similarity in R.query(index, pixels, model, cfg, top_k=args.top_k):
        print(f"{record_id} {similarity:.6f}")
    return EXIT_OK


def _parse_thresholds(text: str):
    bands = []
    for chunk in text.split(","):
        meters, _, degrees = chunk.partition(":")
        try:
            bands.append((float(meters), float(degrees)))
        except ValueError as exc:
            raise UsageError(f"bad threshold band {chunk!r}; expected m:deg") from exc
    if not bands:
        raise UsageError("no threshold bands given")
    return tuple(bands)


def cmd_eval(args) -> int:
    thresholds = _parse_thresholds(args.thresholds)
    _echo("configuration", {"index": args.index, "checkpoint": args.checkpoint,
                            "queries": args.queries,
                            "thresholds": [list(b) for b in thresholds]})
    model, cfg, _ = load_checkpoint(args.checkpoint)
    model.eval()
    index = R.load_index(args.index)
    queries = S.load_image_folder(args.queries)
    result = R.evaluate_localization(index, queries, model, cfg,
                                     thresholds=thresholds)
    print(result.as_percent_row())
    return EXIT_OK


def _unit_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    return matrix / np.maximum(norms, 1e-12)


def _code_descriptors(model, cfg, dataset, kind: str) -> np.ndarray:
    rows = []
    with torch.no_grad():
        for start in range(0, len(dataset), 16):
            idx = list(range(start, min(start + 16, len(dataset))))
            pixels = torch.stack([dataset.load_pixels(i, cfg.crop_size) for i in idx])
            labels = torch.tensor([dataset.records[i].spec.appearance_domain for i in idx])
            batch = ImageBatch(pixels=pixels, appearance_domain=labels,
                               occlusion_flag=torch.zeros(len(idx), dtype=torch.bool))
            if kind in ("place", "all"):
                code = N.encode_place(model, batch).flatten(1)
            elif kind == "occlusion":
                code = N.encode_occlusion(model, batch).flatten(1)
            elif kind == "appearance":
                code = N.encode_appearance(model, batch, labels).mean
            else:
                raise ValidationError(f"unknown code type {kind!r}")
            rows.append(code.numpy())
    return _unit_rows(np.concatenate(rows, axis=0))


def _save_heatmap(matrix: np.ndarray, path: str):
    """Deterministic PNG heat map of a [-1, 1] matrix (viridis ramp)."""
    import matplotlib
    from PIL import Image
    normalized = (np.clip(matrix, -1.0, 1.0) + 1.0) / 2.0
    rgba = matplotlib.colormaps["viridis"](normalized)
    rgb = (rgba[:, :, :3] * 255.0).round().astype(np.uint8)
    scale = max(1, 256 // max(matrix.shape[0], 1))
    img = Image.fromarray(rgb).resize(
        (matrix.shape[1] * scale, matrix.shape[0] * scale), Image.NEAREST)
    img.save(path)


def _plot_loss_curves(log_path: str, out_path: str):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps, series = [], {name: [] for name in TERM_NAMES + ("total",)}
    with open(log_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if "step" not in record:
                continue  # config header
            step, report = LossReport.from_json_line(line)
            steps.append(step)
            for name in series:
                series[name].append(getattr(report, name))
    if not steps:
        raise DataError(f"loss log {log_path} contains no step records")
    fig, ax = plt.subplots(figsize=(8, 5))
    for name, values in series.items():
        ax.plot(steps, values, label=name, linewidth=1.5 if name == "total" else 0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7, ncol=4)
    fig.tight_layout()
    fig.savefig(out_path, metadata={"Software": None})
    plt.close(fig)


def cmd_plot(args) -> int:
    _echo("configuration", {"log": args.log, "out_dir": args.out_dir,
                            "checkpoint": args.checkpoint,
                            "entangled_checkpoint": args.entangled_checkpoint,
                            "data": args.data})
    os.makedirs(args.out_dir, exist_ok=True)
    produced = []
    if args.log:
        curve_path = os.path.join(args.out_dir, "loss_curves.png")
        _plot_loss_curves(args.log, curve_path)
        produced.append(curve_path)
    if args.checkpoint and args.data:
        model, cfg, _ = load_checkpoint(args.checkpoint)
        model.eval()
        dataset = S.load_image_folder(args.data)
        order = sorted(range(len(dataset)),
                       key=lambda i: (dataset.records[i].spec.place_id, i))
        dataset.records = [dataset.records[i] for i in order]
        kinds = {"place": model, "appearance": model, "occlusion": model}
        if args.entangled_checkpoint:
            entangled_model, entangled_cfg, _ = load_checkpoint(args.entangled_checkpoint)
            entangled_model.eval()
            kinds["all"] = entangled_model
        for kind in ("all", "appearance", "occlusion", "place"):
            if kind not in kinds:
                continue
            m = kinds[kind]
            descriptors = _code_descriptors(m, cfg, dataset, kind)
            matrix = R.similarity_matrix(descriptors)
            path = os.path.join(args.out_dir, f"similarity_{kind}.png")
            _save_heatmap(matrix, path)
            np.savetxt(os.path.join(args.out_dir, f"similarity_{kind}.txt"),
                       matrix, fmt="%.6f")
            produced.append(path)
    if not produced:
        raise UsageError("nothing to plot: pass --log and/or --checkpoint with --data")
    for path in produced:
        print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="placecode",
                     description="disentangled place-code training and retrieval")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render the synthetic factor-grid dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--places", type=int, default=32)
    p.add_argument("--domains", type=int, default=3)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the translation model")
    p.add_argument("--data", required=True, help="training manifest")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--ablation", choices=["none", "appearance-only", "occlusion-only"],
                   default="none")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config field (repeatable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="build a descriptor index")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="database manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="rank database entries for one image")
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--top-k", type=int, default=5)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="score localization over a query manifest")
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--thresholds", default="0.25:2,0.5:5,5:10")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="emit loss curves and similarity heat maps")
    p.add_argument("--log")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--entangled-checkpoint")
    p.add_argument("--data", help="manifest providing the image sequence")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    torch.set_num_threads(max(1, os.cpu_count() or 1))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValidationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
