"""Command-line interface: gen, partition, train, eval, predict.

Exit codes: 0 success, 2 config/validation error, 3 I/O error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys

from . import cells as gc
from . import evaluate as ev
from . import pipeline, synth
from .config import ConfigError, parse_config, profile_path
from .model import ModelError, load_checkpoint, save_checkpoint
from .train import NumericError, TrainError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_config(args) -> dict:
    path = profile_path(args.profile) if getattr(args, "profile", None) else args.config
    cfg = parse_config(path)
    if getattr(args, "seed", None) is not None:
        cfg["world.seed"] = args.seed
    return cfg


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    spec = pipeline.world_spec_from_config(cfg)
    splits = synth.generate_world(spec)
    os.makedirs(args.out, exist_ok=True)
    manifest = []
    for name in ("train", "val", "test", "shifted_test"):
        path = os.path.join(args.out, f"{name}.tlocds")
        synth.save_dataset(splits[name], path)
        manifest.append(f"{name}.tlocds\t{len(splits[name])}\t{_sha256(path)}")
    with open(os.path.join(args.out, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(manifest) + "\n")
    print(f"wrote 4 splits to {args.out}")
    return EXIT_OK


def cmd_partition(args) -> int:
    cfg = _load_config(args)
    ds = synth.load_dataset(args.data)
    index = pipeline.build_index_from_config(ds, cfg)
    if index.fine.n_cells == 0:
        print("error: no retainable cells", file=sys.stderr)
        return EXIT_CONFIG
    gc.save_index(index, args.out)
    for level in gc.LEVELS:
        part = index.partition(level)
        print(f"{level}: {part.n_cells} cells, {part.dropped} samples dropped")
        for token in part.oversize_tokens:
            print(f"warning: {level} cell {token} oversize at max depth", file=sys.stderr)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    train_ds = synth.load_dataset(os.path.join(args.data, "train.tlocds"))
    val_ds = synth.load_dataset(os.path.join(args.data, "val.tlocds"))
    index = gc.load_index(args.cells)
    mff = None if args.mff is None else args.mff == "on"
    scene = None if args.scene_head is None else args.scene_head == "on"
    metrics_path = args.metrics or (args.out + ".metrics.csv")
    try:
        model, _ = pipeline.run_training(
            cfg, train_ds, val_ds, index,
            branches=args.branches, mff=mff, scene_head=scene,
            metrics_path=metrics_path, log=print,
        )
    except NumericError as exc:
        if getattr(exc, "model", None) is not None:
            save_checkpoint(exc.model, args.out)
            print(f"last-good checkpoint retained at {args.out}", file=sys.stderr)
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(model, args.out)
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def _check_ckpt_index(model, index) -> None:
    counts = (index.coarse.n_cells, index.middle.n_cells, index.fine.n_cells)
    expect = (model.cfg.k_coarse, model.cfg.k_middle, model.cfg.k_fine)
    if counts != expect:
        raise ModelError(
            f"checkpoint heads {expect} do not match cell index {counts}"
        )


def cmd_eval(args) -> int:
    cfg = _load_config(args) if (args.config or args.profile) else None
    model = load_checkpoint(args.ckpt)
    index = gc.load_index(args.cells)
    _check_ckpt_index(model, index)
    ds = synth.load_dataset(args.data)

    policy = "tencrop" if args.tencrop else "single"
    records = ev.evaluate_dataset(model, ds, index, policy)

    thresholds = list(ev.PAPER_THRESHOLDS_KM)
    toy_thresholds = (cfg or {}).get("eval.toy_thresholds_km", "0.05,0.2,1,5,25")
    thresholds += [float(t) for t in toy_thresholds.split(",")]
    report = ev.accuracy_report(records, sorted(set(thresholds)))
    out_csv = args.report or "report.csv"
    ev.emit_report(report, out_csv, out_csv + ".txt")

    scene_records = [r for r in records if r.scene_pred >= 0]
    if scene_records:
        scene_acc = sum(r.scene_pred == r.scene_gt for r in scene_records) / len(scene_records)
        print(f"scene accuracy: {scene_acc:.4f}")
    for t, a in zip(report.thresholds_km, report.accuracy):
        print(f"a_{t:g}km: {a:.4f}")

    if args.correlate:
        labels, _ = pipeline.label_dataset(ds, index)
        study = ev.correlation_study(model, ds, index, labels["fine"])
        print(f"top-N series: {['%.4f' % v for v in study['top_n_acc']]}")
        print(f"a_r series:   {['%.4f' % v for v in study['a_r']]}")
        print(f"pearson r: {study['pearson']:.4f}")

    if args.attn_out:
        os.makedirs(args.attn_out, exist_ok=True)
        with_seg = ds.seg[0] if model.cfg.dual else None
        import tloc.autodiff as ad

        with ad.no_grad():
            model.forward(ds.rgb[0][None], None if with_seg is None else with_seg[None],
                          record_attention=True)
        for branch, layers in model.attention_export().items():
            for k, att in enumerate(layers):
                for head in range(att.shape[1]):
                    path = os.path.join(args.attn_out, f"{branch}_layer{k}_head{head}.pgm")
                    ev.write_pgm(att[0, head], path)
        print(f"attention heatmaps written to {args.attn_out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_checkpoint(args.ckpt)
    index = gc.load_index(args.cells)
    _check_ckpt_index(model, index)
    ds = synth.load_dataset(args.input)
    for i in range(len(ds)):
        seg = ds.seg[i] if model.cfg.dual else None
        logits = ev.predict_logits(model, ds.rgb[i], seg)
        cell_id = int(logits["fine"].argmax())
        gps = gc.class_to_gps(index, "fine", cell_id)
        token = index.fine.cells[cell_id].token
        scene_id = int(logits["scene"].argmax()) if "scene" in logits else -1
        if model.cfg.dual and model.last_fusion_weights is not None:
            w_rgb, w_seg = model.last_fusion_weights[0]
        elif model.cfg.dual:
            w_rgb = w_seg = 0.5
        else:
            w_rgb, w_seg = 1.0, 0.0
        print(f"{gps.lat:.6f} {gps.lon:.6f} {token} {scene_id} {w_rgb:.6f} {w_seg:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tloc",
                                     description="geo-cell classification pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--profile", help="shipped profile name (toy, paper)")
        p.add_argument("--seed", type=int, help="override world.seed")

    p = sub.add_parser("gen", help="generate the synthetic dataset splits")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("partition", help="build the geo-cell index")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", required=True, help="directory with train/val .tlocds files")
    p.add_argument("--cells", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    p.add_argument("--branches", choices=["rgb-only", "dual"])
    p.add_argument("--mff", choices=["on", "off"])
    p.add_argument("--scene-head", dest="scene_head", choices=["on", "off"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, config_required=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--cells", required=True)
    p.add_argument("--report")
    p.add_argument("--tencrop", action="store_true")
    p.add_argument("--correlate", action="store_true")
    p.add_argument("--attn-out", dest="attn_out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict GPS for samples")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cells", required=True)
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_predict)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    needs_cfg = args.command in ("gen", "partition", "train")
    if needs_cfg and not (args.config or args.profile):
        print("error: --config or --profile is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, ModelError, TrainError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
