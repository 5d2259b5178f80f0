"""Command-line entry point: ``mtaffect <command> [options]``.

Commands: generate, preprocess, train, evaluate, ablate, fuse, report, replay.
Each run writes ``manifest.json`` into its output directory holding the
resolved configuration, the arguments and SHA-256 digests of every artifact;
``mtaffect replay <manifest> --out DIR`` re-executes it and, with
``--check``, verifies the new artifacts against the recorded digests.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .checkpoint import load_checkpoint
from .data import align_dataset, generate, histogram_2d, load_dataset, write_dataset
from .fusion import FusionEnsemble, FusionError, save_manifest
from .metrics import regional_mse
from .pipeline import PostProcessing, estimates_arrays
from .trainer import ConfigError, calibrate_ensemble, evaluate, train, write_predictions, write_run
from .zoo import ModelGraph, enumerate_ablations

logger = logging.getLogger("mtaffect")


# -- helpers -------------------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _digests(out: Path) -> dict[str, str]:
    return {str(p.relative_to(out)): _sha256(p) for p in sorted(out.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


def _load_data(path: str, require: str | None = None):
    ds = load_dataset(path, lazy=True)
    if require and not ds.split(require):
        raise RuntimeError(f"dataset {path} has no utterances in split {require!r}")
    return ds


def _build_model(cfg: dict, ds) -> ModelGraph:
    m = cfg["model"]
    bb = cfgmod.backbone_spec(cfg, ds.extent, ds.channels)
    try:
        return ModelGraph(bb, cfgmod.head_spec(cfg), m["taps"], cfg["train"]["seq_len"], m["seed"],
                          m["use_landmarks"])
    except ValueError as exc:
        key = "model.taps" if "tap" in str(exc) else "model.topology"
        raise ConfigError(key, str(exc)) from None


def _load_run_model(run: Path) -> ModelGraph:
    model = ModelGraph.from_config(json.loads((run / "model.json").read_text()))
    model.load_state_dict(load_checkpoint(run / "best.ckpt"))
    return model


def _print_table(header: list[str], rows: list[list]) -> None:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    for line in [header] + rows:
        print("  ".join(str(x).ljust(w) for x, w in zip(line, widths)))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _eval_rows(label: str, ev) -> list:
    return [label, f"{ev.post.ccc_v:.4f}", f"{ev.raw.ccc_v:.4f}", f"{ev.post.ccc_a:.4f}", f"{ev.raw.ccc_a:.4f}",
            f"{ev.post.mean_ccc:.4f}", f"{ev.raw.mean_ccc:.4f}"]


EVAL_HEADER = ["model", "valence_with_pp", "valence_without_pp", "arousal_with_pp", "arousal_without_pp",
               "mean_with_pp", "mean_without_pp"]


def _post(cfg: dict) -> tuple[str, PostProcessing]:
    return cfgmod.post_processing(cfg)


# -- commands ------------------------------------------------------------------------

def cmd_generate(args, cfg: dict, out: Path) -> None:
    spec = cfgmod.data_spec(cfg)
    generate(spec, out / "dataset")
    print(f"wrote {out / 'dataset'}")


def cmd_preprocess(args, cfg: dict, out: Path) -> None:
    ds = load_dataset(args.data, lazy=False)
    aligned = align_dataset(ds)
    write_dataset(aligned, out / "dataset")
    print(f"aligned {len(aligned.frames)} frames -> {out / 'dataset'}")


def cmd_train(args, cfg: dict, out: Path) -> None:
    ds = _load_data(args.data, cfg["train"]["train_split"])
    model = _build_model(cfg, ds)
    tcfg = cfgmod.train_config(cfg)
    result = train(model, ds, tcfg, out)
    _write_json(out / "model.json", model.config())
    print(f"{model.label}: best epoch {result.best_epoch}, validation mean CCC {result.best_val_ccc:.4f}")


def cmd_evaluate(args, cfg: dict, out: Path) -> None:
    ds = _load_data(args.data, args.split)
    model = _load_run_model(Path(args.run))
    mode, post = _post(cfg)
    ev = evaluate(model, ds, args.split, post, mode)
    off = evaluate(model, ds, args.split, post, "off")
    _write_json(out / "evaluation.json", ev.to_dict())
    write_predictions(out / "predictions.csv", ev.estimates)
    write_predictions(out / "predictions_without_post_processing.csv", off.estimates)
    rows = [_eval_rows(model.label, ev)]
    _write_csv(out / "table.csv", EVAL_HEADER, rows)
    _print_table(EVAL_HEADER, rows)


def cmd_ablate(args, cfg: dict, out: Path) -> None:
    ds = _load_data(args.data, cfg["train"]["train_split"])
    base = _build_model(cfg, ds)
    tcfg = cfgmod.train_config(cfg)
    mode, post = _post(cfg)
    rows, header = [], ["taps", "resolved"] + EVAL_HEADER[1:]
    variants = enumerate_ablations(base, include_rejected=args.include_rejected)
    for k, (label, model) in enumerate(variants):
        result = train(model, ds, tcfg, out / f"variant{k:02d}")
        _write_json(out / f"variant{k:02d}" / "model.json", model.config())
        ev = evaluate(model, ds, args.split, post, mode)
        rows.append([label, "+".join(model.taps)] + _eval_rows(model.label, ev)[1:])
        logger.info("%s: %s (best epoch %d)", label, ev.table_row(), result.best_epoch)
    _write_csv(out / "ablation.csv", header, rows)
    _print_table(header, rows)


def cmd_fuse(args, cfg: dict, out: Path) -> None:
    ds = _load_data(args.data, args.split)
    members = [_load_run_model(Path(r)) for r in args.runs]
    f = cfg["fusion"]
    mode, post = _post(cfg)
    tcfg = replace(cfgmod.train_config(cfg), epochs=f["epochs"])
    rows = []
    for m in members:
        rows.append(_eval_rows(m.label, evaluate(m, ds, args.split, post, mode)))
    decision = FusionEnsemble(members, "none")
    calibrate_ensemble(decision, ds, tcfg.val_split)
    save_manifest(decision, out / "decision")
    try:
        rows.append(_eval_rows("decision-level fusion", evaluate(decision, ds, args.split, post, mode)))
    except FusionError as exc:
        rows.append(["decision-level fusion", f"n/a ({exc})"] + [""] * 5)
    for head in f["heads"]:
        if head == "none":
            continue
        copies = [ModelGraph.from_config(m.config()) for m in members]
        for c, m in zip(copies, members):
            c.load_state_dict(m.state_dict())
        ens = FusionEnsemble(copies, head, f["units"], tcfg.seed, f["freeze_members"], decision.weights)
        result = train(ens, ds, tcfg)
        write_run(out / f"fusion_{head}", result, tcfg)
        save_manifest(ens, out / f"fusion_{head}")
        rows.append(_eval_rows(f"model-level fusion +{head.upper()}", evaluate(ens, ds, args.split, post, mode)))
    _write_csv(out / "fusion.csv", EVAL_HEADER, rows)
    _print_table(EVAL_HEADER, rows)


def cmd_report(args, cfg: dict, out: Path) -> None:
    ds = _load_data(args.data)
    split = args.split or cfg["report"]["split"]
    labels = np.array([u.label for u in ds.split(split)], dtype=np.float64)
    counts = histogram_2d(labels, cfg["report"]["bins"])
    bins = cfg["report"]["bins"]
    v_edges = np.linspace(-1.0, 1.0, bins + 1)
    a_edges = np.linspace(0.0, 1.0, bins + 1)
    rows = [[f"{v_edges[i]:.3f}", f"{v_edges[i + 1]:.3f}", f"{a_edges[j]:.3f}", f"{a_edges[j + 1]:.3f}",
             int(counts[i, j])] for i in range(bins) for j in range(bins)]
    _write_csv(out / "histogram.csv", ["v_lo", "v_hi", "a_lo", "a_hi", "count"], rows)
    print(f"{len(labels)} utterance labels binned into {bins}x{bins} cells -> {out / 'histogram.csv'}")
    if args.run:
        model = _load_run_model(Path(args.run))
        mode, post = _post(cfg)
        ev = evaluate(model, ds, split, post, mode)
        lab, pred = estimates_arrays(ev.estimates)
        regions = regional_mse(lab, pred)
        _write_json(out / "regional_mse.json", regions)
        _print_table(["region", "count", "mse_v", "mse_a"],
                     [[r["region"], r["count"], "-" if r["mse_v"] is None else f"{r['mse_v']:.4f}",
                       "-" if r["mse_a"] is None else f"{r['mse_a']:.4f}"] for r in regions])


HANDLERS = {"generate": cmd_generate, "preprocess": cmd_preprocess, "train": cmd_train, "evaluate": cmd_evaluate,
            "ablate": cmd_ablate, "fuse": cmd_fuse, "report": cmd_report}


# -- argument parsing ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtaffect", description="Multi-level CNN-RNN valence/arousal toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def common(p, data=True):
        p.add_argument("--config", help="JSON config (sections: data, model, train, post, fusion, report)")
        p.add_argument("--seed", type=int, help="override data/model/train seeds")
        p.add_argument("--out", required=True, help="output directory")
        if data:
            p.add_argument("--data", required=True, help="dataset directory")

    def model_flags(p):
        p.add_argument("--topology", help="cnn | rnn | 1rnn | krnn | krnn-fc (or the full topology name)")
        p.add_argument("--taps", help="comma-separated tap names, e.g. pool1,pool3,fc")

    def post_flags(p):
        p.add_argument("--post-processing", choices=("on", "off", "auto-gate"), dest="post_processing")
        p.add_argument("--reduction", choices=("mean", "median"))
        p.add_argument("--split", default="validation")

    common(sub.add_parser("generate", help="write a synthetic dataset"), data=False)
    common(sub.add_parser("preprocess", help="align every frame on the anchor template"))
    p = sub.add_parser("train", help="train one model")
    common(p)
    model_flags(p)
    p = sub.add_parser("evaluate", help="score a trained run with and without post-processing")
    common(p)
    p.add_argument("--run", required=True, help="training run directory")
    post_flags(p)
    p = sub.add_parser("ablate", help="train and score the tap-selection grid")
    common(p)
    model_flags(p)
    post_flags(p)
    p.add_argument("--include-rejected", action="store_true", help="also run the 2-RNN and FC-topped variants")
    p = sub.add_parser("fuse", help="decision-level and model-level fusion of trained runs")
    common(p)
    p.add_argument("--runs", nargs="+", required=True, help="member run directories")
    post_flags(p)
    p = sub.add_parser("report", help="label histogram and per-region MSE")
    common(p)
    p.add_argument("--run", help="optional trained run for per-region MSE")
    p.add_argument("--split", default=None)
    p = sub.add_parser("replay", help="re-execute a run from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--check", action="store_true", help="exit 1 unless every artifact digest matches")
    return parser


def _apply_flags(args, cfg: dict) -> dict:
    if getattr(args, "topology", None):
        cfg["model"]["topology"] = args.topology
    if getattr(args, "taps", None):
        cfg["model"]["taps"] = [t.strip() for t in args.taps.split(",") if t.strip()]
    if getattr(args, "post_processing", None):
        cfg["post"]["mode"] = args.post_processing
    if getattr(args, "reduction", None):
        cfg["post"]["reduction"] = args.reduction
    cfgmod.validate(cfg)
    return cfg


RECORDED_ARGS = ("data", "run", "runs", "split", "include_rejected")


def execute(command: str, args, cfg: dict, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    HANDLERS[command](args, cfg, out)
    manifest = {"tool": "mtaffect", "version": __version__, "command": command, "config": cfg,
                "args": {k: getattr(args, k) for k in RECORDED_ARGS if hasattr(args, k)},
                "artifacts": _digests(out)}
    _write_json(out / "manifest.json", manifest)
    return manifest


def replay(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    if manifest.get("tool") != "mtaffect" or manifest.get("command") not in HANDLERS:
        raise ConfigError("manifest", f"{args.manifest} is not a run manifest")
    ns = argparse.Namespace(**manifest["args"])
    cfg = manifest["config"]
    cfgmod.validate(cfg)
    out = Path(args.out)
    fresh = execute(manifest["command"], ns, cfg, out)
    if args.check:
        old, new = manifest["artifacts"], fresh["artifacts"]
        bad = sorted(k for k in set(old) | set(new) if old.get(k) != new.get(k))
        if bad:
            print(f"replay differs in {len(bad)} artifact(s): {', '.join(bad)}", file=sys.stderr)
            return 1
        print(f"replay reproduced all {len(old)} artifacts bit-exactly")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            return replay(args)
        cfg = _apply_flags(args, cfgmod.load_config(args.config, args.seed))
        execute(args.command, args, cfg, Path(args.out))
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report and exit 1
        logger.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
