"""Command-line entry point: ``vqflow {synth,train,eval,score,inspect}``.

Every command writes its resolved configuration next to its outputs and
re-reads what it wrote before exiting 0.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import synth_dataset
from .exceptions import VQFlowError
from .io import (
    file_digest,
    load_checkpoint,
    read_dataset,
    read_feature_file,
    read_loss_trace,
    read_pgm,
    save_checkpoint,
    write_dataset,
    write_loss_trace,
    write_pgm,
)
from .model import VqFlowModel
from .scoring import EvalReport, anomaly_maps, evaluate, image_score
from .training import train
from .validation import check_feature_stack

log = logging.getLogger("vqflow")

RESOLVED = "resolved.ini"


class ReadBackError(VQFlowError):
    """An output file did not survive its own read-back validation."""


def _resolve(args, flag_map: dict[str, str]) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg.set(key, value)
    for item in args.set or []:
        key, _, value = item.partition("=")
        cfg.set(key.strip(), value.strip())
    return cfg


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(cfg: RunConfig, out: Path) -> None:
    path = cfg.write(out / RESOLVED)
    if RunConfig.load(path).to_ini() != cfg.to_ini():
        raise ReadBackError(f"{path}: resolved config does not round-trip")


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> None:
    cfg = _resolve(args, {"classes": "synth.n_classes", "seed": "run.seed", "n_train": "synth.n_train",
                          "n_test": "synth.n_test", "magnitude": "synth.magnitude"})
    out = _out_dir(args.out)
    train_set, test_set = synth_dataset(cfg.synth, seed=cfg.seed)
    manifest = write_dataset(out, train_set, test_set)
    _write_resolved(cfg, out)
    back_train, back_test = read_dataset(manifest)
    for a, b in zip(train_set + test_set, back_train + back_test):
        if not a.equals(b):
            raise ReadBackError(f"sample {a.sample_id} did not round-trip")
    log.info("wrote %d train and %d test samples to %s", len(train_set), len(test_set), out)


_MODEL_FLAGS = {"epochs": "train.epochs", "lr": "train.lr", "batch_size": "train.batch_size",
                "seed": "run.seed", "preset": "run.preset", "ablation": "model.ablation",
                "n_blocks": "model.n_blocks", "k_cp": "model.k_cp", "k_csp": "model.k_csp"}


def cmd_train(args) -> None:
    cfg = _resolve(args, _MODEL_FLAGS)
    for comp in ("cadm", "cpc", "cspc", "pe"):
        if getattr(args, f"no_{comp}"):
            cfg.set(f"model.{comp}", False)
    if args.no_cspc:
        # positions only enter through the pattern residual in the ablation rows
        cfg.set("model.pe", False)
    if args.branches:
        cfg.set("model.branches", tuple(int(b) for b in args.branches.split(",")))
    cfg.set("train.seed", cfg.seed)
    out = _out_dir(args.out)
    train_set, _ = read_dataset(args.data)
    probe = train_set[0].features
    model = VqFlowModel(cfg.model_config([f.shape[0] for f in probe], [f.shape[1:] for f in probe]))
    if args.checkpoint_every:
        cfg.set("train.checkpoint_every", args.checkpoint_every)
        cfg.set("train.checkpoint_dir", str(out / "checkpoints"))
    _write_resolved(cfg, out)
    result = train(model, train_set, cfg.train)
    digest = save_checkpoint(model, out / "model.vqck")
    n_branches = len(model.config.branch_scales)
    n_cspc = n_branches if model.config.cspc else 0
    write_loss_trace(out / "loss.csv", result.trace_rows(), n_branches, n_cspc)

    if file_digest(out / "model.vqck") != digest:
        raise ReadBackError("checkpoint digest changed on disk")
    load_checkpoint(out / "model.vqck", expected=model.config)
    _, rows = read_loss_trace(out / "loss.csv")
    if rows.shape[0] != len(result.trace):
        raise ReadBackError("loss trace row count mismatch")
    log.info("trained %d steps; checkpoint sha256 %s", len(result.trace), digest)


def cmd_eval(args) -> None:
    cfg = _resolve(args, {"density": "eval.density", "score_mode": "eval.score_mode"})
    if args.dump_maps:
        cfg.set("eval.dump_maps", True)
    out = _out_dir(args.out)
    model = load_checkpoint(args.checkpoint)
    _, test_set = read_dataset(args.data)
    report, maps = evaluate(model, test_set, cfg.eval.density, cfg.eval.score_mode,
                            batch_size=cfg.eval.batch_size, return_maps=True)
    if args.loss_trace:
        report.loss_trace = str(args.loss_trace)
    if cfg.eval.dump_maps:
        map_dir = _out_dir(out / "maps")
        for sample, amap in zip(test_set, maps):
            path = map_dir / f"{sample.sample_id:06d}.pgm"
            report.map_ranges[path.name] = list(write_pgm(path, amap))
            if read_pgm(path).shape != amap.shape:
                raise ReadBackError(f"{path}: greymap did not round-trip")
    _write_resolved(cfg, out)
    (out / "report.json").write_text(report.to_json())
    EvalReport.from_json((out / "report.json").read_text())
    log.info("det AUROC %.4f, loc AUROC %s", report.det_auroc,
             "n/a" if report.loc_auroc is None else f"{report.loc_auroc:.4f}")


def cmd_score(args) -> None:
    cfg = _resolve(args, {"density": "eval.density", "score_mode": "eval.score_mode"})
    out = _out_dir(args.out)
    model = load_checkpoint(args.checkpoint)
    samples = [read_feature_file(p, sample_id=k) for k, p in enumerate(args.features)]
    maps = anomaly_maps(model, samples, cfg.eval.density)
    scores = np.atleast_1d(image_score(maps, cfg.eval.score_mode))
    _write_resolved(cfg, out)
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "score"])
        for p, s in zip(args.features, scores):
            w.writerow([p, repr(float(s))])
    with open(out / "scores.csv", newline="") as fh:
        if sum(1 for _ in fh) != len(samples) + 1:
            raise ReadBackError("scores.csv row count mismatch")


def _prototype_table(model: VqFlowModel, samples=None) -> tuple[list[list], list[list]]:
    cb = model.cpc_codebook
    cw = cb.codewords.data.astype(np.float64)
    d2 = ((cw[:, None, :] - cw[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    nearest = np.sqrt(d2.min(axis=1)) if cb.K > 1 else np.full(cb.K, np.nan)
    usage = cb.usage_counts.copy()
    assignments = []
    if samples:
        feats = check_feature_stack(samples, dtype=model.dtype)
        out = model.forward(feats, skip_flows=True)
        idx = out.cpc_quant.indices.ravel()
        usage = np.bincount(idx, minlength=cb.K)
        assignments = [[s.sample_id, s.class_id, s.label, int(k)] for s, k in zip(samples, idx)]
    table = [[k, int(usage[k]), float(nearest[k])] for k in range(cb.K)]
    return table, assignments


def assignment_summary(assignments: list[list], k: int) -> dict:
    """Assignment entropy (nats) over all rows and per-prototype class purity.

    Purity only counts normal samples: an anomalous sample carries a patch of
    another class, so its class id does not name a single concept.
    """
    rows = np.array(assignments, dtype=np.int64).reshape(-1, 4)
    counts = np.bincount(rows[:, 3], minlength=k).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    normal = rows[rows[:, 2] == 0]
    purity = {}
    for proto in np.unique(normal[:, 3]):
        members = normal[normal[:, 3] == proto, 1]
        purity[int(proto)] = float(np.bincount(members).max() / members.size)
    return {"entropy": float(-(p * np.log(p)).sum()), "max_entropy": float(np.log(k)), "purity": purity,
            "min_purity": min(purity.values(), default=None)}


def cmd_inspect(args) -> None:
    out = _out_dir(args.out)
    cfg = _resolve(args, {})
    model = load_checkpoint(args.checkpoint)
    if model.cpc_codebook is None:
        raise VQFlowError("checkpoint has no prototype codebook to inspect")
    samples = None
    if args.data:
        train_set, test_set = read_dataset(args.data)
        samples = train_set + test_set
    table, assignments = _prototype_table(model, samples)
    _write_resolved(cfg, out)
    with open(out / "codebook.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["prototype_id", "usage", "nearest_other_distance"])
        w.writerows(table)
    if assignments:
        with open(out / "assignments.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "class_id", "label", "prototype_id"])
            w.writerows(assignments)
        summary = assignment_summary(assignments, model.cpc_codebook.K)
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    with open(out / "codebook.csv", newline="") as fh:
        if next(csv.reader(fh)) != ["prototype_id", "usage", "nearest_other_distance"]:
            raise ReadBackError("codebook.csv header mismatch")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vqflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config entry")
        p.add_argument("--out", required=True, help="output directory")
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    p.add_argument("--classes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--magnitude", type=float)
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("train", help="train a model on a dataset's train split"))
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--preset", choices=("desk", "full"))
    p.add_argument("--ablation", type=int, help="component ablation row id (0-6)")
    p.add_argument("--n-blocks", type=int)
    p.add_argument("--k-cp", type=int)
    p.add_argument("--k-csp", type=int)
    p.add_argument("--branches", help="comma separated scale indices, e.g. 2 for the semantic mode")
    p.add_argument("--checkpoint-every", type=int, default=0)
    for comp in ("cadm", "cpc", "cspc", "pe"):
        p.add_argument(f"--no-{comp}", action="store_true",
                       help=f"disable {comp.upper()}" + (" (and PE with it)" if comp == "cspc" else ""))
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint on a dataset's test split"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--density", choices=("dedicated", "mixture"))
    p.add_argument("--score-mode", choices=("max", "mean"))
    p.add_argument("--dump-maps", action="store_true", help="write one P5 greymap per test sample")
    p.add_argument("--loss-trace", help="loss CSV to reference in the report")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("score", help="score individual feature files"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--density", choices=("dedicated", "mixture"))
    p.add_argument("--score-mode", choices=("max", "mean"))
    p.add_argument("features", nargs="+", help="VQFT files")
    p.set_defaults(func=cmd_score)

    p = common(sub.add_parser("inspect", help="summarise the prototype codebook"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset whose samples get a prototype assignment table")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (VQFlowError, OSError, ValueError, KeyError) as exc:
        print(f"vqflow {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
