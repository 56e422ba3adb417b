"""Command-line entry point: ``zsadmoe <command> [options]``.

Exit codes: 0 success, 1 user error (bad flags, config, data), 2 numeric or
internal failure. Log verbosity comes from ``ZSADMOE_LOG_LEVEL``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .config import PRESETS, RunConfig, load_config
from .data import (DatasetManifest, check_disjoint, generate_synthetic_dataset, load_dataset, stack_samples,
                   write_anomaly_map_image)
from .errors import DatasetError, NumericError, UserError, ZsadError
from .metrics import evaluate
from .model import PromptMoEModel
from .trainer import encode_all, load_checkpoint, train
from .vgmop import export_expert_embeddings, expert_activation_stats, write_activation_csv

logger = logging.getLogger("zsadmoe")

ABLATIONS = {
    "static_prompt": ["vgmop.static_prompt=true"],
    "shared_pool": ["vgmop.shared_pool=true"],
    "shared_cross_attention": ["vgmop.shared_cross_attention=true"],
    "no_balance": ["loss.alpha=0.0"],
    "no_decouple": ["loss.beta=0.0"],
}
LOG_ENV = "ZSADMOE_LOG_LEVEL"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _config(args, preset="default") -> RunConfig:
    cfg = load_config(args.config or preset)
    sets = []
    for name in getattr(args, "ablation", None) or []:
        sets.extend(ABLATIONS[name])
    sets.extend(getattr(args, "set", None) or [])
    return cfg.with_overrides(sets) if sets else cfg


def _manifest_path(data, split) -> Path:
    p = Path(data)
    if p.is_dir():
        p = p / f"{split}.json"
    if not p.exists():
        raise DatasetError(f"manifest not found: {p}")
    return p


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    seed = cfg.data.seed if args.seed is None else args.seed
    n = cfg.data.n_per_class if args.n_per_class is None else args.n_per_class
    splits = {"train": cfg.data.train_classes, "test": cfg.data.test_classes}
    manifests = generate_synthetic_dataset(cfg.data.classes, n, seed, args.out, splits=splits,
                                           image_size=cfg.encoder.image_size)
    for name, man in manifests.items():
        path = Path(args.out) / f"{name}.json"
        print(f"{name}: {len(man.entries)} images, classes {','.join(man.classes)} -> {path} sha256={_sha256(path)[:16]}")
    return 0


def _evaluate_model(model, cfg, samples, maps_dir=None):
    x, masks, labels, classes = stack_samples(samples)
    maps, scores, decisions = model.predict(encode_all(model, x))
    if maps_dir is not None:
        out = Path(maps_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, (m, c) in enumerate(zip(maps, classes)):
            write_anomaly_map_image(np.clip(m, 0, 1), out / f"{c}_{i:04d}.png")
    report = evaluate(scores, labels, maps, masks, classes, cfg.eval.fpr_limit)
    return report, decisions


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.with_overrides([f"train.seed={args.seed}"])
    samples = load_dataset(_manifest_path(args.data, "train"))
    x, masks, labels, classes = stack_samples(samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    callback = None
    test_path = Path(args.data) / "test.json"
    if cfg.train.eval_every > 0 and Path(args.data).is_dir() and test_path.exists():
        test = load_dataset(test_path)
        fh = open(out / "eval_log.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "image_auroc", "image_ap", "pixel_auroc", "pro"])

        def callback(epoch, model):
            if (epoch + 1) % cfg.train.eval_every == 0:
                r = _evaluate_model(model, cfg, test)[0].mean
                writer.writerow([epoch + 1, r.image_auroc, r.image_ap, r.pixel_auroc, r.pro])
                fh.flush()

    torch.manual_seed(cfg.train.seed)
    model = PromptMoEModel(cfg.model_config())
    start = time.perf_counter()
    ckpt = out / cfg.train.checkpoint
    try:
        result = train(model, x, masks, labels, cfg, log_path=out / "loss_log.csv", checkpoint_path=ckpt,
                       train_classes=sorted(set(classes.tolist())), callback=callback)
    finally:
        if callback is not None:
            fh.close()
    last = result.log[-1]["total"] if result.log else float("nan")
    print(f"trained {result.steps} steps in {time.perf_counter() - start:.1f}s, final loss {last:.4f} -> {ckpt}")
    return 0


def cmd_eval(args) -> int:
    model, cfg, ckpt = load_checkpoint(args.checkpoint)
    samples = load_dataset(_manifest_path(args.data, args.split))
    check_disjoint(ckpt.header.get("train_classes", []), sorted({s.class_id for s in samples}))
    report, _ = _evaluate_model(model, cfg, samples, args.emit_maps)
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    report.save_json(path)
    report.save_csv(path.with_suffix(".csv"))
    m = report.mean
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"
    for name, r in sorted(report.per_class.items()):
        print(f"{name}: I-AUROC {fmt(r.image_auroc)} AP {fmt(r.image_ap)} P-AUROC {fmt(r.pixel_auroc)} PRO {fmt(r.pro)}")
    print(f"mean: I-AUROC {fmt(m.image_auroc)} AP {fmt(m.image_ap)} P-AUROC {fmt(m.pixel_auroc)} PRO {fmt(m.pro)}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck_model

    cfg = _config(args, preset="micro")
    if args.seed is not None:
        cfg = cfg.with_overrides([f"train.seed={args.seed}"])
    hook = None
    if args.corrupt_gradient:
        target = args.corrupt_gradient

        def hook(name, g):
            return g * 1.5 + 1e-3 if target in ("any", name) else g

    check = gradcheck_model(cfg, epsilon=args.epsilon, max_entries=args.max_entries, grad_hook=hook)
    res = check.result
    ok = res.passed(args.tol)
    print(f"checked {res.n_checked} entries of {len(res.per_param)} tensors in {check.seconds:.1f}s")
    print(f"max relative error {res.max_rel_error:.3e} (worst: {res.worst_param}); tolerance {args.tol:g}")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 2


def cmd_analyze_experts(args) -> int:
    model, cfg, _ = load_checkpoint(args.checkpoint)
    samples = load_dataset(_manifest_path(args.data, args.split))
    x = stack_samples(samples)[0]
    _, _, decisions = model.predict(encode_all(model, x))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = expert_activation_stats(decisions, cfg.vgmop.n_experts)
    write_activation_csv(rows, out / "expert_activation.csv")
    n = export_expert_embeddings(model.vgmop, out / "expert_embeddings.csv")
    print(f"{len(rows)} activation rows, {n} embedding rows -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="zsadmoe", description="Zero-shot anomaly detection with a visually-guided mixture of prompts.",
                formatter_class=argparse.ArgumentDefaultsHelpFormatter,
                epilog=f"Set {LOG_ENV}=DEBUG|INFO|WARNING to control logging.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    def config_flags(sp, default="default"):
        sp.add_argument("--config", default=None,
                        help=f"TOML file or preset name ({', '.join(PRESETS)}); default preset: {default}")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
        sp.add_argument("--seed", type=int, default=None, help="override the run seed")

    g = sub.add_parser("gen-data", help="render the synthetic benchmark", formatter_class=fmt)
    config_flags(g)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--n-per-class", type=int, default=None, help="images per class (default: from config)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on the auxiliary classes", formatter_class=fmt)
    config_flags(t)
    t.add_argument("--data", required=True, help="dataset directory (uses train.json) or manifest path")
    t.add_argument("--out", required=True, help="run directory for checkpoint and logs")
    t.add_argument("--ablation", action="append", default=[], choices=sorted(ABLATIONS),
                   help="apply a named ablation (repeatable)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on unseen classes", formatter_class=fmt)
    e.add_argument("--checkpoint", required=True, help="trained model.ckpt")
    e.add_argument("--data", required=True, help="dataset directory or manifest path")
    e.add_argument("--split", default="test", help="manifest name when --data is a directory")
    e.add_argument("--report", required=True, help="JSON report path; a CSV is written next to it")
    e.add_argument("--emit-maps", default=None, metavar="DIR", help="write one PNG anomaly map per image")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of all trainable gradients", formatter_class=fmt)
    config_flags(c, default="micro")
    c.add_argument("--epsilon", type=float, default=1e-5, help="central-difference step")
    c.add_argument("--tol", type=float, default=1e-4, help="maximum relative error")
    c.add_argument("--max-entries", type=int, default=None, help="probe at most this many entries per tensor")
    c.add_argument("--corrupt-gradient", default=None, help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("analyze-experts", help="export expert usage and mean embeddings", formatter_class=fmt)
    a.add_argument("--checkpoint", required=True, help="trained model.ckpt")
    a.add_argument("--data", required=True, help="dataset directory or manifest path")
    a.add_argument("--split", default="test", help="manifest name when --data is a directory")
    a.add_argument("--out", required=True, help="output directory for the CSV files")
    a.set_defaults(func=cmd_analyze_experts)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        logger.debug("internal failure", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
