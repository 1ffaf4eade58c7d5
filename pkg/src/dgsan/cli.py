"""Command-line entry point: ``dgsan <verb> [flags]``.

Verbs: synth, pretrain, train, eval, ablate, params, gradcheck.
Exit status is 0 on success, 1 for invalid arguments or inputs, 2 when a run fails.

Config files are JSON with two optional sections::

    {"model": {"scheme": 5, "encoder": {...}, "fusion": {...}}, "train": {"epochs": 30}}

Missing sections and fields take their defaults, so ``{}`` is the default config.
A run directory's ``config.json`` is itself a valid config file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import List, Optional, Tuple

from .data import DataError, load_manifest, synthesize_dataset
from .gradcheck import OPS, gradient_check
from .model import ModelConfig, count_parameters, variant_config
from .training import (
    TrainConfig,
    evaluate_checkpoint,
    pretrain_glfe,
    run_ablation,
    run_cross_validation,
    train_dgsan,
)

log = logging.getLogger("dgsan")


class UsageError(Exception):
    """Bad flags or inputs; maps to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _check_keys(section: dict, cls, where: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise UsageError(f"{where}: unknown config keys {unknown}")


def load_config(path) -> Tuple[ModelConfig, TrainConfig]:
    """Parse a config file into (model config, train config)."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"--config: no such file {path}")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config: {path} is not valid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise UsageError(f"--config: {path} must hold a JSON object")
    model_obj = obj.get("model", {})
    if "model" not in obj and "encoder" in obj:
        # pretraining run directories store only the encoder section
        model_obj = {"encoder": obj["encoder"]}
    train_obj = obj.get("train", {})
    _check_keys(model_obj, ModelConfig, "--config model")
    _check_keys(train_obj, TrainConfig, "--config train")
    try:
        return ModelConfig.from_json(model_obj), TrainConfig(**train_obj)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"--config: {exc}") from None


def _manifest(path):
    try:
        return load_manifest(path)
    except FileNotFoundError:
        raise UsageError(f"--manifest: no such file {path}") from None
    except DataError as exc:
        raise UsageError(f"--manifest: {exc}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dgsan", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="verb", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="write a synthetic two-time-point dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--cases", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("pretrain", help="pretrain the encoder with a temporary head")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)

    s = sub.add_parser("train", help="train the full network (or cross-validate with --folds)")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--glfe", help="pretrained encoder run or checkpoint directory")
    s.add_argument("--seed", type=int)
    s.add_argument("--scheme", type=int, choices=range(1, 6), metavar="1..5")
    s.add_argument("--sequence", help="fusion blocks, e.g. SAB,CAB,SAB")
    s.add_argument("--folds", type=int, help="run k-fold cross-validation instead of a single fit")

    s = sub.add_parser("eval", help="score a manifest with a trained checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=0.5)

    s = sub.add_parser("ablate", help="train and score ablation variants on one split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--variants", required=True, help="comma-separated variant names")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--glfe", help="pretrained encoder shared by every variant")
    s.add_argument("--seed", type=int)

    s = sub.add_parser("params", help="count trainable parameters")
    s.add_argument("--config", required=True)
    s.add_argument("--verbose", action="store_true", help="also list per-module counts")

    s = sub.add_parser("gradcheck", help="finite-difference gradient check of one op")
    s.add_argument("--op", required=True, help=f"one of {', '.join(OPS)} or 'all'")
    s.add_argument("--seed", type=int, default=0)
    return p


def _with_seed(train_cfg: TrainConfig, seed: Optional[int]) -> TrainConfig:
    if seed is None:
        return train_cfg
    return TrainConfig(**{**train_cfg.to_json(), "seed": seed})


def _cmd_synth(a):
    if a.cases < 2:
        raise UsageError("--cases must be >= 2")
    m = synthesize_dataset(a.cases, a.seed, a.out)
    print(f"wrote {len(m.cases)} cases to {Path(a.out) / 'manifest.json'}")


def _cmd_pretrain(a):
    manifest = _manifest(a.manifest)
    model_cfg, train_cfg = load_config(a.config)
    _, hist = pretrain_glfe(manifest, model_cfg.encoder, _with_seed(train_cfg, a.seed), a.out)
    print(f"pretrained {len(hist)} epochs, final loss {hist[-1]:.6f}")


def _cmd_train(a):
    manifest = _manifest(a.manifest)
    model_cfg, train_cfg = load_config(a.config)
    train_cfg = _with_seed(train_cfg, a.seed)
    if a.scheme is not None:
        model_cfg = variant_config(model_cfg, f"scheme{a.scheme}")
    if a.sequence is not None:
        try:
            model_cfg = variant_config(model_cfg, f"seq:{a.sequence}")
        except ValueError as exc:
            raise UsageError(f"--sequence: {exc}") from None
    if a.glfe is not None and not Path(a.glfe).exists():
        raise UsageError(f"--glfe: no such directory {a.glfe}")
    if a.folds is not None:
        if not 2 <= a.folds <= len(manifest.cases):
            raise UsageError("--folds must be between 2 and the number of cases")
        result = run_cross_validation(manifest, a.folds, model_cfg, train_cfg, a.out, a.glfe)
        print(json.dumps(result["summary"], indent=2))
        return
    _, hist = train_dgsan(manifest, a.glfe, model_cfg, train_cfg, a.out)
    print(f"trained {len(hist)} epochs, final loss {hist[-1]:.6f}")


def _cmd_eval(a):
    manifest = _manifest(a.manifest)
    if not Path(a.checkpoint).exists():
        raise UsageError(f"--checkpoint: no such directory {a.checkpoint}")
    if not 0.0 <= a.threshold <= 1.0:
        raise UsageError("--threshold must lie in [0, 1]")
    metrics, *_ = evaluate_checkpoint(a.checkpoint, manifest, a.out, a.threshold)
    print(metrics.dumps())


def _cmd_ablate(a):
    manifest = _manifest(a.manifest)
    model_cfg, train_cfg = load_config(a.config)
    variants = [v.strip() for v in a.variants.split(",") if v.strip()]
    if not variants:
        raise UsageError("--variants is empty")
    for v in variants:
        try:
            variant_config(model_cfg, v)
        except ValueError as exc:
            raise UsageError(f"--variants: {exc}") from None
    if a.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    if a.glfe is not None and not Path(a.glfe).exists():
        raise UsageError(f"--glfe: no such directory {a.glfe}")
    table = run_ablation(manifest, variants, model_cfg, _with_seed(train_cfg, a.seed), a.out, a.jobs, a.glfe)
    for v, m in table.items():
        auc = "n/a" if m.auc is None else f"{m.auc:.4f}"
        print(f"{v:<14} acc={m.acc:.4f} auc={auc} f1={m.f1:.4f}")


def _cmd_params(a):
    model_cfg, _ = load_config(a.config)
    counts = count_parameters(model_cfg)
    if a.verbose:
        for name, n in counts["modules"].items():
            print(f"{name:<12} {n:>10,d}")
    total = counts["total"]
    print(f"total {total} ({total / 1e6:.2f}M)")


def _cmd_gradcheck(a):
    ops = list(OPS) if a.op == "all" else [a.op]
    if a.op != "all" and a.op not in OPS:
        raise UsageError(f"--op: unknown op {a.op!r}; choose from {', '.join(OPS)}")
    for op in ops:
        print(gradient_check(op, a.seed).line())


COMMANDS = {
    "synth": _cmd_synth,
    "pretrain": _cmd_pretrain,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "params": _cmd_params,
    "gradcheck": _cmd_gradcheck,
}


def run_command(argv: List[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        COMMANDS[args.verb](args)
    except UsageError as exc:
        print(f"dgsan: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure after validation
        log.debug("run failed", exc_info=True)
        print(f"dgsan: {args.verb} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    return run_command(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
