"""Command-line operator surface.

Subcommands cover the whole artifact life cycle: dataset generation, the two
training stages plus denoiser pretraining, metric evaluation with JSON/CSV
output, the ablation grids, and the HTTP what-if service. Every run writes a
reproducibility record (config hash, seed, git revision, checkpoint hashes)
next to its outputs, and exits 1 with a validation report when the supplied
config is rejected.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import subprocess
import sys
from pathlib import Path
from typing import Callable, Sequence

from .baselines import constant_velocity_prediction
from .config import RunConfig, load_run_config
from .metrics import MISS_THRESHOLD, Prediction, evaluate
from .model import ModelState, checkpoint_hashes, predict
from .scene import Episode
from .training import (evaluate_model, pretrain_denoiser, run_stage2,
                       train_stage1)
from .world import load_dataset, make_dataset

METRIC_COLUMNS = ("minADE", "minFDE", "MR", "OR", "mAP",
                  "f_ADE", "f_FDE", "f_MR", "f_OR", "f_mAP")

COMPONENT_GRID: tuple[tuple[str, dict], ...] = (
    ("random", {"use_selector": False, "use_sgd": False, "use_ckd": False,
                "lambda_cons": 0.0, "lambda_safe": 0.0}),
    ("joint", {"use_sgd": False, "use_ckd": False,
               "lambda_cons": 0.0, "lambda_safe": 0.0}),
    ("joint+refine", {"use_ckd": False}),
    ("joint+refine+distill", {}),
)
P_CF_GRID = (0.0, 0.25, 0.5, 1.0)
TEACHER_GRID = ("none", "ema_only", "ema_unsafe_denoiser", "ema_sgd")


def _git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                             text=True, timeout=10)
        return out.stdout.strip() if out.returncode == 0 else "unknown"
    except OSError:
        return "unknown"


def _write_record(out_dir: Path, command: str, cfg: RunConfig, seed: int,
                  model_dir: Path | None = None, extra: dict | None = None) -> None:
    record = {
        "command": command,
        "config_hash": cfg.config_hash(),
        "seed": seed,
        "git_revision": _git_revision(),
        "checkpoint_hashes": checkpoint_hashes(model_dir) if model_dir else {},
    }
    record.update(extra or {})
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True))


def _print_table(table: dict[str, float]) -> None:
    print(json.dumps({k: round(table[k], 6) for k in METRIC_COLUMNS}, indent=2))


def _write_csv(path: Path, rows: list[dict], label_key: str | None = None) -> None:
    header = ([label_key] if label_key else []) + list(METRIC_COLUMNS)
    lines = [",".join(header)]
    for row in rows:
        cells = ([str(row[label_key])] if label_key else [])
        cells += [f"{row[c]:.6f}" for c in METRIC_COLUMNS]
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out)
    manifest = make_dataset(cfg.world, args.n_train, args.n_val, out, args.seed)
    _write_record(out, "gen-data", cfg, args.seed,
                  extra={"manifest_hash": manifest["hash"]})
    print(json.dumps({"episodes": len(manifest["train"]) + len(manifest["val"]),
                      "train": len(manifest["train"]), "val": len(manifest["val"]),
                      "hash": manifest["hash"]}, indent=2))
    return 0


def cmd_train_stage1(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, _, _ = load_dataset(args.data)
    state = ModelState.new(cfg, seed=args.seed)
    train_stage1(state, train, seed=args.seed, log_path=out / "stage1_log.jsonl")
    state.save(out)
    _write_record(out, "train-stage1", cfg, args.seed, model_dir=out)
    print(f"tokenizer trained on {len(train)} episodes -> {out}")
    return 0


def cmd_pretrain_denoiser(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = ModelState.load(args.model, seed=args.seed)
    train, _, _ = load_dataset(args.data)
    pretrain_denoiser(state, train, seed=args.seed,
                      log_path=out / "denoiser_log.jsonl")
    state.save(out)
    _write_record(out, "pretrain-denoiser", state.cfg, args.seed, model_dir=out)
    print(f"refinement network pretrained on {len(train)} episodes -> {out}")
    return 0


def cmd_train_stage2(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = ModelState.load(args.model, seed=args.seed)
    train, val, _ = load_dataset(args.data)
    log = run_stage2(state, train, val, seed=args.seed,
                     log_path=out / "stage2_log.jsonl")
    state.save(out)
    _write_record(out, "train-stage2", state.cfg, args.seed, model_dir=out)
    if log:
        _print_table(log[-1]["val"])
    return 0


def _predict_fn(args: argparse.Namespace,
                state: ModelState | None) -> Callable[[Episode], Prediction]:
    if args.predictor == "cv":
        return lambda ep: constant_velocity_prediction(
            ep.scene, ep.gt_futures.shape[1])
    if args.predictor == "oracle":
        return lambda ep: Prediction(candidates=ep.gt_futures[None], probs=[1.0])
    assert state is not None

    def model_fn(ep: Episode) -> Prediction:
        p = predict(state, ep.scene, refine_output=args.refine)
        return Prediction(candidates=p.candidates, probs=p.probs)

    return model_fn


def cmd_eval(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = None
    if args.predictor == "model":
        state = ModelState.load(args.model, seed=args.seed)
        cfg = state.cfg
    else:
        cfg = load_run_config(args.config)
    _, val, _ = load_dataset(args.data)
    if args.limit:
        val = val[: args.limit]
    table, _ = evaluate(val, _predict_fn(args, state),
                        threshold=cfg.miss_threshold,
                        zero_positive=cfg.map_zero_positive_ap)
    (out / "metrics.json").write_text(json.dumps(table, indent=2, sort_keys=True))
    _write_csv(out / "metrics.csv", [table])
    _write_record(out, "eval", cfg, args.seed,
                  model_dir=Path(args.model) if state else None,
                  extra={"predictor": args.predictor, "episodes": len(val)})
    _print_table(table)
    return 0


def _ablation_rows(axis: str) -> list[tuple[str, dict]]:
    if axis == "components":
        return [(name, dict(over)) for name, over in COMPONENT_GRID]
    if axis == "p_cf":
        return [(f"p_cf={v:g}", {"p_cf": v}) for v in P_CF_GRID]
    return [(mode, {"teacher_mode": mode}) for mode in TEACHER_GRID]


def cmd_ablate(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = ModelState.load(args.model, seed=args.seed)
    train, val, _ = load_dataset(args.data)
    rows = []
    for name, overrides in _ablation_rows(args.axis):
        state = copy.deepcopy(base)
        state.cfg = dataclasses.replace(
            base.cfg, stage2=dataclasses.replace(base.cfg.stage2, **overrides))
        run_stage2(state, train, val, seed=args.seed, val_limit=0)
        table, _ = evaluate_model(state, val)
        rows.append({"row": name, **table})
        print(f"{name:24s} " + " ".join(f"{c}={table[c]:.4f}"
                                        for c in METRIC_COLUMNS[:5]))
    (out / f"ablate_{args.axis}.json").write_text(
        json.dumps(rows, indent=2, sort_keys=True))
    _write_csv(out / f"ablate_{args.axis}.csv", rows, label_key="row")
    _write_record(out, f"ablate --axis {args.axis}", base.cfg, args.seed,
                  model_dir=Path(args.model))
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import os

    import uvicorn

    from .service import build_app

    state = ModelState.load(args.model, seed=args.seed)
    episodes: list[Episode] = []
    if args.data:
        _, val, _ = load_dataset(args.data)
        episodes = val
    app = build_app(state, episodes, ui_dir=args.ui_dir)
    uvicorn.run(app, host=os.environ.get("LOTCAST_BIND", "127.0.0.1"),
                port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lotcast",
        description="intention-conditioned joint trajectory prediction for "
                    "parking scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, model: bool = False,
               data: bool = True) -> None:
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", type=str, default=None,
                       help="JSON run config (defaults used when omitted)")
        p.add_argument("--out", type=str, required=True)
        if data:
            p.add_argument("--data", type=str, required=True,
                           help="dataset directory from gen-data")
        if model:
            p.add_argument("--model", type=str, required=True,
                           help="model directory holding the checkpoints")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p, data=False)
    p.add_argument("--n-train", type=int, default=5000)
    p.add_argument("--n-val", type=int, default=500)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-stage1", help="fit the intention tokenizer")
    common(p)
    p.set_defaults(fn=cmd_train_stage1)

    p = sub.add_parser("pretrain-denoiser",
                       help="pretrain the trajectory refinement network")
    common(p, model=True)
    p.set_defaults(fn=cmd_pretrain_denoiser)

    p = sub.add_parser("train-stage2", help="train the joint predictor")
    common(p, model=True)
    p.set_defaults(fn=cmd_train_stage2)

    p = sub.add_parser("eval", help="metric table on the validation split")
    common(p)
    p.add_argument("--model", type=str, default=None)
    p.add_argument("--predictor", choices=("model", "cv", "oracle"),
                   default="model",
                   help="model checkpoint, constant-velocity baseline, or the "
                        "ground-truth oracle fixture")
    p.add_argument("--refine", action=argparse.BooleanOptionalAction,
                   default=True)
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train and score an ablation grid")
    common(p, model=True)
    p.add_argument("--axis", choices=("components", "p_cf", "teacher"),
                   required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("serve", help="run the HTTP what-if service")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--data", type=str, default=None,
                   help="dataset directory served as browsable scenes")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--ui-dir", type=str, default=None,
                   help="static directory with the built browser UI")
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "eval" and args.predictor == "model" and not args.model:
        parser.error("eval --predictor model requires --model")
    try:
        return args.fn(args)
    except (ValueError, RuntimeError) as err:
        print(f"invalid config: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
