"""Experiment runner: train-teacher, distill, sample, eval, grad-check.

Every run writes its exact resolved config and a code hash next to its
artifacts; identical config + seed reproduces checkpoints bit-for-bit.
Exit codes: 0 success, 1 runtime failure, 2 config error.
"""

from __future__ import annotations

import argparse
import csv
import glob
import hashlib
import json
import os
import sys

import numpy as np

import maskdist
from maskdist import checkpoint as ckpt
from maskdist import config as C
from maskdist import evaluation as E
from maskdist.config import ConfigError
from maskdist.datasets import SyntheticDataset
from maskdist.diffusion import MaskSchedule, sample_multistep
from maskdist.distill import (
    DistillState,
    InitStrategy,
    one_step_sample,
    run_distillation,
)
from maskdist.gradcheck import run_suite
from maskdist.model import ModelConfig, ModelParams, NetworkPredictor
from maskdist.rng import make_stream
from maskdist.teacher import TrainingDiverged, train_teacher

OUTPUT_ROOT_ENV = "MASKDIST_OUTPUT_ROOT"


def code_version() -> str:
    """Stable hash of the installed package sources."""
    root = os.path.dirname(os.path.abspath(maskdist.__file__))
    h = hashlib.sha256()
    for path in sorted(glob.glob(os.path.join(root, "**", "*.py*"), recursive=True)):
        if path.endswith((".py", ".pyx")):
            h.update(os.path.relpath(path, root).encode())
            with open(path, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()[:16]


def resolve_out_dir(cfg: dict, arg_out: str | None, name: str) -> str:
    root = arg_out or os.environ.get(OUTPUT_ROOT_ENV) or cfg["output_dir"]
    out = os.path.join(root, name) if name else root
    os.makedirs(out, exist_ok=True)
    return out


def write_run_metadata(out_dir: str, cfg: dict):
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as fh:
        fh.write(C.canonical_dumps(cfg))
    with open(os.path.join(out_dir, "run_meta.json"), "w") as fh:
        json.dump({"code_version": code_version()}, fh, sort_keys=True)


METRICS_COLUMNS = ["iter", "surrogate_loss", "aux_loss", "w_t", "t", "L_M",
                   "entropy_estimate", "wall_ms"]


def write_csv(path: str, rows: list[dict], fieldnames: list[str] | None = None):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames or list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v
                             for k, v in row.items()})


def _load_config(args) -> dict:
    cfg = C.load_config(args.config)
    cfg = C.apply_overrides(cfg, args.set or [])
    return cfg


def _save_params(path: str, params: ModelParams, kind: str, extra_meta: dict):
    meta = {"kind": kind, "model": params.config.to_dict()}
    meta.update(extra_meta)
    ckpt.save(path, params.numpy_arrays(), meta)


def _load_params(path: str) -> tuple[ModelParams, dict]:
    arrays, meta = ckpt.load(path)
    model_cfg = ModelConfig.from_dict(meta["model"])
    from maskdist import tensor as T

    wrapped = {n: T.Array(a.copy(), requires_grad=False) for n, a in arrays.items()
               if not n.startswith(("opt_", "psi.", "ema."))}
    if any(n.startswith("theta.") for n in wrapped):
        wrapped = {n[len("theta."):]: a for n, a in wrapped.items()
                   if n.startswith("theta.")}
    params = ModelParams(model_cfg, wrapped, {n: False for n in wrapped})
    return params, meta


# ------------------------------------------------------------- train-teacher


def cmd_train_teacher(args) -> int:
    cfg = _load_config(args)
    dataset = C.build_dataset(cfg)
    out_dir = resolve_out_dir(cfg, args.out, "teacher")
    write_run_metadata(out_dir, cfg)

    result = train_teacher(
        dataset, C.build_train_config(cfg), C.build_model_config(cfg),
        progress=(lambda it, loss: print(f"[teacher {it}] loss={loss:.4f}"))
        if args.verbose else None,
    )
    extra = {
        "schedule": cfg["schedule.kind"],
        "dataset": dataset.to_json(),
        "config": C.canonical_dumps(cfg),
        "code_version": code_version(),
    }
    _save_params(os.path.join(out_dir, "teacher.json"), result.params, "teacher", extra)
    _save_params(os.path.join(out_dir, "teacher_ema.json"), result.ema, "teacher", extra)
    write_csv(os.path.join(out_dir, "training.csv"), result.history)
    print(f"teacher checkpoint written to {out_dir}")
    return 0


# ------------------------------------------------------------------- distill


def _distill_state_arrays(state: DistillState) -> dict[str, np.ndarray]:
    arrays = {}
    for prefix, params in (("theta", state.theta), ("psi", state.psi)):
        for n, a in params.arrays.items():
            arrays[f"{prefix}.{n}"] = a.data
    for n, s in state.ema.shadow.items():
        arrays[f"ema.{n}"] = s
    arrays.update(state.opt_theta.state_arrays("opt_theta"))
    arrays.update(state.opt_psi.state_arrays("opt_psi"))
    return arrays


def _save_distill_state(path: str, state: DistillState, cfg: dict, metrics: list):
    meta = {
        "kind": "distill-state",
        "model": state.theta.config.to_dict(),
        "iteration": state.iteration,
        "opt_theta_t": state.opt_theta.t,
        "opt_psi_t": state.opt_psi.t,
        "rng": state.hub.state(),
        "skipped_generator": state.skipped_generator,
        "skipped_auxiliary": state.skipped_auxiliary,
        "teacher_hash": state.teacher_hash,
        "config": C.canonical_dumps(cfg),
        "metrics": metrics,
    }
    ckpt.save(path, _distill_state_arrays(state), meta)


def _restore_distill_state(state: DistillState, path: str) -> list:
    arrays, meta = ckpt.load(path)
    if meta.get("kind") != "distill-state":
        raise ConfigError(f"{path} is not a distillation state checkpoint")
    for prefix, params in (("theta", state.theta), ("psi", state.psi)):
        for n, a in params.arrays.items():
            a.data[...] = arrays[f"{prefix}.{n}"]
    for n in state.ema.shadow:
        state.ema.shadow[n][...] = arrays[f"ema.{n}"]
    state.opt_theta.load_state_arrays("opt_theta", arrays, meta["opt_theta_t"])
    state.opt_psi.load_state_arrays("opt_psi", arrays, meta["opt_psi_t"])
    state.hub.load_state(meta["rng"])
    state.iteration = meta["iteration"]
    state.skipped_generator = meta["skipped_generator"]
    state.skipped_auxiliary = meta["skipped_auxiliary"]
    state.teacher_hash = meta["teacher_hash"]
    return meta["metrics"]


def _run_one_distill(cfg: dict, teacher: ModelParams, teacher_meta: dict,
                     out_dir: str, resume: str | None, verbose: bool) -> int:
    write_run_metadata(out_dir, cfg)
    if teacher_meta.get("schedule") and teacher_meta["schedule"] != cfg["schedule.kind"]:
        print(
            f"warning: teacher was trained with the {teacher_meta['schedule']!r} "
            f"schedule but distillation uses {cfg['schedule.kind']!r}; matching "
            "schedules are recommended", file=sys.stderr)
    beta = cfg["distill.jeffrey_beta"]
    if cfg["distill.divergence"] == "jeffrey" and not (
            C.BETA_COMFORT_RANGE[0] <= beta <= C.BETA_COMFORT_RANGE[1]):
        print(f"warning: jeffrey coefficient {beta} outside the tested range "
              f"{C.BETA_COMFORT_RANGE}; distillation may diverge", file=sys.stderr)

    dcfg = C.build_distill_config(cfg)
    state = DistillState(teacher, dcfg)
    prior_metrics: list = []
    if resume:
        prior_metrics = _restore_distill_state(state, resume)

    def checkpoint_fn(st, metrics):
        _save_distill_state(
            os.path.join(out_dir, f"state_iter{st.iteration}.json"),
            st, cfg, prior_metrics + metrics)

    try:
        result = run_distillation(
            teacher, dcfg, checkpoint_fn=checkpoint_fn, state=state,
            progress=(lambda it, m: print(
                f"[distill {it}] surrogate={m['surrogate_loss']:.3e} "
                f"aux={m['aux_loss']:.4f} H={m['entropy_estimate']:.3f}"))
            if verbose else None,
        )
    except TrainingDiverged as err:
        print(f"error: {err}", file=sys.stderr)
        print("last periodic state checkpoint (if any) is the last-good state",
              file=sys.stderr)
        return 1

    extra = {
        "schedule": cfg["schedule.kind"],
        "init": {
            "mask_ratio": cfg["distill.init_mask_ratio"],
            "sigma": cfg["distill.init_sigma"],
            "placement": cfg["distill.init_placement"],
        },
        "config": C.canonical_dumps(cfg),
        "code_version": code_version(),
    }
    _save_params(os.path.join(out_dir, "student.json"), result.generator, "student", extra)
    _save_params(os.path.join(out_dir, "student_ema.json"), result.ema, "student", extra)
    _save_params(os.path.join(out_dir, "auxiliary.json"), result.auxiliary, "auxiliary", extra)
    all_metrics = prior_metrics + result.metrics
    write_csv(os.path.join(out_dir, "metrics.csv"), all_metrics, METRICS_COLUMNS)
    _save_distill_state(os.path.join(out_dir, "state_final.json"),
                        result.state, cfg, all_metrics)
    print(f"student checkpoint written to {out_dir}")
    return 0


def cmd_distill(args) -> int:
    cfg = _load_config(args)
    teacher, teacher_meta = _load_params(args.teacher)
    runs = C.expand_grid(cfg)
    if len(runs) > 1 and args.resume:
        raise ConfigError("--resume cannot be combined with a grid config")
    status = 0
    for name, run_cfg in runs:
        out_dir = resolve_out_dir(run_cfg, args.out,
                                  os.path.join("distill", name) if name else "distill")
        if len(runs) > 1:
            print(f"=== grid run {name} -> {out_dir}")
        status |= _run_one_distill(run_cfg, teacher, teacher_meta, out_dir,
                                   args.resume, args.verbose)
    return status


# -------------------------------------------------------------------- sample


def cmd_sample(args) -> int:
    params, meta = _load_params(args.checkpoint)
    rng = make_stream(args.seed, "cli.sample")
    cond = None if args.cond in (None, "null") else int(args.cond)
    rows = []
    if meta.get("kind") == "student" and args.steps == 1:
        init = InitStrategy(meta["init"]["mask_ratio"], meta["init"]["sigma"],
                            meta["init"]["placement"])
        tokens = one_step_sample(params, init, cond, args.n, rng,
                                 tau=args.temperature or 1.0)
    else:
        schedule = MaskSchedule(meta.get("schedule", "arccos"))
        tokens = sample_multistep(
            NetworkPredictor(params), cond, schedule, args.steps, rng,
            mode=args.mode, tau=args.temperature, cfg_scale=args.cfg_scale,
            top_k=args.top_k, batch=args.n)
    for row in tokens:
        rows.append({
            "cond": cond,
            "tokens": [int(v) for v in row],
            "seed": args.seed,
            "steps": args.steps,
            "temperature": args.temperature if args.temperature is not None else 1.0,
        })
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for row in rows:
            out.write(json.dumps(row, sort_keys=True) + "\n")
    finally:
        if args.out:
            out.close()
    return 0


# ---------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    dataset = C.build_dataset(cfg)
    teacher, teacher_meta = _load_params(args.teacher)
    out_dir = resolve_out_dir(cfg, args.out, "eval")
    write_run_metadata(out_dir, cfg)

    student = None
    student_meta = None
    if args.student:
        student, student_meta = _load_params(args.student)

    report, grid_rows = E.diagnostics(
        teacher=teacher,
        dataset=dataset,
        schedule=MaskSchedule(cfg["schedule.kind"]),
        teacher_steps=cfg["eval.teacher_steps"],
        n_samples=cfg["eval.samples"],
        temperature_grid=cfg["eval.temperature_grid"],
        n_init=cfg["eval.n_init"],
        cfg_scale=1.0,
        seed=cfg["seed"],
        student=student,
        student_init=None if student_meta is None else InitStrategy(
            student_meta["init"]["mask_ratio"], student_meta["init"]["sigma"],
            student_meta["init"]["placement"]),
    )
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
    write_csv(os.path.join(out_dir, "eval_grid.csv"), grid_rows)
    print(f"eval report written to {out_dir}")
    return 0


# ----------------------------------------------------------------- grad-check


def cmd_grad_check(args) -> int:
    rows = run_suite(n_pairs=args.pairs, seed=args.seed)
    width = max(len(r["divergence"]) for r in rows)
    ok = True
    for r in rows:
        ok &= r["ok"]
        print(f"{r['divergence']:{width}s}  V={r['vocab']:<3d} "
              f"max_rel_err={r['max_rel_err']:.3e} "
              f"max_grad_sum={r['max_grad_sum']:.3e} "
              f"{'PASS' if r['ok'] else 'FAIL'}")
    print("all gradient oracles passed" if ok else "FAILURES detected")
    return 0 if ok else 1


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskdist",
        description="masked diffusion teacher training, sampling, one-step "
                    "distillation, and verification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="flat JSON config path")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key")
        p.add_argument("--out", help="output root (overrides config/env)")
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("train-teacher", help="pre-train the multi-step teacher")
    add_common(p)
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("distill", help="distill a teacher into a one-step generator")
    add_common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint manifest")
    p.add_argument("--resume", help="distillation state checkpoint to resume from")
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("sample", help="draw sequences from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--mode", default="stochastic",
                   choices=["stochastic", "fixed_count"])
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--cfg-scale", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--cond", default=None, help="class id or 'null'")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="JSONL output path (default stdout)")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="distribution diagnostics report")
    add_common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("grad-check", help="divergence gradient oracle suite")
    p.add_argument("--pairs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (TrainingDiverged, ckpt.CheckpointError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
