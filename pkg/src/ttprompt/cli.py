"""Command-line entry point.

Commands::

    ttprompt gen-data --out DIR [--samples N --views V --dims D ...]
    ttprompt train CONFIG [--out DIR] [--<config key> VALUE ...]
    ttprompt eval CHECKPOINT_DIR [--out FILE]
    ttprompt params [CONFIG] [--n-min 1 --n-max 10]
    ttprompt gradcheck [CONFIG] [--corrupt BLOCK]
    ttprompt sweep CONFIG [--k-grid 1,2,4,8 --R-grid 1,2,4,8]

Every key of the experiment config is also a flag (``--lam 0.01``,
``--seeds "[0, 1]"``); values are parsed as YAML scalars. Exit codes: 0 on
success, 1 on a runtime failure (including a failing gradient check), 2 on a
usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import kernels
from .checkpoint import load_checkpoint, save_checkpoint
from .config import FIELD_NAMES, ExperimentConfig, config_from_dict, load_config
from .data import SyntheticSpec, gen_data, save_dataset
from .dcl import build_pairs, dcl_loss
from .ept import ept_exact_count, normalize_ranks, param_count
from .errors import ConfigError
from .incremental import apply_freeze_schedule, evaluate, prepare, run_experiment, summarize
from .model import Batch, ModelConfig, PromptModel, backward_step, loss_only
from .numcore import ParamTensor, Rng, finite_diff_grad, relative_error

log = logging.getLogger("ttprompt")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


# Gradient check ---------------------------------------------------------------

GRADCHECK_DIMS = dict(view_dims=[3, 4], d=8, n_layers=1, n_heads=1, k=2, ranks=2)


def gradcheck(cfg: ExperimentConfig | None = None, corrupt: str | None = None, h: float = 1e-5,
              tol: float = 1e-4, lam: float = 0.5, seed: int = 0, n_samples: int = 6) -> list[dict]:
    """Analytic vs central-difference gradients on a tiny forced-size model.

    Checks every block that trains in the first session plus the contrastive
    loss's gradient with respect to the prompt matrix. Frozen blocks are not
    reported. ``lam`` is set well above the training default so the
    contrastive contribution to the bank gradients is not buried under
    finite-difference noise. ``corrupt`` names a block whose analytic gradient
    is deliberately perturbed, to confirm that the harness catches errors.
    """
    cfg = cfg or ExperimentConfig(synthetic={})
    mc = ModelConfig(bank="ept", use_prompts=True, **GRADCHECK_DIMS)
    rng = Rng(seed)
    model = PromptModel(mc, rng.stream("init"))
    model.add_task(3)
    g = rng.stream("probe")
    masks = np.array([[1, 0], [0, 1], [1, 1]] * ((n_samples + 2) // 3), dtype=np.uint8)[:n_samples]
    batch = Batch([g.normal(size=(n_samples, dv)) for dv in mc.view_dims], masks,
                  (g.random((n_samples, 3)) < 0.5).astype(np.float64))
    apply_freeze_schedule(model, 0, cfg)
    wp = cfg.weighted_positive_term
    step = backward_step(model, batch, 0, lam, cfg.alpha, wp)

    def loss_fn(_):
        return loss_only(model, batch, 0, lam, cfg.alpha, wp)

    rows = []
    blocks = [(name, p, step.grads.get(name, np.zeros_like(p.value)), loss_fn)
              for name, p in model.named_params().items() if not p.frozen]
    pairs = build_pairs(np.arange(1, 1 << mc.n_views), model.view_weights.value)
    prompts = ParamTensor(model.bank.prompts(pairs.patterns))
    blocks.append(("dcl.prompts", prompts, dcl_loss(prompts.value, pairs, cfg.alpha).grad_prompts,
                   lambda p: dcl_loss(p.value, pairs, cfg.alpha).loss))
    for name, p, analytic, fn in blocks:
        if name == corrupt:
            analytic = analytic * 1.5 + 1e-3
        err = relative_error(analytic, finite_diff_grad(fn, p, h))
        rows.append({"block": name, "size": int(p.value.size), "rel_err": err, "pass": bool(err <= tol)})
    if corrupt is not None and corrupt not in {r["block"] for r in rows}:
        raise ConfigError(f"--corrupt {corrupt!r} is not a checked block")
    return rows


# Parameter accounting ---------------------------------------------------------

def params_table(n_values, d: int = 128, k: int = 4, R: int = 2, r: int | None = None) -> list[dict]:
    r = R if r is None else r
    rows = []
    for n in n_values:
        row = {"n": int(n)}
        for kind in ("EPT", "MAP", "MSP", "EPEP"):
            row.update({pc.kind: pc.count for pc in param_count(kind, n, d, k, R, r)})
        rows.append(row)
    return rows


def growth_summary(rows: list[dict]) -> dict:
    ept = [r["EPT exact"] for r in rows]
    mp = [r["MAP"] for r in rows]
    diffs = sorted(set(b - a for a, b in zip(ept, ept[1:])))
    ratios = sorted(set(b / a for a, b in zip(mp, mp[1:])))
    return {"EPT_exact_differences": diffs, "EPT_affine": len(diffs) <= 1,
            "MAP_ratios": ratios, "MAP_doubles": ratios in ([], [2.0])}


def _format_table(rows: list[dict]) -> str:
    cols = list(rows[0])
    widths = [max(len(c), *(len(str(r[c])) for r in rows)) for c in cols]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(str(r[c]).rjust(w) for c, w in zip(cols, widths)) for r in rows]
    return "\n".join(lines)


# Sweep --------------------------------------------------------------------------

def sweep(cfg: ExperimentConfig, ks, Rs, seed: int | None = None) -> list[dict]:
    """One experiment per ``(k, R)`` cell, with the bank size cross-checked
    against the exact parameter-count formula."""
    if not ks or not Rs:
        raise ConfigError("sweep grid must be non-empty")
    seed = cfg.seeds[0] if seed is None else seed
    cells = []
    for k in ks:
        for R in Rs:
            cell_cfg = replace(cfg, k=int(k), ranks=int(R))
            cell_cfg.validate()
            rep = run_experiment(cell_cfg, seed).report
            n = rep["data"]["n_views"]
            formula = ept_exact_count(n, cell_cfg.d, int(k), normalize_ranks(int(R), n))
            cells.append({"k": int(k), "R": int(R), "config_hash": rep["config_hash"],
                          "last_mAP": rep["last_mAP"], "average_mAP": rep["average_mAP"],
                          "param_count": rep["param_counts"]["bank_actual"], "formula_count": formula,
                          "count_matches": rep["param_counts"]["bank_actual"] == formula})
    return cells


# Commands -------------------------------------------------------------------------

def _overrides(args) -> dict:
    out = {}
    for key in FIELD_NAMES:
        raw = getattr(args, f"cfg_{key}", None)
        if raw is not None:
            out[key] = yaml.safe_load(raw)
    return out


def _config(args, required: bool = True) -> ExperimentConfig | None:
    if getattr(args, "config", None):
        return load_config(args.config, _overrides(args))
    over = _overrides(args)
    if not required:
        return config_from_dict({"synthetic": {}, **over}) if over else None
    raise ConfigError("a config file is required")


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(samples=args.samples, views=args.views, dims=yaml.safe_load(args.dims),
                         classes=args.classes, labels_per_sample=args.labels_per_sample,
                         cluster_separation=args.cluster_separation, noise=args.noise, seed=args.seed,
                         val_fraction=args.val_fraction, test_fraction=args.test_fraction)
    path = save_dataset(gen_data(spec), args.out, args.format)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    reports = []
    for seed in cfg.seeds:
        res = run_experiment(cfg, seed)
        run_dir = out / f"seed{seed}"
        write_json(run_dir / "report.json", res.report)
        write_json(run_dir / "timing.json", res.timing)
        save_checkpoint(run_dir / "checkpoint", res.model, cfg, seed, res.prepared.plan)
        reports.append(res.report)
        print(f"seed {seed}: last mAP {res.report['last_mAP']:.4f}  average mAP "
              f"{res.report['average_mAP']:.4f}  -> {run_dir}")
    if len(reports) > 1:
        write_json(out / "summary.json", {"config_hash": cfg.digest(), **summarize(reports)})
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg, seed, plan = load_checkpoint(args.checkpoint)
    prep = prepare(cfg, seed)
    if plan is not None and plan.class_sets != prep.plan.class_sets:
        raise ConfigError("checkpoint class plan does not match the one rebuilt from its config")
    sessions = []
    for t in range(model.n_tasks):
        m = evaluate(model, prep.ds, prep.test, prep.plan, t)
        sessions.append({"session": m.session, "cumulative_classes": m.n_classes, "mAP": m.mAP,
                         "CF1": m.CF1, "OF1": m.OF1, "chance_mAP": m.chance_mAP,
                         "skipped_classes": m.skipped_classes})
    maps = [s["mAP"] for s in sessions]
    report = {"seed": seed, "config_hash": cfg.digest(), "sessions": sessions,
              "average_mAP": float(np.mean(maps)), "last_mAP": maps[-1]}
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = _config(args, required=False)
    d, k = (cfg.d, cfg.k) if cfg else (args.d, args.k)
    if cfg is None:
        R = args.R
    else:
        R = int(cfg.ranks) if np.isscalar(cfg.ranks) else max(cfg.ranks)
    rows = params_table(range(args.n_min, args.n_max + 1), d, k, R, args.r)
    summary = growth_summary(rows)
    if args.json:
        print(json.dumps({"d": d, "k": k, "R": R, "rows": rows, "growth": summary}, indent=2))
        return EXIT_OK
    print(f"d={d} k={k} R={R}")
    print(_format_table(rows))
    print(f"EPT exact: consecutive differences {summary['EPT_exact_differences']} "
          f"({'linear' if summary['EPT_affine'] else 'not affine'} in n)")
    print(f"MAP: consecutive ratios {summary['MAP_ratios']} "
          f"({'exponential, doubling per view' if summary['MAP_doubles'] else 'irregular'})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args, required=False)
    rows = gradcheck(cfg, corrupt=args.corrupt, h=args.h, tol=args.tol, lam=args.lam_check)
    width = max(len(r["block"]) for r in rows)
    for r in rows:
        print(f"{r['block'].ljust(width)}  n={r['size']:<4d} rel_err={r['rel_err']:.3e}  "
              f"{'PASS' if r['pass'] else 'FAIL'}")
    failed = [r["block"] for r in rows if not r["pass"]]
    print(f"{len(rows) - len(failed)}/{len(rows)} blocks pass" + (f"; failing: {failed}" if failed else ""))
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    ks = [int(x) for x in args.k_grid.split(",") if x]
    Rs = [int(x) for x in args.R_grid.split(",") if x]
    cells = sweep(cfg, ks, Rs, args.seed)
    doc = {"config_hash": cfg.digest(), "seed": cfg.seeds[0] if args.seed is None else args.seed,
           "cells": cells}
    if args.out:
        write_json(args.out, doc)
    print(json.dumps(doc, indent=2))
    return EXIT_OK if all(c["count_matches"] for c in cells) else EXIT_RUNTIME


# Parser ---------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("config overrides (YAML values)")
    for key in FIELD_NAMES:
        group.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttprompt", description=__doc__.split("\n")[0])
    parser.add_argument("--backend", choices=sorted(kernels.BACKENDS), help="numeric kernel backend")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic multi-view multi-label dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=1200)
    p.add_argument("--views", type=int, default=6)
    p.add_argument("--dims", default="16", help="one dim for all views or a YAML list")
    p.add_argument("--classes", type=int, default=12)
    p.add_argument("--labels-per-sample", type=float, default=2.0)
    p.add_argument("--cluster-separation", type=float, default=2.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.15)
    p.add_argument("--test-fraction", type=float, default=0.15)
    p.add_argument("--format", choices=("f64le", "csv"), default="f64le")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the incremental protocol, write reports and checkpoints")
    p.add_argument("config")
    p.add_argument("--out", default="runs")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="re-evaluate a checkpoint on its rebuilt test split")
    p.add_argument("checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="prompt parameter counts over a range of view counts")
    p.add_argument("config", nargs="?")
    p.add_argument("--n-min", type=int, default=1)
    p.add_argument("--n-max", type=int, default=10)
    p.add_argument("--d", type=int, default=128, help="used without a config")
    p.add_argument("--k", type=int, default=4, help="used without a config")
    p.add_argument("--R", type=int, default=2, help="used without a config")
    p.add_argument("--r", type=int, default=None, help="EPE-P rank (defaults to R)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference check of every trainable block")
    p.add_argument("config", nargs="?")
    p.add_argument("--corrupt", metavar="BLOCK", help="perturb this block's analytic gradient")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--lam-check", type=float, default=0.5, help="contrastive weight during the check")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="grid over EPT basis size k and TT rank R")
    p.add_argument("config")
    p.add_argument("--k-grid", default="1,2,4,8", help="comma-separated basis sizes")
    p.add_argument("--R-grid", default="1,2,4,8", help="comma-separated TT ranks")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def _origin(exc: BaseException) -> str:
    tb, mod = exc.__traceback__, "?"
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", mod)
        tb = tb.tb_next
    return mod


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.backend:
        kernels.use_backend(args.backend)
    try:
        return args.func(args)
    except (FileNotFoundError, ConfigError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"error [{_origin(exc)}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
