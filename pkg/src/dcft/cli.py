"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 shape error, 4 data error,
5 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as datamod
from . import diagnostics as diag
from .adapters import count_params, preset_targets, target_shapes
from .checkpoint import atomic_write, canonical_json, load_checkpoint, read_header, save_checkpoint
from .config import CliConfig, all_keys
from .errors import ConfigError, DcftError, NumericError
from .model import build_model, attach_adapters
from .train import evaluate, pretrain_backbone, train, training_loss

ALIASES = {
    "--d": "train.d",
    "--s": "train.s",
    "--k": "train.k",
    "--targets": "train.targets",
    "--lr": "train.learning_rate",
    "--batch-size": "train.batch_size",
    "--epochs": "train.epochs",
    "--lambda-orth": "train.lambda_orth",
    "--seed": "train.seed",
    "--adapter": "train.adapter",
    "--lora-rank": "train.lora_rank",
    "--max-steps": "train.max_steps",
    "--arch": "run.arch",
    "--dataset": "run.dataset",
    "--task": "run.task",
    "--out": "run.out",
}


def _config_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="INI-style config file with [model], [train], [run] sections")
    group = p.add_argument_group("config keys (dotted names override the file)")
    for key in all_keys():
        group.add_argument(f"--{key}", dest=key, metavar="VALUE", default=None)
    short = p.add_argument_group("shortcuts")
    for flag, key in ALIASES.items():
        kw = {"choices": ["dcft", "lora"]} if key == "train.adapter" else {}
        short.add_argument(flag, dest=f"alias:{key}", metavar=key.split(".")[1].upper(), default=None, **kw)
    return p


def resolve(args: argparse.Namespace) -> CliConfig:
    overrides = {}
    for name, value in vars(args).items():
        if value is None:
            continue
        if name.startswith("alias:"):
            overrides[name[len("alias:"):]] = value
        elif "." in name:
            overrides[name] = value
    return CliConfig.resolve(args.config, overrides)


def _announce(cfg: CliConfig) -> None:
    print(f"config-hash: {cfg.hash()}")


def _load_dataset(path: str, task: str) -> datamod.Dataset:
    if path:
        return datamod.read_csv(path)
    if task in datamod.BUNDLED:
        return datamod.bundled(task)
    return datamod.generate(task, n=512, vocab_size=16, seq_len=8, seed=0)


# -- commands --------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = resolve(args)
    _announce(cfg)
    model = build_model(cfg.model)
    dataset = _load_dataset(cfg.run.dataset, cfg.run.task)
    eval_ds = datamod.read_csv(cfg.run.eval_dataset) if cfg.run.eval_dataset else None
    if cfg.run.pretrain_steps:
        pretrain_backbone(model, dataset, steps=cfg.run.pretrain_steps, seed=cfg.model.seed)
    attach_adapters(model, cfg.train.adapter_config())

    start = time.perf_counter()
    report = train(model, dataset, cfg.train, eval_ds)
    seconds = time.perf_counter() - start

    echo = cfg.to_dict()
    digest = cfg.hash()
    lines = [canonical_json({"config": echo, "config_hash": digest})]
    lines += [canonical_json(rec) for rec in report.epoch_records()]
    lines.append(canonical_json({
        "final": {
            "trainable_params": report.trainable_params,
            "steps": report.steps,
            "orth_initial": report.orth_initial,
            "orth_final": report.orth_final,
        }
    }))
    out = Path(cfg.run.out)
    summary_header = ("config_hash", "adapter", "d", "s", "k", "targets", "params", "steps",
                      "final_loss", "final_accuracy", "seconds", "config")
    summary = [(digest, cfg.train.adapter, cfg.train.d, cfg.train.s, cfg.train.k, "+".join(cfg.train.targets),
                report.trainable_params, report.steps, report.epoch_loss[-1], report.eval_accuracy[-1],
                f"{seconds:.3f}", canonical_json(echo))]
    ckpt = Path(cfg.run.checkpoint) if cfg.run.checkpoint else out / "model.ckpt"
    # everything is rendered before the first write so a failure leaves nothing behind
    atomic_write(out / "epochs.jsonl", "\n".join(lines) + "\n")
    atomic_write(out / "summary.csv", diag.to_csv(summary_header, summary))
    save_checkpoint(model, ckpt, "full", echo)
    save_checkpoint(model, out / "adapters.ckpt", "adapters", echo)
    print(f"trainable params: {report.trainable_params}")
    print(f"final loss {report.epoch_loss[-1]:.6f}, accuracy {report.eval_accuracy[-1]:.4f} after {report.steps} steps")
    print(f"wrote {out / 'epochs.jsonl'}, {out / 'summary.csv'}, {ckpt}")
    return 0


def _budget_targets(cfg: CliConfig):
    if cfg.run.arch == "toy":
        shapes = target_shapes(cfg.model.hidden_dim, cfg.model.ffn_dim)
        return [(t, *shapes[t]) for t in cfg.train.targets], cfg.model.num_layers
    return preset_targets(cfg.run.arch, cfg.train.targets)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from None


def cmd_report_params(args) -> int:
    cfg = resolve(args)
    _announce(cfg)
    targets, layers = _budget_targets(cfg)
    t = cfg.train
    out_rows = []
    if args.sweep_d or args.sweep_s:
        if args.sweep_d:
            pairs = [(d, d) for d in _int_list(args.sweep_d)]
        else:
            pairs = [(t.d, s) for s in _int_list(args.sweep_s)]
        if cfg.run.arch == "toy":
            raise ConfigError("sweeps use an arch preset")
        rows = diag.budget_sweep(cfg.run.arch, pairs, t.targets, t.k)
        out_rows = [(r.d, r.s, r.total, r.status) for r in rows]
        header = ("d", "s", "total_params", "status")
        print(diag.format_table(header, out_rows))
        totals = [r.total for r in rows if r.total is not None]
        print(f"strictly decreasing over valid configs: {diag.strictly_decreasing(totals)}")
        excluded = [f"d={r.d},s={r.s}" for r in rows if r.total is None]
        print("configs needing padding (excluded): " + (", ".join(excluded) if excluded else "none"))
    else:
        report = count_params(targets, t.d, t.s, t.k, layers)
        header = diag.BUDGET_HEADER
        out_rows = diag.budget_rows(report)
        print(diag.format_table(header, out_rows))
        print(f"per layer: {report.per_layer}  layers: {layers}")
        print(f"total trainable: {report.total_params}")
        print(f"total with unfactored subspace: {report.total_before}")
        print(f"LoRA r=1 on same targets: {report.total_lora_r1}")
    if args.csv:
        atomic_write(args.csv, diag.to_csv(header, out_rows))
    return 0


def _parse_dims(text: str) -> tuple[int, int]:
    try:
        r, c = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--dims must look like 64x64, got {text!r}") from None
    return r, c


def cmd_coverage(args) -> int:
    cfg = resolve(args)
    _announce(cfg)
    rows, cols = _parse_dims(args.dims)
    cov = diag.coverage_map(rows, cols, cfg.train.d, cfg.train.s)
    print(cov.summary())
    if args.pgm:
        cov.write_pgm(args.pgm)
        print(f"wrote {args.pgm}")
    return 0


def cmd_merge(args) -> int:
    model = load_checkpoint(args.checkpoint)
    header = read_header(args.checkpoint)
    save_checkpoint(model, args.out, "merged", header.get("config"))
    print(f"merged {len(model.adapters)} adapters into {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = _load_dataset(args.dataset or "", args.task)
    acc = evaluate(model, ds)
    print(f"accuracy: {acc:.6f} ({len(ds)} examples)")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = resolve(args)
    _announce(cfg)
    model = build_model(cfg.model)
    attach_adapters(model, cfg.train.adapter_config())
    rng = np.random.default_rng(cfg.train.seed)
    # well-scaled factors keep finite differences above round-off
    for p in model.adapter_parameters().values():
        p.data[:] = rng.normal(0.0, args.param_std, size=p.shape)
    batch = _load_dataset(cfg.run.dataset, cfg.run.task).subset(np.arange(args.batch))
    report = diag.grad_check(lambda: training_loss(model, batch, cfg.train), model.adapter_parameters(), args.eps)
    worst = sorted(report.per_param.items(), key=lambda kv: -kv[1])[:5]
    for name, err in worst:
        print(f"{name}: max rel err {err:.3e}")
    print(f"global max rel err {report.global_max:.3e} (eps={report.eps:g}, tol={args.tol:g})")
    if not report.passed(args.tol):
        print("gradient check FAILED", file=sys.stderr)
        return NumericError.exit_code
    print("gradient check passed")
    return 0


def cmd_efficiency(args) -> int:
    cfg = resolve(args)
    _announce(cfg)
    base = cfg.train
    if args.d_values:
        configs = [replace(base, d=d, s=d) for d in _int_list(args.d_values)]
    elif args.s_values:
        configs = [replace(base, s=s) for s in _int_list(args.s_values)]
    else:
        configs = [base]
    for c in configs:
        c.validate()
    ds = _load_dataset(cfg.run.dataset, cfg.run.task)
    rows = diag.efficiency_report(configs, ds, cfg.model, cfg.run.threshold)
    table = diag.efficiency_rows(rows)
    print(diag.format_table(diag.EFFICIENCY_HEADER, table))
    out = Path(cfg.run.out) / "efficiency.csv"
    atomic_write(out, diag.to_csv(diag.EFFICIENCY_HEADER, table))
    print(f"wrote {out}")
    return 0


def cmd_datagen(args) -> int:
    ds = datamod.generate(args.task, args.n, args.vocab, args.seq_len, args.seed)
    atomic_write(args.output, datamod.to_csv(ds))
    print(f"wrote {len(ds)} rows to {args.output}")
    return 0


# -- wiring ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcft", description="Deconvolution fine-tuning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    parent = _config_parent()

    p = sub.add_parser("train", parents=[parent], help="train adapters on a dataset")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report-params", parents=[parent], help="trainable-parameter budget")
    p.add_argument("--sweep-d", help="comma list of kernel sizes, stride = kernel")
    p.add_argument("--sweep-s", help="comma list of strides at the configured kernel size")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_report_params)

    p = sub.add_parser("coverage", parents=[parent], help="transposed-convolution coverage map")
    p.add_argument("--dims", default="64x64", help="target ROWSxCOLS (default 64x64)")
    p.add_argument("--pgm", help="write the map as a PGM image")
    p.set_defaults(func=cmd_coverage)

    p = sub.add_parser("merge", help="fold adapters into the backbone")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--task", default="token-majority")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[parent], help="finite-difference check of the full loss")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--param-std", type=float, default=0.5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("efficiency", parents=[parent], help="train a sweep and tabulate params/accuracy/time")
    p.add_argument("--d-values", help="comma list of kernel sizes, stride = kernel")
    p.add_argument("--s-values", help="comma list of strides at the configured kernel size")
    p.set_defaults(func=cmd_efficiency)

    p = sub.add_parser("datagen", help="write a synthetic task as CSV")
    p.add_argument("--task", default="token-majority", choices=sorted(datamod.GENERATORS))
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--vocab", type=int, default=16)
    p.add_argument("--seq-len", type=int, default=9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_datagen)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DcftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # noqa: BLE001 - last resort, keep the message
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
