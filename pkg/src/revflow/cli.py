"""Command-line entry point: ``revflow <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

CSV outputs
-----------
gen-data        <out>.csv: feature columns, optional ``label``; sidecar <out>.meta.json
pretrain        pretrain_loss.csv: epoch, fm_loss
                mi_proxy.csv: epoch, split, mi_proxy, probe_count   (with --mi-every)
finetune        finetune_report.csv: epoch, fm_loss, ce_loss, total_loss, accuracy, lr, mi_proxy
                finetune_timing.csv: epoch, seconds
eval            eval.csv: experiment_id, metric, value  (accuracy, confusion_<true>_<pred>)
logprob         logprob.csv: sample_id, logp_x0, delta_logp, x1_0 .. x1_{d-1}
straightness    straightness.csv: experiment_id, metric, value
export-traj     trajectory.csv: sample_id, step, t, x_0 .. x_{d-1}
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import torch

from . import checkpoint as ckpt_io
from . import seeding
from .checkpoint import CheckpointError, Stage
from .config import ConfigError, RunConfig, build_config, load_config
from .datasets import (
    DatasetError,
    LabeledDataset,
    Normalization,
    apply_normalize,
    fit_normalize,
    gaussian_mixture,
    load_csv,
    swiss_roll,
    train_val_split,
    write_csv,
)
from .likelihood import DivergenceMode, log_density, mi_proxy, write_mi_csv
from .metrics import straightness, write_metric_csv
from .ndmath import ConfigurationError, ContractError, DTYPE, NonFiniteError, ParamNet
from .odeint import Direction, IntegrationBlowup, SolverKind, TimeGrid, integrate, write_trajectory_csv
from .training import TrainingAborted, attach_head, evaluate, finetune, pretrain

log = logging.getLogger("revflow")


class UsageError(Exception):
    pass


# -- shared plumbing ---------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _config_from_args(args, ckpt: ckpt_io.Checkpoint | None = None) -> RunConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config, args.set)
    elif ckpt is not None:
        cfg = build_config(ckpt.config | {"experiment_id": ckpt.meta.get("experiment_id", "run"),
                                          "output_dir": ckpt.meta.get("output_dir", "runs")}, args.set)
    else:
        raise UsageError("--config is required")
    if ckpt is not None:
        differing = ckpt_io.diff_keys(ckpt.config, cfg.fingerprint_dict())
        if differing:
            log.warning("config differs from checkpoint in: %s", ", ".join(differing))
    return cfg


def _load_ckpt(path) -> ckpt_io.Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {p}")
    return ckpt_io.load(p)


def load_data(cfg: RunConfig) -> LabeledDataset:
    d = cfg.data
    if d.source == "csv":
        path = Path(d.csv)
        if not path.is_file():
            raise UsageError(f"data file not found: {path}")
        return load_csv(path, d.label_column)
    seed = seeding.derive_seed(cfg.seed, "data") % (2**31)
    if d.source == "swiss":
        return swiss_roll(d.n, d.noise, d.bins, seed)
    return gaussian_mixture(d.n, d.means, d.scale, seed)


def split_data(cfg: RunConfig, norm: Normalization | None = None):
    """Seeded train/val split; the normalization is fit on train only."""
    full = load_data(cfg)
    train, val = train_val_split(full, cfg.data.val_fraction, seeding.derive_seed(cfg.seed, "split") % (2**31))
    if norm is None:
        if cfg.data.normalize:
            train, norm = fit_normalize(train)
        else:
            norm = Normalization.identity(full.d)
            train = apply_normalize(train, norm)
    else:
        train = apply_normalize(train, norm)
    return train, apply_normalize(val, norm), norm


def _norm_tensors(norm: Normalization) -> dict[str, torch.Tensor]:
    return {"norm.mean": norm.mean, "norm.scale": norm.scale}


def _norm_from(ck: ckpt_io.Checkpoint) -> Normalization:
    return Normalization(ck.tensors["norm.mean"], ck.tensors["norm.scale"])


def _run_meta(cfg: RunConfig, **extra) -> dict:
    return {"experiment_id": cfg.experiment_id, "output_dir": cfg.output_dir, **extra}


# -- commands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    if args.kind == "swiss":
        if args.bins < 1:
            raise UsageError("--bins must be at least 1")
        ds = swiss_roll(args.n, args.noise, args.bins, args.seed)
        params = {"kind": "swiss", "n": args.n, "noise": args.noise, "bins": args.bins, "seed": args.seed}
    else:
        means = json.loads(args.means)
        ds = gaussian_mixture(args.n, means, args.scale, args.seed)
        params = {"kind": "gaussians", "n": args.n, "means": means, "scale": args.scale, "seed": args.seed}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, ds)
    meta = {**params, "rows": ds.n, "dim": ds.d, "class_count": ds.class_count, "sha256": _sha256(out)}
    out.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {ds.n} rows to {out} (sha256 {meta['sha256'][:12]})")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config_from_args(args)
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    start_epoch, adam, prior_losses, mi_rows = 0, None, [], []
    if args.resume:
        ck = _load_ckpt(args.resume)
        if ck.stage is not Stage.PRETRAINED:
            raise UsageError("can only resume from a pretraining checkpoint")
        train, val, norm = split_data(cfg, _norm_from(ck))
        net = ck.build_net()
        adam = ck.adam_state()
        start_epoch = int(ck.meta["epoch"])
        prior_losses = list(ck.meta.get("losses", []))
        mi_rows = [tuple(r) for r in ck.meta.get("mi_rows", [])]
    else:
        train, val, norm = split_data(cfg)
        net = ParamNet(cfg.net_spec(train.d), seed=seeding.derive_seed(cfg.seed, "init") % (2**31))
    mode = cfg.divergence_mode()
    lgrid = TimeGrid(cfg.likelihood.t_span, Direction.INFER)
    probes = 0 if mode.kind == "exact" else mode.probe_count

    def on_checkpoint(epoch, net_, adam_, losses):
        if args.mi_every and epoch % args.mi_every == 0:
            for split, ds in (("train", train), ("val", val)):
                if ds.n:
                    g = seeding.generator(cfg.seed, "probes", epoch)
                    value = mi_proxy(net_, ds.points[: args.mi_points], lgrid, cfg.likelihood.solver, mode, g)
                    mi_rows.append((epoch, split, value, probes))
        meta = _run_meta(cfg, epoch=epoch, losses=prior_losses + losses, mi_rows=mi_rows)
        ck = ckpt_io.make_checkpoint(net_, Stage.PRETRAINED, cfg.fingerprint_dict(), adam_, meta, _norm_tensors(norm))
        ckpt_io.save(run_dir / f"pretrain_e{epoch:05d}.prgc", ck)
        ckpt_io.save(run_dir / "pretrained.prgc", ck)

    result = pretrain(net, train.points, cfg.pretrain_config(), start_epoch, adam, on_checkpoint, keep_snapshots=False)
    if not result.losses:
        on_checkpoint(start_epoch, net, result.adam, [])
    losses = prior_losses + result.losses
    with (run_dir / "pretrain_loss.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "fm_loss"])
        for i, v in enumerate(losses, start=1):
            w.writerow([i, repr(v)])
    if mi_rows:
        write_mi_csv(run_dir / "mi_proxy.csv", mi_rows)
    last = f"{losses[-1]:.6f}" if losses else "n/a"
    print(f"pretrained {len(losses)} epochs; final fm_loss {last}; checkpoint {run_dir / 'pretrained.prgc'}")
    return 0


def cmd_finetune(args) -> int:
    if args.from_scratch:
        cfg = _config_from_args(args)
        train, val, norm = split_data(cfg)
        base = ParamNet(cfg.net_spec(train.d), seed=seeding.derive_seed(cfg.seed, "init") % (2**31))
    else:
        if not args.checkpoint:
            raise UsageError("finetune needs --checkpoint (or --from-scratch)")
        ck = _load_ckpt(args.checkpoint)
        if ck.stage is not Stage.PRETRAINED:
            raise UsageError(f"finetune expects a pretrained checkpoint, got stage {ck.stage.name.lower()}")
        cfg = _config_from_args(args, ck)
        train, val, norm = split_data(cfg, _norm_from(ck))
        base = ck.build_net()
    if train.labels is None:
        raise UsageError("fine-tuning needs labelled data")
    fcfg = cfg.finetune_config()
    if args.frozen:
        fcfg.freeze_backbone = True
    net = attach_head(base, train.class_count, tuple(cfg.net.head_hidden), seeding.derive_seed(cfg.seed, "head") % (2**31))
    result = finetune(net, train, fcfg, val if val.n else None)
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    meta = _run_meta(cfg, frozen=fcfg.freeze_backbone, from_scratch=bool(args.from_scratch),
                     final_accuracy=result.report.final_accuracy)
    ck_out = ckpt_io.make_checkpoint(net, Stage.FINETUNED, cfg.fingerprint_dict(), None, meta, _norm_tensors(norm))
    out = Path(args.out) if args.out else run_dir / "finetuned.prgc"
    ckpt_io.save(out, ck_out)
    result.report.to_csv(run_dir / "finetune_report.csv")
    with (run_dir / "finetune_timing.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "seconds"])
        for r in result.report.records:
            w.writerow([r.epoch, f"{r.seconds:.4f}"])
    print(f"fine-tuned {fcfg.epochs} epochs; final accuracy {result.report.final_accuracy:.4f}; checkpoint {out}")
    return 0


def _eval_grid(cfg: RunConfig, args) -> TimeGrid:
    grid = cfg.finetune_grid()
    if args.t_span is not None:
        grid = grid.refined(args.t_span)
    if args.cutoff_index is not None:
        grid = TimeGrid(grid.t_span, Direction.INFER, args.cutoff_index)
    return grid


def _split(train, val, which):
    if which == "train":
        return train
    if which == "val":
        return val if val.n else train
    return LabeledDataset(
        torch.cat([train.points, val.points]),
        None if train.labels is None else torch.cat([train.labels, val.labels]),
        train.class_count,
        train.normalization,
    )


def cmd_eval(args) -> int:
    ck = _load_ckpt(args.checkpoint)
    cfg = _config_from_args(args, ck)
    train, val, norm = split_data(cfg, _norm_from(ck))
    if ck.stage is Stage.PRETRAINED:
        if not args.frozen_head_train:
            raise UsageError("eval needs a finetuned checkpoint (or --frozen-head-train for a pretrained one)")
        fcfg = cfg.finetune_config()
        fcfg.freeze_backbone = True
        net = attach_head(ck.build_net(), train.class_count, tuple(cfg.net.head_hidden),
                          seeding.derive_seed(cfg.seed, "head") % (2**31))
        finetune(net, train, fcfg, val if val.n else None)
    else:
        net = ck.build_net()
    data = _split(train, val, args.split)
    solver = SolverKind(args.solver) if args.solver else cfg.finetune.solver
    grid = _eval_grid(cfg, args)
    res = evaluate(net, data, grid, solver)
    rows = [(cfg.experiment_id, "accuracy", res.accuracy), (cfg.experiment_id, "t_span", grid.t_span),
            (cfg.experiment_id, "cutoff_index", grid.cutoff_index)]
    for i in range(res.confusion.shape[0]):
        for j in range(res.confusion.shape[1]):
            rows.append((cfg.experiment_id, f"confusion_{i}_{j}", res.confusion[i, j]))
    out = Path(args.out) if args.out else cfg.run_dir / "eval.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metric_csv(out, rows)
    print(f"accuracy {res.accuracy:.4f} on {data.n} samples (t_span={grid.t_span}, cutoff={grid.cutoff_index})")
    return 0


def cmd_logprob(args) -> int:
    ck = _load_ckpt(args.checkpoint)
    cfg = _config_from_args(args, ck)
    norm = _norm_from(ck)
    if args.data:
        raw = load_csv(args.data, args.label_column)
        pts = norm.apply(raw.points)
    else:
        _, val, _ = split_data(cfg, norm)
        pts = val.points
    if args.limit:
        pts = pts[: args.limit]
    mode = cfg.divergence_mode()
    if args.divergence:
        mode = DivergenceMode(args.divergence, args.probes or 1, args.probe_law or "rademacher")
    t_span = args.t_span or cfg.likelihood.t_span
    solver = SolverKind(args.solver) if args.solver else cfg.likelihood.solver
    net = ck.build_net()
    res = log_density(net, pts, TimeGrid(t_span, Direction.INFER), solver, mode, seeding.generator(cfg.seed, "probes"))
    # density in data units: account for the standardization Jacobian
    logp = res.logp_x0 - torch.log(norm.scale).sum()
    out = Path(args.out) if args.out else cfg.run_dir / "logprob.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    d = pts.shape[1]
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "logp_x0", "delta_logp"] + [f"x1_{j}" for j in range(d)])
        for i in range(pts.shape[0]):
            w.writerow([i, repr(float(logp[i])), repr(float(res.delta_logp[i]))] + [repr(float(v)) for v in res.x1[i].tolist()])
    print(f"mean log p(x0) {float(logp.mean()):.6f} over {pts.shape[0]} samples")
    return 0


def cmd_straightness(args) -> int:
    ck = _load_ckpt(args.checkpoint)
    cfg = _config_from_args(args, ck)
    net = ck.build_net()
    g = seeding.generator(cfg.seed, "eval", args.n)
    x1 = torch.randn(args.n, net.data_dim, generator=g, dtype=DTYPE)
    rep = straightness(net, x1, TimeGrid(args.t_span, Direction.GENERATE), SolverKind(args.solver))
    out = Path(args.out) if args.out else cfg.run_dir / "straightness.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metric_csv(out, [(cfg.experiment_id, "straightness", rep.value), (cfg.experiment_id, "t_span", rep.t_span),
                           (cfg.experiment_id, "samples", rep.samples)])
    print(f"straightness {rep.value:.6f} (t_span={rep.t_span}, n={rep.samples})")
    return 0


def cmd_export_traj(args) -> int:
    ck = _load_ckpt(args.checkpoint)
    cfg = _config_from_args(args, ck)
    net = ck.build_net()
    direction = Direction(args.direction)
    if direction is Direction.INFER:
        _, val, _ = split_data(cfg, _norm_from(ck))
        x = val.points[: args.n]
    else:
        g = seeding.generator(cfg.seed, "eval", args.n)
        x = torch.randn(args.n, net.data_dim, generator=g, dtype=DTYPE)
    traj = integrate(SolverKind(args.solver), net, x, TimeGrid(args.t_span, direction), record=True)
    out = Path(args.out) if args.out else cfg.run_dir / "trajectory.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = write_trajectory_csv(out, traj)
    if args.svg:
        _plot_trajectories(traj, out.with_suffix(".svg"))
    print(f"wrote {rows} rows to {out}")
    return 0


def _plot_trajectories(traj, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    states = torch.stack(traj.states).numpy()
    fig, ax = plt.subplots(figsize=(5, 5))
    for i in range(states.shape[1]):
        ax.plot(states[:, i, 0], states[:, i, 1], lw=0.5, color="0.6")
    ax.scatter(states[0, :, 0], states[0, :, 1], s=3, label="start")
    ax.scatter(states[-1, :, 0], states[-1, :, 1], s=3, label="end")
    ax.legend(loc="upper right")
    ax.set_aspect("equal")
    # fixed metadata keeps the SVG byte-stable across runs
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="revflow", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=False):
        p.add_argument("--config", required=required, help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. --set finetune.beta=10")

    p = sub.add_parser("gen-data", help="write a toy dataset as CSV")
    p.add_argument("kind", choices=["swiss", "gaussians"])
    p.add_argument("--n", type=int, default=4096)
    p.add_argument("--bins", type=int, default=6)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--means", default="[[-2, 0], [2, 0]]", help="JSON list of component means")
    p.add_argument("--scale", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="data.csv")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="flow-matching pretraining")
    with_config(p)
    p.add_argument("--resume", help="continue from a pretraining checkpoint")
    p.add_argument("--mi-every", type=int, default=0, help="log the MI proxy at checkpoint epochs divisible by this")
    p.add_argument("--mi-points", type=int, default=512)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="joint fine-tuning of flow and classifier head")
    with_config(p)
    p.add_argument("--checkpoint")
    p.add_argument("--frozen", action="store_true", help="train the head only")
    p.add_argument("--from-scratch", action="store_true", help="skip pretraining (identity-initialised flow)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="classification accuracy and confusion matrix")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "val", "all"], default="val")
    p.add_argument("--t-span", type=int)
    p.add_argument("--cutoff-index", type=int)
    p.add_argument("--solver", choices=[s.value for s in SolverKind])
    p.add_argument("--frozen-head-train", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("logprob", help="per-sample log-density via the augmented ODE")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="CSV of points (data units); default: validation split")
    p.add_argument("--label-column")
    p.add_argument("--limit", type=int)
    p.add_argument("--t-span", type=int)
    p.add_argument("--solver", choices=[s.value for s in SolverKind])
    p.add_argument("--divergence", choices=["exact", "hutchinson"])
    p.add_argument("--probes", type=int)
    p.add_argument("--probe-law", choices=["rademacher", "gaussian"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_logprob)

    p = sub.add_parser("straightness", help="trajectory straightness of generated samples")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--t-span", type=int, default=100)
    p.add_argument("--solver", choices=[s.value for s in SolverKind], default="rk4")
    p.add_argument("--out")
    p.set_defaults(func=cmd_straightness)

    p = sub.add_parser("export-traj", help="dump ODE trajectories as CSV (optional SVG)")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--t-span", type=int, default=20)
    p.add_argument("--direction", choices=[d.value for d in Direction], default="infer")
    p.add_argument("--solver", choices=[s.value for s in SolverKind], default="rk4")
    p.add_argument("--svg", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_traj)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ConfigurationError) as exc:
        print(f"revflow {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, TrainingAborted, IntegrationBlowup, NonFiniteError, ContractError) as exc:
        print(f"revflow {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
