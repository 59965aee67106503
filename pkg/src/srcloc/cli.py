"""Command-line experiment driver.

Every subcommand reads an INI config (see ``srcloc.config``), writes its
artifacts into an output directory together with a frozen copy of the
resolved config, and exits 0 on success, 1 on a runtime failure and 2 on a
usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .denoiser import TorchGraph
from .diffusion import SamplingError, make_schedule
from .evaluation import MetricReport, calibrate_threshold, cc_analysis, decide, predict_probabilities, score_all
from .graph import GraphError, derive_operators, save_edge_list
from .plotting import plot_ablation, plot_cc_histogram, plot_f1_distribution, plot_history
from .prior import ConvergenceError, lpsi_predict
from .propagation import Dataset, PropagationError, generate_dataset
from .train import (
    CheckpointError,
    TrainingError,
    few_shot_subset,
    load_model,
    prepare,
    save_model,
    train,
)

log = logging.getLogger("srcloc")

SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


def split_indices(count: int, seed: int) -> dict[str, np.ndarray]:
    """6:1:1 train/val/test split of ``range(count)`` by a seed-fixed shuffle."""
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5917])).permutation(count)
    n_val = count // 8
    n_test = count // 8
    n_train = count - n_val - n_test
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }


class Context:
    """Graph, operators, schedule and data splits resolved from one config."""

    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.graph = cfg.graph.build(cfg.base)
        self.ops = derive_operators(self.graph)
        self.tg = TorchGraph(self.ops)
        d = cfg.diffusion
        self.sched = make_schedule(d.T, d.beta_start, d.beta_end)

    @property
    def data_dir(self) -> Path:
        return self.cfg.resolve(self.cfg.data.dir) if self.cfg.data.dir else self.out

    def split(self, name: str) -> Dataset:
        path = self.data_dir / f"{name}.tsv"
        if not path.exists():
            raise UsageError(f"missing dataset split {path} (run gen-data first)")
        ds = Dataset.read(path, self.graph.node_count)
        if ds.header.get("node_count", self.graph.node_count) != self.graph.node_count:
            raise UsageError(f"{path} was generated on a {ds.header['node_count']}-node graph, "
                             f"config graph has {self.graph.node_count}")
        return ds

    def prepared(self, name: str, prior: str | None = None):
        kind = prior or self.cfg.prior.kind
        return prepare(self.split(name), self.graph, self.ops, kind, self.cfg.prior.alpha)


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    log.info("wrote %s", path)
    return path


def _freeze(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.ini", cfg.to_ini())


def _meta(ctx: Context, prior: str | None = None, **extra) -> dict:
    cfg = ctx.cfg
    return dict(prior=prior or cfg.prior.kind, seeds=dataclasses.asdict(cfg.seeds), **extra)


def _require(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"--checkpoint is required for {what}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"checkpoint not found: {p}")
    return p


def _predictions(ctx: Context, model, split: str, prior: str):
    """Binarized predictions on ``split`` under the [eval] rule.

    The calibrated rule picks its threshold on the validation split and
    applies it unchanged to ``split``.
    """
    cfg = ctx.cfg
    bound = model.bind(ctx.tg)
    probs = lambda d: predict_probabilities(bound, d.x_est, d.y, ctx.sched, cfg.eval.n_samples, cfg.seeds.eval,
                                            dtype=model.dtype)
    rule, tau = cfg.eval.rule, cfg.eval.tau
    if rule == "calibrated":
        val = ctx.prepared("val", prior)
        tau, val_f1 = calibrate_threshold(probs(val), val.x0)
        rule = "threshold"
        log.info("calibrated threshold %.2f (validation F1 %.4f)", tau, val_f1)
    data = ctx.prepared(split, prior)
    return data, decide(probs(data), data.x0, rule, tau)


def _evaluate(ctx: Context, model, split: str, prior: str):
    data, preds = _predictions(ctx, model, split, prior)
    return data, score_all(preds, data.x0, data.ids)


def lpsi_report(ctx: Context, split: str = "test") -> MetricReport:
    ds = ctx.split(split)
    preds = [lpsi_predict(s.y, ctx.graph, ctx.ops, ctx.cfg.prior.alpha) for s in ds.samples]
    return score_all(preds, [s.x_star for s in ds.samples], [s.id for s in ds.samples])


def summary_csv(rows: list[tuple[str, MetricReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "f1", "recall", "precision", "tp", "fp", "fn", "samples"])
    for name, r in rows:
        w.writerow([name, f"{r.f1:.6f}", f"{r.recall:.6f}", f"{r.precision:.6f}", r.tp, r.fp, r.fn, len(r.rows)])
    return buf.getvalue()


# subcommands -----------------------------------------------------------------


def cmd_gen_data(ctx: Context, args) -> None:
    cfg = ctx.cfg
    out = ctx.data_dir
    out.mkdir(parents=True, exist_ok=True)
    save_edge_list(ctx.graph, out / "graph.txt")
    ds = generate_dataset(ctx.graph, cfg.mixture(), cfg.data.count, cfg.seeds.data, graph_ref="graph.txt")
    for name, idx in split_indices(len(ds), cfg.seeds.data).items():
        part = ds.subset(idx)
        part.header = dict(ds.header, split=name, count=len(idx))
        part.write(out / f"{name}.tsv")
        log.info("%s: %d samples", name, len(idx))


def _train_cmd(ctx: Context, args, name: str) -> None:
    cfg = ctx.cfg
    train_set, val_set = ctx.prepared("train"), ctx.prepared("val")
    if args.fraction is not None:
        idx = few_shot_subset(len(train_set), args.fraction, cfg.seeds.subset)
        train_set = train_set.subset(idx)
    model, run = train(train_set, val_set, ctx.tg, ctx.sched, cfg.train_config(),
                       denoiser_config=cfg.denoiser, init_seed=cfg.seeds.init)
    save_model(model, ctx.sched, cfg.prior.alpha, ctx.out / f"{name}.ckpt", **_meta(ctx, best_epoch=run.best_epoch))
    _write(ctx.out / f"{name}_history.csv", run.history_csv())
    plot_history(run.history, ctx.out / f"{name}_history.png")
    print(f"{name}: best epoch {run.best_epoch}, validation F1 {max(run.best_f1, 0.0):.4f}")


def cmd_train(ctx, args):
    _train_cmd(ctx, args, "model")


def cmd_pretrain(ctx, args):
    _train_cmd(ctx, args, "pretrained")


def cmd_finetune(ctx: Context, args) -> None:
    cfg = ctx.cfg
    model, _, meta = load_model(_require(args.checkpoint, "finetune"))
    prior = meta.get("prior", cfg.prior.kind)
    train_set, val_set = ctx.prepared("train", prior), ctx.prepared("val", prior)
    fraction = cfg.finetune.fraction if args.fraction is None else args.fraction
    subset = few_shot_subset(len(train_set), fraction, cfg.seeds.subset)
    ids = train_set.ids[subset]
    log.info("finetune subset (%d of %d, fraction %g, seed %d): %s", len(ids), len(train_set), fraction,
             cfg.seeds.subset, ",".join(map(str, ids)))
    _write(ctx.out / "finetune_subset.csv", "sample_id\n" + "".join(f"{i}\n" for i in ids))
    model, run = train(train_set.subset(subset), val_set, ctx.tg, ctx.sched, cfg.finetune_config(), model=model)
    save_model(model, ctx.sched, cfg.prior.alpha, ctx.out / "finetuned.ckpt",
               **_meta(ctx, prior, best_epoch=run.best_epoch, fraction=fraction, subset=[int(i) for i in ids]))
    _write(ctx.out / "finetune_history.csv", run.history_csv())
    plot_history(run.history, ctx.out / "finetune_history.png")
    print(f"finetune: {len(ids)} samples, best epoch {run.best_epoch}")


def cmd_eval(ctx: Context, args, label: str = "eval") -> None:
    model, _, meta = load_model(_require(args.checkpoint, label))
    data, report = _evaluate(ctx, model, "test", meta.get("prior", ctx.cfg.prior.kind))
    _write(ctx.out / f"{label}_metrics.csv", report.to_csv())
    rows = [("sidsl", report)]
    if label == "eval":
        rows.append(("lpsi", lpsi_report(ctx)))
    _write(ctx.out / f"{label}_summary.csv", summary_csv(rows))
    plot_f1_distribution([c.f1 for _, c in report.rows], ctx.out / f"{label}_f1.png")
    for name, r in rows:
        print(f"{name}: F1 {r.f1:.4f} recall {r.recall:.4f} precision {r.precision:.4f}")


def cmd_zero_shot(ctx, args):
    cmd_eval(ctx, args, "zero_shot")


ABLATIONS = (
    ("full", "lpsi", False),
    ("w/o SBD", "centrality", False),
    ("w/o GNN-LP", "lpsi", True),
)


def ablation_table(results: list[tuple[str, MetricReport]]) -> tuple[str, list[dict]]:
    """Scores per variant and their relative change against the first (full) row, in percent."""
    base = results[0][1]
    rel = lambda v, b: 0.0 if v == b else (float("nan") if b == 0 else 100.0 * (v - b) / b)
    rows = []
    for name, r in results:
        rows.append({
            "variant": name, "f1": r.f1, "recall": r.recall, "precision": r.precision,
            "f1_change": rel(r.f1, base.f1), "recall_change": rel(r.recall, base.recall),
            "precision_change": rel(r.precision, base.precision),
        })
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = list(rows[0])
    w.writerow(keys)
    for row in rows:
        w.writerow([row["variant"]] + [f"{row[k]:.6f}" for k in keys[1:]])
    return buf.getvalue(), rows


def run_ablation(ctx: Context, fraction: float | None):
    cfg = ctx.cfg
    results = []
    for name, prior, ablate in ABLATIONS:
        train_set, val_set = ctx.prepared("train", prior), ctx.prepared("val", prior)
        if fraction is not None:
            train_set = train_set.subset(few_shot_subset(len(train_set), fraction, cfg.seeds.subset))
        dcfg = dataclasses.replace(cfg.denoiser, ablate_gnnlp=ablate)
        model, _ = train(train_set, val_set, ctx.tg, ctx.sched, cfg.train_config(), denoiser_config=dcfg,
                         init_seed=cfg.seeds.init)
        _, report = _evaluate(ctx, model, "test", prior)
        results.append((name, report))
        log.info("%s: F1 %.4f recall %.4f precision %.4f", name, report.f1, report.recall, report.precision)
    return results


def cmd_ablate(ctx: Context, args) -> None:
    text, rows = ablation_table(run_ablation(ctx, args.fraction))
    _write(ctx.out / "ablation.csv", text)
    plot_ablation(rows, ctx.out / "ablation.png")
    sys.stdout.write(text)


def cmd_analyze_cc(ctx: Context, args) -> None:
    model, _, meta = load_model(_require(args.checkpoint, "analyze-cc"))
    data, preds = _predictions(ctx, model, "test", meta.get("prior", ctx.cfg.prior.kind))
    cc = cc_analysis(preds, data.x0, data.y, ctx.graph)
    _write(ctx.out / "cc_histogram.csv", cc.histogram_csv())
    _write(ctx.out / "cc_summary.csv",
           "set,mean,std,count\n"
           f"predicted,{cc.pred_mean:.6f},{cc.pred_std:.6f},{len(cc.pred_values)}\n"
           f"true,{cc.true_mean:.6f},{cc.true_std:.6f},{len(cc.true_values)}\n")
    plot_cc_histogram(cc, ctx.out / "cc_histogram.png")
    print(f"closeness: predicted {cc.pred_mean:.4f} +- {cc.pred_std:.4f}, true {cc.true_mean:.4f} +- {cc.true_std:.4f}")


COMMANDS = {
    "gen-data": (cmd_gen_data, "simulate cascades and write 6:1:1 train/val/test splits"),
    "train": (cmd_train, "train the denoiser from scratch"),
    "pretrain": (cmd_pretrain, "train on a synthetic cascade mixture"),
    "finetune": (cmd_finetune, "adapt a checkpoint on a fraction of the training split"),
    "zero-shot": (cmd_zero_shot, "evaluate a pretrained checkpoint without adaptation"),
    "eval": (cmd_eval, "score a checkpoint and the LPSI baseline on the test split"),
    "ablate": (cmd_ablate, "compare full, w/o SBD and w/o GNN-LP variants"),
    "analyze-cc": (cmd_analyze_cc, "closeness centrality of predicted vs. true sources"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srcloc", description="Diffusion-based source localization experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment INI file")
        p.add_argument("--out", help="output directory (overrides [output] dir)")
        p.add_argument("--seed-override", type=int, help="use this value for every seed")
        p.add_argument("--checkpoint", help="model checkpoint to load")
        p.add_argument("--fraction", type=float, help="fraction of the training split to use")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.fraction is not None and not 0 < args.fraction <= 1:
            raise UsageError("--fraction must be in (0, 1]")
        cfg = load_config(args.config)
        if args.seed_override is not None:
            cfg.seeds = cfg.seeds.override(args.seed_override)
        if args.out:
            cfg.output = str(Path(args.out).resolve())
        out = cfg.resolve(cfg.output)
        _freeze(cfg, out)
        COMMANDS[args.command][0](Context(cfg, out), args)
    except (UsageError, ConfigError, GraphError) as exc:
        print(f"srcloc {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, SamplingError, CheckpointError, PropagationError, ConvergenceError,
            FloatingPointError, OSError) as exc:
        print(f"srcloc {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
