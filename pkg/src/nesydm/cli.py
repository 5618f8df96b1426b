"""Command-line driver: ``nesydm {train,eval,verify,sample}``."""

import argparse
import csv
import dataclasses
import logging
import math
import os
import sys
import time

import numpy as np

from nesydm.config import ConfigError, RunConfig, preset
from nesydm.diffusion import get_schedule, make_rng
from nesydm.inference import (
    OUTPUT_MODES,
    VoteStrategy,
    marginals_from_samples,
    predict_concepts,
    sample_concepts,
    vote_outputs,
)
from nesydm.metrics import concept_accuracy, ece, exact_match_accuracy, path_cost_accuracy
from nesydm.model import AdamState, Architecture, adam_step, init_params, load_checkpoint, save_checkpoint
from nesydm.programs import GridSpec, ShortestPathProgram
from nesydm.tasks import load_mnist, make_addition_task, make_path_task, make_xor_task, program_for
from nesydm.training import GradientInfo, LossWeights, TrainHyper, estimate_gradient, nelbo_value_estimate

log = logging.getLogger("nesydm")

TRAIN_COLUMNS = ("epoch", "nelbo_estimate", "label_acc", "concept_acc", "ece", "mu_zero_rate")
EVAL_COLUMNS = ("output_mode", "concept_mode", "L", "label_acc", "concept_acc", "ece")


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def build_program(cfg):
    if cfg.task == "path":
        return ShortestPathProgram(GridSpec(cfg.side, connectivity=cfg.connectivity))
    return program_for(cfg.task, n_digits=cfg.n_digits)


def build_data(cfg, rng):
    """``(train, test)`` datasets; deterministic given ``rng``."""
    r_train, r_test = rng.spawn(2)
    if cfg.task == "xor":
        return make_xor_task(cfg.n_train, cfg.noise, r_train), make_xor_task(cfg.n_test, cfg.noise, r_test)
    if cfg.task == "path":
        grid = GridSpec(cfg.side, connectivity=cfg.connectivity)
        return (
            make_path_task(grid, cfg.n_train, cfg.noise, r_train, cfg.patch),
            make_path_task(grid, cfg.n_test, cfg.noise, r_test, cfg.patch),
        )
    train = make_addition_task(*load_mnist("train"), cfg.n_digits, r_train)
    test = make_addition_task(*load_mnist("test"), cfg.n_digits, r_test)
    if cfg.n_train:
        train = train.subset(np.arange(min(cfg.n_train, len(train))))
    if cfg.n_test:
        test = test.subset(np.arange(min(cfg.n_test, len(test))))
    return train, test


def build_arch(cfg, prog, x_dim):
    return Architecture(
        x_dim=x_dim,
        concept_dim=prog.concept_dim,
        vocab=prog.concept_vocab,
        hidden=cfg.hidden,
        layout=cfg.layout,
        context=cfg.context,
        condition=cfg.condition,
    )


def hyper_of(cfg):
    return TrainHyper(S=cfg.S, K=cfg.K, beta=cfg.beta, entropy_mode=cfg.entropy_mode, M=cfg.M, U=cfg.U, T=cfg.T)


def weights_of(cfg):
    return LossWeights(gamma_w=cfg.gamma_w, gamma_H=cfg.gamma_H, gamma_y=cfg.gamma_y)


def learning_rate(cfg, step, total):
    """Step-size for optimiser step ``step`` of ``total``."""
    if cfg.lr_schedule == "constant" or total <= 1:
        return cfg.lr
    frac = step / (total - 1)
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + math.cos(math.pi * frac))


def _label_acc(cfg, prog, pred, data):
    if cfg.task == "path":
        return path_cost_accuracy(prog.grid, pred, data.w_true)
    return exact_match_accuracy(pred, data.y0)


def evaluate(params, cfg, prog, data, rng, strategies=None, chunk=500):
    """Metrics per strategy; concept samples are shared across strategies."""
    sched = get_schedule()
    strategies = strategies or [VoteStrategy(cfg.output_mode, cfg.concept_mode, cfg.L)]
    L = max(s.L for s in strategies)
    r_vote, r_ece = rng.spawn(2)
    preds = {s: [] for s in strategies}
    concepts = {s: [] for s in strategies}
    for start in range(0, len(data), chunk):
        xb = data.x[start : start + chunk]
        samples = sample_concepts(params, xb, L, sched, r_vote, cfg.T)
        for s in strategies:
            sub = samples[: s.L]
            preds[s].append(vote_outputs(sub, prog, s.output_mode))
            concepts[s].append(predict_concepts(sub, s.concept_mode, prog.concept_vocab))
    n_ece = len(data) if cfg.ece_examples == 0 else min(cfg.ece_examples, len(data))
    marg = []
    for start in range(0, n_ece, max(1, chunk // 10)):
        stop = min(n_ece, start + max(1, chunk // 10))
        samples = sample_concepts(params, data.x[start:stop], cfg.ece_L, sched, r_ece, cfg.T)
        marg.append(marginals_from_samples(samples, prog.concept_vocab))
    marg = np.concatenate(marg) if marg else np.zeros((0, prog.concept_dim, prog.concept_vocab))
    ece_val = ece(marg, data.w_true[:n_ece], cfg.ece_bins) if n_ece else float("nan")
    rows = []
    for s in strategies:
        pred = np.concatenate(preds[s])
        conc = np.concatenate(concepts[s])
        rows.append(
            {
                "output_mode": s.output_mode,
                "concept_mode": s.concept_mode,
                "L": s.L,
                "label_acc": _label_acc(cfg, prog, pred, data),
                "concept_acc": concept_accuracy(conc, data.w_true),
                "ece": ece_val,
            }
        )
    return rows


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


class CsvLog:
    """Append-only CSV; every row is flushed so the file is valid after any
    interruption at a row boundary."""

    def __init__(self, path, columns):
        self.columns = columns
        self.fh = open(path, "w", newline="")
        self.writer = csv.writer(self.fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        self.writer.writerow(columns)
        self.fh.flush()

    def write(self, row):
        self.writer.writerow([_fmt(row[c]) for c in self.columns])
        self.fh.flush()
        os.fsync(self.fh.fileno())

    def close(self):
        self.fh.close()


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(cfg, out_dir, progress=None):
    """Train and write ``model.ckpt``, ``metrics.csv`` and ``config.ini``.

    Returns ``(params, last_row)``.
    """
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.ini"), "w") as fh:
        fh.write(cfg.to_ini())
    root = make_rng(cfg.seed)
    r_data, r_init, r_train, r_eval = root.spawn(4)
    train, test = build_data(cfg, r_data)
    prog = build_program(cfg)
    arch = build_arch(cfg, prog, train.x.shape[1])
    params = init_params(arch, r_init, cfg.init_scale)
    state = AdamState.for_params(params, lr=cfg.lr)
    sched = get_schedule()
    hyper, weights = hyper_of(cfg), weights_of(cfg)
    ckpt = os.path.join(out_dir, "model.ckpt")
    csv_log = CsvLog(os.path.join(out_dir, "metrics.csv"), TRAIN_COLUMNS)
    best = (-1.0, None)
    row = None
    per_epoch = -(-len(train) // cfg.batch_size)
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            info = GradientInfo()
            t0 = time.perf_counter()
            order = r_train.permutation(len(train))
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                grad = estimate_gradient(params, train.x[idx], train.y0[idx], prog, weights, hyper, sched, r_train, info)
                state.lr = learning_rate(cfg, step, per_epoch * cfg.epochs)
                adam_step(params, state, grad)
                step += 1
            n_nelbo = min(200, len(test))
            nelbo, _ = nelbo_value_estimate(params, test.x[:n_nelbo], test.y0[:n_nelbo], prog, hyper, sched, r_eval)
            metrics = evaluate(params, cfg, prog, test, r_eval)[0]
            row = {
                "epoch": epoch,
                "nelbo_estimate": nelbo,
                "label_acc": metrics["label_acc"],
                "concept_acc": metrics["concept_acc"],
                "ece": metrics["ece"],
                "mu_zero_rate": info.mu_zero_rate,
            }
            csv_log.write(row)
            log.info("epoch %d  %.1fs  %s", epoch, time.perf_counter() - t0, row)
            if progress:
                progress(row)
            if cfg.early_stopping and row["label_acc"] > best[0]:
                best = (row["label_acc"], params.copy())
    finally:
        csv_log.close()
    if cfg.early_stopping and best[1] is not None:
        params = best[1]
    save_checkpoint(ckpt, params)
    return params, row


def cmd_eval(cfg, checkpoint, out_path):
    root = make_rng(cfg.seed)
    r_data, _, _, r_eval = root.spawn(4)
    _, test = build_data(cfg, r_data)
    prog = build_program(cfg)
    arch = build_arch(cfg, prog, test.x.shape[1])
    params = load_checkpoint(checkpoint, arch)
    if cfg.sweep:
        strategies = [VoteStrategy(m, cfg.concept_mode, cfg.L) for m in OUTPUT_MODES]
    else:
        strategies = [VoteStrategy(cfg.output_mode, cfg.concept_mode, cfg.L)]
    rows = evaluate(params, cfg, prog, test, r_eval, strategies)
    out = CsvLog(out_path, EVAL_COLUMNS)
    for r in rows:
        out.write(r)
    out.close()
    return rows


def cmd_sample(cfg, checkpoint, out_path, n_inputs=10):
    root = make_rng(cfg.seed)
    r_data, _, _, r_eval = root.spawn(4)
    _, test = build_data(cfg, r_data)
    prog = build_program(cfg)
    params = load_checkpoint(checkpoint, build_arch(cfg, prog, test.x.shape[1]))
    n = min(n_inputs, len(test))
    samples = sample_concepts(params, test.x[:n], cfg.L, get_schedule(), r_eval, cfg.T)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["example", "draw", "concepts", "output"])
        for b in range(n):
            for j in range(samples.shape[0]):
                c = samples[j, b]
                w.writerow([b, j, " ".join(map(str, c)), " ".join(map(str, prog.eval(c)))])
    return samples


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _load_config(args):
    if args.config:
        cfg = RunConfig.load(args.config)
    else:
        cfg = preset(args.task or "xor")
    if args.task and args.config and args.task != cfg.task:
        raise ConfigError(f"--task {args.task} conflicts with config task {cfg.task}")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def main(argv=None):
    parser = argparse.ArgumentParser(prog="nesydm", description="Neurosymbolic diffusion models")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "sample"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--task", choices=("xor", "addition", "path"), help="use the task preset")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory (train) or CSV path")
        if name != "train":
            p.add_argument("--checkpoint", required=True)
    v = sub.add_parser("verify")
    v.add_argument("--level", choices=("fast", "full"), default="fast")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", help="write the report here as CSV")
    sub.add_parser("config", help="print the documented configuration keys")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)

    if args.command == "config":
        from nesydm.config import dump_docs

        print(dump_docs(), end="")
        return 0
    if args.command == "verify":
        from nesydm.verify import format_report, run_verify

        results = run_verify(args.level, seed=args.seed)
        print(format_report(results))
        if args.out:
            from nesydm.verify import write_report

            write_report(results, args.out)
        return 0 if all(r.passed for r in results) else 1
    try:
        cfg = _load_config(args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.command == "train":
        cmd_train(cfg, args.out)
    elif args.command == "eval":
        for row in cmd_eval(cfg, args.checkpoint, args.out):
            print(row)
    else:
        cmd_sample(cfg, args.checkpoint, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
