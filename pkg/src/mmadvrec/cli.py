"""Experiment pipeline: gen-data, train, defend, attack, diagnose, sweep,
bench, report.

Every command is a pure function of (config, input files, seed): all
randomness flows from the root ``seed`` split per component, and outputs are
byte-stable across reruns. Exit codes: 0 ok, 2 config error, 3 data error,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import attacks, data, metrics, mismatch, models, reports, training
from .config import (Config, ConfigError, RunManifest, load_config, seed_for)
from .data import DataError
from .training import DefenseConfig, NumericalError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


# ---------------------------------------------------------------------------
# shared plumbing

def _out_dir(cfg):
    path = cfg["data.out_dir"]
    os.makedirs(path, exist_ok=True)
    return path


def _dataset_paths(cfg):
    base = cfg["data.path"]
    if not base:
        raise DataError("data.path is not set; run gen-data first or point at a dataset")
    return (os.path.join(base, "interactions.tsv"),
            os.path.join(base, "features_v.mmfe"),
            os.path.join(base, "features_t.mmfe"))


def _load_dataset(cfg):
    inter, fv_path, ft_path = _dataset_paths(cfg)
    table = data.load_interactions(inter)
    fv = data.load_features(fv_path, "v", expected_items=table.num_items)
    ft = data.load_features(ft_path, "t", expected_items=table.num_items)
    return table, fv, ft


def _split(cfg, table):
    return data.split_leave_one_out(table, seed_for(cfg["seed"], "split"))


def _encoding(cfg, split, fv, ft):
    return models.DatasetEncoding(split, fv, ft, cfg["model.kind"])


def _init_params(cfg, table, fv, ft):
    return models.init_params(
        table.num_users, table.num_items, fv.dim, ft.dim,
        kind=cfg["model.kind"], phi=cfg["model.nonlinearity"],
        user_content=cfg["model.user_content"], id_dim=cfg["model.dim"],
        fuse_dim=cfg["model.fuse_dim"], seed=seed_for(cfg["seed"], "init"))


def _train_config(cfg, *, defend, seed_label):
    return DefenseConfig(
        mode=cfg["defense.mode"] if defend else "uat_mc",
        lambda_=cfg["defense.lambda"] if defend else 0.0,
        alpha=cfg["defense.alpha"] if defend else 0.0,
        beta=cfg["defense.beta"] if defend else cfg["train.beta"],
        eta=cfg["train.eta"],
        eps_d_pct=cfg["defense.eps_d_pct"],
        batch_size=cfg["train.batch_size"],
        max_epochs=cfg["defense.max_epochs"] if defend else cfg["train.max_epochs"],
        patience=cfg["train.patience"],
        eval_every=cfg["train.eval_every"],
        eval_k=cfg["eval.k_rank"],
        optimizer=cfg["train.optimizer"],
        reduction=cfg["train.reduction"],
        seed=seed_for(cfg["seed"], seed_label),
        wall_clock=cfg["report.wall_clock"])


def _attack_config(cfg):
    return attacks.AttackConfig(
        variant=cfg["attack.variant"], eps_pct=cfg["attack.eps_a_pct"],
        pgd_steps=cfg["attack.pgd_steps"], with_align=cfg["attack.with_align"],
        align_weight=cfg["attack.align_weight"], k=cfg["attack.k"])


def _write_train_log(path, log, extra_rows=None):
    rows = list(extra_rows or [])
    for r in log.rows:
        rows.append([r["epoch"], r["clean_loss"], r["adv_loss"], r["align_mean"],
                     r["val_recall10"], r["seconds"]])
    reports.write_csv(path, ["epoch", "clean_loss", "adv_loss", "align_mean",
                             "val_recall10", "seconds"], rows)


def _read_last_epoch(log_path):
    header, rows, _ = reports.read_csv(log_path)
    if not rows:
        return 0, []
    return int(rows[-1][0]), rows


def _manifest(cfg, command, inputs, outputs, out_dir, name):
    man = RunManifest.create(command, cfg, [p for p in inputs if os.path.exists(p)])
    man.outputs = sorted(outputs)
    man.write(os.path.join(out_dir, name))
    return man


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg, args):
    out = _out_dir(cfg)
    synth_cfg = data.SynthConfig(
        num_users=cfg["synth.users"], num_items=cfg["synth.items"],
        latent_dim=cfg["synth.latent_dim"], feat_dim_v=cfg["synth.feat_dim_v"],
        feat_dim_t=cfg["synth.feat_dim_t"],
        interactions_per_user=cfg["synth.interactions_per_user"],
        feature_noise=cfg["synth.feature_noise"],
        interaction_noise=cfg["synth.interaction_noise"],
        mixing_overlap=cfg["synth.mixing_overlap"],
        unpopular_count=cfg["synth.unpopular_count"], n_unpop=cfg["synth.n_unpop"])
    table, fv, ft = data.synth_generate(synth_cfg, seed_for(cfg["seed"], "synth"))
    inter = os.path.join(out, "interactions.tsv")
    fvp = os.path.join(out, "features_v.mmfe")
    ftp = os.path.join(out, "features_t.mmfe")
    statp = os.path.join(out, "stats.json")
    data.save_interactions(table, inter)
    data.write_features(fv, fvp)
    data.write_features(ft, ftp)
    stats = table.stats()
    with open(statp, "w", encoding="utf-8") as fh:
        json.dump({"num_users": stats.num_users, "num_items": stats.num_items,
                   "num_interactions": stats.num_interactions,
                   "sparsity_pct": stats.sparsity_pct}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _manifest(cfg, "gen-data", [], [inter, fvp, ftp, statp], out, "manifest_gen_data.json")
    print(f"wrote dataset to {out}: {stats.num_users} users, {stats.num_items} items, "
          f"{stats.num_interactions} interactions, sparsity {stats.sparsity_pct:.3f}%")
    return EXIT_OK


def cmd_train(cfg, args):
    out = _out_dir(cfg)
    table, fv, ft = _load_dataset(cfg)
    split = _split(cfg, table)
    enc = _encoding(cfg, split, fv, ft)
    ckpt = os.path.join(out, "pretrained.ckpt")
    log_path = os.path.join(out, "train_log.csv")
    start_epoch, old_rows = 1, []
    if args.resume and os.path.exists(ckpt) and os.path.exists(log_path):
        params = models.load_checkpoint(ckpt)
        last, old_rows = _read_last_epoch(log_path)
        start_epoch = last + 1
    else:
        params = _init_params(cfg, table, fv, ft)
    tcfg = _train_config(cfg, defend=False, seed_label=f"pretrain-{start_epoch}")
    best, log = training.pretrain(params, enc, fv, ft, tcfg, start_epoch=start_epoch)
    models.save_checkpoint(best, ckpt)
    _write_train_log(log_path, log, extra_rows=old_rows)
    _manifest(cfg, "train", list(_dataset_paths(cfg)), [ckpt, log_path], out,
              "manifest_train.json")
    recall, ndcg = metrics.recall_ndcg(best, enc, k=cfg["eval.k_rank"])
    print(f"pretrained {log.epochs} epochs; recall@{cfg['eval.k_rank']} {recall:.4f} "
          f"ndcg {ndcg:.4f}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_defend(cfg, args):
    out = _out_dir(cfg)
    table, fv, ft = _load_dataset(cfg)
    split = _split(cfg, table)
    enc = _encoding(cfg, split, fv, ft)
    source = args.checkpoint or os.path.join(out, "pretrained.ckpt")
    ckpt = os.path.join(out, "defended.ckpt")
    log_path = os.path.join(out, "defend_log.csv")
    start_epoch, old_rows = 1, []
    if args.resume and os.path.exists(ckpt) and os.path.exists(log_path):
        params = models.load_checkpoint(ckpt)
        last, old_rows = _read_last_epoch(log_path)
        start_epoch = last + 1
    else:
        params = models.load_checkpoint(source)
    dcfg = _train_config(cfg, defend=True, seed_label=f"defend-{start_epoch}")
    best, log = training.uat_mc_train(params, enc, fv, ft, dcfg, start_epoch=start_epoch)
    models.save_checkpoint(best, ckpt)
    _write_train_log(log_path, log, extra_rows=old_rows)
    _manifest(cfg, "defend", list(_dataset_paths(cfg)) + [source], [ckpt, log_path],
              out, "manifest_defend.json")
    recall, ndcg = metrics.recall_ndcg(best, enc, k=cfg["eval.k_rank"])
    print(f"defended ({dcfg.mode}, lambda={dcfg.lambda_}, alpha={dcfg.effective_alpha}) "
          f"{log.epochs} epochs; recall@{cfg['eval.k_rank']} {recall:.4f}; checkpoint {ckpt}")
    return EXIT_OK


def run_campaign(params, enc, fv, ft, targets, acfg, k_hit, cache=None):
    """Attack every target; returns per-item rows, trace rows and mean stats."""
    cache = cache if cache is not None else metrics.RankCache(params, enc)
    rows, trace_rows = [], []
    hits_before, hits_after = [], []
    for i in targets:
        i = int(i)
        hit_before = metrics.hit_at_k(params, enc, i, k_hit, cache=cache)
        pert, trace = attacks.run_attack(params, enc, fv, ft, i, acfg, cache=cache)
        hit_after = metrics.hit_at_k(params, enc, i, k_hit,
                                     delta=(pert.delta_v, pert.delta_t), cache=cache)
        rows.append([i, acfg.variant, acfg.with_align, acfg.eps_pct,
                     hit_before, hit_after, metrics.gain_hit(hit_before, hit_after)])
        for rec in trace.records:
            trace_rows.append([i, rec.iteration, rec.promotion_loss, rec.n_rec,
                               rec.grad_cosine])
        hits_before.append(hit_before)
        hits_after.append(hit_after)
    mean_before = float(np.mean(hits_before))
    mean_after = float(np.mean(hits_after))
    mean_gain = metrics.gain_hit(mean_before, mean_after)
    rows.append(["mean", acfg.variant, acfg.with_align, acfg.eps_pct,
                 mean_before, mean_after, mean_gain])
    return rows, trace_rows, (mean_before, mean_after, mean_gain)


def _select_targets(cfg, split, count=None):
    return metrics.select_targets(
        split, count if count is not None else cfg["attack.targets"],
        n_unpop=cfg["attack.popularity_threshold"],
        mode=cfg["attack.threshold_mode"], seed=seed_for(cfg["seed"], "targets"))


def cmd_attack(cfg, args):
    out = _out_dir(cfg)
    table, fv, ft = _load_dataset(cfg)
    split = _split(cfg, table)
    enc = _encoding(cfg, split, fv, ft)
    ckpt = args.checkpoint or os.path.join(out, "pretrained.ckpt")
    params = models.load_checkpoint(ckpt)
    targets = _select_targets(cfg, split)
    acfg = _attack_config(cfg)
    cache = metrics.RankCache(params, enc)
    rows, trace_rows, (mb, ma, gain) = run_campaign(
        params, enc, fv, ft, targets, acfg, cfg["eval.k_hit"], cache=cache)
    results_path = os.path.join(out, "attack_results.csv")
    trace_path = os.path.join(out, "attack_trace.csv")
    metrics_path = os.path.join(out, "metrics.csv")
    reports.write_csv(results_path,
                      ["target_item", "variant", "with_align", "eps_pct",
                       "hit_before", "hit_after", "gain_pct"], rows)
    reports.write_csv(trace_path,
                      ["target_item", "iteration", "promotion_loss", "n_rec",
                       "grad_cosine"], trace_rows)
    recall, ndcg = metrics.recall_ndcg(params, enc, k=cfg["eval.k_rank"])
    man = RunManifest.create("attack", cfg, list(_dataset_paths(cfg)) + [ckpt])
    reports.write_csv(metrics_path,
                      ["run_id", "defense", "attack", "eps_d", "eps_a", "lambda",
                       "alpha", "hit_before", "hit_after", "gain", "recall10",
                       "ndcg10"],
                      [[man.run_id, args.label, acfg.variant,
                        cfg["defense.eps_d_pct"], acfg.eps_pct,
                        cfg["defense.lambda"], cfg["defense.alpha"],
                        mb, ma, gain, recall, ndcg]])
    man.outputs = sorted([results_path, trace_path, metrics_path])
    man.write(os.path.join(out, "manifest_attack.json"))
    print(f"attacked {len(targets)} targets ({acfg.variant}"
          f"{'+align' if acfg.with_align else ''}): hit {mb:.4f}% -> {ma:.4f}% "
          f"(gain {gain:.2f}%)")
    return EXIT_OK


def cmd_diagnose(cfg, args):
    out = _out_dir(cfg)
    table, fv, ft = _load_dataset(cfg)
    split = _split(cfg, table)
    enc = _encoding(cfg, split, fv, ft)
    ckpt = args.checkpoint or os.path.join(out, "pretrained.ckpt")
    params = models.load_checkpoint(ckpt)
    targets = _select_targets(cfg, split, count=cfg["diagnose.targets"])
    k_users = cfg["diagnose.k_users"] or None
    result = mismatch.mismatch_survey(params, enc, targets, k_users=k_users,
                                      k=cfg["eval.k_hit"],
                                      bin_width=cfg["diagnose.bin_width"])
    items_path = os.path.join(out, "mismatch_items.csv")
    hist_path = os.path.join(out, "mismatch_hist.csv")
    users_path = os.path.join(out, "mismatch_users.csv")
    reports.write_csv(items_path, ["item", "jaccard", "intersection"],
                      [[r.item, r.jaccard, len(set(r.users_v.tolist())
                                               & set(r.users_t.tolist()))]
                       for r in result.reports])
    hist = result.histogram
    reports.write_csv(hist_path, ["bin_low", "bin_high", "count"],
                      [[hist.edges[j], hist.edges[j + 1], int(hist.counts[j])]
                       for j in range(hist.counts.size)],
                      comments=[f"mean={reports.fmt(hist.mean)}"])
    reports.write_csv(users_path, ["item", "user", "c_v", "c_t"],
                      [[r.item, c.user, c.c_v, c.c_t]
                       for r in result.reports for c in r.contributions])
    _manifest(cfg, "diagnose", list(_dataset_paths(cfg)) + [ckpt],
              [items_path, hist_path, users_path], out, "manifest_diagnose.json")
    print(f"surveyed {len(result.reports)} items (skipped {len(result.skipped)}); "
          f"mean jaccard {hist.mean:.4f}")
    return EXIT_OK


def cmd_sweep(cfg, args):
    out = _out_dir(cfg)
    table, fv, ft = _load_dataset(cfg)
    split = _split(cfg, table)
    enc = _encoding(cfg, split, fv, ft)
    source = args.checkpoint or os.path.join(out, "pretrained.ckpt")
    pretrained = models.load_checkpoint(source)
    targets = _select_targets(cfg, split)
    kind = cfg["sweep.kind"]
    sweep_path = os.path.join(out, "sweep.csv")

    def defend_with(**overrides):
        dcfg = _train_config(cfg, defend=True, seed_label="sweep-defend")
        for key, value in overrides.items():
            dcfg = training.replace_config(dcfg, key, value)
        best, _ = training.uat_mc_train(pretrained, enc, fv, ft, dcfg)
        return best

    def gain_for(params, eps_a):
        acfg = _attack_config(cfg)
        acfg.eps_pct = eps_a
        cache = metrics.RankCache(params, enc)
        _, _, (_, _, gain) = run_campaign(params, enc, fv, ft, targets, acfg,
                                          cfg["eval.k_hit"], cache=cache)
        return gain

    rows = []
    if kind == "eps":
        for eps_d in cfg.floats("sweep.eps_d"):
            defended = defend_with(eps_d_pct=eps_d)
            for eps_a in cfg.floats("sweep.eps_a"):
                rows.append([eps_d, eps_a, gain_for(defended, eps_a)])
        header = ["eps_d", "eps_a", "gain"]
    elif kind in ("lambda", "alpha"):
        values = cfg.floats("sweep.lambdas" if kind == "lambda" else "sweep.alphas")
        for value in values:
            defended = defend_with(**{("lambda_" if kind == "lambda" else "alpha"): value})
            gain = gain_for(defended, cfg["attack.eps_a_pct"])
            _, ndcg = metrics.recall_ndcg(defended, enc, k=cfg["eval.k_rank"])
            rows.append([value, ndcg, gain])
        header = [kind, "ndcg10", "gain"]
    else:
        raise ConfigError(f"unknown sweep.kind {kind!r}")
    reports.write_csv(sweep_path, header, rows)
    _manifest(cfg, "sweep", list(_dataset_paths(cfg)) + [source], [sweep_path],
              out, "manifest_sweep.json")
    print(f"sweep {kind}: {len(rows)} rows -> {sweep_path}")
    return EXIT_OK


def cmd_bench(cfg, args):
    out = _out_dir(cfg)
    table, fv, ft = _load_dataset(cfg)
    split = _split(cfg, table)
    enc = _encoding(cfg, split, fv, ft)
    params = _init_params(cfg, table, fv, ft)
    batch = cfg["bench.batch_size"]
    n = cfg["bench.batches"]
    modes = {
        "pretrain": dict(lambda_=0.0, alpha=0.0, adversarial=False),
        "uat": dict(lambda_=1.0, alpha=0.0, adversarial=True),
        "uat_mc": dict(lambda_=1.0, alpha=1.0, adversarial=True),
    }
    rows = []
    medians = {}
    for mode, spec in modes.items():
        dcfg = DefenseConfig(mode="uat_mc", lambda_=spec["lambda_"], alpha=spec["alpha"],
                             beta=cfg["defense.beta"], eta=cfg["train.eta"],
                             eps_d_pct=cfg["defense.eps_d_pct"], batch_size=batch,
                             seed=seed_for(cfg["seed"], "bench"), wall_clock=True)
        work = params.clone()
        sampler = data.TripleSampler(enc.table, seed=dcfg.seed)
        optimizer = training.make_optimizer(dcfg)
        times = []
        for b in range(n):
            triples = sampler.sample(batch)
            t0 = time.perf_counter()
            delta_batch = None
            if spec["adversarial"]:
                delta_batch, _ = training.max_phase(work, enc, triples, dcfg, fv, ft)
            training.min_phase(work, enc, triples, delta_batch, dcfg, optimizer)
            dt = time.perf_counter() - t0
            times.append(dt)
            rows.append([mode, b, dt])
        medians[mode] = float(np.median(times))
    ratio = medians["uat_mc"] / medians["uat"]
    bench_csv = os.path.join(out, "bench.csv")
    bench_json = os.path.join(out, "bench.json")
    reports.write_csv(bench_csv, ["mode", "batch", "seconds"], rows)
    with open(bench_json, "w", encoding="utf-8") as fh:
        json.dump({"id_dim": params.id_dim, "fuse_dim": params.fuse_dim,
                   "batch_size": batch, "batches": n,
                   "median_seconds": medians,
                   "uat_mc_over_uat": ratio}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"bench (d={params.id_dim}, batch={batch}): "
          + ", ".join(f"{m} {medians[m]*1e3:.2f}ms" for m in modes)
          + f"; uat_mc/uat = {ratio:.2f}x")
    return EXIT_OK


def cmd_report(cfg, args):
    out = _out_dir(cfg)
    combined = []
    header = None
    for run_dir in args.runs or [out]:
        path = os.path.join(run_dir, "metrics.csv")
        if not os.path.exists(path):
            continue
        h, rows, _ = reports.read_csv(path)
        header = header or h
        combined.extend(rows)
    if header is None:
        raise DataError("no metrics.csv found in the given run directories")
    summary_path = os.path.join(out, "summary.csv")
    reports.write_csv(summary_path, header, combined)
    for row in combined:
        print(",".join(row))
    print(f"summary -> {summary_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def build_parser():
    parser = argparse.ArgumentParser(prog="mmadvrec",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, needs_checkpoint=False, needs_resume=False):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to a dotted-key config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key")
        if needs_checkpoint:
            p.add_argument("--checkpoint", default=None)
        if needs_resume:
            p.add_argument("--resume", action="store_true")
        if name == "attack":
            p.add_argument("--label", default="none",
                           help="defense label recorded in metrics.csv")
        if name == "report":
            p.add_argument("--runs", nargs="*", default=None)
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data)
    add("train", cmd_train, needs_resume=True)
    add("defend", cmd_defend, needs_checkpoint=True, needs_resume=True)
    add("attack", cmd_attack, needs_checkpoint=True)
    add("diagnose", cmd_diagnose, needs_checkpoint=True)
    add("sweep", cmd_sweep, needs_checkpoint=True)
    add("bench", cmd_bench)
    add("report", cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config, args.set)
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
