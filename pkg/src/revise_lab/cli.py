"""Operator surface: seeded, manifest-logged experiment subcommands.

Config resolution is defaults < config file (flat key=value lines) < flags.
Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import text as textmod
from .manifest import RunManifest, sha256_file
from .metrics import filtered_report, predictions_from_traces
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .revise import ReviseConfig, run_traces, save_heatmaps, save_traces, truncate_trace
from .scenegen import DatasetConfig, describe_scene, generate_dataset, load_dataset, save_dataset
from .selftrain import (
    SelfTrainConfig,
    answer_conditioned_explanations,
    candidates_from_traces,
    draw_pseudo,
    evaluate_single_shot,
    harvest,
    save_pseudo_samples,
    selftrain_finetune,
)
from .train import TrainConfig, finetune, pretrain_lm

DEFAULT_CONFIG = {
    "seed": 0,
    "threads": 0,  # 0 -> REVISE_LAB_THREADS env or 1
    "data.train": 2000,
    "data.val": 600,
    "data.test": 500,
    "data.grid": 4,
    "data.image_size": 32,
    "data.sigma": 10.0,
    "data.mix_attribute": 0.4,
    "data.mix_spatial": 0.4,
    "data.mix_existence": 0.2,
    "model.k_queries": 8,
    "model.d_model": 64,
    "model.patch": 8,
    "model.heads": 4,
    "model.enc_layers": 2,
    "model.qf_layers": 2,
    "model.dec_layers": 2,
    "model.ffn_mult": 4,
    "model.max_gen": 24,
    "model.beams": 1,
    "model.max_positions": 96,
    "pretrain.lr": 3e-3,
    "pretrain.epochs": 8,
    "pretrain.batch_size": 16,
    "finetune.lr": 1.5e-3,
    "finetune.epochs": 16,
    "finetune.batch_size": 16,
    "finetune.fraction": 1.0,
    "finetune.feedback_fraction": 0.5,
    "finetune.corrupt_prob": 0.5,
    "revise.max_steps": 5,
    "revise.mode": "explicit",
    "selftrain.k": 32,
    "selftrain.lr": 1e-6,
    "selftrain.epochs": 20,
    "selftrain.batch_size": 8,
    "selftrain.harvest_split": "val",
    "pipeline.seeds": 5,
}


def load_config_file(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key=value, got {line!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            out[key] = val
    return out


def resolve_config(args) -> dict:
    cfg = dict(DEFAULT_CONFIG)
    file_vals = load_config_file(args.config) if getattr(args, "config", None) else {}
    for key, val in file_vals.items():
        if key not in cfg:
            raise ValueError(f"unknown config key {key!r}")
        ref = DEFAULT_CONFIG[key]
        cfg[key] = type(ref)(val) if not isinstance(ref, bool) else val.lower() in ("1", "true", "yes")
    flag_map = {
        "seed": "seed",
        "fraction": "finetune.fraction",
        "max_steps": "revise.max_steps",
        "mode": "revise.mode",
        "k": "selftrain.k",
        "beams": "model.beams",
        "threads": "threads",
        "sigma": "data.sigma",
        "train_count": "data.train",
        "val_count": "data.val",
        "test_count": "data.test",
        "lr": None,  # stage-dependent, handled per command
        "epochs": None,
    }
    for attr, key in flag_map.items():
        if key is None:
            continue
        val = getattr(args, attr, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _threads(cfg) -> int:
    if cfg["threads"]:
        return int(cfg["threads"])
    return int(os.environ.get("REVISE_LAB_THREADS", "1"))


def _dataset_config(cfg, seed=None) -> DatasetConfig:
    return DatasetConfig(
        seed=cfg["seed"] if seed is None else seed,
        counts={"train": cfg["data.train"], "val": cfg["data.val"], "test": cfg["data.test"]},
        grid=cfg["data.grid"],
        image_size=cfg["data.image_size"],
        mix=(cfg["data.mix_attribute"], cfg["data.mix_spatial"], cfg["data.mix_existence"]),
        noise_sigma=cfg["data.sigma"],
    )


def _model_config(cfg, vocab_size) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        k_queries=cfg["model.k_queries"],
        d_model=cfg["model.d_model"],
        patch=cfg["model.patch"],
        image_size=cfg["data.image_size"],
        enc_layers=cfg["model.enc_layers"],
        qf_layers=cfg["model.qf_layers"],
        dec_layers=cfg["model.dec_layers"],
        heads=cfg["model.heads"],
        ffn_mult=cfg["model.ffn_mult"],
        max_gen=cfg["model.max_gen"],
        beams=cfg["model.beams"],
        max_positions=cfg["model.max_positions"],
    )


def _train_corpus(samples):
    strings = []
    for s in samples:
        if s.split != "train":
            continue
        strings.append(textmod.format_prompt(s.question) + " " + textmod.format_target(s.answer, s.explanation))
        strings.append(describe_scene(s.scene))
    return strings


def build_vocab_from_samples(samples):
    return textmod.build_vocab(_train_corpus(samples))


def _split(samples, name):
    return [s for s in samples if s.split == name]


def _report_slim(report_dict: dict) -> dict:
    """Strip non-deterministic fields before a report lands in a summary."""
    out = dict(report_dict)
    out.pop("wall_time", None)
    return out


def _stage_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence(entropy=master, spawn_key=(index,)).generate_state(1)[0])


# -- subcommand bodies ---------------------------------------------------------

def cmd_generate_data(args, cfg, out_dir) -> int:
    man = RunManifest("generate-data", cfg["seed"], cfg)
    dcfg = _dataset_config(cfg)
    samples = generate_dataset(dcfg)
    path = os.path.join(out_dir, "dataset.jsonl")
    save_dataset(samples, path)
    man.add_output(path)
    man.write(os.path.join(out_dir, "manifest_generate-data.json"))
    print(f"wrote {len(samples)} samples to {path}")
    return 0


def _load_model(args):
    params, mcfg = load_checkpoint(args.checkpoint)
    vocab = textmod.Vocab.load(args.vocab or os.path.join(os.path.dirname(args.checkpoint), "vocab.txt"))
    if len(vocab) != mcfg.vocab_size:
        raise ValueError(f"vocab size {len(vocab)} != checkpoint vocab_size {mcfg.vocab_size}")
    return params, mcfg, vocab


def cmd_pretrain(args, cfg, out_dir) -> int:
    man = RunManifest("pretrain", cfg["seed"], cfg)
    man.add_input(args.data)
    samples = load_dataset(args.data)
    vocab = build_vocab_from_samples(samples)
    mcfg = _model_config(cfg, len(vocab))
    tcfg = TrainConfig(
        stage="pretrain",
        lr=args.lr if args.lr else cfg["pretrain.lr"],
        epochs=args.epochs if args.epochs else cfg["pretrain.epochs"],
        batch_size=cfg["pretrain.batch_size"],
        seed=cfg["seed"],
    )
    params, report = pretrain_lm(_split(samples, "train"), vocab, tcfg, mcfg)
    ckpt = os.path.join(out_dir, "pretrained.rvse")
    vpath = os.path.join(out_dir, "vocab.txt")
    rpath = os.path.join(out_dir, "report_pretrain.json")
    save_checkpoint(params, mcfg, ckpt)
    vocab.save(vpath)
    with open(rpath, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
    for p in (ckpt, vpath, rpath):
        man.add_output(p)
    man.write(os.path.join(out_dir, "manifest_pretrain.json"))
    print(f"pretrain losses: {['%.3f' % x for x in report.epoch_losses]}")
    return 0


def cmd_finetune(args, cfg, out_dir) -> int:
    man = RunManifest("finetune", cfg["seed"], cfg)
    man.add_input(args.data)
    man.add_input(args.checkpoint)
    samples = load_dataset(args.data)
    params, mcfg, vocab = _load_model(args)
    tcfg = TrainConfig(
        stage="finetune",
        lr=args.lr if args.lr else cfg["finetune.lr"],
        epochs=args.epochs if args.epochs else cfg["finetune.epochs"],
        batch_size=cfg["finetune.batch_size"],
        seed=cfg["seed"],
        fraction=cfg["finetune.fraction"],
        feedback_fraction=cfg["finetune.feedback_fraction"],
        corrupt_prob=cfg["finetune.corrupt_prob"],
        mode=cfg["revise.mode"],
    )
    params, report = finetune(params, _split(samples, "train"), vocab, tcfg, mcfg, _split(samples, "val"))
    ckpt = os.path.join(out_dir, "finetuned.rvse")
    vpath = os.path.join(out_dir, "vocab.txt")
    rpath = os.path.join(out_dir, "report_finetune.json")
    save_checkpoint(params, mcfg, ckpt)
    vocab.save(vpath)
    with open(rpath, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
    for p in (ckpt, vpath, rpath):
        man.add_output(p)
    man.write(os.path.join(out_dir, "manifest_finetune.json"))
    print(f"finetune losses: {['%.3f' % x for x in report.epoch_losses]} val={report.final_val_loss}")
    return 0


def cmd_revise(args, cfg, out_dir) -> int:
    man = RunManifest("revise", cfg["seed"], cfg)
    man.add_input(args.data)
    man.add_input(args.checkpoint)
    samples = load_dataset(args.data)
    params, mcfg, vocab = _load_model(args)
    rcfg = ReviseConfig(max_steps=cfg["revise.max_steps"], mode=cfg["revise.mode"], beams=cfg["model.beams"], cam=args.cam)
    eval_samples = _split(samples, args.split)
    traces = run_traces(params, mcfg, vocab, eval_samples, rcfg, threads=_threads(cfg))
    tpath = os.path.join(out_dir, "traces.jsonl")
    save_traces(traces, tpath)
    man.add_output(tpath)
    preds = predictions_from_traces(traces, eval_samples)
    report = filtered_report(preds, traces, max_steps=rcfg.max_steps)
    rpath = os.path.join(out_dir, "report_revise.json")
    with open(rpath, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
    man.add_output(rpath)
    by_id = {s.id: s for s in eval_samples}
    side = mcfg.image_size // mcfg.patch
    for t in traces[: args.heatmaps]:
        for p in save_heatmaps(t, side, out_dir, by_id[t.sample_id].image, mcfg.patch):
            man.add_output(p)
    man.write(os.path.join(out_dir, "manifest_revise.json"))
    print(
        f"revise on {len(traces)} samples: accuracy {report.accuracy:.3f}, "
        f"flips +{report.flips['gained']}/-{report.flips['lost']}, "
        f"histogram {report.convergence_histogram} (+{report.nonconverged} unconverged)"
    )
    return 0


def cmd_self_train(args, cfg, out_dir) -> int:
    man = RunManifest("self-train", cfg["seed"], cfg)
    man.add_input(args.data)
    man.add_input(args.checkpoint)
    samples = load_dataset(args.data)
    params, mcfg, vocab = _load_model(args)
    rcfg = ReviseConfig(max_steps=cfg["revise.max_steps"], mode=cfg["revise.mode"], beams=cfg["model.beams"])
    stcfg = SelfTrainConfig(
        k=cfg["selftrain.k"],
        lr=args.lr if args.lr else cfg["selftrain.lr"],
        epochs=args.epochs if args.epochs else cfg["selftrain.epochs"],
        batch_size=cfg["selftrain.batch_size"],
        seed=cfg["seed"],
    )
    pool = _split(samples, cfg["selftrain.harvest_split"])
    pseudo = harvest(params, mcfg, vocab, pool, rcfg, stcfg, threads=_threads(cfg))
    ppath = os.path.join(out_dir, "pseudo_samples.jsonl")
    save_pseudo_samples(pseudo, ppath)
    man.add_output(ppath)
    if not pseudo:
        print("no wrong-then-corrected candidates; nothing to train on")
        man.write(os.path.join(out_dir, "manifest_self-train.json"))
        return 0
    by_id = {s.id: s for s in pool}
    trained = selftrain_finetune(params, pseudo, by_id, vocab, stcfg, mcfg)
    ckpt = os.path.join(out_dir, "selftrained.rvse")
    save_checkpoint(trained, mcfg, ckpt)
    man.add_output(ckpt)
    report = evaluate_single_shot(trained, mcfg, vocab, _split(samples, "test"), beams=cfg["model.beams"], threads=_threads(cfg))
    rpath = os.path.join(out_dir, "report_selftrain.json")
    with open(rpath, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
    man.add_output(rpath)
    man.write(os.path.join(out_dir, "manifest_self-train.json"))
    print(f"self-trained on {len(pseudo)} pseudo-samples; test accuracy {report.accuracy:.3f}")
    return 0


def cmd_compare_selftrain(args, cfg, out_dir) -> int:
    from .selftrain import compare_strategies

    man = RunManifest("compare-selftrain", cfg["seed"], cfg)
    man.add_input(args.data)
    man.add_input(args.checkpoint)
    samples = load_dataset(args.data)
    params, mcfg, vocab = _load_model(args)
    rcfg = ReviseConfig(max_steps=cfg["revise.max_steps"], mode=cfg["revise.mode"], beams=cfg["model.beams"])
    stcfg = SelfTrainConfig(
        k=cfg["selftrain.k"], lr=cfg["selftrain.lr"], epochs=cfg["selftrain.epochs"],
        batch_size=cfg["selftrain.batch_size"], seed=cfg["seed"],
    )
    result = compare_strategies(
        params, mcfg, vocab,
        _split(samples, cfg["selftrain.harvest_split"]),
        _split(samples, "test"),
        rcfg, stcfg, beams=cfg["model.beams"], threads=_threads(cfg),
    )
    rpath = os.path.join(out_dir, "comparison.json")
    with open(rpath, "w", encoding="utf-8") as fh:
        json.dump(result, fh, sort_keys=True, indent=1)
    man.add_output(rpath)
    man.write(os.path.join(out_dir, "manifest_compare-selftrain.json"))
    for row in result["rows"]:
        b1 = row["report"]["filtered"]["bleu1"]
        print(f"{row['strategy']}: filtered B1 = {b1}")
    return 0


def cmd_eval(args, cfg, out_dir) -> int:
    man = RunManifest("eval", cfg["seed"], cfg)
    man.add_input(args.data)
    man.add_input(args.checkpoint)
    samples = load_dataset(args.data)
    params, mcfg, vocab = _load_model(args)
    eval_samples = _split(samples, args.split)
    if args.with_revise:
        rcfg = ReviseConfig(max_steps=cfg["revise.max_steps"], mode=cfg["revise.mode"], beams=cfg["model.beams"])
        traces = run_traces(params, mcfg, vocab, eval_samples, rcfg, threads=_threads(cfg))
        report = filtered_report(predictions_from_traces(traces, eval_samples), traces, rcfg.max_steps)
    else:
        report = evaluate_single_shot(params, mcfg, vocab, eval_samples, beams=cfg["model.beams"], threads=_threads(cfg))
    rpath = os.path.join(out_dir, "report_eval.json")
    with open(rpath, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
    man.add_output(rpath)
    man.write(os.path.join(out_dir, "manifest_eval.json"))
    print(json.dumps(report.to_dict(), sort_keys=True, indent=1))
    return 0


def cmd_ablate(args, cfg, out_dir) -> int:
    man = RunManifest("ablate", cfg["seed"], cfg)
    man.add_input(args.data)
    man.add_input(args.checkpoint)
    samples = load_dataset(args.data)
    params, mcfg, vocab = _load_model(args)
    eval_samples = _split(samples, args.split)
    threads = _threads(cfg)
    out: dict = {"axis": args.axis}
    if args.axis in ("language-mode", "all"):
        paired = {}
        for mode in ("explicit", "implicit"):
            rcfg = ReviseConfig(max_steps=cfg["revise.max_steps"], mode=mode, beams=cfg["model.beams"])
            traces = run_traces(params, mcfg, vocab, eval_samples, rcfg, threads=threads)
            report = filtered_report(predictions_from_traces(traces, eval_samples), traces, rcfg.max_steps)
            paired[mode] = {"report": report.to_dict(), "traces": [tr.sample_id for tr in traces]}
            paired[mode]["answers"] = {tr.sample_id: [s.answer for s in tr.steps] for tr in traces}
        differing = sum(
            1 for sid in paired["explicit"]["answers"]
            if paired["explicit"]["answers"][sid] != paired["implicit"]["answers"][sid]
        )
        out["language_mode"] = {
            "explicit": paired["explicit"]["report"],
            "implicit": paired["implicit"]["report"],
            "differing_traces": differing,
            "total": len(eval_samples),
        }
    if args.axis in ("step-limit", "all"):
        rcfg = ReviseConfig(max_steps=5, mode=cfg["revise.mode"], beams=cfg["model.beams"])
        traces5 = run_traces(params, mcfg, vocab, eval_samples, rcfg, threads=threads)
        by_id = {s.id: s for s in eval_samples}
        rows = {}
        for limit in (2, 3, 5):
            tr = [truncate_trace(t, limit, by_id[t.sample_id].answer) for t in traces5]
            report = filtered_report(predictions_from_traces(tr, eval_samples), tr, limit)
            rows[str(limit)] = report.to_dict()
        out["step_limit"] = rows
    rpath = os.path.join(out_dir, "ablation.json")
    with open(rpath, "w", encoding="utf-8") as fh:
        json.dump(out, fh, sort_keys=True, indent=1)
    man.add_output(rpath)
    man.write(os.path.join(out_dir, "manifest_ablate.json"))
    print(f"wrote {rpath}")
    return 0


def experiment_pipeline(cfg: dict, out_dir: str) -> dict:
    """generate-data -> pretrain -> finetune -> revise -> self-train -> eval,
    seeded per stage from the master seed, manifests chained by hash."""
    from .metrics import Prediction

    os.makedirs(out_dir, exist_ok=True)
    master = cfg["seed"]
    threads = _threads(cfg)
    chain: str | None = None
    summary: dict = {"master_seed": master, "stages": {}, "seeds": []}

    # stage 0: dataset
    man = RunManifest("pipeline:generate-data", master, cfg, prev_manifest=chain)
    dcfg = _dataset_config(cfg, seed=_stage_seed(master, 0))
    samples = generate_dataset(dcfg)
    data_path = os.path.join(out_dir, "dataset.jsonl")
    save_dataset(samples, data_path)
    man.add_output(data_path)
    chain = man.write(os.path.join(out_dir, "manifest_00_data.json"))
    summary["stages"]["dataset"] = {"path": "dataset.jsonl", "sha256": sha256_file(data_path), "count": len(samples)}

    vocab = build_vocab_from_samples(samples)
    vpath = os.path.join(out_dir, "vocab.txt")
    vocab.save(vpath)
    mcfg = _model_config(cfg, len(vocab))
    train_s, val_s, test_s = _split(samples, "train"), _split(samples, "val"), _split(samples, "test")

    n_seeds = int(cfg["pipeline.seeds"])
    table2, table3, table4, table5, table6, fig3, fig5 = [], [], [], [], [], [], []
    for idx in range(n_seeds):
        seed = _stage_seed(master, 100 + idx)
        summary["seeds"].append(seed)

        # pretrain + finetune
        man = RunManifest(f"pipeline:train[{idx}]", seed, cfg, prev_manifest=chain)
        man.add_input(data_path)
        tcfg_pre = TrainConfig(
            stage="pretrain", lr=cfg["pretrain.lr"], epochs=cfg["pretrain.epochs"],
            batch_size=cfg["pretrain.batch_size"], seed=seed,
        )
        params, pre_report = pretrain_lm(train_s, vocab, tcfg_pre, mcfg)
        tcfg_ft = TrainConfig(
            stage="finetune", lr=cfg["finetune.lr"], epochs=cfg["finetune.epochs"],
            batch_size=cfg["finetune.batch_size"], seed=seed, fraction=cfg["finetune.fraction"],
            feedback_fraction=cfg["finetune.feedback_fraction"], corrupt_prob=cfg["finetune.corrupt_prob"],
            mode=cfg["revise.mode"],
        )
        params, ft_report = finetune(params, train_s, vocab, tcfg_ft, mcfg, val_samples=None)
        ckpt = os.path.join(out_dir, f"finetuned_seed{idx}.rvse")
        save_checkpoint(params, mcfg, ckpt)
        man.add_output(ckpt)
        chain = man.write(os.path.join(out_dir, f"manifest_10_train_{idx}.json"))

        # recursive inference on test, explicit + implicit
        man = RunManifest(f"pipeline:revise[{idx}]", seed, cfg, prev_manifest=chain)
        man.add_input(ckpt)
        rcfg = ReviseConfig(max_steps=cfg["revise.max_steps"], mode="explicit", beams=cfg["model.beams"])
        traces = run_traces(params, mcfg, vocab, test_s, rcfg, threads=threads)
        tpath = os.path.join(out_dir, f"traces_seed{idx}.jsonl")
        save_traces(traces, tpath)
        man.add_output(tpath)
        chain = man.write(os.path.join(out_dir, f"manifest_20_revise_{idx}.json"))

        revise_preds = predictions_from_traces(traces, test_s)
        step0_preds = predictions_from_traces(traces, test_s, step=0)
        revise_report = filtered_report(revise_preds, traces, rcfg.max_steps)
        step0_report = filtered_report(step0_preds)

        # Table 2 analogue: the initially-wrong subset
        wrong_ids = {p.sample_id for p in step0_preds if not p.answer_correct}
        wrong_samples = [s for s in test_s if s.id in wrong_ids]
        if wrong_ids:
            tr_w = [t for t in traces if t.sample_id in wrong_ids]
            w_revise = filtered_report([p for p in revise_preds if p.sample_id in wrong_ids], tr_w, rcfg.max_steps)
            w_step0 = filtered_report([p for p in step0_preds if p.sample_id in wrong_ids])
            sub = {
                "with_revise": _report_slim(w_revise.to_dict()),
                "without_revise": _report_slim(w_step0.to_dict()),
                "subset_size": len(wrong_ids),
            }
        else:
            sub = {"with_revise": None, "without_revise": None, "subset_size": 0}
        table2.append({
            "seed": seed,
            "test_accuracy_step0": step0_report.accuracy,
            "test_accuracy_revise": revise_report.accuracy,
            "flips": revise_report.flips,
            "initially_wrong": sub,
        })
        fig3.append({
            "seed": seed,
            "histogram": revise_report.convergence_histogram,
            "nonconverged": revise_report.nonconverged,
            "total": len(traces),
        })
        fig5.append({"seed": seed, "failure_rates": revise_report.failure_rates})

        # Table 5 analogue: implicit mode
        rcfg_i = ReviseConfig(max_steps=cfg["revise.max_steps"], mode="implicit", beams=cfg["model.beams"])
        traces_i = run_traces(params, mcfg, vocab, test_s, rcfg_i, threads=threads)
        report_i = filtered_report(predictions_from_traces(traces_i, test_s), traces_i, rcfg_i.max_steps)
        by_id_e = {t.sample_id: [s.answer for s in t.steps] for t in traces}
        by_id_i = {t.sample_id: [s.answer for s in t.steps] for t in traces_i}
        differing = sum(1 for sid in by_id_e if by_id_e[sid] != by_id_i[sid])
        table5.append({
            "seed": seed,
            "explicit": {"filtered_bleu1": revise_report.filtered["bleu1"], "accuracy": revise_report.accuracy},
            "implicit": {"filtered_bleu1": report_i.filtered["bleu1"], "accuracy": report_i.accuracy},
            "differing_traces": differing,
            "total": len(test_s),
        })

        # Table 6 analogue: step limits via trace truncation
        by_id_s = {s.id: s for s in test_s}
        row6 = {"seed": seed}
        for limit in (2, 3, 5):
            tr = [truncate_trace(t, limit, by_id_s[t.sample_id].answer) for t in traces]
            rep = filtered_report(predictions_from_traces(tr, test_s), tr, limit)
            row6[f"steps_{limit}"] = {"filtered_bleu1": rep.filtered["bleu1"], "accuracy": rep.accuracy}
        table6.append(row6)

        # self-training: harvest pool, k in {8,16,32}, paired Eq.8/Eq.9 at k=32
        man = RunManifest(f"pipeline:selftrain[{idx}]", seed, cfg, prev_manifest=chain)
        man.add_input(ckpt)
        pool = val_s if cfg["selftrain.harvest_split"] == "val" else train_s
        pool_traces = run_traces(params, mcfg, vocab, pool, rcfg, threads=threads)
        candidates = candidates_from_traces(pool_traces, pool)
        by_id_pool = {s.id: s for s in pool}
        control_report = evaluate_single_shot(params, mcfg, vocab, test_s, beams=cfg["model.beams"], threads=threads)
        rows3 = [{
            "strategy": "control", "seed": seed, "k_used": 0,
            "qformer_changed": False, "vision_identical": True, "lm_identical": True,
            "report": _report_slim(control_report.to_dict()),
        }]
        k_rows = {}
        pseudo32 = draw_pseudo(candidates, 32 if cfg["selftrain.k"] >= 32 else cfg["selftrain.k"], seed)
        for k in (8, 16, 32):
            stc = SelfTrainConfig(k=k, lr=cfg["selftrain.lr"], epochs=cfg["selftrain.epochs"],
                                  batch_size=cfg["selftrain.batch_size"], seed=seed)
            pseudo = pseudo32 if k == 32 else draw_pseudo(candidates, k, seed)
            if not pseudo:
                k_rows[str(k)] = None
                continue
            trained = selftrain_finetune(params, pseudo, by_id_pool, vocab, stc, mcfg)
            rep = evaluate_single_shot(trained, mcfg, vocab, test_s, beams=cfg["model.beams"], threads=threads)
            k_rows[str(k)] = {
                "k_used": len(pseudo),
                "filtered_bleu1": rep.filtered["bleu1"],
                "accuracy": rep.accuracy,
            }
            if k == 32:
                rows3.append({
                    "strategy": "revise", "seed": seed, "k_used": len(pseudo),
                    "qformer_changed": trained.partition_hash("qformer") != params.partition_hash("qformer"),
                    "vision_identical": trained.partition_hash("vision_encoder") == params.partition_hash("vision_encoder"),
                    "lm_identical": trained.partition_hash("lm") == params.partition_hash("lm"),
                    "report": _report_slim(rep.to_dict()),
                })
        # Eq. 9 baseline on the same ids as the k=32 draw
        if pseudo32:
            paired_samples = [by_id_pool[p.sample_id] for p in pseudo32]
            cond = answer_conditioned_explanations(params, mcfg, vocab, paired_samples, beams=cfg["model.beams"])
            stc = SelfTrainConfig(k=32, lr=cfg["selftrain.lr"], epochs=cfg["selftrain.epochs"],
                                  batch_size=cfg["selftrain.batch_size"], seed=seed)
            trained_c = selftrain_finetune(params, cond, by_id_pool, vocab, stc, mcfg)
            rep_c = evaluate_single_shot(trained_c, mcfg, vocab, test_s, beams=cfg["model.beams"], threads=threads)
            rows3.append({
                "strategy": "answer_conditioned", "seed": seed, "k_used": len(cond),
                "qformer_changed": trained_c.partition_hash("qformer") != params.partition_hash("qformer"),
                "vision_identical": trained_c.partition_hash("vision_encoder") == params.partition_hash("vision_encoder"),
                "lm_identical": trained_c.partition_hash("lm") == params.partition_hash("lm"),
                "report": _report_slim(rep_c.to_dict()),
            })
            ppath = os.path.join(out_dir, f"pseudo_seed{idx}.jsonl")
            save_pseudo_samples(pseudo32 + cond, ppath)
            man.add_output(ppath)
        table3.append({"seed": seed, "rows": rows3, "candidates": len(candidates)})
        table4.append({"seed": seed, "k_rows": k_rows})
        chain = man.write(os.path.join(out_dir, f"manifest_30_selftrain_{idx}.json"))

    summary["table2_revise_vs_step0"] = table2
    summary["table3_selftrain_comparison"] = table3
    summary["table4_fewshot_k"] = table4
    summary["table5_language_mode"] = table5
    summary["table6_step_limits"] = table6
    summary["fig3_convergence"] = fig3
    summary["fig5_failures"] = fig5
    spath = os.path.join(out_dir, "summary.json")
    with open(spath, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    man = RunManifest("pipeline:summary", master, cfg, prev_manifest=chain)
    man.add_output(spath)
    man.write(os.path.join(out_dir, "manifest_99_summary.json"))
    return summary


def cmd_pipeline(args, cfg, out_dir) -> int:
    summary = experiment_pipeline(cfg, out_dir)
    acc = [row["test_accuracy_revise"] for row in summary["table2_revise_vs_step0"]]
    print(f"pipeline complete; per-seed revise accuracy: {['%.3f' % a for a in acc]}")
    print(f"summary: {os.path.join(out_dir, 'summary.json')}")
    return 0


# -- argument plumbing -----------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 (not argparse's default 2), print usage
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def build_parser() -> _Parser:
    parser = _Parser(prog="revise-lab", description="Recursive visual-explanation experiments")
    sub = parser.add_subparsers(dest="command")

    def common(p, data=False, checkpoint=False):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default="runs/out", help="output directory")
        p.add_argument("--threads", type=int)
        p.add_argument("--print-config", action="store_true", help="print resolved config and exit")
        if data:
            p.add_argument("--data", required=True, help="dataset JSONL path")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="model checkpoint (.rvse)")
            p.add_argument("--vocab", help="vocab file (default: vocab.txt beside the checkpoint)")

    p = sub.add_parser("generate-data", help="emit the synthetic dataset")
    common(p)
    p.add_argument("--train-count", type=int, dest="train_count")
    p.add_argument("--val-count", type=int, dest="val_count")
    p.add_argument("--test-count", type=int, dest="test_count")
    p.add_argument("--sigma", type=float)

    p = sub.add_parser("pretrain", help="text-only decoder pretraining")
    common(p, data=True)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("finetune", help="vision+qformer finetuning on the frozen LM")
    common(p, data=True, checkpoint=True)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--fraction", type=float)
    p.add_argument("--mode", choices=["explicit", "implicit"])

    p = sub.add_parser("revise", help="recursive inference with traces + heatmaps")
    common(p, data=True, checkpoint=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--mode", choices=["explicit", "implicit"])
    p.add_argument("--beams", type=int)
    p.add_argument("--cam", default="weights", choices=["weights", "grad"])
    p.add_argument("--heatmaps", type=int, default=0, help="dump heatmaps for the first N traces")

    p = sub.add_parser("self-train", help="harvest pseudo-labels and finetune the qformer")
    common(p, data=True, checkpoint=True)
    p.add_argument("--k", type=int, choices=[8, 16, 32])
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("compare-selftrain", help="control vs Eq.8 vs Eq.9 pseudo-labels")
    common(p, data=True, checkpoint=True)
    p.add_argument("--k", type=int, choices=[8, 16, 32])

    p = sub.add_parser("eval", help="filtered/unfiltered metric report")
    common(p, data=True, checkpoint=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--with-revise", action="store_true", dest="with_revise")
    p.add_argument("--beams", type=int)

    p = sub.add_parser("ablate", help="language-mode and step-limit sweeps")
    common(p, data=True, checkpoint=True)
    p.add_argument("--axis", default="all", choices=["language-mode", "step-limit", "all"])
    p.add_argument("--split", default="test", choices=["train", "val", "test"])

    p = sub.add_parser("pipeline", help="full seeded experiment pipeline")
    common(p)
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--mode", choices=["explicit", "implicit"])
    p.add_argument("--k", type=int, choices=[8, 16, 32])
    p.add_argument("--beams", type=int)
    p.add_argument("--fraction", type=float)
    p.add_argument("--seeds", type=int, help="number of training seeds")
    p.add_argument("--train-count", type=int, dest="train_count")
    p.add_argument("--val-count", type=int, dest="val_count")
    p.add_argument("--test-count", type=int, dest="test_count")
    p.add_argument("--sigma", type=float)

    return parser


COMMANDS = {
    "generate-data": cmd_generate_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "revise": cmd_revise,
    "self-train": cmd_self_train,
    "compare-selftrain": cmd_compare_selftrain,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "pipeline": cmd_pipeline,
}


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    try:
        cfg = resolve_config(args)
        if getattr(args, "seeds", None):
            cfg["pipeline.seeds"] = args.seeds
    except (ValueError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    if getattr(args, "print_config", False):
        print(json.dumps(cfg, sort_keys=True, indent=1))
        return 0
    out_dir = args.out
    try:
        os.makedirs(out_dir, exist_ok=True)
        return COMMANDS[args.command](args, cfg, out_dir)
    except (ValueError, FileNotFoundError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except Exception as exc:  # runtime failure
        sys.stderr.write(f"runtime failure: {type(exc).__name__}: {exc}\n")
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
