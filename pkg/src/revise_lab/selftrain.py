"""Few-shot self-training from recursive-correction pseudo-labels.

Harvest keeps exactly the samples the model got wrong single-shot but
corrected through the recursive loop; their final explanations become
training targets for a qformer-only finetune. The baseline strategy
generates explanations by forcing the gold answer prefix, on the same
sample ids, so the two pseudo-label sources are directly comparable.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import text as textmod
from .metrics import filtered_report, predictions_from_traces
from .model import ModelConfig, ModelParams, encode_image, lm_generate, qformer_forward, set_freezing
from .revise import ReviseConfig, run_traces
from .text import normalize
from .train import TrainConfig, TrainItem, _run_epochs, encode_sample

log = logging.getLogger(__name__)


@dataclass
class SelfTrainConfig:
    k: int = 32
    lr: float = 1e-6
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")


@dataclass
class PseudoSample:
    sample_id: int
    answer: str  # gold answer
    explanation: str
    source: str  # "revise" | "answer_conditioned"
    provenance_step: int | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.sample_id,
            "answer": self.answer,
            "explanation": self.explanation,
            "source": self.source,
            "provenance_step": self.provenance_step,
        }


def save_pseudo_samples(pseudo, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pseudo:
            fh.write(json.dumps(p.to_dict(), sort_keys=True) + "\n")


def _correction_step(trace, gold: str) -> int:
    """First step from which the answer stays equal to the gold answer."""
    gold_n = normalize(gold)
    step = len(trace.steps) - 1
    for i in range(len(trace.steps) - 1, -1, -1):
        if normalize(trace.steps[i].answer) == gold_n:
            step = i
        else:
            break
    return step


def candidates_from_traces(traces, samples) -> list[PseudoSample]:
    """All wrong-then-corrected pseudo-samples a trace set yields."""
    by_id = {s.id: s for s in samples}
    candidates = []
    for t in traces:
        s = by_id[t.sample_id]
        gold = normalize(s.answer)
        first_right = normalize(t.steps[0].answer) == gold
        final_right = normalize(t.steps[-1].answer) == gold
        if first_right or not final_right or not t.final_explanation:
            continue
        candidates.append(
            PseudoSample(
                sample_id=s.id,
                answer=s.answer,
                explanation=t.final_explanation,
                source="revise",
                provenance_step=_correction_step(t, s.answer),
            )
        )
    candidates.sort(key=lambda p: p.sample_id)
    return candidates


def draw_pseudo(candidates, k: int, seed: int) -> list[PseudoSample]:
    """Seeded uniform k-subset, output in ascending sample-id order.

    A shortfall (fewer than k candidates) returns everything with a warning
    rather than failing.
    """
    if len(candidates) <= k:
        if len(candidates) < k:
            log.warning(
                "harvest shortfall: only %d wrong-then-corrected candidates for k=%d",
                len(candidates), k,
            )
        return list(candidates)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(candidates))[:k]
    return sorted((candidates[i] for i in order), key=lambda p: p.sample_id)


def harvest(
    params: ModelParams,
    cfg: ModelConfig,
    vocab,
    samples,
    rcfg: ReviseConfig,
    stcfg: SelfTrainConfig,
    threads: int | None = None,
) -> list[PseudoSample]:
    """Wrong-then-corrected samples, k of them drawn with the config seed."""
    stcfg.validate()
    traces = run_traces(params, cfg, vocab, samples, rcfg, threads=threads)
    return draw_pseudo(candidates_from_traces(traces, samples), stcfg.k, stcfg.seed)


def answer_conditioned_explanations(
    params: ModelParams,
    cfg: ModelConfig,
    vocab,
    samples,
    beams: int = 1,
) -> list[PseudoSample]:
    """Traditional pseudo-labels: decode forced through "<gold answer> because"."""
    out = []
    for s in sorted(samples, key=lambda x: x.id):
        feats = encode_image(s.image, params, cfg)
        iq = qformer_forward(feats, None, params, cfg, mode="explicit")
        prompt_ids = textmod.tokenize(textmod.format_prompt(s.question), vocab)
        forced = textmod.tokenize(s.answer, vocab) + [vocab.because_id]
        gen = lm_generate(iq.rows, prompt_ids, params, cfg, beams=beams, forced_ids=forced)
        explanation = textmod.detokenize(gen.tokens, vocab)
        out.append(
            PseudoSample(
                sample_id=s.id,
                answer=s.answer,
                explanation=explanation,
                source="answer_conditioned",
                provenance_step=None,
            )
        )
    return out


def selftrain_finetune(
    params: ModelParams,
    pseudo,
    dataset_by_id,
    vocab,
    stcfg: SelfTrainConfig,
    cfg: ModelConfig,
) -> ModelParams:
    """Qformer-only finetune on pseudo-labeled targets; returns trained copy."""
    stcfg.validate()
    pseudo = list(pseudo)
    if not pseudo:
        raise ValueError("selftrain_finetune: empty pseudo-sample set")
    trained = params.copy()
    set_freezing(trained, "selftrain")
    items = []
    for p in pseudo:
        if not p.explanation.strip():
            log.warning("skipping pseudo-sample %d with empty explanation", p.sample_id)
            continue
        s = dataset_by_id[p.sample_id]
        prompt_ids = textmod.tokenize(textmod.format_prompt(s.question), vocab)
        target_ids = textmod.tokenize(textmod.format_target(p.answer, p.explanation), vocab)
        items.append(TrainItem(s.image, prompt_ids, target_ids))
    if not items:
        raise ValueError("selftrain_finetune: no usable pseudo-samples")

    tcfg = TrainConfig(
        stage="selftrain", lr=stcfg.lr, epochs=stcfg.epochs,
        batch_size=stcfg.batch_size, seed=stcfg.seed,
    )
    _run_epochs(
        trained, cfg, lambda i, _rng: items[i], trained.trainable(), tcfg, len(items)
    )
    return trained


def evaluate_single_shot(params, cfg, vocab, samples, beams: int = 1, threads: int | None = None):
    """Filtered/unfiltered report from plain one-pass generation."""
    rcfg = ReviseConfig(max_steps=1, beams=beams)
    traces = run_traces(params, cfg, vocab, samples, rcfg, threads=threads)
    preds = predictions_from_traces(traces, samples, step=0)
    return filtered_report(preds)


def compare_strategies(
    params: ModelParams,
    cfg: ModelConfig,
    vocab,
    harvest_samples,
    test_samples,
    rcfg: ReviseConfig,
    stcfg: SelfTrainConfig,
    beams: int = 1,
    threads: int | None = None,
) -> dict:
    """Control vs answer-conditioned vs recursive pseudo-labels, paired ids."""
    revise_set = harvest(params, cfg, vocab, harvest_samples, rcfg, stcfg, threads=threads)
    by_id = {s.id: s for s in harvest_samples}
    paired = [by_id[p.sample_id] for p in revise_set]
    cond_set = answer_conditioned_explanations(params, cfg, vocab, paired, beams=beams)

    rows = []
    control_report = evaluate_single_shot(params, cfg, vocab, test_samples, beams, threads)
    rows.append({"strategy": "control", "seed": stcfg.seed, "report": control_report.to_dict()})
    for strategy, pseudo in (("answer_conditioned", cond_set), ("revise", revise_set)):
        if pseudo:
            trained = selftrain_finetune(params, pseudo, by_id, vocab, stcfg, cfg)
            report = evaluate_single_shot(trained, cfg, vocab, test_samples, beams, threads)
            qf_changed = trained.partition_hash("qformer") != params.partition_hash("qformer")
        else:
            trained, report, qf_changed = params, control_report, False
        rows.append(
            {
                "strategy": strategy,
                "seed": stcfg.seed,
                "k_used": len(pseudo),
                "qformer_changed": qf_changed,
                "vision_identical": trained.partition_hash("vision_encoder") == params.partition_hash("vision_encoder"),
                "lm_identical": trained.partition_hash("lm") == params.partition_hash("lm"),
                "report": report.to_dict(),
            }
        )
    return {"k": stcfg.k, "seed": stcfg.seed, "paired_ids": [p.sample_id for p in revise_set], "rows": rows}
