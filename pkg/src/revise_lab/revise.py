"""Recursive visual-explanation inference.

Step 0 is a plain single-shot generation from the K learned queries. Each
later step re-embeds the previous step's explanation tokens, recomputes the
image queries, and regenerates, until two consecutive answers match or the
step cap lands. Every step records the query-former's cross-attention over
image patches, so the loop's attention drift is inspectable after the fact.
"""

from __future__ import annotations

import concurrent.futures
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import text as textmod
from .autodiff import Tensor
from .model import ModelConfig, ModelParams, encode_image, lm_generate, lm_logits, qformer_forward
from .nncore import cross_entropy
from .text import normalize


@dataclass
class ReviseConfig:
    max_steps: int = 5
    mode: str = "explicit"
    beams: int = 1
    cam: str = "weights"  # "weights" = head/row-averaged cross-attention; "grad" = gradient-weighted

    def validate(self) -> None:
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.mode not in ("explicit", "implicit"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.cam not in ("weights", "grad"):
            raise ValueError(f"unknown cam {self.cam!r}")


@dataclass
class StepRecord:
    n: int
    answer: str
    explanation: str
    attention: np.ndarray
    degenerate_parse: bool = False
    truncated_feedback: bool = False


@dataclass
class ReviseTrace:
    sample_id: int
    steps: list[StepRecord] = field(default_factory=list)
    status: str = "max_steps_hit"
    convergence_step: int | None = None
    regressed: bool | None = None

    @property
    def final_answer(self) -> str:
        return self.steps[-1].answer

    @property
    def final_explanation(self) -> str:
        return self.steps[-1].explanation


def check_convergence(a, b) -> bool:
    """True iff the two answers match after lowercase/punctuation normalization."""
    na = [normalize(t) for t in a] if not isinstance(a, str) else normalize(a).split()
    nb = [normalize(t) for t in b] if not isinstance(b, str) else normalize(b).split()
    return na == nb


def classify_answers(answers, converged_at, gold_answer=None):
    """Status from the answer sequence: converged / oscillating / max_steps_hit.

    Oscillating means some earlier answer recurred without the loop ever
    seeing two consecutive matches. Regression (step-0 right, final wrong)
    is reported separately when a gold answer is available.
    """
    if converged_at is not None:
        status = "converged"
    else:
        seen = set()
        status = "max_steps_hit"
        for a in answers:
            key = tuple(a) if not isinstance(a, str) else a
            if key in seen:
                status = "oscillating"
                break
            seen.add(key)
    regressed = None
    if gold_answer is not None:
        gold = normalize(gold_answer)
        first_right = normalize(answers[0] if isinstance(answers[0], str) else " ".join(answers[0])) == gold
        final_right = normalize(answers[-1] if isinstance(answers[-1], str) else " ".join(answers[-1])) == gold
        regressed = bool(first_right and not final_right)
    return status, regressed


def classify_trace(trace: ReviseTrace, gold_answer=None):
    answers = [s.answer for s in trace.steps]
    return classify_answers(answers, trace.convergence_step, gold_answer)


def _weights_attention(cross_attn: Tensor, k: int) -> np.ndarray:
    """Head- and query-row-averaged patch distribution from the last layer."""
    w = cross_attn.data[:, :k, :]
    return np.asarray(w.mean(axis=(0, 1)), dtype=np.float64)


def gradcam_attention(
    params: ModelParams,
    cfg: ModelConfig,
    image: np.ndarray,
    prompt_ids,
    expl_ids,
    mode: str,
    target_token: int | None,
) -> np.ndarray:
    """Patch saliency: cross-attention weighted by the gradient of the
    generated answer's first-token log-probability."""
    p = cfg.n_patches
    if target_token is None:
        return np.full(p, 1.0 / p)
    flags = [(pt, pt.trainable) for pt in params.in_partition("qformer")]
    for pt, _ in flags:
        pt.trainable = True
    try:
        params.zero_grads()
        feats = encode_image(image, params, cfg)
        iq = qformer_forward(feats, expl_ids, params, cfg, mode=mode)
        ids = [textmod.BOS_ID] + list(prompt_ids)
        logits = lm_logits(iq.rows, ids, params, cfg)
        targets = [-100] * (logits.shape[0] - 1) + [int(target_token)]
        loss = cross_entropy(logits, targets, ignore_id=-100)
        loss.backward()
        w = iq.cross_attn.data[:, : cfg.k_queries, :]
        g = iq.cross_attn.grad
        if g is None:
            return np.full(p, 1.0 / p)
        cam = np.maximum((w * -g[:, : cfg.k_queries, :]).sum(axis=(0, 1)), 0.0)
        total = cam.sum()
        if total <= 0:
            return np.full(p, 1.0 / p)
        return (cam / total).astype(np.float64)
    finally:
        params.zero_grads()
        for pt, flag in flags:
            pt.trainable = flag


def _generate_step(params, cfg, vocab, feats, prompt_ids, expl_ids, mode, beams):
    """One generate-and-parse cycle; the same code path serves step 0."""
    iq = qformer_forward(feats, expl_ids, params, cfg, mode=mode)
    gen = lm_generate(iq.rows, prompt_ids, params, cfg, beams=beams)
    parsed = textmod.parse_output(gen.tokens, vocab)
    return iq, gen, parsed


def single_shot(params, cfg, vocab, image, question, beams: int = 1):
    """Plain one-pass generation (what the loop records as step 0)."""
    feats = encode_image(image, params, cfg)
    prompt_ids = textmod.tokenize(textmod.format_prompt(question), vocab)
    _, gen, parsed = _generate_step(params, cfg, vocab, feats, prompt_ids, None, "explicit", beams)
    return gen, parsed


def revise_infer(
    params: ModelParams,
    cfg: ModelConfig,
    vocab,
    image: np.ndarray,
    question: str,
    rcfg: ReviseConfig,
    sample_id: int = -1,
    gold_answer: str | None = None,
) -> ReviseTrace:
    rcfg.validate()
    feats = encode_image(image, params, cfg)
    prompt_ids = textmod.tokenize(textmod.format_prompt(question), vocab)
    trace = ReviseTrace(sample_id=sample_id)
    answers: list[list[str]] = []
    prev_expl: list[int] | None = None
    converged_at = None
    for n in range(rcfg.max_steps):
        iq, gen, parsed = _generate_step(
            params, cfg, vocab, feats, prompt_ids, prev_expl, rcfg.mode, rcfg.beams
        )
        answer_words = [vocab.decode_id(i) for i in parsed.answer]
        if rcfg.cam == "grad":
            attention = gradcam_attention(
                params, cfg, image, prompt_ids, prev_expl, rcfg.mode,
                parsed.answer[0] if parsed.answer else None,
            )
        else:
            attention = _weights_attention(iq.cross_attn, cfg.k_queries)
        trace.steps.append(
            StepRecord(
                n=n,
                answer=textmod.detokenize(parsed.answer, vocab),
                explanation=textmod.detokenize(parsed.explanation, vocab),
                attention=attention,
                degenerate_parse=parsed.degenerate,
                truncated_feedback=iq.truncated,
            )
        )
        answers.append(answer_words)
        if n >= 1 and check_convergence(answers[n], answers[n - 1]):
            converged_at = n
            break
        prev_expl = parsed.explanation if parsed.explanation else None
    trace.convergence_step = converged_at
    trace.status, trace.regressed = classify_answers(answers, converged_at, gold_answer)
    return trace


def run_traces(params, cfg, vocab, samples, rcfg: ReviseConfig, threads: int | None = None):
    """Traces for many samples; worker threads share the read-only params."""
    if threads is None:
        threads = int(os.environ.get("REVISE_LAB_THREADS", "1"))

    def work(s):
        return revise_infer(params, cfg, vocab, s.image, s.question, rcfg, s.id, s.answer)

    if threads <= 1:
        return [work(s) for s in samples]
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, samples))


def truncate_trace(trace: ReviseTrace, max_steps: int, gold_answer=None) -> ReviseTrace:
    """Re-derive the trace a smaller step cap would have produced.

    Valid because step n depends only on step n-1: a shorter cap yields
    exactly the first max_steps records with the status recomputed.
    """
    if len(trace.steps) <= max_steps:
        return trace
    steps = trace.steps[:max_steps]
    answers = [s.answer for s in steps]
    converged_at = None
    for n in range(1, len(answers)):
        if check_convergence(answers[n], answers[n - 1]):
            converged_at = n
            steps = steps[: n + 1]
            break
    status, regressed = classify_answers([s.answer for s in steps], converged_at, gold_answer)
    return ReviseTrace(trace.sample_id, steps, status, converged_at, regressed)


# -- heatmaps and trace files ---------------------------------------------------

def heatmap_grid(attention: np.ndarray, patch_grid: int) -> np.ndarray:
    """Min-max normalize a patch distribution onto a [0, 255] grid image."""
    attention = np.asarray(attention, dtype=np.float64)
    if attention.size != patch_grid * patch_grid:
        raise ValueError(f"attention length {attention.size} != {patch_grid}x{patch_grid}")
    grid = attention.reshape(patch_grid, patch_grid)
    lo, hi = grid.min(), grid.max()
    if hi - lo < 1e-12:
        return np.full((patch_grid, patch_grid), 128, dtype=np.uint8)
    return np.round((grid - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    h, w = img.shape
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"P2\n{w} {h}\n255\n")
        for row in img:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def overlay_heatmap(attention: np.ndarray, image: np.ndarray, patch: int) -> np.ndarray:
    """Blend the upsampled heat grid onto the rendered image (red channel)."""
    side = image.shape[0] // patch
    grid = heatmap_grid(attention, side)
    heat = np.kron(grid, np.ones((patch, patch), dtype=np.float64))
    out = image.astype(np.float64) * 0.5
    out[:, :, 0] += heat * 0.5
    return np.clip(out, 0, 255).astype(np.uint8)


def trace_to_dict(trace: ReviseTrace) -> dict:
    return {
        "id": trace.sample_id,
        "status": trace.status,
        "convergence_step": trace.convergence_step,
        "regressed": trace.regressed,
        "steps": [
            {
                "n": s.n,
                "answer": s.answer,
                "explanation": s.explanation,
                "attention": [float(a) for a in s.attention],
                "degenerate_parse": s.degenerate_parse,
                "truncated_feedback": s.truncated_feedback,
            }
            for s in trace.steps
        ],
    }


def save_traces(traces, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in traces:
            fh.write(json.dumps(trace_to_dict(t), sort_keys=True) + "\n")


def save_heatmaps(trace: ReviseTrace, patch_grid: int, out_dir, image: np.ndarray | None = None, patch: int | None = None) -> list[str]:
    written = []
    for s in trace.steps:
        path = os.path.join(out_dir, f"trace_{trace.sample_id}_step{s.n}.pgm")
        write_pgm(path, heatmap_grid(s.attention, patch_grid))
        written.append(path)
        jpath = os.path.join(out_dir, f"trace_{trace.sample_id}_step{s.n}.json")
        with open(jpath, "w", encoding="utf-8") as fh:
            json.dump([float(a) for a in s.attention], fh)
        written.append(jpath)
        if image is not None and patch is not None:
            opath = os.path.join(out_dir, f"trace_{trace.sample_id}_step{s.n}_overlay.ppm")
            _write_ppm(opath, overlay_heatmap(s.attention, image, patch))
            written.append(opath)
    return written


def _write_ppm(path, img: np.ndarray) -> None:
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.astype(np.uint8).tobytes())


TRACE_SCHEMA = {
    "type": "object",
    "required": ["id", "status", "convergence_step", "steps"],
    "properties": {
        "id": {"type": "integer"},
        "status": {"enum": ["converged", "max_steps_hit", "oscillating"]},
        "convergence_step": {"type": ["integer", "null"]},
        "regressed": {"type": ["boolean", "null"]},
        "steps": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["n", "answer", "explanation", "attention"],
                "properties": {
                    "n": {"type": "integer", "minimum": 0},
                    "answer": {"type": "string"},
                    "explanation": {"type": "string"},
                    "attention": {"type": "array", "items": {"type": "number"}},
                    "degenerate_parse": {"type": "boolean"},
                    "truncated_feedback": {"type": "boolean"},
                },
                "additionalProperties": False,
            },
        },
    },
    "additionalProperties": False,
}
