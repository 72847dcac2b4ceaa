"""Two-stage training: text-only decoder pretraining, then vision+qformer
finetuning with the teacher-forced loss on "[answer] because [explanation]".

Finetuning interleaves explanation-conditioned passes (the fed-back gold
explanation, with its answer word randomly swapped) so the query-former
learns to treat feedback text as a pointer to image evidence rather than
as a trusted answer; the decoder stays frozen throughout.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import text as textmod
from .autodiff import Tensor, no_grad
from .model import ModelConfig, ModelParams, init_params, set_freezing
from .nncore import OptimizerState, adamw_step, cosine_lr, cross_entropy
from .scenegen import answer_options, describe_scene, render, sample_question

IGNORE_ID = -100


@dataclass
class TrainConfig:
    stage: str = "finetune"
    lr: float = 1e-5
    epochs: int = 6
    batch_size: int = 16
    seed: int = 0
    fraction: float = 1.0
    weight_decay: float = 0.0
    feedback_fraction: float = 0.5
    corrupt_prob: float = 0.5
    mode: str = "explicit"
    content_prefix_fraction: float = 0.6  # pretraining only
    prefix_noise: float = 0.03
    augment: bool = True  # re-render scenes with fresh noise each epoch
    augment_sigma: float = 10.0
    question_resample: bool = True  # re-pair scenes with fresh oracle questions each epoch

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must be in (0, 1]")


@dataclass
class TrainReport:
    stage: str
    seed: int
    epoch_losses: list[float] = field(default_factory=list)
    final_val_loss: float | None = None
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "seed": self.seed,
            "epoch_losses": self.epoch_losses,
            "final_val_loss": self.final_val_loss,
            "wall_time": self.wall_time,
        }


@dataclass
class TrainItem:
    """One supervised pass: conditioning (image or embedded-token prefix)
    plus token sequences. `supervise_all` extends the loss from answer
    positions to the whole stream (text-only LM pretraining)."""

    image: np.ndarray | None
    prompt_ids: list[int]
    target_ids: list[int]
    feedback_ids: list[int] | None = None
    mode: str = "explicit"
    prefix_ids: list[int] | None = None
    prefix_noise: np.ndarray | None = None
    supervise_all: bool = False


def encode_sample(sample, vocab):
    prompt_ids = textmod.tokenize(textmod.format_prompt(sample.question), vocab)
    target_ids = textmod.tokenize(textmod.format_target(sample.answer, sample.explanation), vocab)
    return prompt_ids, target_ids


def _token_targets(prompt_ids, target_ids, supervise_all: bool):
    """Next-token targets for the stream [BOS]+prompt+target (+EOS at the end)."""
    ids = [textmod.BOS_ID] + list(prompt_ids) + list(target_ids)
    tgt = [IGNORE_ID] * len(ids)
    start = 0 if supervise_all else len(prompt_ids)
    for k in range(start, len(ids) - 1):
        tgt[k] = ids[k + 1]
    tgt[len(ids) - 1] = textmod.EOS_ID
    return ids, tgt


def _signature(item: TrainItem) -> tuple:
    return (
        item.image is None,
        len(item.prompt_ids),
        len(item.target_ids),
        -1 if item.feedback_ids is None else len(item.feedback_ids),
        -1 if item.prefix_ids is None else len(item.prefix_ids),
        item.mode,
    )


def _group_loss(params: ModelParams, cfg: ModelConfig, items):
    """Stacked CE for same-shape items, plus the supervised-position count."""
    from .autodiff import embed_rows, reshape
    from .model import encode_image_batch, lm_logits_batch, qformer_forward_batch

    if items[0].image is not None:
        feats = encode_image_batch([it.image for it in items], params, cfg)
        fb = None
        if items[0].feedback_ids is not None:
            fb = [it.feedback_ids for it in items]
        prefix = qformer_forward_batch(feats, fb, params, cfg, mode=items[0].mode)
        r = prefix.shape[1]
    elif items[0].prefix_ids is not None:
        prefix = embed_rows(params["lm.tok_embed"].tensor, np.array([it.prefix_ids for it in items]))
        if items[0].prefix_noise is not None:
            prefix = prefix + Tensor(np.stack([it.prefix_noise for it in items]).astype(prefix.data.dtype))
        r = prefix.shape[1]
    else:
        prefix, r = None, 0
    ids_rows, tgt_rows = [], []
    for it in items:
        ids, tok_tgt = _token_targets(it.prompt_ids, it.target_ids, it.supervise_all)
        ids_rows.append(ids)
        tgt_rows.append([IGNORE_ID] * r + tok_tgt)
    logits = lm_logits_batch(prefix, ids_rows, params, cfg)
    b, s, v = logits.shape
    flat_targets = [t for row in tgt_rows for t in row]
    n = sum(1 for t in flat_targets if t != IGNORE_ID)
    return cross_entropy(reshape(logits, (b * s, v)), flat_targets, ignore_id=IGNORE_ID), n


def teacher_forced_loss(params: ModelParams, cfg: ModelConfig, batch) -> Tensor:
    """Mean CE over all supervised positions in the batch (prompt masked out).

    Items are bucketed by shape signature and run as stacked passes; the
    result is the position-weighted mean, identical in meaning to scoring
    every sample one by one.
    """
    batch = list(batch)
    if not batch:
        raise ValueError("teacher_forced_loss: empty batch")
    groups: dict[tuple, list[TrainItem]] = {}
    for item in batch:
        groups.setdefault(_signature(item), []).append(item)
    pieces = []
    total = 0
    for sig in sorted(groups):
        loss_g, n_g = _group_loss(params, cfg, groups[sig])
        pieces.append((loss_g, n_g))
        total += n_g
    out = None
    for loss_g, n_g in pieces:
        term = loss_g * (n_g / total)
        out = term if out is None else out + term
    return out


def _run_epochs(params, cfg, items_fn, optimizer_params, tcfg: TrainConfig, n_items: int):
    """Shared seeded epoch loop over shape-bucketed batches.

    Batches hold one shape signature each so they run as stacked passes;
    batch order is reshuffled per epoch. The cosine schedule runs on the
    epoch fraction, which stays exact even though the bucket count varies.
    """
    rng = np.random.default_rng(tcfg.seed)
    opt = OptimizerState(lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    epoch_losses = []
    step = 0
    for epoch in range(tcfg.epochs):
        order = rng.permutation(n_items)
        items = [items_fn(int(i), rng) for i in order]
        groups: dict[tuple, list[TrainItem]] = {}
        for it in items:
            groups.setdefault(_signature(it), []).append(it)
        batches = []
        for sig in sorted(groups):
            g = groups[sig]
            batches.extend(g[j : j + tcfg.batch_size] for j in range(0, len(g), tcfg.batch_size))
        batch_order = rng.permutation(len(batches))
        losses = []
        for j, bi in enumerate(batch_order):
            params.zero_grads()
            loss = teacher_forced_loss(params, cfg, batches[int(bi)])
            if not np.isfinite(loss.data):
                raise RuntimeError(f"training diverged (non-finite loss) at seed={tcfg.seed} step={step}")
            loss.backward()
            lr = cosine_lr(epoch + j / len(batches), tcfg.epochs, tcfg.lr)
            adamw_step(optimizer_params, opt, lr=lr)
            losses.append(loss.item())
            step += 1
        epoch_losses.append(float(np.mean(losses)))
    return epoch_losses


def pretrain_lm(samples, vocab, tcfg: TrainConfig, cfg: ModelConfig, params: ModelParams | None = None):
    """Decoder pretraining: next-token prediction on the train corpus, most
    of it conditioned on noisy embedded scene-description rows.

    The description passes teach the decoder to answer questions from a bag
    of per-object content rows, the role its frozen self plays later when
    the query-former feeds it image-derived rows; the plain passes make it
    a language model over prompts and targets. The report's
    `final_val_loss` is the text-only next-token loss after training (the
    number the unigram-entropy baseline applies to).
    """
    tcfg.validate()
    if params is None:
        params = init_params(cfg, seed=tcfg.seed)
    t0 = time.perf_counter()
    encoded = [encode_sample(s, vocab) for s in samples]
    desc_ids = [
        textmod.tokenize(describe_scene(s.scene), vocab) if s.scene is not None else None
        for s in samples
    ]

    def get_item(i, rng):
        prompt, target = encoded[i]
        desc = desc_ids[i]
        if desc is not None and rng.random() < tcfg.content_prefix_fraction:
            if tcfg.question_resample:
                q, a, e = sample_question(samples[i].scene, rng)
                prompt = textmod.tokenize(textmod.format_prompt(q), vocab)
                target = textmod.tokenize(textmod.format_target(a, e), vocab)
            rows = (desc + [textmod.PAD_ID] * cfg.k_queries)[: cfg.k_queries]
            noise = rng.normal(0.0, tcfg.prefix_noise, size=(len(rows), cfg.d_model))
            return TrainItem(None, prompt, target, prefix_ids=rows, prefix_noise=noise)
        return TrainItem(None, prompt, target, supervise_all=True)

    losses = _run_epochs(params, cfg, get_item, params.in_partition("lm"), tcfg, len(encoded))
    with no_grad():
        text_items = [TrainItem(None, p, t, supervise_all=True) for p, t in encoded]
        final_text = teacher_forced_loss(params, cfg, text_items).item()
    report = TrainReport("pretrain", tcfg.seed, losses, final_text, time.perf_counter() - t0)
    return params, report


def _corrupt_feedback(question, answer, expl_ids, vocab, rng, corrupt_prob: float):
    """Swap the explanation's answer word for a random wrong option."""
    if rng.random() >= corrupt_prob:
        return expl_ids
    options = [o for o in answer_options(question) if o != answer]
    swap = vocab.encode_word(options[int(rng.integers(len(options)))])
    ans_id = vocab.encode_word(answer)
    return [swap if t == ans_id else t for t in expl_ids]


def finetune(params: ModelParams, samples, vocab, tcfg: TrainConfig, cfg: ModelConfig, val_samples=None):
    """Eq.-style finetuning of vision encoder + query-former on frozen LM."""
    tcfg.validate()
    set_freezing(params, "finetune")
    t0 = time.perf_counter()
    rng0 = np.random.default_rng(tcfg.seed)
    samples = sorted(samples, key=lambda s: s.id)
    if tcfg.fraction < 1.0:
        n_keep = max(1, int(round(len(samples) * tcfg.fraction)))
        keep = rng0.choice(len(samples), size=n_keep, replace=False)
        samples = [samples[i] for i in sorted(keep)]
    encoded = [encode_sample(s, vocab) for s in samples]
    expl_ids = [textmod.tokenize(s.explanation, vocab) for s in samples]

    def get_item(i, rng):
        prompt, target = encoded[i]
        s = samples[i]
        answer, expl = s.answer, expl_ids[i]
        if tcfg.question_resample:
            q, a, e = sample_question(s.scene, rng)
            prompt = textmod.tokenize(textmod.format_prompt(q), vocab)
            target = textmod.tokenize(textmod.format_target(a, e), vocab)
            answer, expl = a, textmod.tokenize(e, vocab)
            question = q
        else:
            question = s.question
        image = s.image
        if tcfg.augment:
            image = render(s.scene, tcfg.augment_sigma, rng.integers(2**63), size=s.image.shape[0])
        if rng.random() < tcfg.feedback_fraction:
            fb = _corrupt_feedback(question, answer, expl, vocab, rng, tcfg.corrupt_prob)
            return TrainItem(image, prompt, target, feedback_ids=fb, mode=tcfg.mode)
        return TrainItem(image, prompt, target)

    losses = _run_epochs(
        params, cfg, get_item, params.trainable(), tcfg, len(samples)
    )
    val_loss = None
    if val_samples:
        with no_grad():
            items = [TrainItem(s.image, *encode_sample(s, vocab)) for s in val_samples]
            val_loss = teacher_forced_loss(params, cfg, items).item()
    report = TrainReport("finetune", tcfg.seed, losses, val_loss, time.perf_counter() - t0)
    return params, report
