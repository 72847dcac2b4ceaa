"""Corpus n-gram metrics (BLEU-1..4, ROUGE-L, CIDEr) and filtered reports.

Filtered scores follow the evaluation convention of scoring explanations
only where the predicted answer matches the reference answer; unfiltered
scores cover everything. METEOR/SPICE/BERTScore/G-Eval slots exist in the
report but stay null (they need external resources).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .text import normalize

BLEU_EPS = 1e-9
ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
CIDER_SCALE = 10.0


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, max_n: int = 4):
    """Corpus BLEU-1..max_n: clipped modified precision, geometric mean,
    brevity penalty exp(1 - r/c) for short candidates, zero precisions
    floored at 1e-9."""
    if not candidates:
        raise ValueError("bleu: empty candidate list")
    if len(candidates) != len(references):
        raise ValueError(f"bleu: {len(candidates)} candidates vs {len(references)} reference sets")
    matched = [0] * max_n
    total = [0] * max_n
    c_len = 0
    r_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("bleu: empty reference set")
        c_len += len(cand)
        r_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            cg = _ngrams(cand, n)
            if not cg:
                continue
            best = Counter()
            for r in refs:
                rg = _ngrams(r, n)
                for g in cg:
                    best[g] = max(best[g], rg.get(g, 0))
            matched[n - 1] += sum(min(c, best[g]) for g, c in cg.items())
            total[n - 1] += sum(cg.values())
    if c_len == 0:
        return tuple(0.0 for _ in range(max_n))
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    precisions = [
        (matched[n] / total[n]) if total[n] > 0 and matched[n] > 0 else BLEU_EPS
        for n in range(max_n)
    ]
    scores = []
    for k in range(1, max_n + 1):
        log_mean = sum(math.log(p) for p in precisions[:k]) / k
        scores.append(bp * math.exp(log_mean))
    return tuple(scores)


def _lcs_len(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidates, references, beta: float = ROUGE_BETA) -> float:
    """Mean over the corpus of the best-reference LCS F-measure."""
    if not candidates:
        raise ValueError("rouge_l: empty candidate list")
    if len(candidates) != len(references):
        raise ValueError(f"rouge_l: {len(candidates)} candidates vs {len(references)} reference sets")
    b2 = beta * beta
    out = 0.0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("rouge_l: empty reference set")
        best = 0.0
        for r in refs:
            lcs = _lcs_len(cand, r)
            if lcs == 0 or not cand or not r:
                continue
            p = lcs / len(cand)
            rr = lcs / len(r)
            f = (1 + b2) * p * rr / (rr + b2 * p)
            best = max(best, f)
        out += best
    return out / len(candidates)


def cider(candidates, references, max_n: int = 4, sigma: float = CIDER_SIGMA) -> float:
    """TF-IDF n-gram cosine (n=1..4) with a Gaussian length penalty,
    averaged over references and the corpus, scaled by 10.

    Document frequency comes from the evaluated corpus's reference sets,
    so at least two items are required.
    """
    if len(candidates) != len(references):
        raise ValueError(f"cider: {len(candidates)} candidates vs {len(references)} reference sets")
    if len(candidates) < 2:
        raise ValueError("cider: document frequency needs a corpus of at least 2 items")
    n_docs = len(references)
    df = [Counter() for _ in range(max_n)]
    for refs in references:
        for n in range(1, max_n + 1):
            seen = set()
            for r in refs:
                seen.update(_ngrams(r, n))
            for g in seen:
                df[n - 1][g] += 1

    def tfidf(tokens, n):
        vec = {}
        for g, c in _ngrams(tokens, n).items():
            idf = math.log(n_docs / max(1.0, df[n - 1].get(g, 0)))
            vec[g] = c * idf
        norm = math.sqrt(sum(v * v for v in vec.values()))
        return vec, norm

    total = 0.0
    for cand, refs in zip(candidates, references):
        cvecs = [tfidf(cand, n) for n in range(1, max_n + 1)]
        ref_score = 0.0
        for r in refs:
            sim_sum = 0.0
            penalty = math.exp(-((len(cand) - len(r)) ** 2) / (2.0 * sigma * sigma))
            for n in range(1, max_n + 1):
                cvec, cnorm = cvecs[n - 1]
                rvec, rnorm = tfidf(r, n)
                if cnorm == 0 or rnorm == 0:
                    continue
                dot = sum(v * rvec.get(g, 0.0) for g, v in cvec.items())
                sim_sum += penalty * dot / (cnorm * rnorm)
            ref_score += sim_sum / max_n
        total += ref_score / len(refs)
    return CIDER_SCALE * total / len(candidates)


@dataclass
class Prediction:
    sample_id: int
    answer: list[str]
    explanation: list[str]
    ref_answer: list[str]
    ref_explanations: list[list[str]]

    @classmethod
    def from_strings(cls, sample_id, answer, explanation, ref_answer, ref_explanations):
        return cls(
            sample_id,
            normalize(answer).split(),
            normalize(explanation).split(),
            normalize(ref_answer).split(),
            [normalize(r).split() for r in ref_explanations],
        )

    @property
    def answer_correct(self) -> bool:
        return self.answer == self.ref_answer


NULL_METRICS = {"meteor": None, "spice": None, "bertscore": None, "geval": None}


def _metric_block(preds) -> dict:
    cands = [p.explanation for p in preds]
    refs = [p.ref_explanations for p in preds]
    b1, b2, b3, b4 = bleu(cands, refs)
    block = {
        "bleu1": b1,
        "bleu2": b2,
        "bleu3": b3,
        "bleu4": b4,
        "rouge_l": rouge_l(cands, refs),
        "cider": cider(cands, refs) if len(preds) >= 2 else None,
        "count": len(preds),
    }
    block.update(NULL_METRICS)
    return block


_EMPTY_BLOCK = {
    "bleu1": None, "bleu2": None, "bleu3": None, "bleu4": None,
    "rouge_l": None, "cider": None, "count": 0, **NULL_METRICS,
}


@dataclass
class MetricReport:
    filtered: dict
    unfiltered: dict
    accuracy: float
    counts: dict
    convergence_histogram: list[int] = field(default_factory=list)
    nonconverged: int = 0
    flips: dict = field(default_factory=lambda: {"gained": 0, "lost": 0})
    failure_rates: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "filtered": self.filtered,
            "unfiltered": self.unfiltered,
            "accuracy": self.accuracy,
            "counts": self.counts,
            "convergence_histogram": self.convergence_histogram,
            "nonconverged": self.nonconverged,
            "flips": self.flips,
            "failure_rates": self.failure_rates,
        }


def filtered_report(preds, traces=None, max_steps: int = 5) -> MetricReport:
    """Corpus report: filtered + unfiltered metrics, answer accuracy, and —
    when traces are supplied — the convergence histogram and flip counts."""
    preds = sorted(preds, key=lambda p: p.sample_id)
    if not preds:
        raise ValueError("filtered_report: no predictions")
    correct = [p for p in preds if p.answer_correct]
    report = MetricReport(
        filtered=_metric_block(correct) if correct else dict(_EMPTY_BLOCK),
        unfiltered=_metric_block(preds),
        accuracy=len(correct) / len(preds),
        counts={"total": len(preds), "answer_correct": len(correct)},
    )
    if traces is not None:
        by_id = {p.sample_id: p for p in preds}
        hist = [0] * (max_steps + 1)
        nonconverged = 0
        gained = lost = 0
        osc = reg = 0
        for t in traces:
            if t.convergence_step is not None and t.convergence_step <= max_steps:
                hist[t.convergence_step] += 1
            else:
                nonconverged += 1
            if t.status == "oscillating":
                osc += 1
            if t.regressed:
                reg += 1
            p = by_id.get(t.sample_id)
            if p is None or not t.steps:
                continue
            first = normalize(t.steps[0].answer).split()
            last = normalize(t.steps[-1].answer).split()
            ref = p.ref_answer
            if first != ref and last == ref:
                gained += 1
            elif first == ref and last != ref:
                lost += 1
        n = len(traces)
        report.convergence_histogram = hist
        report.nonconverged = nonconverged
        report.flips = {"gained": gained, "lost": lost}
        report.failure_rates = {
            "oscillating": osc / n if n else 0.0,
            "regressed": reg / n if n else 0.0,
            "total": (osc + reg) / n if n else 0.0,
        }
    return report


def predictions_from_traces(traces, samples, step: int | None = None) -> list[Prediction]:
    """Predictions from trace endpoints (or a fixed step, e.g. 0 for single-shot)."""
    by_id = {s.id: s for s in samples}
    preds = []
    for t in traces:
        s = by_id[t.sample_id]
        rec = t.steps[min(step, len(t.steps) - 1)] if step is not None else t.steps[-1]
        preds.append(Prediction.from_strings(s.id, rec.answer, rec.explanation, s.answer, [s.explanation]))
    return preds
