"""Independent brute-force scorers used to cross-check the metrics module.

Written against the metric definitions directly, in the plainest possible
style, and kept free of any imports from revise_lab.metrics.
"""

import math
from collections import Counter


def ngram_list(tokens, n):
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def bleu_oracle(cands, refs, max_n=4):
    match = [0.0] * max_n
    total = [0.0] * max_n
    c_len = 0
    r_len = 0
    for cand, rset in zip(cands, refs):
        c_len += len(cand)
        # closest reference length, ties to the shorter
        r_len += sorted(rset, key=lambda r: (abs(len(r) - len(cand)), len(r)))[0].__len__()
        for n in range(1, max_n + 1):
            cg = Counter(ngram_list(cand, n))
            for g, c in cg.items():
                best = max((Counter(ngram_list(r, n)).get(g, 0) for r in rset), default=0)
                match[n - 1] += min(c, best)
            total[n - 1] += max(0, len(cand) - n + 1)
    if c_len == 0:
        return (0.0,) * max_n
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    ps = []
    for n in range(max_n):
        p = match[n] / total[n] if total[n] > 0 else 0.0
        ps.append(p if p > 0 else 1e-9)
    out = []
    for k in range(1, max_n + 1):
        out.append(bp * math.exp(sum(math.log(p) for p in ps[:k]) / k))
    return tuple(out)


def lcs_oracle(a, b):
    best = 0
    table = {}
    for i in range(len(a)):
        for j in range(len(b)):
            if a[i] == b[j]:
                table[(i, j)] = table.get((i - 1, j - 1), 0) + 1
            else:
                table[(i, j)] = max(table.get((i - 1, j), 0), table.get((i, j - 1), 0))
            best = max(best, table[(i, j)])
    return best


def rouge_l_oracle(cands, refs, beta=1.2):
    total = 0.0
    for cand, rset in zip(cands, refs):
        best = 0.0
        for r in rset:
            lcs = lcs_oracle(cand, r)
            if lcs == 0:
                continue
            p = lcs / len(cand)
            rec = lcs / len(r)
            f = (1 + beta * beta) * p * rec / (rec + beta * beta * p)
            best = max(best, f)
        total += best
    return total / len(cands)


def cider_oracle(cands, refs, max_n=4, sigma=6.0):
    n_docs = len(refs)
    dfs = []
    for n in range(1, max_n + 1):
        df = Counter()
        for rset in refs:
            grams = set()
            for r in rset:
                grams.update(ngram_list(r, n))
            for g in grams:
                df[g] += 1
        dfs.append(df)

    def vec(tokens, n):
        counts = Counter(ngram_list(tokens, n))
        w = {g: c * math.log(n_docs / max(1.0, dfs[n - 1].get(g, 0))) for g, c in counts.items()}
        norm = math.sqrt(sum(x * x for x in w.values()))
        return w, norm

    corpus = 0.0
    for cand, rset in zip(cands, refs):
        per_ref = 0.0
        for r in rset:
            pen = math.exp(-((len(cand) - len(r)) ** 2) / (2 * sigma * sigma))
            sims = 0.0
            for n in range(1, max_n + 1):
                cw, cn = vec(cand, n)
                rw, rn = vec(r, n)
                if cn == 0 or rn == 0:
                    continue
                dot = sum(v * rw.get(g, 0.0) for g, v in cw.items())
                sims += pen * dot / (cn * rn)
            per_ref += sims / max_n
        corpus += per_ref / len(rset)
    return 10.0 * corpus / len(cands)
