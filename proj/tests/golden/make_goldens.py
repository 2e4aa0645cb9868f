#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Reference metric implementations used to produce the golden files.

Written directly from the published metric definitions (Papineni et al. 2002;
Lin 2004 with beta^2 = 1.2; Vedantam et al. 2015, CIDEr-D with sigma = 6 and
count clipping), independently of the C++ code under test. Re-run to
regenerate `*.golden.txt`; the test suite asserts against the frozen values.
"""

import math
import json
from collections import Counter
from pathlib import Path

HERE = Path(__file__).parent


def ngrams(toks, n):
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def bleu4(corpus):
    matched = [0] * 4
    total = [0] * 4
    cand_len = 0
    ref_len = 0
    for cand, refs in corpus:
        cand_len += len(cand)
        ref_len += min((len(r) for r in refs),
                       key=lambda rl: (abs(rl - len(cand)), rl))
        for n in range(1, 5):
            cc = ngrams(cand, n)
            maxref = Counter()
            for r in refs:
                for g, c in ngrams(r, n).items():
                    maxref[g] = max(maxref[g], c)
            for g, c in cc.items():
                total[n - 1] += c
                matched[n - 1] += min(c, maxref.get(g, 0))
    if cand_len == 0 or any(m == 0 or t == 0 for m, t in zip(matched, total)):
        return 0.0
    log_p = sum(0.25 * math.log(m / t) for m, t in zip(matched, total))
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * bp * math.exp(log_p)


def lcs(a, b):
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            table[i][j] = (table[i - 1][j - 1] + 1 if a[i - 1] == b[j - 1]
                           else max(table[i - 1][j], table[i][j - 1]))
    return table[-1][-1]


def rouge_l(corpus, beta_sq=1.2):
    out = 0.0
    for cand, refs in corpus:
        best = 0.0
        for r in refs:
            ll = lcs(cand, r)
            if ll == 0 or not cand or not r:
                continue
            p = ll / len(cand)
            rec = ll / len(r)
            best = max(best, (1 + beta_sq) * p * rec / (rec + beta_sq * p))
        out += best
    return 100.0 * out / len(corpus)


def cider_d(corpus, sigma=6.0):
    assert len(corpus) >= 2
    df = Counter()
    for _, refs in corpus:
        seen = set()
        for r in refs:
            for n in range(1, 5):
                seen |= set(ngrams(r, n))
        for g in seen:
            df[g] += 1
    log_docs = math.log(len(corpus))

    def vec(toks):
        weights = []
        norms = []
        for n in range(1, 5):
            w = {g: c * (log_docs - math.log(max(1.0, df[g])))
                 for g, c in ngrams(toks, n).items()}
            weights.append(w)
            norms.append(math.sqrt(sum(x * x for x in w.values())))
        return weights, norms, len(toks)

    total = 0.0
    for cand, refs in corpus:
        cw, cn, cl = vec(cand)
        acc = [0.0] * 4
        for r in refs:
            rw, rn, rl = vec(r)
            pen = math.exp(-((cl - rl) ** 2) / (2 * sigma * sigma))
            for n in range(4):
                dot = sum(min(w, rw[n][g]) * rw[n][g]
                          for g, w in cw[n].items() if g in rw[n])
                if cn[n] > 0 and rn[n] > 0:
                    acc[n] += pen * dot / (cn[n] * rn[n])
        total += 10.0 * (sum(acc) / 4.0) / len(refs)
    return total / len(corpus)


def load_corpus(path):
    corpus = []
    for line in path.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        cand, refs = line.split("\t")
        corpus.append((cand.split(), [r.split() for r in refs.split(" ||| ")]))
    return corpus


def main():
    results = {}
    for name in ("bleu_corpus", "rouge_corpus", "cider_corpus"):
        corpus = load_corpus(HERE / f"{name}.txt")
        results[name] = {
            "bleu4": bleu4(corpus),
            "rouge_l": rouge_l(corpus),
            "cider": cider_d(corpus),
        }
    out = HERE / "metrics.golden.txt"
    with out.open("w") as f:
        for name, scores in sorted(results.items()):
            for metric, value in sorted(scores.items()):
                f.write(f"{name} {metric} {value:.12f}\n")
    print(out.read_text())


if __name__ == "__main__":
    main()
