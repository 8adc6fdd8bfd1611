"""Brute-force reference implementation of the captioning metrics.

Written independently of the Rust code: no shared helpers, naive loops
everywhere. Regenerate the pinned values with

    python3 oracle.py golden_corpus.jsonl > golden_expected.json
"""
import json
import math
import sys

STEM_EXCEPTIONS = set("""is was has this his its yes gas bus lens series species
always perhaps across glass grass chess class bas plus atlas canvas thus ceiling
building thing nothing something king ring wing bring spring string during
evening morning railing painting clothes shoes stairs does goes tiles""".split())


def words(text):
    out, cur = [], ""
    for ch in text.lower():
        if ch.isalnum():
            cur += ch
        else:
            if cur:
                out.append(cur)
            cur = ""
    if cur:
        out.append(cur)
    return out


def stem(w):
    if w in STEM_EXCEPTIONS:
        return w
    if len(w) >= 6 and w.endswith("ing"):
        return w[:-3]
    if len(w) >= 4 and w.endswith("es"):
        base = w[:-2]
        for suf in ("s", "x", "z", "ch", "sh"):
            if base.endswith(suf):
                return base
    if len(w) >= 4 and w.endswith("s") and not w.endswith("ss") and not w.endswith("us"):
        return w[:-1]
    return w


def grams(ws, n):
    return [tuple(ws[i:i + n]) for i in range(len(ws) - n + 1)]


def count(lst, x):
    return sum(1 for y in lst if y == x)


def bleu4(c, refs):
    if not c:
        return 0.0
    logs = 0.0
    for n in range(1, 5):
        cg = grams(c, n)
        clipped = 0
        for g in set(cg):
            clipped += min(count(cg, g), max(count(grams(r, n), g) for r in refs))
        p = clipped / len(cg) if clipped > 0 and cg else 1e-9
        logs += math.log(p) / 4
    best = None
    for r in refs:
        key = (abs(len(r) - len(c)), len(r))
        if best is None or key < best[0]:
            best = (key, len(r))
    rl = best[1]
    bp = 1.0 if len(c) > rl else math.exp(1 - rl / len(c))
    return bp * math.exp(logs)


def lcs(a, b):
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a)):
        for j in range(len(b)):
            if a[i] == b[j]:
                table[i + 1][j + 1] = table[i][j] + 1
            else:
                table[i + 1][j + 1] = max(table[i][j + 1], table[i + 1][j])
    return table[len(a)][len(b)]


def rouge_l(c, refs):
    if not c:
        return 0.0
    best = 0.0
    for r in refs:
        l = lcs(c, r)
        if l == 0:
            continue
        p, rec = l / len(c), l / len(r)
        f = (1 + 1.2 ** 2) * p * rec / (rec + 1.2 ** 2 * p)
        best = max(best, f)
    return best


def meteor_one(c, r):
    used_c, used_r, pairs = set(), set(), []
    for match in (lambda a, b: a == b, lambda a, b: stem(a) == stem(b)):
        for i, w in enumerate(c):
            if i in used_c:
                continue
            for j, v in enumerate(r):
                if j not in used_r and match(w, v):
                    used_c.add(i)
                    used_r.add(j)
                    pairs.append((i, j))
                    break
    if not pairs:
        return 0.0
    pairs.sort()
    chunks = 1
    for k in range(1, len(pairs)):
        if not (pairs[k][0] == pairs[k - 1][0] + 1 and pairs[k][1] == pairs[k - 1][1] + 1):
            chunks += 1
    m = len(pairs)
    p, r_ = m / len(c), m / len(r)
    f = p * r_ / (0.9 * p + 0.1 * r_)
    return f * (1 - 0.5 * (chunks / m) ** 3)


def meteor(c, refs):
    if not c:
        return 0.0
    return max(meteor_one(c, r) for r in refs)


def cider(cands, refsets):
    cands = [[stem(w) for w in c] for c in cands]
    refsets = [[[stem(w) for w in r] for r in refs] for refs in refsets]
    n_docs = len(refsets)

    def df(g, n):
        return sum(1 for refs in refsets if any(g in grams(r, n) for r in refs))

    def vec(ws, n):
        gs = grams(ws, n)
        return {g: count(gs, g) * math.log(n_docs / max(1, df(g, n))) for g in set(gs)}

    def cos(a, b):
        na = math.sqrt(sum(v * v for v in a.values()))
        nb = math.sqrt(sum(v * v for v in b.values()))
        if na == 0 or nb == 0:
            return 0.0
        return sum(a[g] * b[g] for g in a if g in b) / (na * nb)

    out = []
    for c, refs in zip(cands, refsets):
        total = 0.0
        for n in range(1, 5):
            cv = vec(c, n)
            total += sum(cos(cv, vec(r, n)) for r in refs) / len(refs)
        out.append(10 * total / 4)
    return out


def main():
    items = [json.loads(l) for l in open(sys.argv[1]) if l.strip()]
    cands = [words(it["candidate"]) for it in items]
    refs = [[words(r) for r in it["references"]] for it in items]
    rows = []
    for c, rs, ci in zip(cands, refs, cider(cands, refs)):
        rows.append({"bleu4": bleu4(c, rs), "rouge_l": rouge_l(c, rs), "meteor": meteor(c, rs), "cider": ci})
    json.dump(rows, sys.stdout, indent=1)
    print()


if __name__ == "__main__":
    main()
