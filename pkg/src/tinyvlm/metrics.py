"""Caption metrics: corpus BLEU, exact-match METEOR and ROUGE-L (F1).

All metrics operate on token lists.  ``tokenize_for_metrics`` lowercases and
splits on whitespace and punctuation boundaries (punctuation marks become
tokens of their own), so external hypothesis files score reproducibly.
"""

from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError

log = logging.getLogger(__name__)

BLEU_FLOOR = 1e-9
METEOR_ALPHA = 0.9  # recall weight: F = PR / (alpha P + (1 - alpha) R) = 10PR / (R + 9P)
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5
# exact chunk minimisation is exponential in repeated words; beyond this many
# search states the greedy longest-chunk alignment is used instead
ALIGN_STATE_BUDGET = 20000

_METRIC_TOKEN = re.compile(r"\w+|[^\w\s]")


def tokenize_for_metrics(text: str) -> list[str]:
    return _METRIC_TOKEN.findall(text.lower())


@dataclass(frozen=True)
class CaptionPair:
    hypothesis: tuple[str, ...]
    references: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if not self.references or not any(self.references):
            raise InputError("a caption pair needs at least one non-empty reference")

    @classmethod
    def from_text(cls, hypothesis: str, references: str | Sequence[str]) -> "CaptionPair":
        if isinstance(references, str):
            references = [references]
        return cls(tuple(tokenize_for_metrics(hypothesis)), tuple(tuple(tokenize_for_metrics(r)) for r in references))


def _as_pairs(pairs) -> list[CaptionPair]:
    out = []
    for p in pairs:
        if isinstance(p, CaptionPair):
            out.append(p)
        else:
            hyp, refs = p
            if isinstance(hyp, str):
                out.append(CaptionPair.from_text(hyp, refs))
            else:
                refs = [refs] if refs and isinstance(refs[0], str) else refs
                out.append(CaptionPair(tuple(hyp), tuple(tuple(r) for r in refs)))
    if not out:
        raise InputError("metrics need a non-empty corpus")
    return out


# -- BLEU -----------------------------------------------------------------


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _bleu_stats(pair: CaptionPair, max_n: int):
    hyp = pair.hypothesis
    matches, totals = [], []
    for n in range(1, max_n + 1):
        counts = _ngrams(hyp, n)
        ceiling: Counter = Counter()
        for ref in pair.references:
            for gram, c in _ngrams(ref, n).items():
                ceiling[gram] = max(ceiling[gram], c)
        matches.append(sum(min(c, ceiling[g]) for g, c in counts.items()))
        totals.append(max(len(hyp) - n + 1, 0))
    closest = min(pair.references, key=lambda r: (abs(len(r) - len(hyp)), len(r)))
    return matches, totals, len(hyp), len(closest)


def _bleu_from_stats(matches, totals, hyp_len, ref_len) -> float:
    if hyp_len == 0:
        return 0.0
    logs = [math.log(max(m / t, BLEU_FLOOR)) for m, t in zip(matches, totals) if t > 0]
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(sum(logs) / len(logs))


def bleu(pairs, max_n: int = 4, mode: str = "corpus") -> float:
    """BLEU with uniform weights and brevity penalty.

    ``mode="corpus"`` pools clipped n-gram counts over the corpus;
    ``mode="sentence"`` averages per-pair scores.  Orders for which the
    hypotheses contain no n-grams at all are left out of the geometric mean.
    """
    pairs = _as_pairs(pairs)
    stats = [_bleu_stats(p, max_n) for p in pairs]
    if mode == "sentence":
        return float(np.mean([_bleu_from_stats(*s) for s in stats]))
    if mode != "corpus":
        raise ValueError(f"unknown BLEU mode {mode!r}")
    matches = [sum(s[0][k] for s in stats) for k in range(max_n)]
    totals = [sum(s[1][k] for s in stats) for k in range(max_n)]
    return _bleu_from_stats(matches, totals, sum(s[2] for s in stats), sum(s[3] for s in stats))


# -- METEOR ---------------------------------------------------------------


def _chunks(links: Sequence[tuple[int, int]]) -> int:
    links = sorted(links)
    return sum(1 for k, (i, j) in enumerate(links) if k == 0 or links[k - 1] != (i - 1, j - 1))


def _greedy_alignment(hyp: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    """Repeatedly align the longest common run of still-unmatched tokens."""
    free_h, free_r = [True] * len(hyp), [True] * len(ref)
    links = []
    while True:
        best = (0, 0, 0)
        for i in range(len(hyp)):
            for j in range(len(ref)):
                k = 0
                while (i + k < len(hyp) and j + k < len(ref) and free_h[i + k] and free_r[j + k]
                       and hyp[i + k] == ref[j + k]):
                    k += 1
                if k > best[0]:
                    best = (k, i, j)
        k, i, j = best
        if k == 0:
            return links
        for t in range(k):
            free_h[i + t] = free_r[j + t] = False
            links.append((i + t, j + t))


def align(hyp: Sequence[str], ref: Sequence[str]) -> tuple[int, int]:
    """(matches, chunks) of a maximum exact-unigram alignment with the fewest chunks."""
    hyp, ref = tuple(hyp), tuple(ref)
    positions: dict[str, list[int]] = {}
    for j, w in enumerate(ref):
        positions.setdefault(w, []).append(j)
    hyp_remaining = [Counter(hyp[i:]) for i in range(len(hyp) + 1)]
    m = sum(min(c, len(positions.get(w, ()))) for w, c in Counter(hyp).items())
    if m == 0:
        return 0, 0

    states = 0

    class _Budget(Exception):
        pass

    @lru_cache(maxsize=None)
    def best(i: int, used: int, prev: int) -> int:
        nonlocal states
        states += 1
        if states > ALIGN_STATE_BUDGET:
            raise _Budget
        if i == len(hyp):
            return 0
        w = hyp[i]
        spots = positions.get(w, ())
        free = [j for j in spots if not used >> j & 1]
        result = math.inf
        # skipping is allowed only while the word still has enough hyp copies left
        if hyp_remaining[i][w] > len(free):
            result = best(i + 1, used, -1)
        for j in free:
            cost = 0 if prev >= 0 and j == prev + 1 else 1
            result = min(result, cost + best(i + 1, used | (1 << j), j))
        return result

    try:
        chunks = best(0, 0, -1)
    except _Budget:
        chunks = _chunks(_greedy_alignment(hyp, ref))
    return m, int(chunks)


def meteor_pair(hyp: Sequence[str], ref: Sequence[str]) -> float:
    if not hyp or not ref:
        return 0.0
    m, chunks = align(hyp, ref)
    if m == 0:
        return 0.0
    p, r = m / len(hyp), m / len(ref)
    f = p * r / (METEOR_ALPHA * p + (1 - METEOR_ALPHA) * r)
    return f * (1.0 - METEOR_GAMMA * (chunks / m) ** METEOR_BETA)


def meteor(pairs) -> float:
    """Mean over pairs of the best-reference exact-match METEOR score."""
    pairs = _as_pairs(pairs)
    return float(np.mean([max(meteor_pair(p.hypothesis, r) for r in p.references) for p in pairs]))


# -- ROUGE-L --------------------------------------------------------------


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(hyp: Sequence[str], ref: Sequence[str]) -> float:
    ell = lcs_length(hyp, ref)
    if ell == 0:
        return 0.0
    p, r = ell / len(hyp), ell / len(ref)
    return 2 * p * r / (p + r)


def rouge_l(pairs) -> float:
    pairs = _as_pairs(pairs)
    return float(np.mean([max(rouge_l_pair(p.hypothesis, r) for r in p.references) for p in pairs]))


# -- reports --------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    bleu: float
    meteor: float
    rouge_l: float
    corpus_size: int

    COLUMNS = ("BLEU", "METEOR", "ROUGE-L")

    def as_dict(self) -> dict:
        return {"bleu": self.bleu, "meteor": self.meteor, "rouge_l": self.rouge_l, "corpus_size": self.corpus_size}

    def to_kv(self) -> str:
        return "\n".join(f"{k}={v!r}" for k, v in self.as_dict().items())

    def to_table(self, label: str = "model") -> str:
        head = f"{'Model':<16}" + "".join(f"{c:>10}" for c in self.COLUMNS)
        row = f"{label:<16}" + "".join(f"{v:>10.4f}" for v in (self.bleu, self.meteor, self.rouge_l))
        return f"{head}\n{row}"


def score_corpus(hypotheses: Sequence[str], references: Sequence[str | Sequence[str]],
                 bleu_mode: str = "corpus") -> MetricsReport:
    if len(hypotheses) != len(references):
        raise InputError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    pairs = [CaptionPair.from_text(h, r) for h, r in zip(hypotheses, references)]
    return MetricsReport(bleu(pairs, mode=bleu_mode), meteor(pairs), rouge_l(pairs), len(pairs))


def subsample(n: int, count: int, seed: int) -> list[int]:
    """``count`` distinct indices out of ``n`` (sorted), clamped to ``n``."""
    if n <= 0:
        raise InputError("cannot sample from an empty manifest")
    if count > n:
        log.warning("requested %d samples but only %d available; using all", count, n)
        count = n
    return sorted(int(i) for i in np.random.default_rng(seed).choice(n, size=count, replace=False))


def evaluate_corpus(model, manifest, sample_count: int = 600, seed: int = 0, max_new_tokens: int = 150,
                    bleu_mode: str = "corpus"):
    """Caption a seeded subsample of ``manifest`` and score it against the responses.

    Returns ``(report, indices, hypotheses)``.
    """
    from .data import preprocess_manifest
    from .inference import generate_caption

    idx = subsample(len(manifest), sample_count, seed)
    images = preprocess_manifest(manifest, model.image_size, idx)
    hyps = [generate_caption(model, img, manifest[i].instruction, max_new_tokens) for img, i in zip(images, idx)]
    report = score_corpus(hyps, [manifest[i].response for i in idx], bleu_mode)
    return report, idx, hyps


def read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f]


def iter_pairs(hyps: Iterable[str], refs: Iterable[str]):
    return [CaptionPair.from_text(h, r) for h, r in zip(hyps, refs)]
