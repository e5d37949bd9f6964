"""Corpus BLEU and the document-level s-BLEU / d-BLEU metrics.

Unsmoothed BLEU-4 on pre-tokenized sequences: clipped n-gram precisions are
accumulated over the whole corpus before the geometric mean and brevity
penalty are applied. Case handling is whatever the tokens carry.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .data import EMPTY, Vocab, recover_alignment
from .tensor import ContractError

MAX_ORDER = 4


@dataclass
class BleuStats:
    """Additive clipped-match statistics for one or more segments."""

    matches: list = field(default_factory=lambda: [0] * MAX_ORDER)
    totals: list = field(default_factory=lambda: [0] * MAX_ORDER)
    hyp_len: int = 0
    ref_len: int = 0

    def add(self, other: "BleuStats") -> "BleuStats":
        return BleuStats(
            matches=[a + b for a, b in zip(self.matches, other.matches)],
            totals=[a + b for a, b in zip(self.totals, other.totals)],
            hyp_len=self.hyp_len + other.hyp_len,
            ref_len=self.ref_len + other.ref_len,
        )

    def score(self) -> float:
        """BLEU in [0, 100]: brevity penalty times geometric mean of precisions."""
        if self.hyp_len == 0:
            return 0.0
        log_precision = 0.0
        for m, t in zip(self.matches, self.totals):
            if m == 0 or t == 0:
                return 0.0
            log_precision += math.log(m / t) / MAX_ORDER
        bp = 1.0 if self.hyp_len > self.ref_len else \
            math.exp(1.0 - self.ref_len / self.hyp_len)
        return 100.0 * bp * math.exp(log_precision)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def segment_stats(hyp, ref) -> BleuStats:
    """Clipped n-gram counts for one hypothesis/reference pair."""
    hyp = list(hyp)
    ref = list(ref)
    stats = BleuStats(hyp_len=len(hyp), ref_len=len(ref))
    for n in range(1, MAX_ORDER + 1):
        hyp_counts = _ngrams(hyp, n)
        ref_counts = _ngrams(ref, n)
        stats.totals[n - 1] = max(len(hyp) - n + 1, 0)
        stats.matches[n - 1] = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
    return stats


def corpus_bleu(pairs) -> float:
    """Corpus BLEU over (hypothesis tokens, reference tokens) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ContractError("corpus BLEU needs at least one segment")
    total = BleuStats()
    for hyp, ref in pairs:
        total = total.add(segment_stats(hyp, ref))
    return total.score()


def strip_specials(ids, vocab: Vocab) -> list:
    """Drop <sos>, <eos>, <pad> and every <sepI> from a token-id sequence."""
    return [t for t in ids if not vocab.is_reserved(t) or t == vocab.unk_id]


def d_bleu(doc_pairs, vocab: Vocab) -> float:
    """Document-level BLEU: each whole document is one segment, specials removed."""
    return corpus_bleu([(strip_specials(hyp, vocab), strip_specials(ref, vocab))
                        for hyp, ref in doc_pairs])


def s_bleu(documents, hypotheses, vocab: Vocab) -> float:
    """Sentence-level BLEU via separator alignment recovery.

    Source sentences with no recovered segment contribute an empty hypothesis:
    zero matches and zero hypothesis length against their full reference.
    """
    if len(documents) != len(hypotheses):
        raise ContractError(
            f"{len(documents)} documents vs {len(hypotheses)} hypotheses")
    pairs = []
    for doc, hyp in zip(documents, hypotheses):
        alignment = recover_alignment(doc.n_sentences, hyp, vocab)
        for (n, segment) in alignment.pairs:
            hyp_tokens = [] if segment is EMPTY else strip_specials(segment, vocab)
            ref_tokens = strip_specials(doc.tgt_sentences[n - 1], vocab)
            pairs.append((hyp_tokens, ref_tokens))
    return corpus_bleu(pairs)
