"""Document corpus handling: vocabulary, separator-tagged training instances,
sub-document splitting, and sentence alignment recovery.

Corpus files are UTF-8 text, one pre-tokenized sentence per line, documents
separated by a single blank line. Parallel corpora are two such files with
matching structure.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

from .tensor import ContractError

log = logging.getLogger(__name__)

PAD, UNK, SOS, EOS = "<pad>", "<unk>", "<sos>", "<eos>"
DEFAULT_MAX_SEPARATORS = 64

#: marker for a source sentence with no recoverable translation
EMPTY = None


class Vocab:
    """Token <-> id bijection with a fixed low block of reserved tokens.

    Reserved layout: <pad>=0, <unk>=1, <sos>=2, <eos>=3, then <sep1>..<sepM>.
    """

    def __init__(self, tokens, max_separators: int = DEFAULT_MAX_SEPARATORS):
        self.max_separators = max_separators
        reserved = [PAD, UNK, SOS, EOS]
        reserved += [f"<sep{i}>" for i in range(1, max_separators + 1)]
        self._tokens = list(reserved)
        for tok in tokens:
            if tok in reserved:
                raise ContractError(f"corpus token collides with reserved token {tok!r}")
            self._tokens.append(tok)
        self._ids = {tok: i for i, tok in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise ContractError("duplicate tokens in vocabulary")

    pad_id, unk_id, sos_id, eos_id = 0, 1, 2, 3

    def __len__(self):
        return len(self._tokens)

    @property
    def first_regular_id(self) -> int:
        return 4 + self.max_separators

    def sep_id(self, index: int) -> int:
        """Id of <sepI>; index counts from 1."""
        if not 1 <= index <= self.max_separators:
            raise ContractError(
                f"separator index {index} outside inventory 1..{self.max_separators}")
        return 3 + index

    def sep_index(self, token_id: int):
        """Inverse of sep_id; None when the id is not a separator."""
        if 4 <= token_id < 4 + self.max_separators:
            return token_id - 3
        return None

    def is_reserved(self, token_id: int) -> bool:
        return token_id < self.first_regular_id

    def encode(self, tokens) -> list[int]:
        return [self._ids.get(t, self.unk_id) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self._tokens[i] for i in ids]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"#max_separators={self.max_separators}\n")
            for tok in self._tokens[self.first_regular_id:]:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            header = f.readline().strip()
            if not header.startswith("#max_separators="):
                raise ValueError(f"malformed vocab file {path}")
            max_separators = int(header.split("=", 1)[1])
            tokens = [line.rstrip("\n") for line in f if line.strip()]
        return cls(tokens, max_separators=max_separators)


def build_vocab(documents, min_freq: int = 1,
                max_separators: int = DEFAULT_MAX_SEPARATORS) -> Vocab:
    """Frequency-ordered vocabulary over raw text documents.

    ``documents`` is an iterable of lists of sentences, each sentence a list
    of token strings. Ties are broken alphabetically for determinism.
    """
    counts = Counter()
    n_sentences = 0
    for doc in documents:
        for sentence in doc:
            counts.update(sentence)
            n_sentences += 1
    if n_sentences == 0:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    kept = sorted((tok for tok, c in counts.items() if c >= min_freq),
                  key=lambda t: (-counts[t], t))
    return Vocab(kept, max_separators=max_separators)


@dataclass
class Document:
    """A parallel (or source-only) document of token-id sentences."""

    doc_id: str
    src_sentences: list
    tgt_sentences: list | None = None

    def __post_init__(self):
        if self.tgt_sentences is not None and \
                len(self.tgt_sentences) != len(self.src_sentences):
            raise ContractError(
                f"document {self.doc_id}: {len(self.src_sentences)} source vs "
                f"{len(self.tgt_sentences)} target sentences")

    @property
    def n_sentences(self) -> int:
        return len(self.src_sentences)


@dataclass
class TrainingInstance:
    mode: str  # sent | doc2sent | doc2doc
    src: list
    tgt: list
    doc_id: str = ""
    sentence_range: tuple = (0, 0)  # 1-based inclusive range within the document


def _serialize(sentences, vocab: Vocab) -> list[int]:
    """<sos> S_1 <sep1> S_2 <sep2> ... S_N <eos>."""
    if len(sentences) - 1 > vocab.max_separators:
        raise ContractError(
            f"{len(sentences)} sentences need {len(sentences) - 1} separators, "
            f"inventory holds {vocab.max_separators}")
    out = [vocab.sos_id]
    for i, sent in enumerate(sentences):
        if i > 0:
            out.append(vocab.sep_id(i))
        out.extend(sent)
    out.append(vocab.eos_id)
    return out


def serialized_length(sentences) -> int:
    """Length of the doc2doc serialization: tokens + separators + <sos>/<eos>."""
    return sum(len(s) for s in sentences) + max(len(sentences) - 1, 0) + 2


def make_doc2doc(doc: Document, vocab: Vocab) -> TrainingInstance:
    """Whole-document instance with index-aware separators on both sides."""
    return TrainingInstance(
        mode="doc2doc",
        src=_serialize(doc.src_sentences, vocab),
        tgt=_serialize(doc.tgt_sentences, vocab) if doc.tgt_sentences is not None else [],
        doc_id=doc.doc_id,
        sentence_range=(1, doc.n_sentences),
    )


def make_doc2sent(doc: Document, n: int, vocab: Vocab, context: int = 4) -> TrainingInstance:
    """Source = up to ``context`` previous sentences plus sentence n; target = T_n."""
    if not 1 <= n <= doc.n_sentences:
        raise ContractError(f"sentence index {n} out of range 1..{doc.n_sentences}")
    first = max(1, n - context)
    src = _serialize(doc.src_sentences[first - 1: n], vocab)
    tgt = ([vocab.sos_id] + list(doc.tgt_sentences[n - 1]) + [vocab.eos_id]
           if doc.tgt_sentences is not None else [])
    return TrainingInstance("doc2sent", src, tgt, doc.doc_id, (first, n))


def make_sent(doc: Document, n: int, vocab: Vocab) -> TrainingInstance:
    """Plain sentence pair instance: <sos> S_n <eos> on both sides."""
    if not 1 <= n <= doc.n_sentences:
        raise ContractError(f"sentence index {n} out of range 1..{doc.n_sentences}")
    src = [vocab.sos_id] + list(doc.src_sentences[n - 1]) + [vocab.eos_id]
    tgt = ([vocab.sos_id] + list(doc.tgt_sentences[n - 1]) + [vocab.eos_id]
           if doc.tgt_sentences is not None else [])
    return TrainingInstance("sent", src, tgt, doc.doc_id, (n, n))


def split_subdocuments(doc: Document, max_tokens: int = 512) -> list[Document]:
    """Greedy split at sentence boundaries so each sub-document's serialized
    source side fits in ``max_tokens``. A single oversize sentence becomes its
    own sub-document (logged), never dropped."""
    subs = []
    current = []
    for i, sent in enumerate(doc.src_sentences):
        if current and serialized_length([s for s, _ in current] + [sent]) > max_tokens:
            subs.append(current)
            current = []
        current.append((sent, i))
        if len(current) == 1 and serialized_length([sent]) > max_tokens:
            log.warning("document %s sentence %d serializes to %d tokens, over the "
                        "%d limit; emitting it as its own sub-document",
                        doc.doc_id, i + 1, serialized_length([sent]), max_tokens)
            subs.append(current)
            current = []
    if current:
        subs.append(current)

    out = []
    for part, group in enumerate(subs):
        indices = [i for _, i in group]
        out.append(Document(
            doc_id=f"{doc.doc_id}.{part}" if len(subs) > 1 else doc.doc_id,
            src_sentences=[doc.src_sentences[i] for i in indices],
            tgt_sentences=([doc.tgt_sentences[i] for i in indices]
                           if doc.tgt_sentences is not None else None),
        ))
    return out


@dataclass
class Alignment:
    """Per-sentence pairing recovered from a doc2doc hypothesis."""

    pairs: list = field(default_factory=list)  # (1-based source index, tokens or EMPTY)
    malformed: bool = False

    @property
    def covered(self) -> bool:
        return all(segment is not EMPTY for _, segment in self.pairs)


def recover_alignment(n_src_sentences: int, hyp_ids, vocab: Vocab) -> Alignment:
    """Split a decoded doc2doc output on its separators.

    Segments pair with source sentences in order of separator appearance;
    sentences beyond the hypothesis's segment count map to EMPTY. Separator
    indices out of order only set the malformed flag.
    """
    segments = [[]]
    sep_indices = []
    for tid in hyp_ids:
        sep = vocab.sep_index(tid)
        if sep is not None:
            sep_indices.append(sep)
            segments.append([])
        elif tid in (vocab.sos_id, vocab.eos_id, vocab.pad_id):
            continue
        else:
            segments[-1].append(tid)
    malformed = sep_indices != list(range(1, len(sep_indices) + 1))
    pairs = []
    for n in range(1, n_src_sentences + 1):
        pairs.append((n, segments[n - 1] if n <= len(segments) else EMPTY))
    return Alignment(pairs=pairs, malformed=malformed)


def coverage_stats(documents, hypotheses, vocab: Vocab) -> dict:
    """Count documents whose every source sentence recovered a segment."""
    if len(documents) != len(hypotheses):
        raise ContractError(
            f"{len(documents)} documents vs {len(hypotheses)} hypotheses")
    correct = 0
    for doc, hyp in zip(documents, hypotheses):
        if recover_alignment(doc.n_sentences, hyp, vocab).covered:
            correct += 1
    total = len(documents)
    pct = 100.0 * correct / total if total else 0.0
    return {"correct": correct, "total": total, "percentage": pct}


def format_coverage(stats: dict) -> str:
    return f"{stats['correct']} / {stats['total']} / {stats['percentage']:.1f}%"


# -- corpus and instance files ---------------------------------------------------


def read_text_corpus(path) -> list[list[list[str]]]:
    """Documents as lists of sentences, each a list of whitespace tokens."""
    docs = []
    current = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                if current:
                    docs.append(current)
                    current = []
            else:
                current.append(line.split())
    if current:
        docs.append(current)
    return docs


def encode_documents(src_docs, tgt_docs, vocab: Vocab, prefix: str = "doc") -> list[Document]:
    if tgt_docs is not None and len(src_docs) != len(tgt_docs):
        raise ContractError(
            f"{len(src_docs)} source vs {len(tgt_docs)} target documents")
    out = []
    for i, src in enumerate(src_docs):
        tgt = tgt_docs[i] if tgt_docs is not None else None
        out.append(Document(
            doc_id=f"{prefix}{i}",
            src_sentences=[vocab.encode(s) for s in src],
            tgt_sentences=[vocab.encode(s) for s in tgt] if tgt is not None else None,
        ))
    return out


def dump_instances(path, instances, vocab: Vocab):
    """One instance per line: src tokens TAB tgt tokens, specials literal."""
    with open(path, "w", encoding="utf-8") as f:
        for inst in instances:
            src = " ".join(vocab.decode(inst.src))
            tgt = " ".join(vocab.decode(inst.tgt))
            f.write(f"{src}\t{tgt}\n")


def load_instances(path, vocab: Vocab, mode: str) -> list[TrainingInstance]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            src_text, _, tgt_text = line.partition("\t")
            out.append(TrainingInstance(
                mode=mode,
                src=vocab.encode(src_text.split()),
                tgt=vocab.encode(tgt_text.split()) if tgt_text else [],
            ))
    return out
