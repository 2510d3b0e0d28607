"""Corpus ingestion, normalization, tokenization, targets, synthetic data.

Pipeline order for a document: raw text -> normalize -> tokenize against a
Vocabulary -> per-level binary targets from the ancestor-closed label set.
The synthetic generator builds a balanced-tree hierarchy whose labels emit
disjoint signature tokens, so corpus learnability holds by construction.

File formats (UTF-8, versioned by header line):

  corpus      #corpus-v1	id	text	labels     labels comma-separated
  vocabulary  #vocab-v1	min_count=<k>            then token\tfrequency lines
"""

import hashlib
import string
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .hierarchy import LevelIndex, augment, build_hierarchy, save_hierarchy
from .seeding import substream

CORPUS_HEADER = "#corpus-v1\tid\ttext\tlabels"
VOCAB_HEADER_PREFIX = "#vocab-v1"

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"
SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN)

# Continuation sub-word pieces carry this prefix in the vocabulary.
SUBWORD_PREFIX = "##"

_EDGE_CHARS = string.punctuation


class DataError(ValueError):
    """Malformed corpus, vocabulary, or generator configuration."""


def load_stopwords(path=None):
    """Stopword set from a one-token-per-line file (default: bundled list)."""
    if path is None:
        text = (
            resources.files("levelwise.fixtures")
            .joinpath("stopwords.txt")
            .read_text(encoding="utf-8")
        )
    else:
        text = Path(path).read_text(encoding="utf-8")
    return frozenset(line.strip() for line in text.splitlines() if line.strip())


def normalize(text, stopwords=frozenset()):
    """Lowercase, whitespace-split, and drop non-content tokens.

    Edge punctuation is stripped first so "1234." counts as numeric and
    "the," matches the stopword list. A token survives only if it still
    contains at least one letter (this removes purely numeric and purely
    punctuation tokens) and is not a stopword.
    """
    out = []
    for raw in text.lower().split():
        token = raw.strip(_EDGE_CHARS)
        if not token or token in stopwords:
            continue
        if not any(ch.isalpha() for ch in token):
            continue
        out.append(token)
    return out


class Vocabulary:
    """Dense token -> id map with reserved specials at ids 0..3."""

    def __init__(self, tokens=(), frequencies=None, min_count=1):
        tokens = list(tokens)
        if frequencies is None:
            frequencies = [0] * len(tokens)
        frequencies = list(frequencies)
        if len(frequencies) != len(tokens):
            raise DataError("tokens and frequencies differ in length")
        self.min_count = int(min_count)
        self._id_to_token = list(SPECIAL_TOKENS) + tokens
        self.frequencies = [0] * len(SPECIAL_TOKENS) + frequencies
        self._token_to_id = {}
        for i, token in enumerate(self._id_to_token):
            if token in self._token_to_id:
                raise DataError(f"duplicate vocabulary token {token!r}")
            self._token_to_id[token] = i

    pad_id = property(lambda self: self._token_to_id[PAD_TOKEN])
    unk_id = property(lambda self: self._token_to_id[UNK_TOKEN])
    cls_id = property(lambda self: self._token_to_id[CLS_TOKEN])
    sep_id = property(lambda self: self._token_to_id[SEP_TOKEN])

    def __len__(self):
        return len(self._id_to_token)

    def __contains__(self, token):
        return token in self._token_to_id

    def lookup(self, token):
        """Id for token, or None when absent."""
        return self._token_to_id.get(token)

    def token(self, token_id):
        return self._id_to_token[token_id]

    @classmethod
    def build(cls, token_sequences, min_count=1):
        """Count tokens across sequences; keep those seen >= min_count.

        Kept tokens are ordered by descending frequency then token text,
        so the id assignment is a pure function of the corpus.
        """
        counts = Counter()
        for seq in token_sequences:
            counts.update(seq)
        for special in SPECIAL_TOKENS:
            counts.pop(special, None)
        kept = [t for t, c in counts.items() if c >= min_count]
        kept.sort(key=lambda t: (-counts[t], t))
        return cls(kept, [counts[t] for t in kept], min_count=min_count)

    def save(self, path):
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            fh.write(f"{VOCAB_HEADER_PREFIX}\tmin_count={self.min_count}\n")
            for token, freq in zip(self._id_to_token, self.frequencies):
                fh.write(f"{token}\t{freq}\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        with path.open(encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            if not header.startswith(VOCAB_HEADER_PREFIX + "\t"):
                raise DataError(f"{path}: unrecognized vocabulary header")
            try:
                min_count = int(header.split("min_count=", 1)[1])
            except (IndexError, ValueError):
                raise DataError(f"{path}: bad vocabulary header") from None
            tokens, freqs = [], []
            for lineno, line in enumerate(fh, start=2):
                line = line.rstrip("\n")
                if not line:
                    continue
                fields = line.split("\t")
                if len(fields) != 2:
                    raise DataError(f"{path}:{lineno}: expected 2 fields")
                tokens.append(fields[0])
                freqs.append(int(fields[1]))
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise DataError(f"{path}: special tokens missing or reordered")
        return cls(
            tokens[len(SPECIAL_TOKENS):],
            freqs[len(SPECIAL_TOKENS):],
            min_count=min_count,
        )


def _greedy_pieces(token, vocab):
    """Longest-match sub-word split; None when any span has no piece."""
    pieces = []
    start = 0
    while start < len(token):
        end = len(token)
        match = None
        while end > start:
            piece = token[start:end]
            if start > 0:
                piece = SUBWORD_PREFIX + piece
            if piece in vocab:
                match = piece
                break
            end -= 1
        if match is None:
            return None
        pieces.append(match)
        start = end
    return pieces


def tokenize(tokens, vocab, max_len):
    """Map normalized tokens to ids: [CLS] + pieces + [SEP], first-truncated.

    Whole-token vocabulary hits win; otherwise the token is split into
    greedy longest-match pieces (continuations prefixed with ``##``); if
    any character span has no matching piece the whole token becomes a
    single UNK. Sequences longer than max_len keep their FIRST max_len
    ids, which can drop the trailing separator.
    """
    if max_len < 2:
        raise DataError("max_len must be at least 2")
    ids = [vocab.cls_id]
    for token in tokens:
        whole = vocab.lookup(token)
        if whole is not None:
            ids.append(whole)
            continue
        pieces = _greedy_pieces(token, vocab)
        if pieces is None:
            ids.append(vocab.unk_id)
        else:
            ids.extend(vocab.lookup(p) for p in pieces)
    ids.append(vocab.sep_id)
    return ids[:max_len]


def pad_batch(sequences, pad_id, length=None):
    """Right-pad id sequences to a shared length.

    Returns (ids, mask): int64 ids of shape (batch, length) and a float64
    mask that is 1.0 on real positions and 0.0 on padding.
    """
    if not sequences:
        raise DataError("empty batch")
    longest = max(len(s) for s in sequences)
    if length is None:
        length = longest
    elif length < longest:
        raise DataError(f"length {length} shorter than longest sequence {longest}")
    ids = np.full((len(sequences), length), pad_id, dtype=np.int64)
    mask = np.zeros((len(sequences), length), dtype=np.float64)
    for i, seq in enumerate(sequences):
        ids[i, : len(seq)] = seq
        mask[i, : len(seq)] = 1.0
    return ids, mask


@dataclass
class Document:
    """One corpus record, optionally enriched with model-ready fields."""

    doc_id: str
    text: str
    labels: frozenset  # raw gold label ids
    token_ids: list = None
    augmented: frozenset = None
    level_targets: list = None  # per-level {0,1} float vectors
    flat_target: np.ndarray = None


def load_corpus(path):
    """Parse a corpus file into Documents (raw fields only)."""
    path = Path(path)
    docs = []
    seen = set()
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != CORPUS_HEADER:
            raise DataError(
                f"{path}: unrecognized header {header!r} "
                f"(expected {CORPUS_HEADER!r})"
            )
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields")
            doc_id, text, labels_s = fields
            if doc_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate id {doc_id!r}")
            seen.add(doc_id)
            labels = frozenset(x for x in labels_s.split(",") if x)
            docs.append(Document(doc_id=doc_id, text=text, labels=labels))
    return docs


def save_corpus(docs, path):
    """Write Documents to the corpus format (tabs/newlines in text -> spaces)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(CORPUS_HEADER + "\n")
        for doc in docs:
            text = doc.text.replace("\t", " ").replace("\n", " ")
            labels = ",".join(sorted(doc.labels))
            fh.write(f"{doc.doc_id}\t{text}\t{labels}\n")


def restrict_labels(labels, h):
    """Drop label ids absent from the hierarchy (e.g. truncated levels)."""
    return frozenset(label for label in labels if label in h)


def build_targets(document, h, index=None):
    """Ancestor-closed per-level binary vectors plus the flat |L| vector.

    Vectors follow the hierarchy's canonical orders (lexicographic within
    each level, level-major globally), so concatenating the per-level
    vectors reproduces the flat one exactly. Unknown raw labels raise.
    """
    if index is None:
        index = LevelIndex(h)
    closed = augment(h, document.labels)
    level_vectors = [
        np.zeros(index.size(n), dtype=np.float64) for n in range(1, index.depth + 1)
    ]
    flat = np.zeros(index.total, dtype=np.float64)
    for label in closed:
        n = h.nodes[label].level
        local = index.level_pos[n - 1][label]
        level_vectors[n - 1][local] = 1.0
        flat[index.to_global(n, local)] = 1.0
    return level_vectors, flat


def prepare_documents(docs, vocab, h, max_len, stopwords=frozenset(), index=None):
    """Fill token ids, augmented labels, and targets on each Document."""
    if index is None:
        index = LevelIndex(h)
    for doc in docs:
        doc.token_ids = tokenize(normalize(doc.text, stopwords), vocab, max_len)
        doc.augmented = frozenset(augment(h, doc.labels))
        doc.level_targets, doc.flat_target = build_targets(doc, h, index)
    return docs


# ---------------------------------------------------------------------------
# Synthetic corpus generation


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape of a generated corpus; see generate_synthetic."""

    depth: int = 6
    branching: int = 2
    docs: int = 2000
    noise_rate: float = 0.3
    noise_vocab: int = 200  # distinct noise tokens
    signature_size: int = 4  # signature tokens per label
    seed: int = 0

    def validate(self):
        if self.depth < 2:
            raise DataError("depth must be >= 2")
        if self.branching < 2:
            raise DataError("branching must be >= 2")
        if self.docs < 1:
            raise DataError("docs must be >= 1")
        if not 0.0 <= self.noise_rate < 1.0:
            raise DataError("noise_rate must be in [0, 1)")
        if self.noise_vocab < 1:
            raise DataError("noise_vocab must be >= 1")
        if self.signature_size < 1:
            raise DataError("signature_size must be >= 1")


def _tree_label(level, i):
    return f"l{level}_{i:04d}"


def signature_token(label, j):
    return f"{label}_t{j}"


def signature_label(token):
    """Label a signature token belongs to, or None for noise tokens."""
    head, sep, tail = token.rpartition("_t")
    if sep and tail.isdigit() and head:
        return head
    return None


def build_tree_hierarchy(depth, branching):
    """Balanced tree: level n holds branching**n labels, single parents."""
    records = []
    for level in range(1, depth + 1):
        for i in range(branching**level):
            parents = [] if level == 1 else [_tree_label(level - 1, i // branching)]
            label = _tree_label(level, i)
            records.append((label, label, level, parents))
    return build_hierarchy(records)


def _split_of(seed, idx):
    # 80/10/10 by hash of (seed, index): stable under regeneration.
    digest = hashlib.sha256(f"{seed}:{idx}".encode()).hexdigest()
    bucket = int(digest, 16) % 10
    if bucket < 8:
        return "train"
    return "dev" if bucket == 8 else "test"


def build_synthetic(spec):
    """Generate (hierarchy, {"train"/"dev"/"test": [Document]}) in memory.

    Each document samples 1-3 leaf labels; every label in the closed set
    emits 2-4 of its signature tokens; noise tokens are interleaved with
    probability noise_rate per gap. Token order is shuffled so position
    carries no label information.
    """
    spec.validate()
    h = build_tree_hierarchy(spec.depth, spec.branching)
    leaves = h.labels_at_level(spec.depth)
    rng = substream(spec.seed, "synthetic")
    splits = {"train": [], "dev": [], "test": []}
    for idx in range(spec.docs):
        k = int(rng.integers(1, 4))
        chosen = rng.choice(len(leaves), size=k, replace=False)
        raw = frozenset(leaves[int(c)] for c in chosen)
        sig_tokens = []
        for label in sorted(augment(h, raw)):
            for _ in range(int(rng.integers(2, 5))):
                j = int(rng.integers(spec.signature_size))
                sig_tokens.append(signature_token(label, j))
        order = rng.permutation(len(sig_tokens))
        tokens = []
        for pos in order:
            while rng.random() < spec.noise_rate:
                tokens.append(f"noise_{int(rng.integers(spec.noise_vocab)):04d}")
            tokens.append(sig_tokens[int(pos)])
        while rng.random() < spec.noise_rate:
            tokens.append(f"noise_{int(rng.integers(spec.noise_vocab)):04d}")
        doc = Document(doc_id=f"doc{idx:05d}", text=" ".join(tokens), labels=raw)
        splits[_split_of(spec.seed, idx)].append(doc)
    return h, splits


def generate_synthetic(spec, out_dir):
    """Write hierarchy.tsv and train/dev/test corpus files under out_dir."""
    h, splits = build_synthetic(spec)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hierarchy_path = out_dir / "hierarchy.tsv"
    save_hierarchy(h, hierarchy_path)
    summary = {
        "hierarchy": hierarchy_path,
        "labels": h.total_count,
        "depth": h.depth,
        "splits": {},
    }
    for name, docs in splits.items():
        path = out_dir / f"{name}.tsv"
        save_corpus(docs, path)
        summary["splits"][name] = {"path": path, "docs": len(docs)}
    return summary
