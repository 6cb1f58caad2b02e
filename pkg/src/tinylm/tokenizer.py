"""Byte-level BPE tokenizer: training, frequency analysis, coverage curves,
and low-frequency vocabulary removal.

The 256 single-byte tokens are always present and never removed, so any byte
string stays encodable before and after compaction. Merges are applied in
rank order, which (because a merge's operands always have smaller rank than
its product) is equivalent to repeatedly applying the lowest-rank pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BASE_SIZE = 256


class EmptyCorpusError(ValueError):
    """Operation needs a nonempty corpus / nonzero token count."""


@dataclass
class Vocabulary:
    """Token inventory: 256 byte tokens plus merge-produced tokens.

    tokens[i] is the byte string of id i; merges is the rank-ordered list of
    (left_id, right_id, merged_id) with merged ids dense above 255.
    """

    tokens: list[bytes]
    merges: list[tuple[int, int, int]]

    @classmethod
    def base(cls) -> "Vocabulary":
        return cls(tokens=[bytes([i]) for i in range(BASE_SIZE)], merges=[])

    @property
    def size(self) -> int:
        return len(self.tokens)

    def token_id(self, token: bytes) -> int | None:
        try:
            return self.tokens.index(token)
        except ValueError:
            return None

    def validate(self) -> None:
        if self.tokens[:BASE_SIZE] != [bytes([i]) for i in range(BASE_SIZE)]:
            raise ValueError("first 256 tokens must be the single bytes")
        produced = set()
        for rank, (left, right, merged) in enumerate(self.merges):
            if merged != BASE_SIZE + rank:
                raise ValueError(f"merge rank {rank} produces non-dense id {merged}")
            if left >= merged or right >= merged:
                raise ValueError(f"merge {merged} has operand with rank >= its own")
            if merged in produced:
                raise ValueError(f"token {merged} produced by more than one merge")
            produced.add(merged)
            if self.tokens[merged] != self.tokens[left] + self.tokens[right]:
                raise ValueError(f"merge {merged} bytes do not match operands")
        if len(self.tokens) != BASE_SIZE + len(self.merges):
            raise ValueError("token count does not match base + merges")


@dataclass
class FrequencyTable:
    """Occurrence counts per token id over one encoded corpus."""

    counts: np.ndarray  # int64, length == vocab size
    total_tokens: int

    def to_csv(self) -> str:
        lines = ["token_id,count"]
        lines += [f"{i},{int(c)}" for i, c in enumerate(self.counts)]
        return "\n".join(lines) + "\n"


@dataclass
class CoverageCurve:
    """Cumulative fraction of corpus occurrences covered by the top-k tokens."""

    ks: list[int]
    fractions: list[float]
    order: list[int] = field(default_factory=list)  # token ids, most frequent first

    def to_csv(self) -> str:
        lines = ["k,cumulative_fraction"]
        lines += [f"{k},{f!r}" for k, f in zip(self.ks, self.fractions)]
        return "\n".join(lines) + "\n"


def _pair_counts(ids: np.ndarray, span: int) -> dict[tuple[int, int], int]:
    """Counts of adjacent pairs (overlapping occurrences counted, as is
    standard for BPE training)."""
    if ids.size < 2:
        return {}
    keys = ids[:-1].astype(np.int64) * span + ids[1:]
    uniq, counts = np.unique(keys, return_counts=True)
    return {(int(k // span), int(k % span)): int(c) for k, c in zip(uniq, counts)}


def _apply_merge(ids: np.ndarray, left: int, right: int, merged: int) -> np.ndarray:
    """Replace non-overlapping, leftmost-first occurrences of (left, right)."""
    if ids.size < 2:
        return ids
    cand = np.where((ids[:-1] == left) & (ids[1:] == right))[0]
    if cand.size == 0:
        return ids
    if left == right:
        kept = []
        last = -2
        for c in cand:
            if c > last + 1:
                kept.append(c)
                last = c
        cand = np.asarray(kept, dtype=np.intp)
    out = ids.copy()
    out[cand] = merged
    return np.delete(out, cand + 1)


def train_bpe(corpus: bytes, target_size: int) -> Vocabulary:
    """Greedy highest-frequency pair merging until ``target_size`` tokens
    exist or no pair repeats. Ties break toward the lexicographically
    smaller (left, right) id pair."""
    if target_size < BASE_SIZE:
        raise ValueError(f"target_size must be >= {BASE_SIZE}, got {target_size}")
    vocab = Vocabulary.base()
    ids = np.frombuffer(corpus, dtype=np.uint8).astype(np.int32)
    while vocab.size < target_size:
        counts = _pair_counts(ids, vocab.size)
        if not counts:
            break
        best_count = max(counts.values())
        if best_count < 2:
            break
        best = min(p for p, c in counts.items() if c == best_count)
        merged = vocab.size
        vocab.tokens.append(vocab.tokens[best[0]] + vocab.tokens[best[1]])
        vocab.merges.append((best[0], best[1], merged))
        ids = _apply_merge(ids, best[0], best[1], merged)
    return vocab


def encode(data: bytes, vocab: Vocabulary) -> np.ndarray:
    """Byte string -> token ids, applying merges in rank order."""
    ids = np.frombuffer(data, dtype=np.uint8).astype(np.int32)
    for left, right, merged in vocab.merges:
        if ids.size < 2:
            break
        ids = _apply_merge(ids, left, right, merged)
    return ids


def decode(ids, vocab: Vocabulary) -> bytes:
    out = []
    for i in np.asarray(ids).reshape(-1):
        i = int(i)
        if i < 0 or i >= vocab.size:
            raise IndexError(f"token id {i} out of range for vocabulary of {vocab.size}")
        out.append(vocab.tokens[i])
    return b"".join(out)


def count_frequencies(corpus: bytes, vocab: Vocabulary) -> FrequencyTable:
    ids = encode(corpus, vocab)
    counts = np.bincount(ids, minlength=vocab.size).astype(np.int64)
    return FrequencyTable(counts=counts, total_tokens=int(ids.size))


def _frequency_order(freq: FrequencyTable) -> np.ndarray:
    """Token ids sorted by descending count, ties broken by lower id."""
    n = len(freq.counts)
    return np.lexsort((np.arange(n), -freq.counts))


def coverage_curve(freq: FrequencyTable) -> CoverageCurve:
    if freq.total_tokens == 0:
        raise EmptyCorpusError("coverage curve needs a nonzero token count")
    order = _frequency_order(freq)
    cum = np.cumsum(freq.counts[order]) / freq.total_tokens
    return CoverageCurve(
        ks=list(range(1, len(order) + 1)),
        fractions=[float(f) for f in cum],
        order=[int(i) for i in order],
    )


def _merge_chain(token_id: int, vocab: Vocabulary) -> set[int]:
    """The token plus every operand needed, recursively, to produce it."""
    chain: set[int] = set()
    stack = [token_id]
    while stack:
        t = stack.pop()
        if t in chain:
            continue
        chain.add(t)
        if t >= BASE_SIZE:
            left, right, _ = vocab.merges[t - BASE_SIZE]
            stack.extend((left, right))
    return chain


def compact_vocab(
    vocab: Vocabulary,
    freq: FrequencyTable,
    size: int | None = None,
    coverage: float | None = None,
) -> Vocabulary:
    """Drop low-frequency non-base tokens.

    Exactly one of ``size`` (total retained token count) or ``coverage``
    (fraction of all token occurrences, base included, that the retained set
    must reach) is given. A retained token's full merge chain is always
    retained with it, so every survivor stays producible; ids re-densify in
    original order, preserving merge ranks.
    """
    if (size is None) == (coverage is None):
        raise ValueError("give exactly one of size= or coverage=")
    if size is not None and size < BASE_SIZE:
        raise ValueError(f"size target must be >= {BASE_SIZE}, got {size}")
    if coverage is not None and not (0.0 < coverage <= 1.0):
        raise ValueError(f"coverage target must be in (0, 1], got {coverage}")

    retained: set[int] = set(range(BASE_SIZE))
    order = _frequency_order(freq)
    if coverage is not None:
        if freq.total_tokens == 0:
            raise EmptyCorpusError("coverage compaction needs a nonzero token count")
        covered = 0
        for t in order:
            t = int(t)
            if covered / freq.total_tokens >= coverage - 1e-12:
                break
            covered += int(freq.counts[t])
            if t >= BASE_SIZE:
                retained |= _merge_chain(t, vocab)
    else:
        for t in order:
            t = int(t)
            if t < BASE_SIZE or t in retained:
                continue
            needed = _merge_chain(t, vocab) - retained
            if len(retained) + len(needed) <= size:
                retained |= needed
            # else: chain does not fit; try later (usually shorter) chains

    old_ids = sorted(retained)
    remap = {old: new for new, old in enumerate(old_ids)}
    new_tokens = [vocab.tokens[i] for i in old_ids]
    new_merges = [
        (remap[l], remap[r], remap[m])
        for (l, r, m) in vocab.merges
        if m in retained
    ]
    out = Vocabulary(tokens=new_tokens, merges=new_merges)
    out.validate()
    return out


def compression_rate(corpus: bytes, vocab: Vocabulary) -> float:
    """Tokens emitted per corpus byte (1.0 for the bare byte vocabulary)."""
    if len(corpus) == 0:
        raise EmptyCorpusError("compression rate needs a nonempty corpus")
    return encode(corpus, vocab).size / len(corpus)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_vocab(vocab: Vocabulary, path) -> None:
    lines = [t.hex() for t in vocab.tokens]
    lines.append("#MERGES")
    lines += [f"{l} {r} {m}" for (l, r, m) in vocab.merges]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_vocab(path) -> Vocabulary:
    tokens: list[bytes] = []
    merges: list[tuple[int, int, int]] = []
    with open(path, "r", encoding="ascii") as fh:
        section = "tokens"
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line == "#MERGES":
                section = "merges"
                continue
            if section == "tokens":
                tokens.append(bytes.fromhex(line))
            else:
                l, r, m = (int(x) for x in line.split())
                merges.append((l, r, m))
    vocab = Vocabulary(tokens=tokens, merges=merges)
    vocab.validate()
    return vocab


def vocab_id_map(child: Vocabulary, parent: Vocabulary) -> list[int]:
    """child id -> parent id, matched by token bytes; used by surgery to
    slice embedding/head rows. Raises if a child token is not in the parent."""
    parent_index = {tok: i for i, tok in enumerate(parent.tokens)}
    out = []
    for i, tok in enumerate(child.tokens):
        if tok not in parent_index:
            raise ValueError(f"child token {i} ({tok!r}) not present in parent vocabulary")
        out.append(parent_index[tok])
    return out
