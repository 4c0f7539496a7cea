"""Client-partitioned corpora: synthetic generation, file ingestion,
vocabulary construction and fixed-length encoding."""

from __future__ import annotations

import collections
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from fedsi.rng import stream

PAD, EOS, OOV = "<pad>", "<eos>", "<oov>"
PAD_ID, EOS_ID, OOV_ID = 0, 1, 2
RESERVED = (PAD, EOS, OOV)

TOKENIZERS = ("whitespace", "char")


class CorpusFormatError(ValueError):
    pass


def tokenize(line: str, tokenizer: str = "whitespace") -> list[str]:
    if tokenizer == "whitespace":
        return line.split()
    if tokenizer == "char":
        return [ch for ch in line if not ch.isspace()]
    raise ValueError(f"unknown tokenizer {tokenizer!r}")


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    tokenizer: str = "whitespace"
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tokens[:3] != RESERVED:
            raise ValueError("vocabulary must start with the reserved PAD, EOS, OOV tokens")
        if len(self.tokens) < 4:
            raise ValueError("vocabulary needs at least one non-reserved token")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate vocabulary entries")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    pad_id = PAD_ID
    eos_id = EOS_ID
    oov_id = OOV_ID

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, OOV_ID)


def build_vocab(corpus: Mapping[str, list[str]] | Iterable[str], size: int, tokenizer: str = "whitespace") -> Vocab:
    """Keep the ``size - 3`` most frequent tokens, ties broken lexicographically."""
    if size <= 3:
        raise ValueError("vocabulary size must exceed the 3 reserved ids")
    lines = (l for ls in corpus.values() for l in ls) if isinstance(corpus, Mapping) else corpus
    counts = collections.Counter(t for line in lines for t in tokenize(line, tokenizer))
    for r in RESERVED:
        counts.pop(r, None)
    if not counts:
        raise ValueError("corpus contains no tokens")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab(RESERVED + tuple(t for t, _ in ranked[: size - 3]), tokenizer)


def encode(line: str, vocab: Vocab, max_seq_len: int) -> np.ndarray:
    """Ids + EOS, truncated (dropping EOS if needed) then PAD-filled to ``max_seq_len``."""
    if max_seq_len < 2:
        raise ValueError("max_seq_len must be >= 2")
    ids = [vocab.id(t) for t in tokenize(line, vocab.tokenizer)] + [EOS_ID]
    ids = ids[:max_seq_len]
    out = np.full(max_seq_len, PAD_ID, dtype=np.int64)
    out[: len(ids)] = ids
    return out


def decode(ids: Iterable[int], vocab: Vocab) -> list[str]:
    """Tokens up to the first EOS/PAD; OOV stays as the OOV marker."""
    out = []
    for i in ids:
        if i in (PAD_ID, EOS_ID):
            break
        out.append(vocab.tokens[i])
    return out


# --------------------------------------------------------------------------- #
# Federated datasets
# --------------------------------------------------------------------------- #


@dataclass
class FederatedDataset:
    """Encoded sequences per client, with a disjoint held-out client set."""

    clients: dict[str, np.ndarray]
    vocab: Vocab
    train_ids: list[str]
    eval_ids: list[str]

    def __post_init__(self):
        for cid, seqs in self.clients.items():
            if len(seqs) == 0:
                raise ValueError(f"client {cid!r} has no sequences")
            if seqs.max() >= len(self.vocab):
                raise ValueError(f"client {cid!r} has ids outside the vocabulary")

    def eval_sequences(self, limit: int | None = None) -> np.ndarray:
        seqs = np.concatenate([self.clients[c] for c in self.eval_ids])
        return seqs if limit is None else seqs[:limit]

    def train_sequences(self) -> np.ndarray:
        return np.concatenate([self.clients[c] for c in self.train_ids])


def heldout_split(client_ids: list[str], fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Deterministically hold out ``ceil(fraction * n)`` clients (at least one
    stays in training)."""
    ids = sorted(client_ids)
    if fraction <= 0:
        return ids, []
    n_eval = min(len(ids) - 1, int(np.ceil(fraction * len(ids))))
    perm = stream(seed, "heldout").permutation(len(ids))
    eval_set = {ids[i] for i in perm[:n_eval]}
    return [c for c in ids if c not in eval_set], [c for c in ids if c in eval_set]


def build_federated(raw: Mapping[str, list[str]], vocab: Vocab, max_seq_len: int,
                    train_ids: list[str], eval_ids: list[str]) -> FederatedDataset:
    """Encode every client; clients left without any tokens are dropped."""
    clients = {}
    for cid, lines in raw.items():
        seqs = [encode(l, vocab, max_seq_len) for l in lines if tokenize(l, vocab.tokenizer)]
        if seqs:
            clients[cid] = np.stack(seqs)
    return FederatedDataset(
        clients, vocab, [c for c in train_ids if c in clients], [c for c in eval_ids if c in clients]
    )


def federated_from_raw(raw: Mapping[str, list[str]], vocab_size: int, max_seq_len: int,
                       tokenizer: str = "whitespace", eval_fraction: float = 0.1,
                       seed: int = 0) -> FederatedDataset:
    """Hold out clients, build the vocabulary on training clients only, encode."""
    train_ids, eval_ids = heldout_split(list(raw), eval_fraction, seed)
    vocab = build_vocab([l for c in train_ids for l in raw[c]], vocab_size, tokenizer)
    return build_federated(raw, vocab, max_seq_len, train_ids, eval_ids)


def load_partitioned(path: str | Path) -> dict[str, list[str]]:
    """Read ``client_id<TAB>text`` lines; repeated ids append in file order."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise CorpusFormatError(f"{path}: empty corpus file")
    out: dict[str, list[str]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line:
            continue
        cid, sep, body = line.partition("\t")
        if not sep:
            raise CorpusFormatError(f"{path}:{lineno}: missing tab separator between client id and text")
        if not cid:
            raise CorpusFormatError(f"{path}:{lineno}: empty client id")
        out.setdefault(cid, []).append(body)
    return out


def write_partitioned(raw: Mapping[str, list[str]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cid, lines in raw.items():
            for line in lines:
                fh.write(f"{cid}\t{line}\n")


# --------------------------------------------------------------------------- #
# Synthetic corpus
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class SyntheticConfig:
    """Bigram-chain text generator.

    Each client mixes a shared transition matrix with its own: ``alpha=0``
    gives iid clients, ``alpha=1`` fully client-specific ones.
    """

    n_words: int = 60
    alpha: float = 0.3
    concentration: float = 0.1
    min_len: int = 4
    max_len: int = 18
    min_lines: int = 10
    max_lines: int = 40

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("synthetic.alpha must lie in [0, 1]")
        if self.n_words < 1 or self.concentration <= 0:
            raise ValueError("synthetic.n_words >= 1 and synthetic.concentration > 0 required")
        if not 1 <= self.min_len <= self.max_len or not 1 <= self.min_lines <= self.max_lines:
            raise ValueError("synthetic length/line bounds must satisfy 1 <= min <= max")


def _transitions(rng: np.random.Generator, n: int, concentration: float) -> tuple[np.ndarray, np.ndarray]:
    # Zipf-tilted Dirichlet rows: sparse successors, skewed unigram frequencies
    base = 1.0 / np.arange(1, n + 1)
    base = concentration * n * base / base.sum()
    start = rng.dirichlet(base)
    rows = np.stack([rng.dirichlet(base[rng.permutation(n)]) for _ in range(n)])
    return start, rows


def generate_synthetic(n_clients: int, cfg: SyntheticConfig = SyntheticConfig(), seed: int = 0) -> dict[str, list[str]]:
    """Raw text per client, deterministic in ``seed``."""
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    cfg.validate()
    words = np.array([f"w{i}" for i in range(cfg.n_words)])
    shared_start, shared = _transitions(stream(seed, "shared"), cfg.n_words, cfg.concentration)
    out = {}
    width = len(str(n_clients - 1))
    for c in range(n_clients):
        rng = stream(seed, "client", c)
        own_start, own = _transitions(rng, cfg.n_words, cfg.concentration)
        start = (1 - cfg.alpha) * shared_start + cfg.alpha * own_start
        trans = (1 - cfg.alpha) * shared + cfg.alpha * own
        cdf = np.cumsum(trans, axis=1)
        start_cdf = np.cumsum(start)
        lines = []
        for _ in range(int(rng.integers(cfg.min_lines, cfg.max_lines + 1))):
            length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
            u = rng.random(length)
            tok = min(int(np.searchsorted(start_cdf, u[0] * start_cdf[-1])), cfg.n_words - 1)
            seq = [tok]
            for k in range(1, length):
                row = cdf[tok]
                tok = min(int(np.searchsorted(row, u[k] * row[-1])), cfg.n_words - 1)
                seq.append(tok)
            lines.append(" ".join(words[seq]))
        out[f"client{c:0{width}d}"] = lines
    return out
