"""Small decoder-only transformer over [BEV | prompt | answer | world queries].

Every forward pass runs on a sequence padded to ``max_seq_len``. Keeping the
shapes fixed makes each position's result independent of what sits at later
positions down to the last bit, not only up to rounding.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import numerics

PAD, BOS, EOS, SEP = "<pad>", "<bos>", "<eos>", "<sep>"
SPECIALS = (PAD, BOS, EOS, SEP)

SEG_PAD, SEG_BEV, SEG_PROMPT, SEG_ANSWER, SEG_QUERY = 0, 1, 2, 3, 4


class VocabularyError(KeyError):
    pass


class SequenceTooLong(ValueError):
    pass


class Vocabulary:
    def __init__(self, words: Sequence[str]):
        words = list(words)
        if any(w in SPECIALS for w in words):
            raise ValueError("special tokens are reserved")
        self.itos: List[str] = list(SPECIALS) + [w for i, w in enumerate(words) if w not in words[:i]]
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocabulary":
        if tuple(itos[:4]) != SPECIALS:
            raise ValueError("serialized vocabulary must start with the special tokens")
        return cls(itos[4:])

    def __len__(self):
        return len(self.itos)

    @property
    def pad(self):
        return 0

    @property
    def bos(self):
        return 1

    @property
    def eos(self):
        return 2

    @property
    def sep(self):
        return 3

    def tokenize(self, text: str) -> List[int]:
        out = []
        for word in text.split():
            if word not in self.stoi or word in SPECIALS:
                raise VocabularyError(f"unknown word {word!r}")
            out.append(self.stoi[word])
        return out

    def detokenize(self, ids: Sequence[int]) -> str:
        return " ".join(self.itos[i] for i in ids)


@dataclass
class SequenceLayout:
    """Segment spans of one packed sequence; ``segments`` tags every position."""

    n_bev: int
    n_prompt: int  # includes BOS and SEP
    n_answer: int  # includes EOS when teacher forcing
    n_query: int
    length: int  # padded length

    @property
    def text_start(self) -> int:
        return self.n_bev

    @property
    def answer_start(self) -> int:
        return self.n_bev + self.n_prompt

    @property
    def query_start(self) -> int:
        return self.n_bev + self.n_prompt + self.n_answer

    @property
    def used(self) -> int:
        return self.query_start + self.n_query

    def segments(self) -> torch.Tensor:
        tags = torch.full((self.length,), SEG_PAD, dtype=torch.long)
        tags[:self.n_bev] = SEG_BEV
        tags[self.text_start:self.answer_start] = SEG_PROMPT
        tags[self.answer_start:self.query_start] = SEG_ANSWER
        tags[self.query_start:self.used] = SEG_QUERY
        return tags

    def answer_loss_mask(self) -> torch.Tensor:
        """Positions whose next-token target is an answer token (incl. EOS)."""
        mask = torch.zeros(self.length, dtype=torch.bool)
        mask[self.answer_start - 1:self.query_start - 1] = True
        return mask


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, kv_dim: Optional[int] = None):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(kv_dim or dim, 2 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, context=None, mask=None):
        """``mask`` (B or 1, Lq, Lk) is True where attention is allowed."""
        context = x if context is None else context
        B, Lq, D = x.shape
        Lk = context.shape[1]
        hd = D // self.heads
        q = self.q(x).view(B, Lq, self.heads, hd).transpose(1, 2)
        k, v = self.kv(context).view(B, Lk, 2, self.heads, hd).permute(2, 0, 3, 1, 4)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        if mask is not None:
            scores = scores.masked_fill(~mask.unsqueeze(1), float("-inf"))
        att = numerics.softmax(scores, axis=-1)
        y = (att @ v).transpose(1, 2).reshape(B, Lq, D)
        return self.out(y)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, dim)

    def forward(self, x, mask):
        x = x + self.attn(self.ln1(x), mask=mask)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class CausalTransformer(nn.Module):
    """Pre-norm causal transformer with a learned absolute position table."""

    def __init__(self, vocab_size: int, width: int = 96, layers: int = 4, heads: int = 4, max_seq_len: int = 256):
        super().__init__()
        self.max_seq_len = max_seq_len
        self.tok = nn.Embedding(vocab_size, width)
        self.pos = nn.Embedding(max_seq_len, width)
        self.blocks = nn.ModuleList([Block(width, heads) for _ in range(layers)])
        self.ln_f = nn.LayerNorm(width)
        self.head = nn.Linear(width, vocab_size)
        nn.init.normal_(self.tok.weight, std=0.02)
        nn.init.normal_(self.pos.weight, std=0.02)
        causal = torch.tril(torch.ones(max_seq_len, max_seq_len, dtype=torch.bool))
        self.register_buffer("causal", causal, persistent=False)

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return self.tok(ids)

    def forward(self, x: torch.Tensor, valid: Optional[torch.Tensor] = None):
        """x: (B, L, C) embedded inputs (L <= max_seq_len; padded to it internally).

        Returns (logits (B, L, V), hidden (B, L, C)).
        """
        B, L, C = x.shape
        if L > self.max_seq_len:
            raise SequenceTooLong(f"sequence of length {L} exceeds maximum {self.max_seq_len}")
        n = self.max_seq_len
        if valid is None:
            valid = torch.ones(B, L, dtype=torch.bool)
        if L < n:
            x = F.pad(x, (0, 0, 0, n - L))
            valid = F.pad(valid, (0, n - L), value=False)
        h = x + self.pos.weight.unsqueeze(0)
        # causal & key padding; a row always keeps its own position so it is never empty
        mask = self.causal.unsqueeze(0) & (valid.unsqueeze(1) | torch.eye(n, dtype=torch.bool).unsqueeze(0))
        for block in self.blocks:
            h = block(h, mask)
        h = self.ln_f(h)
        logits = self.head(h)
        return logits[:, :L], h[:, :L]


def pack(bev_tokens: torch.Tensor, text_ids: List[List[int]], n_prompt: List[int],
         embed, queries: Optional[torch.Tensor] = None, max_len: int = 256):
    """Assemble per-sample sequences [BEV | prompt | answer | queries].

    ``text_ids[b]`` holds the prompt (with BOS/SEP) followed by the answer.
    Returns (embeddings (B, L, C), valid (B, L), layouts) with L the longest
    used length in the batch.
    """
    B, n_bev, C = bev_tokens.shape
    n_q = 0 if queries is None else queries.shape[1]
    layouts = []
    seqs = []
    for b in range(B):
        ids = torch.tensor(text_ids[b], dtype=torch.long)
        parts = [bev_tokens[b], embed(ids)] if len(ids) else [bev_tokens[b]]
        if n_q:
            parts.append(queries[b])
        seqs.append(torch.cat(parts, dim=0))
        layouts.append(SequenceLayout(n_bev, n_prompt[b], len(ids) - n_prompt[b], n_q, max_len))
    L = max(s.shape[0] for s in seqs)
    if L > max_len:
        raise SequenceTooLong(f"sequence of length {L} exceeds maximum {max_len}")
    emb = torch.stack([F.pad(s, (0, 0, 0, L - s.shape[0])) for s in seqs])
    valid = torch.zeros(B, L, dtype=torch.bool)
    for b, s in enumerate(seqs):
        valid[b, :s.shape[0]] = True
    return emb, valid, layouts


def ntp_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean next-token negative log-likelihood over the masked positions.

    ``logits`` (..., V), ``targets`` and ``mask`` (...). An empty mask gives 0
    and a RuntimeWarning.
    """
    mask = mask.bool()
    if not bool(mask.any()):
        warnings.warn("ntp_loss: empty answer mask, loss defined as 0", RuntimeWarning)
        return logits.sum() * 0.0
    logp = F.log_softmax(logits[mask], dim=-1)
    nll = -logp.gather(-1, targets[mask].unsqueeze(-1)).squeeze(-1)
    return numerics.check_finite(nll.mean(), "ntp loss")


def text_targets(text_ids: List[List[int]], layouts: List[SequenceLayout], L: int):
    """(targets (B, L), mask (B, L)) aligned with the packed sequence positions."""
    B = len(text_ids)
    targets = torch.zeros(B, L, dtype=torch.long)
    mask = torch.zeros(B, L, dtype=torch.bool)
    for b, (ids, lay) in enumerate(zip(text_ids, layouts)):
        ids_t = torch.tensor(ids, dtype=torch.long)
        start = lay.text_start
        targets[b, start:start + len(ids) - 1] = ids_t[1:]
        m = lay.answer_loss_mask()[:L]
        mask[b] = m
    return targets, mask


def prompt_ids(vocab: Vocabulary, prompt: str) -> List[int]:
    return [vocab.bos] + vocab.tokenize(prompt) + [vocab.sep]


def answer_ids(vocab: Vocabulary, answer: str) -> List[int]:
    return vocab.tokenize(answer) + [vocab.eos]


@torch.no_grad()
def greedy_decode(transformer: CausalTransformer, bev_tokens: torch.Tensor, vocab: Vocabulary, prompt: str,
                  max_tokens: int = 64) -> str:
    """Argmax decoding after [BEV | BOS prompt SEP] until EOS or ``max_tokens``.

    ``bev_tokens`` is (L_bev, C) for a single scene.
    """
    ids = prompt_ids(vocab, prompt)
    n_prompt = len(ids)
    out: List[int] = []
    for _ in range(max_tokens):
        emb, valid, layouts = pack(bev_tokens.unsqueeze(0), [ids + out], [n_prompt], transformer.embed_tokens,
                                   max_len=transformer.max_seq_len)
        logits, _ = transformer(emb, valid)
        nxt = int(logits[0, emb.shape[1] - 1].argmax())
        if nxt == vocab.eos:
            break
        out.append(nxt)
    # specials other than EOS are dropped from the text
    return vocab.detokenize([i for i in out if i >= len(SPECIALS)])
