"""Small decoder-only transformer standing in for the large language model.

It reads the prompt tokens and exposes exactly what the cascade needs: the
next-token logits at the answer slot, the Yes/No probability derived from
them, and per-block hidden states at that slot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Node, no_grad, ops
from .autodiff.ops import _sigmoid
from .nn import ParamModule, glorot, linear


@dataclass
class LlmConfig:
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 96


class LlmSurrogate(ParamModule):
    prefix = "llm."

    def __init__(self, vocab_size: int, yes_id: int, no_id: int,
                 config: LlmConfig | None = None, rng: np.random.Generator | None = None):
        super().__init__()
        self.config = c = config or LlmConfig()
        if c.d_model % c.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if yes_id == no_id or not (0 <= yes_id < vocab_size and 0 <= no_id < vocab_size):
            raise ValueError("yes_id and no_id must be distinct ids inside the vocabulary")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.vocab_size = int(vocab_size)
        self.yes_id, self.no_id = int(yes_id), int(no_id)
        d = c.d_model
        self.tok_emb = self._param("tok_emb", rng.normal(0.0, 0.05, (vocab_size, d)))
        self.pos_emb = self._param("pos_emb", rng.normal(0.0, 0.02, (c.max_len, d)))
        # residual projections are scaled down with depth (GPT-2 convention)
        res_scale = 1.0 / np.sqrt(2 * c.n_blocks)
        self.blocks = []
        for n in range(c.n_blocks):
            p = f"block.{n}."
            self.blocks.append({
                "ln1.g": self._param(p + "ln1.g", np.ones(d)),
                "ln1.b": self._param(p + "ln1.b", np.zeros(d)),
                "Wq": self._param(p + "attn.Wq", glorot(rng, d, d)),
                "Wk": self._param(p + "attn.Wk", glorot(rng, d, d)),
                "Wv": self._param(p + "attn.Wv", glorot(rng, d, d)),
                "Wo": self._param(p + "attn.Wo", glorot(rng, d, d) * res_scale),
                "bo": self._param(p + "attn.bo", np.zeros(d)),
                "ln2.g": self._param(p + "ln2.g", np.ones(d)),
                "ln2.b": self._param(p + "ln2.b", np.zeros(d)),
                "W1": self._param(p + "ff.W1", glorot(rng, d, c.d_ff)),
                "b1": self._param(p + "ff.b1", np.zeros(c.d_ff)),
                "W2": self._param(p + "ff.W2", glorot(rng, c.d_ff, d) * res_scale),
                "b2": self._param(p + "ff.b2", np.zeros(d)),
            })
        self.lnf_g = self._param("lnf.g", np.ones(d))
        self.lnf_b = self._param("lnf.b", np.zeros(d))
        self.lm_head = self._param("lm_head", rng.normal(0.0, 0.02, (d, vocab_size)))

    def _attention(self, x: Node, blk: dict) -> Node:
        B, T, d = x.shape
        H = self.config.n_heads
        dh = d // H

        def heads(w):
            return ops.transpose(ops.reshape(ops.matmul(x, w), (B, T, H, dh)), (0, 2, 1, 3))

        att = ops.attention(heads(blk["Wq"]), heads(blk["Wk"]), heads(blk["Wv"]), causal=True)
        merged = ops.reshape(ops.transpose(att, (0, 2, 1, 3)), (B, T, d))
        return linear(merged, blk["Wo"], blk["bo"])

    def _block(self, x: Node, blk: dict) -> Node:
        x = ops.add(x, self._attention(ops.layer_norm(x, blk["ln1.g"], blk["ln1.b"]), blk))
        h = ops.layer_norm(x, blk["ln2.g"], blk["ln2.b"])
        h = linear(ops.gelu(linear(h, blk["W1"], blk["b1"])), blk["W2"], blk["b2"])
        return ops.add(x, h)

    def _check_tokens(self, tokens, lengths):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if lengths is None:
            lengths = np.full(tokens.shape[0], tokens.shape[1], dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        if tokens.shape[1] == 0 or (lengths < 1).any():
            raise ValueError("empty token sequence")
        if tokens.shape[1] > self.config.max_len or (lengths > tokens.shape[1]).any():
            raise ValueError(
                f"sequence length {tokens.shape[1]} exceeds max_len {self.config.max_len}")
        if tokens.min() < 0 or tokens.max() >= self.vocab_size:
            raise IndexError(f"token id outside vocabulary of size {self.vocab_size}")
        return tokens, lengths

    def forward(self, tokens, lengths=None, all_positions: bool = False):
        """Next-token logits at each sequence's last real position.

        ``tokens`` is (batch, T) right-padded; ``lengths`` gives real lengths
        (default: all T). Returns ``(logits, hidden)`` with logits (batch, V)
        and one (batch, d_model) final-position vector per block. With
        ``all_positions`` the logits are (batch, T, V) instead.
        """
        tokens, lengths = self._check_tokens(tokens, lengths)
        B, T = tokens.shape
        x = ops.add(ops.embedding(self.tok_emb, tokens),
                    ops.select(self.pos_emb, np.arange(T), axis=0))
        last = lengths - 1
        hidden = []
        for blk in self.blocks:
            x = self._block(x, blk)
            hidden.append(ops.gather_positions(x, last))
        if all_positions:
            h = ops.layer_norm(x, self.lnf_g, self.lnf_b)
        else:
            h = ops.layer_norm(hidden[-1], self.lnf_g, self.lnf_b)
        return ops.matmul(h, self.lm_head), hidden

    def predict(self, tokens, lengths, batch_size: int = 256) -> np.ndarray:
        """Yes-probability for each row, without building a graph."""
        tokens = np.asarray(tokens, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        out = []
        with no_grad():
            for s in range(0, len(tokens), batch_size):
                ln = lengths[s:s + batch_size]
                logits, _ = self.forward(tokens[s:s + batch_size, :ln.max()], ln)
                out.append(yes_no_prob_array(logits.values, self.yes_id, self.no_id))
        return np.concatenate(out) if out else np.zeros(0)


def yes_no_prob(logits: Node, yes_id: int, no_id: int) -> Node:
    """exp(a) / (exp(a) + exp(b)) on the Yes/No logits, as sigmoid(a - b)."""
    a = ops.select(logits, yes_id, axis=-1)
    b = ops.select(logits, no_id, axis=-1)
    return ops.sigmoid(ops.sub(a, b))


def yes_no_prob_array(logits: np.ndarray, yes_id: int, no_id: int) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    return _sigmoid(logits[..., yes_id] - logits[..., no_id])


def llm_loss(logits: Node, label_tokens) -> Node:
    """Full-vocabulary cross-entropy of the answer token."""
    return ops.cross_entropy(logits, np.asarray(label_tokens, dtype=np.int64))
