"""Transformer encoder/decoder captioner on region features.

The encoder projects region features to ``d_model`` and applies
``enc_layers`` blocks of (self-attention, add, layer-norm) then (MLP, add,
layer-norm).  Regions carry no positional encoding, so the encoder is
equivariant to region order.  The decoder embeds words with sinusoidal
positions and runs masked self-attention, cross-attention to the (weighted)
memory, and an MLP per block before projecting to vocabulary log-probabilities.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .corpus import BOS, EOS, MAX_CAPTION_LEN, PAD
from .tensor import Parameter, Tensor

NEG_INF = -1e9


@dataclass
class ModelConfig:
    vocab_size: int
    d_in: int = 16
    d_model: int = 32
    heads: int = 2
    d_ff: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    max_len: int = MAX_CAPTION_LEN
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("vocab_size", "d_in", "d_model", "heads", "d_ff", "enc_layers", "dec_layers", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.d_model < 2:
            raise ValueError("d_model must be >= 2 for layer normalisation")

    @classmethod
    def full_scale(cls, vocab_size: int) -> "ModelConfig":
        return cls(vocab_size, d_in=2048, d_model=512, heads=8, d_ff=2048, enc_layers=3, dec_layers=3)

    def to_dict(self) -> dict:
        return asdict(self)


class Module:
    """Collects :class:`Parameter` attributes (recursively) by dotted name."""

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name


def _xavier(rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, bias: bool = True):
        self.weight = Parameter(_xavier(rng, d_in, d_out))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    def __init__(self, d: int, d_ff: int, rng):
        self.fc1 = Linear(d, d_ff, rng)
        self.fc2 = Linear(d_ff, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng):
        self.heads = heads
        self.wq = Linear(d, d, rng, bias=False)
        self.wk = Linear(d, d, rng, bias=False)
        self.wv = Linear(d, d, rng, bias=False)
        self.wo = Linear(d, d, rng, bias=False)

    def __call__(self, x: Tensor, mem: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """``x``: (B, Tq, d); ``mem``: (B or 1, Tk, d); ``mask`` is additive."""
        b, tq, d = x.shape
        bm, tk, _ = mem.shape
        h = self.heads
        dh = d // h
        q = self.wq(x).reshape(b, tq, h, dh).transpose(0, 2, 1, 3)
        k = self.wk(mem).reshape(bm, tk, h, dh).transpose(0, 2, 3, 1)
        v = self.wv(mem).reshape(bm, tk, h, dh).transpose(0, 2, 1, 3)
        scores = (q @ k) * (1.0 / math.sqrt(dh))
        if mask is not None:
            scores = scores + mask
        att = T.softmax(scores, axis=-1)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(b, tq, d)
        return self.wo(out)


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.attn = MultiHeadAttention(cfg.d_model, cfg.heads, rng)
        self.ln1 = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.mlp = MLP(cfg.d_model, cfg.d_ff, rng)
        self.ln2 = LayerNorm(cfg.d_model, cfg.ln_eps)

    def __call__(self, x: Tensor, mask) -> Tensor:
        x = self.ln1(x + self.attn(x, x, mask))
        return self.ln2(x + self.mlp(x))


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads, rng)
        self.ln1 = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.heads, rng)
        self.ln2 = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.mlp = MLP(cfg.d_model, cfg.d_ff, rng)
        self.ln3 = LayerNorm(cfg.d_model, cfg.ln_eps)

    def __call__(self, x: Tensor, mem: Tensor, causal, mem_mask) -> Tensor:
        x = self.ln1(x + self.self_attn(x, x, causal))
        x = self.ln2(x + self.cross_attn(x, mem, mem_mask))
        return self.ln3(x + self.mlp(x))


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    rate = np.power(10000.0, -(2 * (np.arange(d) // 2)) / d)
    angle = pos * rate[None, :]
    return np.where(np.arange(d) % 2 == 0, np.sin(angle), np.cos(angle))


def key_mask(valid: np.ndarray | None) -> np.ndarray | None:
    """Additive attention mask (B, 1, 1, N) from a boolean (B, N) validity array."""
    if valid is None or valid.all():
        return None
    return np.where(valid, 0.0, NEG_INF)[:, None, None, :]


@dataclass
class MemoryBank:
    image_id: str | None
    vectors: Tensor

    @property
    def n_regions(self) -> int:
        return self.vectors.shape[0]


class CaptionModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.input_proj = Linear(c.d_in, c.d_model, rng)
        self.enc = [EncoderLayer(c, rng) for _ in range(c.enc_layers)]
        self.embed = Parameter(rng.normal(scale=c.d_model**-0.5, size=(c.vocab_size, c.d_model)))
        self.dec = [DecoderLayer(c, rng) for _ in range(c.dec_layers)]
        self.head = Linear(c.d_model, c.vocab_size, rng)
        self._positions = sinusoidal_positions(c.max_len + 2, c.d_model)
        self.assign_names()

    # encoder ------------------------------------------------------------------
    def encode_tensor(self, feats: Tensor, valid: np.ndarray | None = None) -> Tensor:
        """(B, N, d_in) features -> (B, N, d_model) memory."""
        if feats.shape[-1] != self.config.d_in:
            raise ValueError(f"feature width {feats.shape[-1]} != configured d_in {self.config.d_in}")
        mask = key_mask(valid)
        x = self.input_proj(feats)
        for layer in self.enc:
            x = layer(x, mask)
        return x

    def encode(self, features, image_id: str | None = None) -> MemoryBank:
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2:
            raise ValueError("features must be an (N, d) matrix")
        out = self.encode_tensor(Tensor(f[None]))
        return MemoryBank(image_id, out.reshape(f.shape[0], self.config.d_model))

    def encode_batch(self, feature_list) -> tuple[Tensor, np.ndarray]:
        """Encode images of possibly different region counts in one padded batch."""
        n_max = max(f.shape[0] for f in feature_list)
        batch = np.zeros((len(feature_list), n_max, self.config.d_in))
        valid = np.zeros((len(feature_list), n_max), dtype=bool)
        for i, f in enumerate(feature_list):
            if f.shape[1] != self.config.d_in:
                raise ValueError(f"feature width {f.shape[1]} != configured d_in {self.config.d_in}")
            batch[i, : f.shape[0]] = f
            valid[i, : f.shape[0]] = True
        return self.encode_tensor(Tensor(batch), valid), valid

    # decoder ------------------------------------------------------------------
    def decoder_logprobs(self, tokens: np.ndarray, memory: Tensor, valid: np.ndarray | None = None) -> Tensor:
        """Log-probabilities (B, T, v) of the next word after each prefix position.

        ``tokens`` is an int array (B, T) starting with BOS; ``memory`` is
        (B, N, d_model), (1, N, d_model) or (N, d_model).
        """
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        b, t = tokens.shape
        if t > self.config.max_len + 1:
            raise ValueError(f"prefix of length {t} exceeds max_len+1={self.config.max_len + 1}")
        if memory.ndim == 2:
            memory = memory.reshape(1, *memory.shape)
        x = self.embed[tokens] + self._positions[:t]
        causal = np.triu(np.full((t, t), NEG_INF), k=1)
        mem_mask = key_mask(valid)
        for layer in self.dec:
            x = layer(x, memory, causal, mem_mask)
        return T.log_softmax(self.head(x), axis=-1)


def pad_captions(captions, max_len: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forcing arrays for id captions.

    Returns ``(inputs, targets, mask)``: inputs start with BOS, targets end
    with EOS, and ``mask`` marks real target positions (words plus EOS).
    Captions longer than ``max_len`` are truncated.
    """
    caps = [list(c)[:max_len] for c in captions]
    t = max(len(c) for c in caps) + 1
    inputs = np.full((len(caps), t), PAD, dtype=np.int64)
    targets = np.full((len(caps), t), PAD, dtype=np.int64)
    mask = np.zeros((len(caps), t))
    for i, c in enumerate(caps):
        inputs[i, 0] = BOS
        inputs[i, 1 : len(c) + 1] = c
        targets[i, : len(c)] = c
        targets[i, len(c)] = EOS
        mask[i, : len(c) + 1] = 1.0
    return inputs, targets, mask
