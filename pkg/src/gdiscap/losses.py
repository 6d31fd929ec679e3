"""Cross-entropy, self-critical, distinctive-word and memory-classification losses.

Every per-image loss is averaged over the image's ground-truth captions when
teacher forcing is involved.  ``combine`` rescales the two distinctive losses
so each contributes a quarter of the active base loss; the scale factors are
plain floats, so they carry no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .corpus import BOS, EOS
from .model import CaptionModel, Linear, Module, pad_captions
from .tensor import Tensor

ADAPTIVE_EPS = 1e-8  # floor on the rescaled loss, so the quarter ratio is exact above it
QUARTER = 0.25
STAGES = ("XE", "RL")
DISLOSS_MODES = ("literal", "gated")


@dataclass
class LossWeights:
    stage: str = "XE"
    alpha_d: float | None = None  # None: adaptive
    alpha_m: float | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")

    @property
    def alpha_c(self) -> float:
        return 1.0 if self.stage == "XE" else 0.0

    @property
    def alpha_r(self) -> float:
        return 0.0 if self.stage == "XE" else 1.0


@dataclass
class LossBundle:
    l_xe: float
    l_r: float
    l_d: float
    l_m: float
    alpha_d: float
    alpha_m: float
    total_value: float
    total: Tensor | None = field(default=None, repr=False)

    def log_record(self, step: int) -> dict:
        return {
            "step": step,
            "l_xe": self.l_xe,
            "l_r": self.l_r,
            "l_d": self.l_d,
            "l_m": self.l_m,
            "alpha_d": self.alpha_d,
            "alpha_m": self.alpha_m,
            "total": self.total_value,
        }


class MemClassifier(Module):
    """Mean-pool the weighted memory, project to the vocabulary, sigmoid."""

    def __init__(self, d_model: int, vocab_size: int, seed: int = 0):
        self.proj = Linear(d_model, vocab_size, np.random.default_rng(seed))

    def logits(self, memory: Tensor, valid: np.ndarray | None = None) -> Tensor:
        """``memory`` (N, d) or (B, N, d) -> logits (v,) or (B, v)."""
        if memory.ndim == 2:
            return self.proj(memory.mean(axis=0, keepdims=True)).reshape(-1)
        if valid is None:
            pooled = memory.mean(axis=1)
        else:
            w = valid / valid.sum(axis=1, keepdims=True)
            pooled = (memory * w[:, :, None]).sum(axis=1)
        return self.proj(pooled)

    def probs(self, memory: Tensor) -> Tensor:
        return T.sigmoid(self.logits(memory))


def _memory(memory) -> Tensor:
    if hasattr(memory, "vectors"):
        memory = memory.vectors
    return memory if isinstance(memory, Tensor) else Tensor(np.asarray(memory, dtype=np.float64))


def teacher_forced(model: CaptionModel, memory, captions):
    """Log-probs (C, T, v) for each caption, plus its target ids and mask."""
    inputs, targets, mask = pad_captions(captions, model.config.max_len)
    logp = model.decoder_logprobs(inputs, _memory(memory))
    return logp, targets, mask


def gather(logp: Tensor, ids: np.ndarray) -> Tensor:
    b, t = ids.shape
    return logp[np.arange(b)[:, None], np.arange(t)[None, :], ids]


def xe_loss(model: CaptionModel, memory, gt_captions) -> Tensor:
    """Teacher-forced negative log-likelihood, summed over steps (EOS included)
    and averaged over the ground-truth captions."""
    logp, targets, mask = teacher_forced(model, memory, gt_captions)
    return -(gather(logp, targets) * mask).sum() * (1.0 / len(gt_captions))


def word_positions(targets: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Word positions (EOS excluded) of each teacher-forced caption."""
    return mask * (targets != EOS)


def dis_word_loss(model: CaptionModel, memory, gt_captions, w_d, mode: str = "literal") -> Tensor:
    """Distinctive-word loss, averaged over the ground-truth captions.

    ``literal``: minus the log-probability of every distinctive word at every
    word position.  ``gated``: minus the log-probability of the ground-truth
    word only at positions whose ground-truth word is distinctive.
    """
    if mode not in DISLOSS_MODES:
        raise ValueError(f"disloss mode must be one of {DISLOSS_MODES}")
    words = sorted(int(w) for w in w_d)
    if not words:
        return Tensor(0.0)
    logp, targets, mask = teacher_forced(model, memory, gt_captions)
    pos = word_positions(targets, mask)
    if mode == "literal":
        picked = logp[:, :, words].sum(axis=-1)
        return -(picked * pos).sum() * (1.0 / len(gt_captions))
    gate = pos * np.isin(targets, words)
    return -(gather(logp, targets) * gate).sum() * (1.0 / len(gt_captions))


def memcls_loss(classifier: MemClassifier, memory, w_d) -> Tensor:
    words = sorted(int(w) for w in w_d)
    if not words:
        return Tensor(0.0)
    logits = classifier.logits(_memory(memory))
    return -T.log_sigmoid(logits[words]).sum()


def scst_loss(model: CaptionModel, memory, gt_captions, reward_fn, seed: int = 0):
    """Self-critical loss with the greedy caption as baseline.

    ``reward_fn(tokens) -> float`` scores a generated id sequence against the
    image's references.  Returns ``(loss, sampled_caption, advantage)``.
    """
    from .decoding import greedy_decode, sample_decode

    mem = _memory(memory)
    sample = sample_decode(model, mem, seed)
    greedy = greedy_decode(model, mem)
    advantage = reward_fn(sample.tokens) - reward_fn(greedy.tokens)
    seq = sample.sequence()
    if not seq:
        return Tensor(0.0), sample, advantage
    logp = model.decoder_logprobs(np.array([[BOS] + seq[:-1]]), mem)
    lp = gather(logp, np.array([seq])).sum()
    return lp * (-advantage), sample, advantage


def adaptive_alpha(base: float, loss: float) -> float:
    return QUARTER * abs(base) / max(abs(loss), ADAPTIVE_EPS)


def combine(l_xe, l_r, l_d, l_m, weights: LossWeights) -> LossBundle:
    """Weighted sum of the four losses for one target image."""
    parts = [x if isinstance(x, Tensor) else Tensor(0.0 if x is None else x) for x in (l_xe, l_r, l_d, l_m)]
    xe, r, d, m = parts
    base = xe.item() if weights.stage == "XE" else r.item()
    a_d = adaptive_alpha(base, d.item()) if weights.alpha_d is None else weights.alpha_d
    a_m = adaptive_alpha(base, m.item()) if weights.alpha_m is None else weights.alpha_m
    total = d * a_d + m * a_m
    if weights.stage == "XE":
        total = total + xe
    else:
        total = total + r
    return LossBundle(xe.item(), r.item(), d.item(), m.item(), a_d, a_m, total.item(), total)
