"""Greedy, beam and sampled caption generation from a (weighted) memory."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import BOS, EOS
from .model import CaptionModel, MemoryBank
from .tensor import Tensor, no_grad


@dataclass
class Caption:
    tokens: list[int]
    token_logprobs: list[float] = field(default_factory=list)
    finished: bool = True

    @property
    def logprob(self) -> float:
        return float(sum(self.token_logprobs))

    @property
    def empty(self) -> bool:
        return not self.tokens

    def sequence(self) -> list[int]:
        """Generated ids including the closing EOS when one was produced."""
        return self.tokens + ([EOS] if self.finished else [])


@dataclass
class DecoderState:
    memory: Tensor
    prefix: list[int] = field(default_factory=lambda: [BOS])
    valid: np.ndarray | None = None


def _memory3(memory) -> Tensor:
    if isinstance(memory, MemoryBank):
        memory = memory.vectors
    if not isinstance(memory, Tensor):
        memory = Tensor(np.asarray(memory, dtype=np.float64))
    if memory.ndim == 2:
        memory = memory.reshape(1, *memory.shape)
    return memory


def decode_distribution(model: CaptionModel, state: DecoderState) -> np.ndarray:
    """Next-word probability vector for the prefix held in ``state``."""
    if not state.prefix or state.prefix[0] != BOS:
        raise ValueError("decoder prefix must start with BOS")
    with no_grad():
        logp = model.decoder_logprobs(np.array([state.prefix]), _memory3(state.memory), state.valid)
    return np.exp(logp.data[0, -1])


def _step_logprobs(model, prefixes, memory, valid) -> np.ndarray:
    return model.decoder_logprobs(prefixes, memory, valid).data[:, -1]


def greedy_decode_batch(model: CaptionModel, memory, valid=None, max_len: int | None = None) -> list[Caption]:
    memory = _memory3(memory)
    max_len = model.config.max_len if max_len is None else max_len
    b = memory.shape[0]
    prefixes = np.full((b, 1), BOS, dtype=np.int64)
    caps = [Caption([], [], False) for _ in range(b)]
    live = np.ones(b, dtype=bool)
    with no_grad():
        for _ in range(max_len + 1):
            logp = _step_logprobs(model, prefixes, memory, valid)
            nxt = logp.argmax(axis=1)
            for i in np.flatnonzero(live):
                w = int(nxt[i])
                caps[i].token_logprobs.append(float(logp[i, w]))
                if w == EOS:
                    caps[i].finished = True
                    live[i] = False
                elif len(caps[i].tokens) < max_len:
                    caps[i].tokens.append(w)
                else:
                    caps[i].token_logprobs.pop()
                    live[i] = False
            if not live.any():
                break
            prefixes = np.concatenate([prefixes, nxt[:, None]], axis=1)
    return caps


def greedy_decode(model: CaptionModel, memory, max_len: int | None = None) -> Caption:
    """Argmax word per step from BOS until EOS or ``max_len`` words."""
    return greedy_decode_batch(model, memory, None, max_len)[0]


def sample_decode_batch(model, memory, rng, valid=None, max_len: int | None = None,
                        temperature: float = 1.0) -> list[Caption]:
    memory = _memory3(memory)
    max_len = model.config.max_len if max_len is None else max_len
    b = memory.shape[0]
    prefixes = np.full((b, 1), BOS, dtype=np.int64)
    caps = [Caption([], [], False) for _ in range(b)]
    live = np.ones(b, dtype=bool)
    with no_grad():
        for step in range(max_len + 1):
            logp = _step_logprobs(model, prefixes, memory, valid)
            if temperature <= 0:
                nxt = logp.argmax(axis=1)
            else:
                z = logp / temperature
                p = np.exp(z - z.max(axis=1, keepdims=True))
                cdf = np.cumsum(p, axis=1)
                u = rng.random(b) * cdf[:, -1]
                nxt = np.array([min(int(np.searchsorted(cdf[i], u[i], side="right")), p.shape[1] - 1)
                                for i in range(b)])
            if step == max_len:
                # length budget exhausted: only EOS may still be emitted
                nxt = np.where(nxt == EOS, EOS, -1)
            for i in np.flatnonzero(live):
                w = int(nxt[i])
                if w == -1:
                    live[i] = False
                    continue
                caps[i].token_logprobs.append(float(logp[i, w]))
                if w == EOS:
                    caps[i].finished = True
                    live[i] = False
                else:
                    caps[i].tokens.append(w)
            if not live.any():
                break
            prefixes = np.concatenate([prefixes, np.maximum(nxt, 0)[:, None]], axis=1)
    return caps


def sample_decode(model: CaptionModel, memory, seed: int, max_len: int | None = None,
                  temperature: float = 1.0) -> Caption:
    """Multinomial sample per step; reproducible for a given ``seed``."""
    rng = np.random.default_rng(seed)
    return sample_decode_batch(model, memory, rng, None, max_len, temperature)[0]


def beam_decode(model: CaptionModel, memory, beam: int, max_len: int | None = None) -> Caption:
    """Beam search ranked by cumulative log-probability.

    Finished hypotheses are scored by mean log-probability per emitted token
    (EOS included); the best one is returned.  ``beam=1`` follows the greedy
    path exactly.
    """
    if beam < 1:
        raise ValueError("beam width must be >= 1")
    memory = _memory3(memory)
    max_len = model.config.max_len if max_len is None else max_len
    live = [([BOS], [])]
    done: list[Caption] = []
    with no_grad():
        for step in range(max_len + 1):
            prefixes = np.array([p for p, _ in live])
            mem = Tensor(np.broadcast_to(memory.data, (len(live), *memory.shape[1:])))
            logp = _step_logprobs(model, prefixes, mem, None)
            cands = []
            for i, (prefix, lps) in enumerate(live):
                base = sum(lps)
                for w in np.argsort(-logp[i], kind="stable")[:beam]:
                    cands.append((base + logp[i, w], i, int(w)))
            cands.sort(key=lambda c: -c[0])
            nxt, cut = [], set()
            for _, i, w in cands[:beam]:
                prefix, lps = live[i]
                if w == EOS:
                    done.append(Caption(prefix[1:], lps + [float(logp[i, w])], True))
                elif step == max_len:
                    if i not in cut:
                        cut.add(i)
                        done.append(Caption(prefix[1:], list(lps), False))
                else:
                    nxt.append((prefix + [w], lps + [float(logp[i, w])]))
            live = nxt
            if len(done) >= beam or not live:
                break
    if not done:
        done = [Caption(p[1:], lps, False) for p, lps in live]
    return max(done, key=lambda c: c.logprob / max(len(c.token_logprobs), 1))
