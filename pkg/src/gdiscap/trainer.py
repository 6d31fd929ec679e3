"""Group-wise training: every member of a similar-image group is a target in turn.

Per group, all members are encoded once, each target's memory is weighted by
group attention, and the four losses are computed for every target role in a
single batched decoder pass.  The per-target totals are summed and
backpropagated once.  Stage ``XE`` epochs run before stage ``RL`` epochs and
groups are rebuilt every epoch from ``seed + epoch``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .corpus import BOS, load_dataset
from .decoding import greedy_decode_batch, sample_decode_batch
from .grouping import build_groups
from .losses import (ADAPTIVE_EPS, DISLOSS_MODES, QUARTER, LossBundle, gather, word_positions)
from .metrics import NGramStats, cider
from .model import ModelConfig, pad_captions
from .system import GdisCap, GroupData, prepare_group, save_checkpoint
from .tensor import Adam, Tensor, TrainingError, backward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    dataset: str | None = None
    checkpoint: str | None = None
    log_path: str | None = None
    xe_epochs: int = 15
    rl_epochs: int = 5
    lr: float = 3e-3
    rl_lr: float | None = 3e-5  # RL-stage learning rate; None reuses lr
    batch_groups: int = 1
    k: int = 5
    seed: int = 0
    disloss_mode: str = "literal"
    use_gma: bool = True
    use_disloss: bool = True
    use_memcls: bool = True
    checkpoint_every: int = 0
    min_freq: int = 2
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("batch_groups", "k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.xe_epochs < 0 or self.rl_epochs < 0 or self.xe_epochs + self.rl_epochs < 1:
            raise ValueError("need at least one training epoch")
        if self.disloss_mode not in DISLOSS_MODES:
            raise ValueError(f"disloss_mode must be one of {DISLOSS_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroupLoss:
    bundle: LossBundle
    per_target: dict
    attention: np.ndarray


def _assignment(counts) -> np.ndarray:
    """(n_targets, n_rows) matrix averaging each target's caption rows."""
    out = np.zeros((len(counts), sum(counts)))
    start = 0
    for i, c in enumerate(counts):
        out[i, start : start + c] = 1.0 / c
        start += c
    return out


def process_group(system: GdisCap, data: GroupData, stage: str = "XE", *,
                  disloss_mode: str = "literal", use_disloss: bool = True, use_memcls: bool = True,
                  reward_stats: NGramStats | None = None, rng=None, fixed_alpha=None) -> GroupLoss:
    """Summed loss over every target role of one group (graph kept for backward).

    ``fixed_alpha=(a_d, a_m)`` (per-target arrays) replaces the adaptive
    weights, e.g. to hold them still during a finite-difference check.
    """
    if len(data.image_ids) < 2:
        raise TrainingError("a training group needs at least two images")
    model = system.caption
    max_len = model.config.max_len
    targets = data.targets
    nt = len(targets)
    memory, valid, weighted, att = system.weighted_memory(data.features, targets)
    tvalid = valid[targets]

    # teacher-forced pass over every GT caption of every target
    counts = [len(data.captions[t]) for t in targets]
    rows = [c for t in targets for c in data.captions[t]]
    row_target = np.repeat(np.arange(nt), counts)
    inputs, tgt, mask = pad_captions(rows, max_len)
    logp = model.decoder_logprobs(inputs, weighted[row_target], tvalid[row_target])
    assign = _assignment(counts)
    nll_rows = -(gather(logp, tgt) * mask).sum(axis=1)
    l_xe = (Tensor(assign) @ nll_rows.reshape(-1, 1)).reshape(nt)

    v = model.config.vocab_size
    wd_mask = np.zeros((nt, v))
    for i, w in enumerate(data.w_d):
        wd_mask[i, sorted(int(x) for x in w)] = 1.0
    zeros = Tensor(np.zeros(nt))
    l_d = zeros
    if use_disloss and wd_mask.any():
        pos = word_positions(tgt, mask)
        if disloss_mode == "literal":
            picked = (logp * wd_mask[row_target][:, None, :]).sum(axis=-1)
            d_rows = -(picked * pos).sum(axis=1)
        else:
            gate = pos * wd_mask[row_target[:, None], tgt]
            d_rows = -(gather(logp, tgt) * gate).sum(axis=1)
        l_d = (Tensor(assign) @ d_rows.reshape(-1, 1)).reshape(nt)
    l_m = zeros
    if use_memcls and wd_mask.any():
        logits = system.memcls.logits(weighted, tvalid)
        l_m = -(T.log_sigmoid(logits) * wd_mask).sum(axis=1)

    l_r = zeros
    advantage = np.zeros(nt)
    if stage == "RL":
        if reward_stats is None or rng is None:
            raise TrainingError("RL stage needs reward statistics and an rng")
        frozen = Tensor(weighted.data)
        samples = sample_decode_batch(model, frozen, rng, tvalid)
        greedy = greedy_decode_batch(model, frozen, tvalid)
        for i, t in enumerate(targets):
            refs = data.captions[t]
            advantage[i] = cider(samples[i].tokens, refs, reward_stats) - cider(greedy[i].tokens, refs, reward_stats)
        seqs = [s.sequence() for s in samples]
        if any(seqs):
            width = max(len(s) for s in seqs)
            s_in = np.zeros((nt, width), dtype=np.int64)
            s_tgt = np.zeros((nt, width), dtype=np.int64)
            s_mask = np.zeros((nt, width))
            for i, s in enumerate(seqs):
                s_in[i, : len(s)] = [BOS] + s[:-1] if s else []
                s_tgt[i, : len(s)] = s
                s_mask[i, : len(s)] = 1.0
            lp = model.decoder_logprobs(s_in, weighted, tvalid)
            seq_lp = (gather(lp, s_tgt) * s_mask).sum(axis=1)
            l_r = seq_lp * (-advantage)
    elif stage != "XE":
        raise ValueError(f"unknown stage {stage!r}")

    xe_v, r_v, d_v, m_v = (x.data for x in (l_xe, l_r, l_d, l_m))
    base = xe_v if stage == "XE" else r_v
    a_d = QUARTER * np.abs(base) / np.maximum(np.abs(d_v), ADAPTIVE_EPS) if use_disloss else np.zeros(nt)
    a_m = QUARTER * np.abs(base) / np.maximum(np.abs(m_v), ADAPTIVE_EPS) if use_memcls else np.zeros(nt)
    if fixed_alpha is not None:
        a_d, a_m = (np.broadcast_to(np.asarray(a, dtype=np.float64), (nt,)) for a in fixed_alpha)
    a_c, a_r = (1.0, 0.0) if stage == "XE" else (0.0, 1.0)
    total = (l_d * a_d + l_m * a_m).sum()
    total = total + (l_xe.sum() if stage == "XE" else l_r.sum())

    contrib_d = float((a_d * d_v).sum())
    contrib_m = float((a_m * m_v).sum())
    sd, sm = float(d_v.sum()), float(m_v.sum())
    bundle = LossBundle(
        l_xe=float(xe_v.sum()),
        l_r=float(r_v.sum()),
        l_d=sd,
        l_m=sm,
        alpha_d=contrib_d / sd if sd else 0.0,
        alpha_m=contrib_m / sm if sm else 0.0,
        total_value=total.item(),
        total=total,
    )
    per_target = {
        "l_xe": xe_v, "l_r": r_v, "l_d": d_v, "l_m": m_v,
        "alpha_d": a_d, "alpha_m": a_m, "alpha_c": a_c, "alpha_r": a_r, "advantage": advantage,
    }
    return GroupLoss(bundle, per_target, att.data.copy())


def _merge(bundles) -> dict:
    keys = ("l_xe", "l_r", "l_d", "l_m", "total_value")
    out = {k: float(sum(getattr(b, k) for b in bundles)) for k in keys}
    for a, l in (("alpha_d", "l_d"), ("alpha_m", "l_m")):
        s = out[l]
        out[a] = float(sum(getattr(b, a) * getattr(b, l) for b in bundles) / s) if s else 0.0
    out["total"] = out.pop("total_value")
    return out


@dataclass
class TrainResult:
    system: GdisCap
    vocab: object
    log: list
    groups: list


def train(config: TrainConfig, records=None, vocab=None) -> TrainResult:
    """Run the two-stage schedule and return the trained system and step log."""
    if records is None:
        if config.dataset is None:
            raise ValueError("TrainConfig.dataset is required when no records are given")
        records, vocab = load_dataset(config.dataset, min_freq=config.min_freq)
    records = [r for r in records if r.meta.get("split", "train") == "train"]
    width = records[0].features.shape[1]
    mcfg = ModelConfig(vocab_size=len(vocab), d_in=width, **config.model)
    system = GdisCap(mcfg, seed=config.seed, use_gma=config.use_gma)
    opt = Adam(system.parameters(), lr=config.lr)
    by_id = {r.image_id: r for r in records}
    reward_stats = None
    if config.rl_epochs:
        reward_stats = NGramStats([vocab.encode(c) for c in r.captions] for r in records)

    log_fh = open(config.log_path, "w", encoding="utf-8") if config.log_path else None
    history, last_groups, step = [], [], 0
    try:
        for epoch in range(config.xe_epochs + config.rl_epochs):
            stage = "XE" if epoch < config.xe_epochs else "RL"
            opt.lr = config.lr if stage == "XE" or config.rl_lr is None else config.rl_lr
            groups = build_groups(records, config.k, config.seed + epoch, epoch)
            last_groups = groups
            rng = np.random.default_rng([config.seed, epoch])
            order = rng.permutation(len(groups))
            for start in range(0, len(order), config.batch_groups):
                opt.zero_grad()
                bundles = []
                for gi in order[start : start + config.batch_groups]:
                    data = prepare_group(groups[gi], by_id, vocab)
                    out = process_group(
                        system, data, stage,
                        disloss_mode=config.disloss_mode,
                        use_disloss=config.use_disloss,
                        use_memcls=config.use_memcls,
                        reward_stats=reward_stats, rng=rng,
                    )
                    if not np.isfinite(out.bundle.total_value):
                        snapshot = {"epoch": epoch, "group": list(groups[gi].member_ids),
                                    **out.bundle.log_record(step)}
                        _dump_diagnostic(config, snapshot)
                        raise TrainingError(f"non-finite loss at step {step}: {snapshot}")
                    backward(out.bundle.total)
                    bundles.append(out.bundle)
                opt.step()
                record = {"step": step, **_merge(bundles), "epoch": epoch, "stage": stage,
                          "omega": float(system.gma.omega.data), "bias": float(system.gma.bias.data)}
                history.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
                step += 1
            log.info("epoch %d (%s): total %.4f", epoch, stage,
                     float(np.mean([h["total"] for h in history if h["epoch"] == epoch])))
            if config.checkpoint and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(f"{config.checkpoint}.epoch{epoch + 1}", system, vocab, {"epoch": epoch + 1})
    finally:
        if log_fh:
            log_fh.close()
    if config.checkpoint:
        save_checkpoint(config.checkpoint, system, vocab, {"epochs": config.xe_epochs + config.rl_epochs})
    return TrainResult(system, vocab, history, last_groups)


def _dump_diagnostic(config: TrainConfig, snapshot: dict) -> None:
    if config.checkpoint:
        Path(f"{config.checkpoint}.diagnostic.json").write_text(json.dumps(snapshot, default=str))
