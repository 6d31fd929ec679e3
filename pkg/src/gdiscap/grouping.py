"""Similar-image groups built from retrieval embeddings.

A group is a seed target plus its ``k`` nearest neighbours (cosine similarity)
among the images still in the pool; all ``k + 1`` members are then removed so
no image lands in two regular groups of the same epoch.  When fewer than
``k + 1`` images remain, each leftover image becomes the target of its own
group whose neighbours come from the whole dataset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class GroupingError(ValueError):
    pass


@dataclass(frozen=True)
class SimilarImageGroup:
    member_ids: tuple
    epoch: int = 0
    leftover: bool = False

    def __post_init__(self):
        if len(set(self.member_ids)) != len(self.member_ids):
            raise GroupingError(f"duplicate members in group {self.member_ids}")

    @property
    def k(self) -> int:
        return len(self.member_ids) - 1

    @property
    def target_roles(self) -> tuple:
        """Member positions that act as targets (leftover groups: only the seed)."""
        return (0,) if self.leftover else tuple(range(len(self.member_ids)))


def knn_retrieve(target: np.ndarray, pool_ids, pool: np.ndarray, k: int) -> list:
    """Ids of the ``k`` pool rows most cosine-similar to ``target``.

    Ordered by descending similarity; ties go to the smaller id.
    """
    pool_ids = list(pool_ids)
    if k > len(pool_ids):
        raise GroupingError(f"pool of {len(pool_ids)} images cannot supply k={k} neighbours")
    pool = np.asarray(pool, dtype=np.float64)
    norms = np.linalg.norm(pool, axis=1) * np.linalg.norm(target)
    sims = np.divide(pool @ target, norms, out=np.zeros(len(pool_ids)), where=norms > 0)
    order = sorted(range(len(pool_ids)), key=lambda i: (-sims[i], pool_ids[i]))
    return [pool_ids[i] for i in order[:k]]


def build_groups(records, k: int = 5, seed: int = 0, epoch: int = 0) -> list[SimilarImageGroup]:
    ids = sorted(r.image_id for r in records)
    if len(ids) < k + 1:
        raise GroupingError(f"dataset of {len(ids)} images is smaller than k+1={k + 1}")
    emb = {r.image_id: r.embedding for r in records}
    rng = np.random.default_rng(seed)
    pool = list(ids)
    groups = []
    while len(pool) >= k + 1:
        target = pool[int(rng.integers(len(pool)))]
        rest = [i for i in pool if i != target]
        nbrs = knn_retrieve(emb[target], rest, np.stack([emb[i] for i in rest]), k)
        groups.append(SimilarImageGroup((target, *nbrs), epoch))
        taken = set(nbrs) | {target}
        pool = [i for i in pool if i not in taken]
    for target in pool:
        rest = [i for i in ids if i != target]
        nbrs = knn_retrieve(emb[target], rest, np.stack([emb[i] for i in rest]), k)
        groups.append(SimilarImageGroup((target, *nbrs), epoch, leftover=True))
    return groups


def target_group_index(groups) -> dict:
    """Map each image id to ``(group, position)`` of the role it is captioned in.

    Regular-group membership wins; leftover groups supply their seed target.
    """
    out = {}
    for g in groups:
        if g.leftover:
            continue
        for pos, iid in enumerate(g.member_ids):
            out.setdefault(iid, (g, pos))
    for g in groups:
        if g.leftover:
            out.setdefault(g.member_ids[0], (g, 0))
    return out


def write_groups(groups, path) -> None:
    lines = [
        json.dumps({"epoch": g.epoch, "members": list(g.member_ids), "leftover": g.leftover})
        for g in groups
    ]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_groups(path) -> list[SimilarImageGroup]:
    groups = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                groups.append(SimilarImageGroup(tuple(obj["members"]), int(obj["epoch"]), bool(obj["leftover"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise GroupingError(f"{path}:{lineno}: malformed group line") from exc
    return groups
