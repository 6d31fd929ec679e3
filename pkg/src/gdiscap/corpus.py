"""Image records, tokenisation, vocabulary and dataset files.

Dataset files are JSON Lines, one image per line::

    {"image_id": "img0003", "features": [[...], ...], "captions": ["a dog ..."],
     "embedding": [...], "meta": {...}}

``meta`` is optional and free-form; the synthetic generator uses it to record
the split, theme and planted unique region of each image.  Features may live in
a binary sidecar (``<stem>.gdf``), in which case ``features`` is
``{"ref": row_offset}`` where ``row_offset`` counts feature rows written before
the image's block.
"""

from __future__ import annotations

import json
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
MAX_CAPTION_LEN = 20

SIDECAR_MAGIC = b"GDF1"


class DatasetError(ValueError):
    """A dataset file or record violates the expected schema."""


_SPLIT_RE = re.compile(r"[^\w\s]|_")


def tokenize(text: str) -> list[str]:
    """Lowercase, treat punctuation as whitespace, and split."""
    return _SPLIT_RE.sub(" ", text.lower()).split()


@dataclass
class ImageRecord:
    image_id: str
    features: np.ndarray
    captions: list[list[str]]
    embedding: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_regions(self) -> int:
        return self.features.shape[0]

    def validate(self, width: int | None = None) -> None:
        iid = self.image_id
        f = self.features
        if f.ndim != 2 or f.shape[0] < 1:
            raise DatasetError(f"{iid}: field 'features' must be a non-empty matrix")
        if width is not None and f.shape[1] != width:
            raise DatasetError(f"{iid}: field 'features' has width {f.shape[1]}, expected {width}")
        if not np.all(np.isfinite(f)):
            raise DatasetError(f"{iid}: non-finite value in field 'features'")
        if not self.captions:
            raise DatasetError(f"{iid}: field 'captions' must be non-empty")
        for cap in self.captions:
            if not cap:
                raise DatasetError(f"{iid}: field 'captions' has an empty caption after tokenization")
        if self.embedding.ndim != 1 or not np.all(np.isfinite(self.embedding)):
            raise DatasetError(f"{iid}: field 'embedding' must be a finite vector")
        if np.linalg.norm(self.embedding) == 0:
            raise DatasetError(f"{iid}: field 'embedding' has zero norm")


class Vocabulary:
    """Token/id mapping with reserved ids PAD=0, BOS=1, EOS=2, UNK=3."""

    def __init__(self, tokens):
        self.id_to_token = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        if len(self) < 5:
            raise ValueError("vocabulary needs at least one non-reserved token")

    @classmethod
    def build(cls, captions, min_freq: int = 2) -> "Vocabulary":
        counts = Counter(tok for cap in captions for tok in cap)
        return cls(sorted(t for t, c in counts.items() if c >= min_freq))

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, tokens) -> list[int]:
        get = self.token_to_id.get
        return [get(t, UNK) for t in tokens]

    def decode(self, ids) -> list[str]:
        out = []
        for i in ids:
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.id_to_token[i])
        return out


@dataclass(frozen=True)
class DistinctiveWordSet:
    words: frozenset

    @property
    def u(self) -> int:
        return len(self.words)

    def __iter__(self):
        return iter(sorted(self.words, key=str))

    def __contains__(self, w) -> bool:
        return w in self.words


def _is_reserved(tok) -> bool:
    if isinstance(tok, (int, np.integer)):
        return int(tok) < len(RESERVED)
    return tok in RESERVED


def distinctive_words(target_caps, similar_caps) -> DistinctiveWordSet:
    """Words of the target's captions that no similar image's caption uses.

    Captions may be token strings or vocabulary ids; reserved tokens (and so
    UNK) never count as distinctive.
    """
    target = {t for cap in target_caps for t in cap}
    others = {t for caps in similar_caps for cap in caps for t in cap}
    return DistinctiveWordSet(frozenset(t for t in target - others if not _is_reserved(t)))


# ---------------------------------------------------------------------------
# file I/O


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".gdf")


def _read_sidecar(path: Path) -> dict[int, np.ndarray]:
    raw = path.read_bytes()
    if raw[:4] != SIDECAR_MAGIC:
        raise DatasetError(f"{path}: bad sidecar header")
    blocks, pos, row = {}, 4, 0
    while pos < len(raw):
        if pos + 8 > len(raw):
            raise DatasetError(f"{path}: truncated block header at byte {pos}")
        n, d = struct.unpack_from("<II", raw, pos)
        pos += 8
        nbytes = 8 * n * d
        if pos + nbytes > len(raw):
            raise DatasetError(f"{path}: truncated block at byte {pos}")
        blocks[row] = np.frombuffer(raw, dtype="<f8", count=n * d, offset=pos).reshape(n, d).copy()
        pos += nbytes
        row += n
    return blocks


def _record_from_json(obj: dict, lineno: int, sidecar) -> ImageRecord:
    if not isinstance(obj, dict):
        raise DatasetError(f"line {lineno}: record must be a JSON object")
    for key in ("image_id", "features", "captions", "embedding"):
        if key not in obj:
            where = obj.get("image_id", f"line {lineno}")
            raise DatasetError(f"{where}: missing field {key!r}")
    iid = obj["image_id"]
    if not isinstance(iid, str):
        raise DatasetError(f"line {lineno}: image_id must be a string")
    feats = obj["features"]
    try:
        if isinstance(feats, dict):
            if sidecar is None:
                raise DatasetError(f"{iid}: field 'features' references a missing sidecar")
            try:
                feats = sidecar[int(feats["ref"])]
            except (KeyError, TypeError) as exc:
                raise DatasetError(f"{iid}: field 'features' has a bad sidecar ref") from exc
        features = np.array(feats, dtype=np.float64)
        embedding = np.array(obj["embedding"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DatasetError):
            raise
        raise DatasetError(f"{iid}: field features/embedding is not numeric") from exc
    caps = obj["captions"]
    if not isinstance(caps, list) or not all(isinstance(c, str) for c in caps):
        raise DatasetError(f"{iid}: field 'captions' must be a list of strings")
    rec = ImageRecord(iid, features, [tokenize(c) for c in caps], embedding, dict(obj.get("meta", {})))
    rec.validate()
    rec.embedding = rec.embedding / np.linalg.norm(rec.embedding)
    return rec


def read_records(path) -> list[ImageRecord]:
    path = Path(path)
    side = sidecar_path(path)
    sidecar = _read_sidecar(side) if side.exists() else None
    records, seen, width = [], set(), None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            rec = _record_from_json(obj, lineno, sidecar)
            if rec.image_id in seen:
                raise DatasetError(f"{rec.image_id}: duplicate image_id")
            width = rec.features.shape[1] if width is None else width
            rec.validate(width)
            seen.add(rec.image_id)
            records.append(rec)
    if not records:
        raise DatasetError(f"{path}: no records")
    return records


def load_dataset(path, min_freq: int = 2, split: str | None = None):
    """Read and validate a dataset file; return ``(records, vocabulary)``.

    The vocabulary is built from training captions only (records whose
    ``meta["split"]`` is absent or ``"train"``).  ``split`` filters the
    returned records.
    """
    records = read_records(path)
    train_caps = [c for r in records if r.meta.get("split", "train") == "train" for c in r.captions]
    vocab = Vocabulary.build(train_caps, min_freq=min_freq)
    if split is not None:
        records = [r for r in records if r.meta.get("split", "train") == split]
    return records, vocab


def _fmt_features(f: np.ndarray) -> list:
    return [[float(x) for x in row] for row in f]


def write_dataset(records, path, sidecar: bool = False) -> None:
    path = Path(path)
    lines, blobs, row = [], [SIDECAR_MAGIC], 0
    for r in records:
        obj = {"image_id": r.image_id}
        if sidecar:
            obj["features"] = {"ref": row}
            n, d = r.features.shape
            blobs.append(struct.pack("<II", n, d))
            blobs.append(np.ascontiguousarray(r.features, dtype="<f8").tobytes())
            row += n
        else:
            obj["features"] = _fmt_features(r.features)
        obj["captions"] = [" ".join(c) for c in r.captions]
        obj["embedding"] = [float(x) for x in r.embedding]
        if r.meta:
            obj["meta"] = r.meta
        lines.append(json.dumps(obj, separators=(",", ":")))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if sidecar:
        sidecar_path(path).write_bytes(b"".join(blobs))


# ---------------------------------------------------------------------------
# synthetic corpus

_NOUNS = (
    "dog cat horse cow sheep bird kite frisbee bus train car truck bike boat plane "
    "hat tie umbrella bench table chair sofa bed clock vase lamp cake pizza apple "
    "banana orange bottle cup bowl knife phone laptop book ball bat glove racket "
    "skateboard surfboard tree fence house tower bridge flag sign tent rock river "
    "hill cloud kid man woman girl boy fountain statue wagon barrel ladder"
).split()

_TEMPLATES = (
    "a {} and a {} with a {}",
    "a {} with a {} near a {}",
    "the {} next to a {} and a {}",
    "a {} beside a {} and a {}",
    "there is a {} a {} and a {}",
)


def concept_words(n: int) -> list[str]:
    if n <= len(_NOUNS):
        return list(_NOUNS[:n])
    return list(_NOUNS) + [f"thing{i}" for i in range(n - len(_NOUNS))]


def synth_generate(
    seed: int,
    n_images: int,
    n_regions: int = 5,
    d: int = 16,
    n_concepts: int = 36,
    *,
    n_unique: int | None = None,
    theme_size: int = 6,
    n_captions: int = 5,
    unique_mentions: int = 2,
    noise: float = 0.15,
    test_fraction: float = 0.0,
) -> list[ImageRecord]:
    """Generate a corpus whose images each carry one planted distinctive region.

    Concepts are split into a common pool and a unique pool.  Images come in
    themes of ``theme_size``: every image of a theme shows the same
    ``n_regions - 1`` common concepts plus one unique concept that no other
    image of the theme shows.  Unique concepts are reused across themes so a
    held-out theme's distinctive words are still in the training vocabulary.
    Region features are concept centres plus Gaussian noise; the unique region
    is placed at a random index (``meta["unique_region"]``).  Each image gets
    ``n_captions`` templated captions of three concepts, and exactly
    ``unique_mentions`` of them name the unique concept.  Embeddings are the
    normalised mean of the image's concept centres.
    """
    if n_unique is None:
        n_unique = n_concepts // 3
    n_common = n_concepts - n_unique
    if n_images < 1 or n_regions < 2 or d < 1 or n_captions < 1:
        raise ValueError("n_images, d and n_captions must be >= 1 and n_regions >= 2")
    if n_unique < theme_size:
        raise ValueError(f"need at least theme_size={theme_size} unique concepts, got {n_unique}")
    if n_common < n_regions - 1:
        raise ValueError(f"need at least {n_regions - 1} common concepts, got {n_common}")
    if not 1 <= unique_mentions <= n_captions:
        raise ValueError("unique_mentions must lie in [1, n_captions]")
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError("test_fraction must lie in [0, 1)")

    rng = np.random.default_rng(seed)
    words = concept_words(n_concepts)
    centers = rng.normal(size=(n_concepts, d))
    common_ids = np.arange(n_common)
    unique_ids = np.arange(n_common, n_concepts)

    n_themes = -(-n_images // theme_size)
    n_test_themes = int(round(test_fraction * n_themes))
    per_caption = min(3, n_regions - 1)
    records = []
    for img in range(n_images):
        theme, slot = divmod(img, theme_size)
        if slot == 0:
            pool = rng.choice(common_ids, size=n_regions - 1, replace=False)
            uniques = rng.choice(unique_ids, size=theme_size, replace=False)
        unique = int(uniques[slot])
        concepts = [int(c) for c in pool] + [unique]
        order = rng.permutation(n_regions)
        region_concepts = [concepts[i] for i in order]
        unique_region = int(np.flatnonzero(order == n_regions - 1)[0])
        features = centers[region_concepts] + noise * rng.normal(size=(n_regions, d))

        mention = np.zeros(n_captions, dtype=bool)
        mention[rng.choice(n_captions, size=unique_mentions, replace=False)] = True
        captions = []
        for c in range(n_captions):
            n_common_words = per_caption - 1 if mention[c] else per_caption
            chosen = [int(x) for x in rng.choice(pool, size=n_common_words, replace=False)]
            if mention[c]:
                chosen.insert(int(rng.integers(per_caption)), unique)
            template = _TEMPLATES[int(rng.integers(len(_TEMPLATES)))]
            if per_caption < 3:
                template = " and ".join(["a {}"] * per_caption)
            captions.append(tokenize(template.format(*(words[i] for i in chosen))))

        emb = centers[concepts].mean(axis=0)
        split = "test" if theme >= n_themes - n_test_themes else "train"
        meta = {
            "split": split,
            "theme": theme,
            "unique_region": unique_region,
            "unique_word": words[unique],
        }
        records.append(ImageRecord(f"img{img:04d}", features, captions, emb / np.linalg.norm(emb), meta))
    return records
