"""Synthetic spatial-scene corpus, vocabulary, and file formats.

A scene is a handful of categorised objects with bounding boxes inside a
fixed-size image. Object features are a one-hot category code plus seeded
Gaussian noise and deliberately carry no position or size information, so
any spatial language in the captions can only be learned from the boxes.

Two scene kinds are generated:

* relation scenes: two objects of distinct categories placed so exactly
  one of five spatial relations (left/right/above/below/next-to) holds
  between them with margin; references all verbalise that relation.
* count scenes: k objects each of two categories (k in {2, 3}), laid out
  in two rows. Both categories share the same multiplicity, which keeps
  the category-count ratio constant across k: a permutation-invariant
  encoder that ignores geometry sees (2,2) and (3,3) scenes as identical
  token multisets, so the count word is learnable only through box
  geometry (spatial extent, pair distances).

File formats (all little-endian, bit-exact round trips):

* feature file, one image per file:
  magic "ORTF", version u32, id_len u32, id utf-8, width f32, height f32,
  N u32, D u32, N*D feature f32s, N*4 box f32s as (x_center, y_center, w, h).
* caption file: one JSON object per line, {"image_id": ..., "captions": [...]}.
* checkpoint: magic "ORTC", version u32, config_len u32, canonical JSON
  config, then per parameter (sorted by name): name_len u32, name utf-8,
  rank u32, dims u32..., float32 data.
"""

from __future__ import annotations

import json
import math
import os
import string
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataFormatError, UsageError
from .geometry import BoundingBox
from .model import ModelConfig, config_from_dict, config_to_dict, param_shapes
from .rng import CORPUS, stream

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

CATEGORIES = ("dog", "cat", "car", "tree", "ball", "lamp", "bird", "cup")

RELATIONS = ("left", "right", "above", "below", "next_to")
RELATION_PHRASES = {
    "left": "to the left of",
    "right": "to the right of",
    "above": "above",
    "below": "below",
    "next_to": "next to",
}
INVERSE_RELATION = {
    "left": "right", "right": "left", "above": "below", "below": "above",
    "next_to": "next_to",
}
NUMBER_WORDS = {"two": 2, "three": 3}

# next_to iff the center distance, normalised by mean box size, is below this.
NEAR_THRESHOLD = 1.5

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def tokenize(caption: str) -> list[str]:
    """Lowercase, strip ASCII punctuation, split on whitespace."""
    return caption.lower().translate(_PUNCT_TABLE).split()


# ---------------------------------------------------------------------------
# Scene model and relation semantics
# ---------------------------------------------------------------------------


@dataclass
class SceneObject:
    category: str
    box: BoundingBox


@dataclass
class Scene:
    image_id: str
    width: float
    height: float
    kind: str                      # "relation" or "count"
    objects: list[SceneObject]

    def category_count(self, category: str) -> int:
        return sum(1 for o in self.objects if o.category == category)

    def boxes(self) -> list[BoundingBox]:
        return [o.box for o in self.objects]


@dataclass
class CaptionRecord:
    image_id: str
    captions: list[str]

    def __post_init__(self):
        if not self.captions:
            raise UsageError("caption record needs at least one reference")


def relation_between(a: BoundingBox, b: BoundingBox) -> str:
    """The one relation word that holds for 'a <rel> b', from geometry alone.

    Distances are normalised by the mean of the four box extents; close
    pairs are next_to and the rest take the dominant displacement axis.
    """
    s = (a.w + a.h + b.w + b.h) / 4.0
    u = (b.x_center - a.x_center) / s
    v = (b.y_center - a.y_center) / s
    if math.hypot(u, v) <= NEAR_THRESHOLD:
        return "next_to"
    if abs(u) >= abs(v):
        return "left" if u > 0 else "right"
    return "above" if v > 0 else "below"


def relation_holds(scene: Scene, cat_a: str, relation: str, cat_b: str) -> bool:
    """True if some object pair (one of cat_a, one of cat_b) realises the relation."""
    for i, first in enumerate(scene.objects):
        if first.category != cat_a:
            continue
        for j, second in enumerate(scene.objects):
            if i == j or second.category != cat_b:
                continue
            if relation_between(first.box, second.box) == relation:
                return True
    return False


def parse_relation(tokens: list[str]) -> tuple[str, str, str] | None:
    """Extract (cat_a, relation, cat_b) from a caption, or None."""
    spans = []
    for i in range(len(tokens)):
        if tokens[i] == "above" or tokens[i] == "below":
            spans.append((i, i + 1, tokens[i]))
        elif tokens[i:i + 2] == ["next", "to"]:
            spans.append((i, i + 2, "next_to"))
        elif tokens[i:i + 4] == ["to", "the", "left", "of"]:
            spans.append((i, i + 4, "left"))
        elif tokens[i:i + 4] == ["to", "the", "right", "of"]:
            spans.append((i, i + 4, "right"))
    if len(spans) != 1:
        return None
    start, end, relation = spans[0]
    before = [t for t in tokens[:start] if t in CATEGORIES]
    after = [t for t in tokens[end:] if t in CATEGORIES]
    if not before or not after:
        return None
    return before[-1], relation, after[0]


def parse_count(tokens: list[str]) -> tuple[int, str] | None:
    """Extract the first (number, category) pair like 'two dogs', or None."""
    plurals = {c + "s": c for c in CATEGORIES}
    for i in range(len(tokens) - 1):
        if tokens[i] in NUMBER_WORDS and tokens[i + 1] in plurals:
            return NUMBER_WORDS[tokens[i]], plurals[tokens[i + 1]]
    return None


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


class Vocab:
    """Token ids with reserved pad/bos/eos/unk slots."""

    def __init__(self, tokens: list[str]):
        self.id_to_token = list(SPECIAL_TOKENS) + list(tokens)
        if len(set(self.id_to_token)) != len(self.id_to_token):
            raise UsageError("duplicate tokens in vocabulary")
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, caption: str) -> np.ndarray:
        ids = [self.token_to_id.get(tok, UNK_ID) for tok in tokenize(caption)]
        return np.array([BOS_ID] + ids + [EOS_ID], dtype=np.int64)

    def decode(self, ids) -> str:
        words = []
        for i in np.asarray(ids, dtype=np.int64):
            if i == EOS_ID:
                break
            if i in (PAD_ID, BOS_ID):
                continue
            words.append(self.id_to_token[int(i)])
        return " ".join(words)

    def to_json(self) -> dict:
        return {"tokens": self.id_to_token[len(SPECIAL_TOKENS):]}

    @classmethod
    def from_json(cls, payload: dict) -> "Vocab":
        return cls(payload["tokens"])


def build_vocab(caption_records: list[CaptionRecord], min_freq: int = 1) -> Vocab:
    counts: dict[str, int] = {}
    for record in caption_records:
        for caption in record.captions:
            for token in tokenize(caption):
                counts[token] = counts.get(token, 0) + 1
    kept = sorted(t for t, c in counts.items() if c >= min_freq)
    return Vocab(kept)


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusConfig:
    categories: tuple[str, ...] = CATEGORIES
    d_feature: int = 32
    image_size: int = 256
    noise_sigma: float = 0.1
    relation_share: float = 0.90   # remainder is count scenes
    next_to_same_share: float = 0.5  # next_to pairs drawn as (c, c)
    n_references: int = 5

    def __post_init__(self):
        if self.d_feature < len(self.categories):
            raise ConfigError("d_feature must be at least the category count")
        if not 0.0 < self.relation_share < 1.0:
            raise ConfigError("relation_share must be in (0, 1)")
        if not 0.0 <= self.next_to_same_share <= 1.0:
            raise ConfigError("next_to_same_share must be in [0, 1]")


@dataclass
class Corpus:
    seed: int
    config: CorpusConfig
    scenes: dict[str, Scene]
    captions: dict[str, CaptionRecord]
    features: dict[str, np.ndarray]
    splits: dict[str, list[str]] = field(default_factory=dict)

    def split_scenes(self, split: str) -> list[Scene]:
        return [self.scenes[i] for i in self.splits[split]]


def _relation_templates(c1: str, rel: str, c2: str) -> list[str]:
    phrase = RELATION_PHRASES[rel]
    inverse = RELATION_PHRASES[INVERSE_RELATION[rel]]
    return [
        f"a {c1} {phrase} a {c2}",
        f"a photo of a {c1} {phrase} a {c2}",
        f"there is a {c1} {phrase} a {c2}",
        f"a {c2} {inverse} a {c1}",
        f"a photo of a {c2} {inverse} a {c1}",
    ]


def _count_templates(num: str, c1: str, c2: str) -> list[str]:
    return [
        f"{num} {c1}s",
        f"a photo of {num} {c1}s",
        f"there are {num} {c1}s",
        f"{num} {c1}s and {num} {c2}s",
        f"a photo of {num} {c2}s",
    ]


def _in_bounds(x: float, y: float, w: float, h: float, size: int) -> bool:
    return x - w / 2 >= 1 and x + w / 2 <= size - 1 and y - h / 2 >= 1 and y + h / 2 <= size - 1


def _make_relation_scene(image_id: str, rng: np.random.Generator,
                         cfg: CorpusConfig) -> tuple[Scene, list[str]]:
    # Directional pairs always share a category: "a dog left of a dog" and
    # "a dog right of a dog" are then both true of the scene, so the
    # direction word conveys the axis only and neither the mention order nor
    # an artificial object ordering carries extra information. Distinct
    # categories appear in (symmetric) next_to pairs.
    rel = RELATIONS[int(rng.integers(len(RELATIONS)))]
    if rel != "next_to" or rng.random() < cfg.next_to_same_share:
        c1 = c2 = cfg.categories[int(rng.integers(len(cfg.categories)))]
    else:
        cats = list(rng.choice(len(cfg.categories), size=2, replace=False))
        c1, c2 = cfg.categories[cats[0]], cfg.categories[cats[1]]
    size = cfg.image_size
    for _ in range(200):
        # sizes vary enough for area ordering to mean something but not so
        # much that size ratios drown the regime signal in the gate features
        w1, h1 = int(rng.integers(22, 31)), int(rng.integers(22, 31))
        w2, h2 = int(rng.integers(22, 31)), int(rng.integers(22, 31))
        s = (w1 + h1 + w2 + h2) / 4.0
        if rel == "next_to":
            # clearly diagonal so both displacement components stay moderate
            r = rng.uniform(0.6, 1.1)
            theta = rng.uniform(math.radians(25), math.radians(65))
            theta += math.radians(90) * int(rng.integers(4))
            du, dv = r * math.cos(theta), r * math.sin(theta)
        else:
            # far pairs sit exactly on one axis: the orthogonal displacement
            # hits the log clamp, which makes the regimes widely separated
            # in feature space
            major = rng.uniform(2.2, 3.4)
            if rel == "left":
                du, dv = major, 0.0
            elif rel == "right":
                du, dv = -major, 0.0
            elif rel == "above":
                du, dv = 0.0, major
            else:
                du, dv = 0.0, -major
        cx = size / 2 + rng.uniform(-25, 25)
        cy = size / 2 + rng.uniform(-25, 25)
        x1 = round(cx - du * s / 2)
        y1 = round(cy - dv * s / 2)
        x2 = round(cx + du * s / 2)
        y2 = round(cy + dv * s / 2)
        if not (_in_bounds(x1, y1, w1, h1, size) and _in_bounds(x2, y2, w2, h2, size)):
            continue
        box1 = BoundingBox(float(x1), float(y1), float(w1), float(h1))
        box2 = BoundingBox(float(x2), float(y2), float(w2), float(h2))
        if relation_between(box1, box2) != rel:
            continue  # rounding ate the margin; resample
        scene = Scene(image_id, size, size, "relation",
                      [SceneObject(c1, box1), SceneObject(c2, box2)])
        return scene, _relation_templates(c1, rel, c2)
    raise ConfigError("could not place a relation scene; image too small for box sizes")


def _make_count_scene(image_id: str, rng: np.random.Generator,
                      cfg: CorpusConfig) -> tuple[Scene, list[str]]:
    cats = list(rng.choice(len(cfg.categories), size=2, replace=False))
    c1, c2 = cfg.categories[cats[0]], cfg.categories[cats[1]]
    k = int(rng.integers(2, 4))
    # caption category order decorrelated from the row layout
    t1, t2 = (c1, c2) if rng.random() < 0.5 else (c2, c1)
    num = {2: "two", 3: "three"}[k]
    size = cfg.image_size
    s = int(rng.integers(18, 31))
    # generous pitch: the row span grows strongly with the count, which is
    # the signal a geometry-gated encoder can pick up
    pitch = int(2.3 * s)
    gap = int(2.2 * s)
    cx, cy = size / 2 + rng.uniform(-15, 15), size / 2 + rng.uniform(-10, 10)
    objects = []
    for row, cat in ((0, c1), (1, c2)):
        y = round(cy + (row - 0.5) * gap)
        x0 = cx - (k - 1) * pitch / 2
        for i in range(k):
            w = s + int(rng.integers(-2, 3))
            h = s + int(rng.integers(-2, 3))
            x = round(x0 + i * pitch + rng.integers(-2, 3))
            jy = y + int(rng.integers(-2, 3))
            if not _in_bounds(x, jy, w, h, size):
                raise ConfigError("count scene out of bounds; enlarge the image")
            objects.append(SceneObject(cat, BoundingBox(float(x), float(jy),
                                                        float(w), float(h))))
    scene = Scene(image_id, size, size, "count", objects)
    return scene, _count_templates(num, t1, t2)


def scene_features(scene: Scene, cfg: CorpusConfig,
                   rng: np.random.Generator) -> np.ndarray:
    """One-hot category codes plus Gaussian noise; no geometry leaks in."""
    cat_index = {c: i for i, c in enumerate(cfg.categories)}
    out = np.zeros((len(scene.objects), cfg.d_feature), dtype=np.float32)
    for row, obj in enumerate(scene.objects):
        out[row, cat_index[obj.category]] = 1.0
    out += rng.normal(0.0, cfg.noise_sigma, size=out.shape).astype(np.float32)
    return out


def generate_corpus(seed: int, n_scenes: int, cfg: CorpusConfig | None = None) -> Corpus:
    """Deterministic corpus: same seed, bit-identical scenes/features/captions."""
    cfg = cfg or CorpusConfig()
    if n_scenes < 10:
        raise ConfigError(f"need at least 10 scenes for an 80/10/10 split, got {n_scenes}")
    scenes: dict[str, Scene] = {}
    captions: dict[str, CaptionRecord] = {}
    features: dict[str, np.ndarray] = {}
    for i in range(n_scenes):
        rng = stream(seed, CORPUS, i)
        image_id = f"img{i:05d}"
        if rng.random() < cfg.relation_share:
            scene, refs = _make_relation_scene(image_id, rng, cfg)
        else:
            scene, refs = _make_count_scene(image_id, rng, cfg)
        scenes[image_id] = scene
        captions[image_id] = CaptionRecord(image_id, refs[:cfg.n_references])
        features[image_id] = scene_features(scene, cfg, rng)

    order = stream(seed, CORPUS, n_scenes, 1).permutation(n_scenes)
    ids = [f"img{i:05d}" for i in order]
    n_train = int(n_scenes * 0.8)
    n_val = int(n_scenes * 0.1)
    splits = {
        "train": sorted(ids[:n_train]),
        "val": sorted(ids[n_train:n_train + n_val]),
        "test": sorted(ids[n_train + n_val:]),
    }
    if not all(splits.values()):
        raise ConfigError("split produced an empty subset; increase n_scenes")
    return Corpus(seed, cfg, scenes, captions, features, splits)


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------

FEATURE_MAGIC = b"ORTF"
CHECKPOINT_MAGIC = b"ORTC"
FORMAT_VERSION = 1


@dataclass
class FeatureRecord:
    image_id: str
    width: float
    height: float
    features: np.ndarray
    boxes: list[BoundingBox]


class _Reader:
    """Byte reader that reports offsets in format errors."""

    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.path = path
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.blob):
            raise DataFormatError(
                f"{self.path}: truncated at byte {self.offset}: "
                f"expected {n} more bytes, have {len(self.blob) - self.offset}")
        out = self.blob[self.offset:self.offset + n]
        self.offset += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self.take(4))[0]

    def done(self) -> None:
        if self.offset != len(self.blob):
            raise DataFormatError(
                f"{self.path}: {len(self.blob) - self.offset} trailing bytes at "
                f"byte {self.offset}")


def write_features(path: str, record: FeatureRecord) -> None:
    feats = np.ascontiguousarray(record.features, dtype="<f4")
    n, d = feats.shape
    if len(record.boxes) != n:
        raise UsageError(f"{n} feature rows but {len(record.boxes)} boxes")
    ident = record.image_id.encode("utf-8")
    parts = [
        FEATURE_MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", len(ident)), ident,
        struct.pack("<ff", record.width, record.height),
        struct.pack("<II", n, d),
        feats.tobytes(),
        np.array([b.as_array() for b in record.boxes], dtype="<f4").tobytes(),
    ]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_features(path: str) -> FeatureRecord:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read(), path)
    magic = reader.take(4)
    if magic != FEATURE_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r} at byte 0")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version} at byte 4")
    ident = reader.take(reader.u32()).decode("utf-8")
    width, height = reader.f32(), reader.f32()
    n, d = reader.u32(), reader.u32()
    feats = np.frombuffer(reader.take(4 * n * d), dtype="<f4").reshape(n, d).copy()
    raw = np.frombuffer(reader.take(4 * n * 4), dtype="<f4").reshape(n, 4)
    boxes = [BoundingBox(*(float(v) for v in row)) for row in raw]
    reader.done()
    return FeatureRecord(ident, width, height, feats, boxes)


# ---------------------------------------------------------------------------
# Caption / scene line files
# ---------------------------------------------------------------------------


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_captions(path: str, records: list[CaptionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(_dump_json({"image_id": record.image_id,
                                 "captions": record.captions}) + "\n")


def read_captions(path: str) -> list[CaptionRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(CaptionRecord(obj["image_id"], list(obj["captions"])))
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataFormatError(f"{path}:{line_no}: bad caption record: {exc}")
    return out


def write_scenes(path: str, scenes: list[Scene]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenes:
            fh.write(_dump_json({
                "image_id": s.image_id, "width": s.width, "height": s.height,
                "kind": s.kind,
                "objects": [
                    {"category": o.category,
                     "box": [o.box.x_center, o.box.y_center, o.box.w, o.box.h]}
                    for o in s.objects],
            }) + "\n")


def read_scenes(path: str) -> list[Scene]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                objects = [SceneObject(o["category"], BoundingBox(*o["box"]))
                           for o in obj["objects"]]
                out.append(Scene(obj["image_id"], obj["width"], obj["height"],
                                 obj["kind"], objects))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataFormatError(f"{path}:{line_no}: bad scene record: {exc}")
    return out


# ---------------------------------------------------------------------------
# Corpus directory layout
# ---------------------------------------------------------------------------


def write_corpus(corpus: Corpus, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    feature_dir = os.path.join(out_dir, "features")
    os.makedirs(feature_dir, exist_ok=True)
    for split, ids in corpus.splits.items():
        write_scenes(os.path.join(out_dir, f"scenes_{split}.jsonl"),
                     [corpus.scenes[i] for i in ids])
        write_captions(os.path.join(out_dir, f"captions_{split}.jsonl"),
                       [corpus.captions[i] for i in ids])
    for image_id, scene in sorted(corpus.scenes.items()):
        write_features(
            os.path.join(feature_dir, f"{image_id}.orf"),
            FeatureRecord(image_id, scene.width, scene.height,
                          corpus.features[image_id], scene.boxes()))
    vocab = build_vocab([corpus.captions[i] for i in corpus.splits["train"]])
    with open(os.path.join(out_dir, "vocab.json"), "w", encoding="utf-8") as fh:
        fh.write(_dump_json(vocab.to_json()))
    manifest = {
        "seed": corpus.seed,
        "n_scenes": len(corpus.scenes),
        "categories": list(corpus.config.categories),
        "d_feature": corpus.config.d_feature,
        "image_size": corpus.config.image_size,
        "noise_sigma": corpus.config.noise_sigma,
        "relation_share": corpus.config.relation_share,
        "next_to_same_share": corpus.config.next_to_same_share,
        "splits": corpus.splits,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        fh.write(_dump_json(manifest))


def load_corpus(data_dir: str) -> Corpus:
    manifest_path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataFormatError(f"{manifest_path}: not found; is this a corpus directory?")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg = CorpusConfig(
        categories=tuple(manifest["categories"]), d_feature=manifest["d_feature"],
        image_size=manifest["image_size"], noise_sigma=manifest["noise_sigma"],
        relation_share=manifest["relation_share"],
        next_to_same_share=manifest["next_to_same_share"],
    )
    scenes: dict[str, Scene] = {}
    captions: dict[str, CaptionRecord] = {}
    features: dict[str, np.ndarray] = {}
    for split in ("train", "val", "test"):
        for scene in read_scenes(os.path.join(data_dir, f"scenes_{split}.jsonl")):
            scenes[scene.image_id] = scene
        for record in read_captions(os.path.join(data_dir, f"captions_{split}.jsonl")):
            captions[record.image_id] = record
    for image_id in scenes:
        record = read_features(os.path.join(data_dir, "features", f"{image_id}.orf"))
        features[image_id] = record.features
    return Corpus(manifest["seed"], cfg, scenes, captions, features,
                  {k: list(v) for k, v in manifest["splits"].items()})


def load_vocab(data_dir: str) -> Vocab:
    with open(os.path.join(data_dir, "vocab.json"), "r", encoding="utf-8") as fh:
        return Vocab.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str, params: dict[str, T.Tensor], config: dict) -> None:
    if len(set(params)) != len(params):
        raise UsageError("duplicate parameter names")
    cfg_blob = _dump_json(config).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", FORMAT_VERSION),
             struct.pack("<I", len(cfg_blob)), cfg_blob]
    for name in sorted(params):
        data = np.ascontiguousarray(params[name].data, dtype="<f4")
        blob = name.encode("utf-8")
        parts.append(struct.pack("<I", len(blob)))
        parts.append(blob)
        parts.append(struct.pack("<I", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path: str, expect_config: dict | None = None
                    ) -> tuple[dict[str, T.Tensor], dict]:
    """Read params and config; optionally validate against an expected config.

    With expect_config given, both the config payload and the parameter name
    set implied by it must match; surplus or missing names are listed in the
    error (loading a geometric checkpoint into a standard-mode config names
    the gate parameters, for instance).
    """
    with open(path, "rb") as fh:
        reader = _Reader(fh.read(), path)
    magic = reader.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r} at byte 0")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    config = json.loads(reader.take(reader.u32()).decode("utf-8"))
    params: dict[str, T.Tensor] = {}
    while reader.offset < len(reader.blob):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(dims)
        if name in params:
            raise DataFormatError(f"{path}: duplicate parameter {name!r}")
        params[name] = T.param(data.copy())
    if expect_config is not None:
        mismatched = sorted(k for k in set(config) | set(expect_config)
                            if config.get(k) != expect_config.get(k))
        if mismatched:
            raise ConfigError(f"checkpoint config mismatch on keys: {mismatched}")
        expected_names = set(param_shapes(config_from_dict(expect_config)))
        missing = sorted(expected_names - set(params))
        unknown = sorted(set(params) - expected_names)
        if missing or unknown:
            raise ConfigError(
                f"checkpoint parameters do not fit config: missing={missing} "
                f"unknown={unknown}")
    return params, config


def model_checkpoint_config(cfg: ModelConfig) -> dict:
    return config_to_dict(cfg)
