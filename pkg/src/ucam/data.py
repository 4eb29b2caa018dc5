"""Synthetic mini-VQA: symbolic scenes, templated questions, noisy annotators.

Each record carries a ground-truth attention map so attention quality can be
scored without human eye-tracking data.  Records are stored as JSONL, one
file per split, next to a ``manifest.json`` that pins SHA-256 checksums.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import RngStream

SCHEMA_VERSION = 1
SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
EMPTY = "none"
OBJECTS = (EMPTY,) + tuple(f"{c}_{s}" for s in SHAPES for c in COLORS)
OBJECT_INDEX = {o: i for i, o in enumerate(OBJECTS)}
VOCAB = ("what", "color", "is", "the", "how", "many", "there", "a") + SHAPES + tuple(
    s + "s" for s in SHAPES)
TOKEN_INDEX = {t: i for i, t in enumerate(VOCAB)}
MAX_COUNT = 9
ANSWERS = COLORS + ("yes", "no") + tuple(str(k) for k in range(MAX_COUNT + 1))
ANSWER_INDEX = {a: i for i, a in enumerate(ANSWERS)}
SPLITS = ("train", "val", "test")
DEFAULT_SIZES = {"train": 5000, "val": 1000, "test": 1000}


class DatasetError(Exception):
    pass


@dataclass
class GenerationParams:
    grid: int = 7
    n_annotators: int = 10
    p_correct: float = 0.8
    ambiguous_fraction: float = 0.1
    min_distractor_objects: int = 2
    max_distractor_objects: int = 8


@dataclass
class VQARecord:
    record_id: str
    scene: list  # grid x grid of object names ("none" or "<color>_<shape>")
    question: list
    annotations: list
    gt_answer: str
    gt_attention: list  # grid x grid floats summing to 1
    qtype: str
    ambiguous: bool = False

    def to_json(self):
        return json.dumps(
            {
                "record_id": self.record_id,
                "qtype": self.qtype,
                "ambiguous": self.ambiguous,
                "scene": self.scene,
                "question": self.question,
                "annotations": self.annotations,
                "gt_answer": self.gt_answer,
                "gt_attention": self.gt_attention,
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        return cls(**d)

    @property
    def attention(self):
        return np.asarray(self.gt_attention, dtype=np.float64)


@dataclass
class DatasetManifest:
    seed: int
    sizes: dict
    checksums: dict
    params: GenerationParams = field(default_factory=GenerationParams)
    vocabulary: tuple = VOCAB
    answers: tuple = ANSWERS
    schema_version: int = SCHEMA_VERSION

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "splits": {s: {"size": self.sizes[s], "file": f"{s}.jsonl",
                           "sha256": self.checksums[s]} for s in self.sizes},
            "vocabulary": list(self.vocabulary),
            "answers": list(self.answers),
            "objects": list(OBJECTS),
            "generation": self.params.__dict__,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise DatasetError(f"unsupported schema_version {d.get('schema_version')}")
        splits = d["splits"]
        return cls(
            seed=d["seed"],
            sizes={s: v["size"] for s, v in splits.items()},
            checksums={s: v["sha256"] for s, v in splits.items()},
            params=GenerationParams(**d["generation"]),
            vocabulary=tuple(d["vocabulary"]),
            answers=tuple(d["answers"]),
        )


# --- rule oracle -----------------------------------------------------------

def parse_question(tokens):
    """Return ``(qtype, shape)`` for a templated question."""
    if tokens[:4] == ["what", "color", "is", "the"] and len(tokens) == 5:
        return "color", tokens[4]
    if tokens[:2] == ["how", "many"] and len(tokens) == 3:
        return "count", tokens[2][:-1]
    if tokens[:3] == ["is", "there", "a"] and len(tokens) == 4:
        return "exist", tokens[3]
    raise DatasetError(f"unparseable question {tokens!r}")


def _cells_with_shape(scene, shape):
    return [(r, c) for r, row in enumerate(scene) for c, obj in enumerate(row)
            if obj != EMPTY and obj.split("_")[1] == shape]


def answer_question(scene, tokens):
    """Ground-truth answer from scene and question alone.

    Color questions about a shape present more than once resolve to the first
    match in raster order; those are exactly the ambiguous records.
    """
    qtype, shape = parse_question(tokens)
    cells = _cells_with_shape(scene, shape)
    if qtype == "color":
        if not cells:
            raise DatasetError("color question about an absent shape")
        r, c = cells[0]
        return scene[r][c].split("_")[0]
    if qtype == "count":
        return str(len(cells))
    return "yes" if cells else "no"


def attention_target(scene, tokens):
    _, shape = parse_question(tokens)
    n = len(scene)
    att = np.zeros((n, n))
    cells = _cells_with_shape(scene, shape)
    if cells:
        for r, c in cells:
            att[r, c] = 1.0
    else:
        att[:] = 1.0
    return att / att.sum()


# --- generation --------------------------------------------------------------

def _place(rng, scene, free, objs):
    idx = rng.choice(len(free), size=len(objs), replace=False)
    for i, o in zip(sorted(idx.tolist()), objs):
        r, c = free[i]
        scene[r][c] = o
    chosen = {free[i] for i in idx.tolist()}
    free[:] = [f for f in free if f not in chosen]


def _distractors(answer, qtype):
    if qtype == "color":
        return [c for c in COLORS if c != answer]
    if qtype == "exist":
        return ["no" if answer == "yes" else "yes"]
    k = int(answer)
    return [str(j) for j in (k - 1, k + 1) if 0 <= j <= MAX_COUNT]


def _make_record(rng, record_id, p: GenerationParams):
    g = p.grid
    scene = [[EMPTY] * g for _ in range(g)]
    free = [(r, c) for r in range(g) for c in range(g)]
    shape = SHAPES[rng.integers(len(SHAPES))]
    others = [s for s in SHAPES if s != shape]

    def rand_obj(s):
        return f"{COLORS[rng.integers(len(COLORS))]}_{s}"

    ambiguous = bool(rng.random() < p.ambiguous_fraction)
    if ambiguous:
        qtype = "color"
        c1, c2 = rng.choice(len(COLORS), size=2, replace=False)
        targets = [f"{COLORS[c1]}_{shape}", f"{COLORS[c2]}_{shape}"]
    else:
        qtype = ("color", "count", "exist")[rng.integers(3)]
        if qtype == "color":
            targets = [rand_obj(shape)]
        elif qtype == "count":
            targets = [rand_obj(shape) for _ in range(rng.integers(MAX_COUNT + 1))]
        else:
            n = int(rng.integers(1, 4)) if rng.random() < 0.5 else 0
            targets = [rand_obj(shape) for _ in range(n)]
    n_other = int(rng.integers(p.min_distractor_objects, p.max_distractor_objects + 1))
    distract = [rand_obj(others[rng.integers(len(others))]) for _ in range(n_other)]
    _place(rng, scene, free, targets)
    _place(rng, scene, free, distract)

    if qtype == "color":
        question = ["what", "color", "is", "the", shape]
    elif qtype == "count":
        question = ["how", "many", shape + "s"]
    else:
        question = ["is", "there", "a", shape]
    gt = answer_question(scene, question)

    if ambiguous:
        options = sorted({t.split("_")[0] for t in targets}, key=COLORS.index)
        annotations = [options[rng.integers(len(options))] for _ in range(p.n_annotators)]
    else:
        wrong = _distractors(gt, qtype)
        annotations = []
        for _ in range(p.n_annotators):
            if rng.random() < p.p_correct:
                annotations.append(gt)
            else:
                annotations.append(wrong[rng.integers(len(wrong))])
    return VQARecord(
        record_id=record_id,
        scene=scene,
        question=question,
        annotations=annotations,
        gt_answer=gt,
        gt_attention=attention_target(scene, question).tolist(),
        qtype=qtype,
        ambiguous=ambiguous,
    )


def generate_records(seed, split, n, params=None):
    params = params or GenerationParams()
    rng = RngStream(seed).derive(1, SPLITS.index(split)).generator()
    for i in range(n):
        yield _make_record(rng, f"{split}-{i:06d}", params)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def generate_dataset(out_dir, seed, sizes=None, params=None):
    """Write ``<split>.jsonl`` files plus ``manifest.json`` under ``out_dir``."""
    sizes = dict(DEFAULT_SIZES if sizes is None else sizes)
    for s, n in sizes.items():
        if s not in SPLITS:
            raise ValueError(f"unknown split {s!r}")
        if n <= 0:
            raise ValueError(f"split {s} must have positive size")
    params = params or GenerationParams()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checksums = {}
    for split, n in sizes.items():
        path = out / f"{split}.jsonl"
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for rec in generate_records(seed, split, n, params):
                fh.write(rec.to_json() + "\n")
        checksums[split] = _sha256(path)
    manifest = DatasetManifest(seed=seed, sizes=sizes, checksums=checksums, params=params)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_manifest(path):
    mpath = Path(path) / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"no manifest at {mpath}")
    with open(mpath, encoding="utf-8") as fh:
        return DatasetManifest.from_dict(json.load(fh))


def load_dataset(path, split):
    """Stream records of one split after verifying its checksum."""
    manifest = read_manifest(path)
    if split not in manifest.sizes:
        raise DatasetError(f"split {split!r} not in manifest")
    fpath = Path(path) / f"{split}.jsonl"
    if not fpath.exists() or _sha256(fpath) != manifest.checksums[split]:
        raise DatasetError("corrupt dataset")
    return _stream(fpath, manifest.sizes[split])


def _stream(fpath, expected):
    n = 0
    with open(fpath, encoding="utf-8") as fh:
        for line in fh:
            try:
                yield VQARecord.from_json(line)
            except (json.JSONDecodeError, TypeError) as exc:
                raise DatasetError("corrupt dataset") from exc
            n += 1
    if n != expected:
        raise DatasetError("corrupt dataset")


def dataset_exists(path):
    return os.path.exists(Path(path) / "manifest.json")


# --- array encoding for the model --------------------------------------------

@dataclass
class EncodedBatch:
    scenes: np.ndarray      # (n, g, g) int object ids
    bow: np.ndarray         # (n, |vocab|) token frequencies, rows sum to 1
    targets: np.ndarray     # (n,) answer ids
    attention: np.ndarray   # (n, g, g) ground-truth attention
    annotations: np.ndarray = None  # (n, 10) annotator answer ids

    def __len__(self):
        return len(self.targets)

    def take(self, idx):
        ann = None if self.annotations is None else self.annotations[idx]
        return EncodedBatch(self.scenes[idx], self.bow[idx], self.targets[idx],
                            self.attention[idx], ann)

    def with_targets(self, targets):
        return EncodedBatch(self.scenes, self.bow, np.asarray(targets, dtype=np.int64),
                            self.attention, self.annotations)


def encode_scene(scene):
    try:
        return np.array([[OBJECT_INDEX[o] for o in row] for row in scene], dtype=np.int64)
    except KeyError as exc:
        raise DatasetError(f"unknown object {exc.args[0]!r}") from None


def encode_question(tokens):
    """Bag-of-words frequencies; mean pooling of embeddings is ``bow @ E``."""
    if not tokens:
        raise ValueError("empty question")
    bow = np.zeros(len(VOCAB))
    for t in tokens:
        if t not in TOKEN_INDEX:
            raise ValueError("out-of-vocabulary")
        bow[TOKEN_INDEX[t]] += 1.0
    return bow / len(tokens)


def encode_records(records):
    records = list(records)
    return EncodedBatch(
        scenes=np.stack([encode_scene(r.scene) for r in records]),
        bow=np.stack([encode_question(r.question) for r in records]),
        targets=np.array([ANSWER_INDEX[r.gt_answer] for r in records], dtype=np.int64),
        attention=np.stack([r.attention for r in records]),
        annotations=np.array([[ANSWER_INDEX[a] for a in r.annotations] for r in records],
                             dtype=np.int64),
    )
