"""Synthetic person images with attribute-grounded template descriptions.

Dataset directory layout::

    meta.jsonl   one JSON object per tuple, keys sorted
    images/      <id>.ppm, binary PPM (P6), 8-bit RGB
    vocab.txt    one word per line, index = line number (0-based)
"""
import hashlib
import json
import logging
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional

import numpy as np
from omegaconf import DictConfig
from PIL import Image

from lingrid.describer import Describer, default_dealer
from lingrid.errors import ConfigError
from lingrid.textpipe import Phrase, Vocab, build_vocab, encode, extract_phrases, tokenize

PathT = os.PathLike

logger = logging.getLogger(__name__)

COLORS: Dict[str, tuple] = {
    "black": (0.0, 0.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
}
COLOR_NAMES = tuple(COLORS)
GENDERS = ("man", "woman")
BACKGROUND = (0.5, 0.5, 0.5)
SKIN = (0.85, 0.7, 0.55)

HEAD_ROWS = (0, 12)
TORSO_ROWS = (12, 36)
LEG_ROWS = (36, 60)

SPLITS = ("train", "query", "gallery")


@dataclass
class PersonSpec:
    identity: int
    shirt: str
    pants: str
    gender: str
    hat: Optional[str] = None
    bag: Optional[str] = None

    def __post_init__(self):
        for part in ("shirt", "pants", "hat", "bag"):
            color = getattr(self, part)
            if color is not None and color not in COLORS:
                raise ConfigError(f"unknown {part} color {color!r}")
        if self.gender not in GENDERS:
            raise ConfigError(f"unknown gender word {self.gender!r}")

    @property
    def attributes(self) -> Dict[str, Optional[str]]:
        return {k: v for k, v in asdict(self).items() if k != "identity"}


def sample_person(identity: int, rng: np.random.Generator) -> PersonSpec:
    def color():
        return COLOR_NAMES[int(rng.integers(len(COLOR_NAMES)))]

    shirt, pants = color(), color()
    gender = GENDERS[int(rng.integers(len(GENDERS)))]
    hat = color() if rng.random() < 0.5 else None
    bag = color() if rng.random() < 0.5 else None
    return PersonSpec(identity, shirt, pants, gender, hat, bag)


def _scaled(rows: tuple, height: int) -> slice:
    return slice(rows[0] * height // 64, rows[1] * height // 64)


def _cols(lo: int, hi: int, width: int) -> slice:
    return slice(lo * width // 32, hi * width // 32)


def paint_person(
    spec: PersonSpec, height: int = 64, width: int = 32, shift: int = 0, flip: bool = False
) -> np.ndarray:
    """Noise-free render, ``shift`` rows down (negative is up)."""
    pad = abs(shift)
    canvas = np.empty((height + 2 * pad, width, 3))
    canvas[:] = BACKGROUND
    body = canvas[pad : pad + height]

    head = _scaled(HEAD_ROWS, height)
    body[head.start + 2 * height // 64 : head.stop, _cols(11, 21, width)] = SKIN
    if spec.hat is not None:
        body[head.start : head.start + 5 * height // 64, _cols(10, 22, width)] = COLORS[spec.hat]
    body[_scaled(TORSO_ROWS, height), _cols(6, 26, width)] = COLORS[spec.shirt]
    body[_scaled(LEG_ROWS, height), _cols(8, 24, width)] = COLORS[spec.pants]
    if spec.bag is not None:
        body[_scaled((18, 32), height), _cols(26, 31, width)] = COLORS[spec.bag]

    image = canvas[pad - shift : pad - shift + height]
    if flip:
        image = image[:, ::-1]
    return np.ascontiguousarray(image)


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_image(
    spec: PersonSpec,
    rng: np.random.Generator,
    height: int = 64,
    width: int = 32,
    noise: float = 0.05,
    jitter: int = 2,
    flip_prob: float = 0.5,
) -> np.ndarray:
    """Jittered, possibly mirrored, noisy render in [0, 1] on the 8-bit grid."""
    shift = int(rng.integers(-jitter, jitter + 1)) if jitter > 0 else 0
    flip = bool(rng.random() < flip_prob)
    image = paint_person(spec, height, width, shift, flip)
    if noise > 0:
        image = image + rng.uniform(-noise, noise, size=image.shape)
    return quantize(image) / 255.0


def render_description(spec: PersonSpec, rng: np.random.Generator) -> str:
    return Describer(default_dealer()).describe(spec.attributes, rng)


def region_color(image: np.ndarray, rows: slice, cols: slice) -> str:
    """Nearest named color to the region mean."""
    mean = image[rows, cols].reshape(-1, 3).mean(axis=0)
    names = list(COLORS)
    dists = [np.sum((mean - np.array(COLORS[n])) ** 2) for n in names]
    return names[int(np.argmin(dists))]


@dataclass
class DataTuple:
    tuple_id: int
    identity: int
    split: str
    image_file: str
    text: str
    attributes: Dict[str, Optional[str]]
    image: Optional[np.ndarray] = None
    phrases: List[Phrase] = field(default_factory=list, init=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}")
        self.phrases = extract_phrases(self.text) if self.text else []

    @property
    def tokens(self) -> List[str]:
        return tokenize(self.text)

    def to_record(self) -> Dict:
        return {
            "id": self.tuple_id,
            "person": self.identity,
            "split": self.split,
            "image": self.image_file,
            "text": self.text,
            "attributes": self.attributes,
            "phrases": [
                {"text": p.text, "kind": p.kind, "span": list(p.source_span)}
                for p in self.phrases
            ],
        }


@dataclass
class Dataset:
    tuples: List[DataTuple]
    vocab: Vocab
    root: Optional[Path] = None

    def split(self, name: str) -> List[DataTuple]:
        return [t for t in self.tuples if t.split == name]

    @property
    def train(self) -> List[DataTuple]:
        return self.split("train")

    @property
    def query(self) -> List[DataTuple]:
        return self.split("query")

    @property
    def gallery(self) -> List[DataTuple]:
        return self.split("gallery")

    @property
    def train_identities(self) -> List[int]:
        return sorted({t.identity for t in self.train})

    @property
    def test_identities(self) -> List[int]:
        return sorted({t.identity for t in self.tuples if t.split != "train"})

    def class_index(self) -> Dict[int, int]:
        return {identity: i for i, identity in enumerate(self.train_identities)}

    def image(self, item: DataTuple) -> np.ndarray:
        if item.image is None:
            if self.root is None:
                raise ConfigError(f"tuple {item.tuple_id} has no image data")
            item.image = read_ppm(self.root / "images" / item.image_file)
        return item.image

    def sequence(self, item: DataTuple) -> List[int]:
        return encode(item.tokens, self.vocab)

    def phrase_sequences(self, item: DataTuple) -> List[List[int]]:
        return [encode(p.words, self.vocab) for p in item.phrases]


class DatasetReader:
    """Split-level access to a dataset; evaluation only reads images and labels."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset

    def images(self, split: str) -> np.ndarray:
        return np.stack([self.dataset.image(t) for t in self.dataset.split(split)])

    def labels(self, split: str) -> np.ndarray:
        return np.array([t.identity for t in self.dataset.split(split)], dtype=np.int64)

    def texts(self, split: str) -> List[str]:
        return [t.text for t in self.dataset.split(split)]


@dataclass
class GenParams:
    n_train_ids: int = 64
    n_test_ids: int = 16
    images_per_id: int = 4
    queries_per_id: int = 1
    seed: int = 0
    height: int = 64
    width: int = 32
    noise: float = 0.05
    jitter: int = 2
    flip_prob: float = 0.5
    min_count: int = 1
    missing_text_rate: float = 0.0

    def __post_init__(self):
        if self.n_train_ids < 1 or self.images_per_id < 1:
            raise ConfigError("identity and image counts must be >= 1")
        if self.n_test_ids < 2:
            raise ConfigError(
                f"n_test_ids must be >= 2 for retrieval distractors, got {self.n_test_ids}"
            )
        if not 1 <= self.queries_per_id < self.images_per_id:
            raise ConfigError(
                f"queries_per_id={self.queries_per_id} leaves no gallery image "
                f"out of images_per_id={self.images_per_id}"
            )
        if not 0.0 <= self.missing_text_rate < 1.0:
            raise ConfigError(f"missing_text_rate must be in [0, 1), got {self.missing_text_rate}")

    @classmethod
    def from_config(cls, cfg: DictConfig) -> "GenParams":
        return cls(
            n_train_ids=cfg.n_train_ids,
            n_test_ids=cfg.n_test_ids,
            images_per_id=cfg.images_per_id,
            queries_per_id=cfg.queries_per_id,
            seed=cfg.data_seed,
            height=cfg.image_height,
            width=cfg.image_width,
            noise=cfg.noise,
            jitter=cfg.jitter,
            flip_prob=cfg.flip_prob,
            min_count=cfg.min_count,
            missing_text_rate=cfg.missing_text_rate,
        )


def person_rng(seed: int, identity: int) -> np.random.Generator:
    return np.random.default_rng([seed, identity, 0])


def tuple_rng(seed: int, identity: int, image_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, identity, 1, image_index])


def gen_dataset(params: GenParams) -> Dataset:
    total_ids = params.n_train_ids + params.n_test_ids
    tuples = []
    for identity in range(total_ids):
        spec = sample_person(identity, person_rng(params.seed, identity))
        for k in range(params.images_per_id):
            rng = tuple_rng(params.seed, identity, k)
            image = render_image(
                spec,
                rng,
                params.height,
                params.width,
                params.noise,
                params.jitter,
                params.flip_prob,
            )
            text = render_description(spec, rng)
            if rng.random() < params.missing_text_rate:
                text = ""
            if identity < params.n_train_ids:
                split = "train"
            else:
                split = "query" if k < params.queries_per_id else "gallery"
            tuple_id = len(tuples)
            tuples.append(
                DataTuple(
                    tuple_id,
                    identity,
                    split,
                    f"{tuple_id:05d}.ppm",
                    text,
                    spec.attributes,
                    image=image,
                )
            )
    missing = sum(not t.text for t in tuples)
    if missing:
        logger.info(f"{missing} tuples written without a description")
    train_texts = (t.text for t in tuples if t.split == "train" and t.text)
    vocab = build_vocab(train_texts, params.min_count)
    return Dataset(tuples, vocab)


def fill_missing_descriptions(dataset: Dataset) -> int:
    """Give every description-free tuple a description of the same person."""
    by_person: Dict[int, List[DataTuple]] = {}
    for item in dataset.tuples:
        by_person.setdefault(item.identity, []).append(item)
    filled = 0
    for identity, items in by_person.items():
        donors = [t.text for t in items if t.text]
        for item in items:
            if item.text:
                continue
            rng = np.random.default_rng([identity, 2, item.tuple_id])
            if donors:
                text = donors[int(rng.integers(len(donors)))]
            else:
                text = Describer(default_dealer()).describe(item.attributes, rng)
            item.text = text
            item.phrases = extract_phrases(text)
            filled += 1
    if filled:
        logger.warning(f"filled {filled} missing descriptions from the same person")
    return filled


def write_ppm(path: PathT, image: np.ndarray) -> None:
    Image.fromarray(quantize(image)).save(path, format="PPM")


def read_ppm(path: PathT) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def save_dataset(dataset: Dataset, out_dir: PathT, force: bool = False) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"{out} exists and is not empty, use force=true to overwrite")
        shutil.rmtree(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    with open(out / "meta.jsonl", "w", encoding="utf-8", newline="\n") as f:
        for item in dataset.tuples:
            f.write(json.dumps(item.to_record(), sort_keys=True) + "\n")
            write_ppm(out / "images" / item.image_file, dataset.image(item))
    dataset.vocab.save(out / "vocab.txt")
    dataset.root = out
    return out


def load_dataset(data_dir: PathT) -> Dataset:
    root = Path(data_dir)
    meta = root / "meta.jsonl"
    if not meta.is_file():
        raise ConfigError(f"no dataset at {root} (missing meta.jsonl)")
    tuples = []
    with open(meta, "r", encoding="utf-8") as f:
        for line in f:
            record = json.loads(line)
            tuples.append(
                DataTuple(
                    record["id"],
                    record["person"],
                    record["split"],
                    record["image"],
                    record["text"],
                    record["attributes"],
                )
            )
    dataset = Dataset(tuples, Vocab.load(root / "vocab.txt"), root)
    fill_missing_descriptions(dataset)
    return dataset


def dataset_hash(data_dir: PathT) -> str:
    """sha256 over every file's relative path and bytes, in sorted order."""
    root = Path(data_dir)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(path.relative_to(root).as_posix().encode("utf-8") + b"\0")
        digest.update(path.read_bytes())
    return digest.hexdigest()


def summarize(dataset: Dataset) -> Mapping[str, int]:
    return {
        "train_ids": len(dataset.train_identities),
        "test_ids": len(dataset.test_identities),
        "train_tuples": len(dataset.train),
        "test_tuples": len(dataset.query) + len(dataset.gallery),
        "vocab_size": len(dataset.vocab),
    }

