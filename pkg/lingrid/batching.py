import logging
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from lingrid.datagen import DataTuple, Dataset
from lingrid.errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass
class BatchPlan:
    """Images, a text pool and the scored (image, text, label) pairs.

    The first ``len(self)`` texts of the pool are the batch tuples' own
    descriptions; the rest only appear in negative pairs.
    """

    tuples: List[DataTuple]
    images: np.ndarray  # (B, H, W, 3)
    labels: np.ndarray  # class index per tuple
    identities: np.ndarray
    texts: List[List[int]]
    text_identities: np.ndarray
    phrases: List[List[List[int]]]  # per tuple, phrase word indices
    pairs: np.ndarray  # (N, 3): image row, pool text, label

    def __len__(self) -> int:
        return len(self.tuples)

    @property
    def num_pairs(self) -> int:
        return len(self.pairs)

    @property
    def positives(self) -> np.ndarray:
        return self.pairs[self.pairs[:, 2] == 1]

    @property
    def negatives(self) -> np.ndarray:
        return self.pairs[self.pairs[:, 2] == 0]


def compose_batch(
    dataset: Dataset,
    rng: np.random.Generator,
    persons_per_batch: int = 8,
    tuples_per_person: int = 2,
    negs_per_image: int = 6,
) -> BatchPlan:
    train = dataset.train
    by_person: Dict[int, List[int]] = {}
    for i, item in enumerate(train):
        by_person.setdefault(item.identity, []).append(i)
    eligible = sorted(p for p, items in by_person.items() if len(items) >= tuples_per_person)
    if len(eligible) < persons_per_batch:
        raise ConfigError(
            f"need {persons_per_batch} identities with {tuples_per_person} train tuples, "
            f"dataset has {len(eligible)}"
        )

    persons = rng.choice(eligible, size=persons_per_batch, replace=False)
    chosen: List[int] = []
    for person in persons:
        picks = rng.choice(by_person[int(person)], size=tuples_per_person, replace=False)
        chosen.extend(int(i) for i in picks)

    identities = np.array([train[i].identity for i in chosen], dtype=np.int64)
    pool = list(chosen)
    pool_slot = {t: slot for slot, t in enumerate(pool)}
    pairs = []
    for row, ident in enumerate(identities):
        for col, other in enumerate(identities):
            if other == ident:
                pairs.append((row, col, 1))
        candidates = [i for i, item in enumerate(train) if item.identity != ident]
        if len(candidates) < negs_per_image:
            raise ConfigError(
                f"only {len(candidates)} different-identity texts for {negs_per_image} negatives"
            )
        for i in rng.choice(candidates, size=negs_per_image, replace=False):
            i = int(i)
            if i not in pool_slot:
                pool_slot[i] = len(pool)
                pool.append(i)
            pairs.append((row, pool_slot[i], 0))

    classes = dataset.class_index()
    return BatchPlan(
        tuples=[train[i] for i in chosen],
        images=np.stack([dataset.image(train[i]) for i in chosen]),
        labels=np.array([classes[ident] for ident in identities], dtype=np.int64),
        identities=identities,
        texts=[dataset.sequence(train[i]) for i in pool],
        text_identities=np.array([train[i].identity for i in pool], dtype=np.int64),
        phrases=[dataset.phrase_sequences(train[i]) for i in chosen],
        pairs=np.array(pairs, dtype=np.int64).reshape(-1, 3),
    )
