import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from omegaconf import DictConfig
from tqdm import tqdm

from lingrid.artist import convergence_plot
from lingrid.association import LOSS_TERMS, LossWeights, check_mode, total_loss
from lingrid.batching import compose_batch
from lingrid.checkpoint import Checkpoint
from lingrid.datagen import Dataset
from lingrid.diffcore import Tape, precision
from lingrid.errors import ConfigError, NumericError
from lingrid.network import LinGridModel
from lingrid.optim import SGD, lr_at_epoch

PathT = os.PathLike

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("epoch", "step") + LOSS_TERMS + ("total",)
PRECISIONS = {"single": np.float32, "double": np.float64}
CHECKPOINT_NAME = "model.ckpt"


def dtype_of(name: str) -> type:
    if name not in PRECISIONS:
        raise ConfigError(f"precision must be one of {list(PRECISIONS)}, got {name!r}")
    return PRECISIONS[name]


def loss_weights(cfg: DictConfig) -> LossWeights:
    return LossWeights(cfg.lambda_t, cfg.lambda_dis, cfg.lambda_rec, cfg.rank_margin)


@dataclass
class Trainer:
    cfg: DictConfig
    dataset: Dataset
    run_dir: PathT
    mode: Optional[str] = None
    seed: Optional[int] = None
    history: List[Dict[str, float]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.mode = self.mode or self.cfg.mode
        self.seed = self.cfg.seed if self.seed is None else self.seed
        check_mode(self.mode)
        self.run_dir = Path(self.run_dir)
        self.dtype = dtype_of(self.cfg.precision)
        self.weights = loss_weights(self.cfg)
        with precision(self.dtype):
            self.model = LinGridModel.from_config(
                self.cfg,
                self.dataset.vocab,
                len(self.dataset.train_identities),
                mode=self.mode,
                seed=self.seed,
            )
        self.optimizer = SGD(self.model.parameters, momentum=self.cfg.momentum)
        self.rng = np.random.default_rng([self.seed, 1])
        self.checkpoint = Checkpoint(self.run_dir / CHECKPOINT_NAME)
        per_step = self.cfg.persons_per_batch * self.cfg.tuples_per_person
        self.steps_per_epoch = math.ceil(len(self.dataset.train) / per_step)

    def learning_rate(self, epoch: int) -> float:
        return lr_at_epoch(epoch, self.cfg.lr, self.cfg.lr_decayed, self.cfg.lr_decay_epoch)

    def train_step(self, lr: float) -> Dict[str, float]:
        batch = compose_batch(
            self.dataset,
            self.rng,
            self.cfg.persons_per_batch,
            self.cfg.tuples_per_person,
            self.cfg.negs_per_image,
        )
        with Tape() as tape:
            loss, breakdown = total_loss(batch, self.model, self.weights, self.mode)
            if not np.isfinite(breakdown["total"]):
                raise NumericError(
                    f"non-finite loss {breakdown}; last good checkpoint kept at "
                    f"{self.checkpoint.model_path}"
                )
            tape.backward(loss, self.model.parameters)
        self.optimizer.step(lr)
        return breakdown

    def train(self) -> List[Dict[str, float]]:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        logger.info(
            f"training {self.mode} (seed {self.seed}) for {self.cfg.epochs} epochs "
            f"of {self.steps_per_epoch} steps"
        )
        step = 0
        previous_lr = None
        with precision(self.dtype), open(
            self.run_dir / "loss.csv", "w", encoding="utf-8", newline=""
        ) as f:
            writer = csv.DictWriter(f, fieldnames=LOSS_COLUMNS)
            writer.writeheader()
            for epoch in range(1, self.cfg.epochs + 1):
                lr = self.learning_rate(epoch)
                if previous_lr is not None and lr != previous_lr:
                    logger.info(f"epoch {epoch}: learning rate {previous_lr:g} -> {lr:g}")
                previous_lr = lr
                for _ in tqdm(
                    range(self.steps_per_epoch), desc=f"epoch {epoch}", leave=False
                ):
                    step += 1
                    row = {"epoch": epoch, "step": step, **self.train_step(lr)}
                    writer.writerow(row)
                    self.history.append(row)
                f.flush()
                self.checkpoint.save(self.model.store)
                last = self.history[-1]
                logger.info(f"epoch {epoch} done, last total loss {last['total']:.4f}")

        if self.cfg.plot and self.history:
            convergence_plot(self.history, figname=self.run_dir / "loss.png")
        return self.history


def load_model(
    cfg: DictConfig, dataset: Dataset, checkpoint: PathT, mode: Optional[str] = None
) -> LinGridModel:
    with precision(dtype_of(cfg.precision)):
        model = LinGridModel.from_config(
            cfg, dataset.vocab, len(dataset.train_identities), mode=mode
        )
    Checkpoint(checkpoint).load_into(model.store)
    return model
