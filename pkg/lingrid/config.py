"""Run configuration: the hydra schema, flat key=value files and run manifests."""
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from hydra.core.config_store import ConfigStore
from omegaconf import DictConfig, OmegaConf
from omegaconf.errors import OmegaConfBaseException

from lingrid.association import MODES
from lingrid.encoders import TOTAL_STRIDE
from lingrid.errors import ConfigError

PathT = os.PathLike

logger = logging.getLogger(__name__)

COMMANDS = (
    "gen-data",
    "train",
    "eval",
    "ablate",
    "sweep",
    "gradcheck",
    "retrieve",
    "heatmap",
    "phrases",
)
ARCHITECTURE_KEYS = (
    "mode",
    "image_height",
    "image_width",
    "conv_widths",
    "embed_dim",
    "word_dim",
    "hidden_dim",
    "out_dim",
    "pool_window",
)


@dataclass
class RunConfig:
    cmd: str = "train"

    # paths
    data_dir: str = "data"
    run_dir: str = "runs/default"
    checkpoint: Optional[str] = None
    config_file: Optional[str] = None
    force: bool = False

    # dataset
    n_train_ids: int = 64
    n_test_ids: int = 16
    images_per_id: int = 4
    queries_per_id: int = 1
    data_seed: int = 0
    image_height: int = 64
    image_width: int = 32
    noise: float = 0.05
    jitter: int = 2
    flip_prob: float = 0.5
    min_count: int = 1
    missing_text_rate: float = 0.0

    # model
    embed_dim: int = 64
    word_dim: int = 32
    hidden_dim: int = 64
    out_dim: int = 64
    conv_widths: List[int] = field(default_factory=lambda: [16, 32, 64])
    pool_window: List[int] = field(default_factory=lambda: [2, 2])

    # losses
    mode: str = "proposed"
    lambda_t: float = 0.1
    lambda_dis: float = 1.0
    lambda_rec: float = 1.0
    rank_margin: float = 0.2

    # optimisation
    lr: float = 0.01
    lr_decayed: float = 0.001
    lr_decay_epoch: int = 20
    momentum: float = 0.9
    epochs: int = 30
    persons_per_batch: int = 8
    tuples_per_person: int = 2
    negs_per_image: int = 6
    seed: int = 0
    precision: str = "single"

    # ablation and sweep
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    modes: List[str] = field(default_factory=lambda: list(MODES))
    lambda_t_values: List[float] = field(default_factory=lambda: [0.0, 0.05, 0.1, 0.5, 1.0])
    sweep_mode: str = "GDA"
    workers: int = 1

    # retrieve / heatmap / phrases
    text: Optional[str] = None
    image: Optional[str] = None
    phrase: Optional[str] = None
    phrases_file: Optional[str] = None
    top_k: int = 10
    heatmap_out: Optional[str] = None
    lexicon_path: Optional[str] = None
    plot: bool = True


cs = ConfigStore.instance()
cs.store(name="base_config", node=RunConfig)


def validate_config(cfg: DictConfig) -> DictConfig:
    if cfg.cmd not in COMMANDS:
        raise ConfigError(f"unknown command {cfg.cmd!r}, expected one of {list(COMMANDS)}")
    for mode in [cfg.mode, cfg.sweep_mode, *cfg.modes]:
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}, expected one of {list(MODES)}")
    for key in ("lambda_t", "lambda_dis", "lambda_rec", "rank_margin"):
        if cfg[key] < 0:
            raise ConfigError(f"{key} must be >= 0, got {cfg[key]}")
    if any(v < 0 for v in cfg.lambda_t_values):
        raise ConfigError(f"lambda_t_values must be >= 0, got {list(cfg.lambda_t_values)}")
    if cfg.n_test_ids < 2:
        raise ConfigError(f"n_test_ids must be >= 2, got {cfg.n_test_ids}")
    if cfg.image_height % TOTAL_STRIDE or cfg.image_width % TOTAL_STRIDE:
        raise ConfigError(
            f"image size {cfg.image_height}x{cfg.image_width} must be divisible by {TOTAL_STRIDE}"
        )
    grid = (cfg.image_height // TOTAL_STRIDE, cfg.image_width // TOTAL_STRIDE)
    if len(cfg.pool_window) != 2 or any(
        w < 1 or w > g for w, g in zip(cfg.pool_window, grid)
    ):
        raise ConfigError(f"pooling window {list(cfg.pool_window)} does not fit grid {grid}")
    if cfg.precision not in ("single", "double"):
        raise ConfigError(f"precision must be single or double, got {cfg.precision!r}")
    for key in ("epochs", "persons_per_batch", "tuples_per_person", "negs_per_image", "workers"):
        if cfg[key] < 1:
            raise ConfigError(f"{key} must be >= 1, got {cfg[key]}")
    if cfg.lr < 0 or cfg.lr_decayed < 0:
        raise ConfigError("learning rates must be >= 0")
    if not 0.0 <= cfg.momentum < 1.0:
        raise ConfigError(f"momentum must be in [0, 1), got {cfg.momentum}")
    if not cfg.seeds:
        raise ConfigError("seeds must list at least one seed")
    return cfg


def schema() -> DictConfig:
    cfg = OmegaConf.structured(RunConfig)
    OmegaConf.set_struct(cfg, True)
    return cfg


def parse_config_lines(lines: Sequence[str], source: str = "<config>") -> DictConfig:
    dotlist = []
    for line_no, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected key=value, got {line!r}")
        dotlist.append(line)
    try:
        return OmegaConf.from_dotlist(dotlist)
    except OmegaConfBaseException as e:
        raise ConfigError(f"{source}: {e}") from None


def merge_strict(base: DictConfig, *others: DictConfig) -> DictConfig:
    """Merge onto the schema; unknown keys and bad types are config errors."""
    try:
        merged = OmegaConf.merge(schema(), base, *others)
    except OmegaConfBaseException as e:
        raise ConfigError(str(e).splitlines()[0]) from None
    return merged


def read_config_file(path: PathT) -> DictConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    return merge_strict(OmegaConf.create({}), parse_config_lines(lines, str(path)))


def apply_config_file(cfg: DictConfig, overrides: Sequence[str] = ()) -> DictConfig:
    """Layer ``cfg.config_file`` under the command-line ``overrides``."""
    if not cfg.config_file:
        return cfg
    path = Path(cfg.config_file)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    from_file = parse_config_lines(lines, str(path))
    logger.info(f"merging {len(from_file)} keys from {path}")
    return merge_strict(cfg, from_file, parse_config_lines(overrides, "<command line>"))


def format_value(value: Any) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(format_value(v) for v in value) + "]"
    return str(value)


def write_config_file(cfg: DictConfig, path: PathT) -> None:
    values = OmegaConf.to_container(cfg, resolve=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for key, value in values.items():
            f.write(f"{key}={format_value(value)}\n")


@dataclass
class RunManifest:
    config: Dict[str, Any]
    dataset_hash: str
    metrics: Dict[str, float]
    wall_clock_s: float
    seed: int
    mode: str

    def save(self, path: PathT) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: PathT) -> "RunManifest":
        with open(path, "r", encoding="utf-8") as f:
            return cls(**json.load(f))

    def reproducible_part(self) -> Dict[str, Any]:
        """Everything except the wall-clock time."""
        data = asdict(self)
        data.pop("wall_clock_s")
        return data
