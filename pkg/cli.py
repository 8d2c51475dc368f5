import logging
import sys

import hydra
from hydra.core.hydra_config import HydraConfig
from omegaconf import DictConfig

from lingrid.commands import run_command
from lingrid.config import apply_config_file
from lingrid.errors import LinGridError

logger = logging.getLogger(__name__)


@hydra.main(version_base=None, config_path="conf", config_name="config")
def main(cfg: DictConfig) -> None:
    try:
        cfg = apply_config_file(cfg, HydraConfig.get().overrides.task)
    except LinGridError as e:
        logger.error(str(e))
        sys.exit(e.exit_code)
    sys.exit(run_command(cfg))


if __name__ == "__main__":
    main()
