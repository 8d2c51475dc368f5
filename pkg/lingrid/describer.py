import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional

import numpy as np

from lingrid.errors import ConfigError

PathT = os.PathLike

WILDCARDS_DIR = Path(__file__).with_name("wildcards")
PRONOUNS = {"man": "he", "woman": "she"}


class CardDealer:
    """Fills ``__name__`` wildcards from ``<wildcards_dir>/<name>.txt``.

    Names bound in ``fixed`` take precedence over files; the bound value is
    used verbatim, so binding a name to "" drops the clause.
    """

    def __init__(self, wildcards_dir: PathT = WILDCARDS_DIR):
        self.find_wildcards(wildcards_dir)

    def find_wildcards(self, wildcards_dir: PathT) -> None:
        wdir = Path(wildcards_dir)
        if not wdir.is_dir():
            raise ConfigError(f"wildcards directory not found: {wdir}")
        self.wildcards: Dict[str, list] = {}
        for w in sorted(wdir.glob("*.txt")):
            with open(w, "r", encoding="utf-8") as f:
                lines = [line.rstrip("\n") for line in f if line.strip()]
            self.wildcards[w.stem] = lines

    def sample_wildcard(
        self, name: str, rng: np.random.Generator, fixed: Mapping[str, str]
    ) -> str:
        if name in fixed:
            return fixed[name]
        if name in self.wildcards:
            lines = self.wildcards[name]
            return lines[int(rng.integers(len(lines)))]
        raise ConfigError(f"unknown wildcard __{name}__")

    def replace_wildcards(
        self, text: str, rng: np.random.Generator, fixed: Optional[Mapping[str, str]] = None
    ) -> str:
        fixed = fixed or {}
        chunks = text.split("__")
        chunks[1::2] = [self.sample_wildcard(w, rng, fixed) for w in chunks[1::2]]
        return "".join(chunks)


_DEALERS: Dict[str, CardDealer] = {}


def default_dealer() -> CardDealer:
    if "default" not in _DEALERS:
        _DEALERS["default"] = CardDealer()
    return _DEALERS["default"]


@dataclass
class Describer:
    dealer: CardDealer

    def describe(self, attributes: Mapping[str, Optional[str]], rng: np.random.Generator) -> str:
        gender = attributes["gender"]
        fixed = {"gender": gender, "pronoun": PRONOUNS[gender]}
        for optional in ("hat", "bag"):
            if attributes.get(optional) is None:
                fixed[optional] = ""
        template = self.dealer.sample_wildcard("templates", rng, {})
        text = self.dealer.replace_wildcards(template, rng, fixed)
        colors = {k: v for k, v in attributes.items() if k != "gender" and v is not None}
        return text.format(**colors)
