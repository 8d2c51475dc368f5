"""Tokenizer, lexicon tagger, noun-phrase chunker and vocabulary."""
import logging
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from lingrid.errors import ConfigError

PathT = os.PathLike

logger = logging.getLogger(__name__)

TAGS = ("DT", "JJ", "NN", "IN", "VB", "PRP", "CC", "PUNCT", "OTHER")
CLOSED_CLASS_TAGS = ("DT", "IN", "PRP", "CC", "VB")
DEFAULT_LEXICON = Path(__file__).with_name("lexicon.txt")

TOKEN_RE = re.compile(r"\w+(?:[-']\w+)*|[^\w\s]")
PUNCT_RE = re.compile(r"^[^\w\s]+$")

# chunk grammar, tag-pattern notation
GRAMMAR = {
    "PNP": "<DT>?<JJ>*<NN>+<IN><DT>?<JJ>*<NN>+",
    "JNP": "<DT>?<JJ>+<NN>+",
}
TAG_CODES = {
    "DT": "D",
    "JJ": "J",
    "NN": "N",
    "IN": "I",
    "VB": "V",
    "PRP": "P",
    "CC": "C",
    "PUNCT": "X",
    "OTHER": "O",
}

SPECIALS = ("<start>", "<end>", "<unk>")


@dataclass(frozen=True)
class TaggedToken:
    surface: str
    tag: str

    def __post_init__(self):
        if not self.surface or any(c.isspace() for c in self.surface):
            raise ConfigError(f"invalid token surface {self.surface!r}")
        if self.tag not in TAGS:
            raise ConfigError(f"unknown tag {self.tag}")


@dataclass(frozen=True)
class Phrase:
    tokens: Tuple[TaggedToken, ...]
    kind: str
    source_span: Tuple[int, int]

    @property
    def words(self) -> List[str]:
        return [t.surface for t in self.tokens]

    @property
    def text(self) -> str:
        return " ".join(self.words)


@dataclass
class Lexicon:
    closed: Dict[str, str] = field(default_factory=dict)
    adjectives: frozenset = frozenset()
    suffixes: List[Tuple[str, str]] = field(default_factory=list)

    @classmethod
    def load(cls, path: Optional[PathT] = None) -> "Lexicon":
        path = Path(path) if path else DEFAULT_LEXICON
        closed: Dict[str, str] = {}
        adjectives = set()
        suffixes = []
        section = None
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                word = line.strip().lower()
                if not word or word.startswith("#"):
                    continue
                if word.startswith("[") and word.endswith("]"):
                    section = word[1:-1]
                    continue
                if section is None:
                    raise ConfigError(f"{path}:{line_no}: word outside a section")
                if section.startswith("suffix:"):
                    suffixes.append((word, section.split(":", 1)[1].upper()))
                elif section.upper() == "JJ":
                    adjectives.add(word)
                elif section.upper() in CLOSED_CLASS_TAGS:
                    if word in closed and closed[word] != section.upper():
                        raise ConfigError(
                            f"{path}:{line_no}: {word!r} listed as both "
                            f"{closed[word]} and {section.upper()}"
                        )
                    closed[word] = section.upper()
                else:
                    raise ConfigError(f"{path}:{line_no}: unknown section [{section}]")
        # longest suffix wins
        suffixes.sort(key=lambda s: -len(s[0]))
        return cls(closed, frozenset(adjectives), suffixes)

    def tag(self, word: str) -> str:
        if PUNCT_RE.match(word):
            return "PUNCT"
        if word.isdigit():
            return "OTHER"
        if word in self.closed:
            return self.closed[word]
        if word in self.adjectives:
            return "JJ"
        for suffix, tag in self.suffixes:
            if word.endswith(suffix) and len(word) > len(suffix) + 1:
                return tag
        return "NN"


_DEFAULT: Dict[str, Lexicon] = {}


def default_lexicon() -> Lexicon:
    if "lexicon" not in _DEFAULT:
        _DEFAULT["lexicon"] = Lexicon.load()
    return _DEFAULT["lexicon"]


def tokenize(text: str) -> List[str]:
    return TOKEN_RE.findall(text.lower())


def pos_tag(tokens: Sequence[str], lexicon: Optional[Lexicon] = None) -> List[TaggedToken]:
    lexicon = lexicon or default_lexicon()
    return [TaggedToken(t, lexicon.tag(t)) for t in tokens]


def compile_pattern(pattern: str) -> "re.Pattern":
    return re.compile(re.sub(r"<(\w+)>", lambda m: TAG_CODES[m.group(1)], pattern))


CHUNK_RULES = [(kind, compile_pattern(p)) for kind, p in GRAMMAR.items()]


def chunk_phrases(tagged: Sequence[TaggedToken]) -> List[Phrase]:
    """Left-to-right maximal munch; PNP is tried before JNP at each start."""
    codes = "".join(TAG_CODES[t.tag] for t in tagged)
    phrases = []
    start = 0
    while start < len(codes):
        for kind, rule in CHUNK_RULES:
            m = rule.match(codes, start)
            if m:
                end = m.end()
                phrases.append(Phrase(tuple(tagged[start:end]), kind, (start, end)))
                start = end
                break
        else:
            start += 1
    return phrases


def extract_phrases(text: str, lexicon: Optional[Lexicon] = None) -> List[Phrase]:
    return chunk_phrases(pos_tag(tokenize(text), lexicon))


def format_phrases(phrases: Iterable[Phrase]) -> str:
    return "\t".join(f"{p.text}\t{p.kind}" for p in phrases)


@dataclass
class Vocab:
    words: List[str]

    def __post_init__(self):
        if tuple(self.words[: len(SPECIALS)]) != SPECIALS:
            raise ConfigError(f"vocabulary must start with {SPECIALS}")
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ConfigError("vocabulary contains duplicate words")

    def __len__(self) -> int:
        return len(self.words)

    @property
    def start(self) -> int:
        return self.index["<start>"]

    @property
    def end(self) -> int:
        return self.index["<end>"]

    @property
    def unk(self) -> int:
        return self.index["<unk>"]

    def lookup(self, word: str) -> int:
        return self.index.get(word, self.unk)

    def save(self, path: PathT) -> None:
        Path(path).write_text("".join(f"{w}\n" for w in self.words), encoding="utf-8")

    @classmethod
    def load(cls, path: PathT) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.splitlines())


def build_vocab(corpus: Iterable[str], min_count: int = 1) -> Vocab:
    counts = Counter(token for text in corpus for token in tokenize(text))
    kept = sorted(
        (w for w, c in counts.items() if c >= min_count and w not in SPECIALS),
        key=lambda w: (-counts[w], w),
    )
    return Vocab(list(SPECIALS) + kept)


TokenT = Union[str, TaggedToken]


def encode(tokens: Sequence[TokenT], vocab: Vocab, boundaries: bool = False) -> List[int]:
    indices = [
        vocab.lookup(t.surface if isinstance(t, TaggedToken) else t) for t in tokens
    ]
    if boundaries:
        indices = [vocab.start] + indices + [vocab.end]
    return indices


def decode(indices: Sequence[int], vocab: Vocab) -> List[str]:
    return [vocab.words[i] for i in indices]
