"""Grapheme-to-phoneme lookup against a JSON lexicon."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from ..errors import EmptyText, UnknownToken


@dataclass(frozen=True)
class Lexicon:
    name: str
    symbols: tuple[str, ...]
    graphemes: dict
    pad: str = "<pad>"
    eos: str = "<eos>"
    boundary: str = "_"

    @classmethod
    def from_dict(cls, obj: dict) -> "Lexicon":
        specials = obj.get("specials", {})
        lex = cls(
            name=obj.get("name", "custom"),
            symbols=tuple(obj["symbols"]),
            graphemes=dict(obj["graphemes"]),
            pad=specials.get("pad", "<pad>"),
            eos=specials.get("eos", "<eos>"),
            boundary=specials.get("boundary", "_"),
        )
        missing = set(lex.graphemes.values()) - set(lex.symbols)
        if missing:
            raise ValueError(f"lexicon maps to undefined symbols: {sorted(missing)}")
        return lex

    @classmethod
    def load(cls, path) -> "Lexicon":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "name": self.name,
            "specials": {"pad": self.pad, "eos": self.eos, "boundary": self.boundary},
            "symbols": list(self.symbols),
            "graphemes": dict(self.graphemes),
        }

    def __len__(self):
        return len(self.symbols)

    def id(self, symbol: str) -> int:
        return self.symbols.index(symbol)

    @property
    def pad_id(self) -> int:
        return self.id(self.pad)

    @property
    def eos_id(self) -> int:
        return self.id(self.eos)

    @property
    def phonemes(self) -> tuple[str, ...]:
        return tuple(s for s in self.symbols if s not in (self.pad, self.eos, self.boundary))


def load_lexicon(name: str = "toy") -> Lexicon:
    with resources.files("talkinghead.assets").joinpath(f"lexicon_{name}.json").open() as fh:
        return Lexicon.from_dict(json.load(fh))


def normalize_text(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().lower())


def phonemize(text: str, lexicon: Lexicon) -> list[int]:
    """Map normalised text to symbol ids and append EOS."""
    norm = normalize_text(text)
    if not norm:
        raise EmptyText("text is empty")
    ids = []
    for ch in norm:
        if ch not in lexicon.graphemes:
            raise UnknownToken(ch)
        ids.append(lexicon.id(lexicon.graphemes[ch]))
    ids.append(lexicon.eos_id)
    return ids


def detokenize(ids, lexicon: Lexicon) -> str:
    inverse = {lexicon.id(sym): g for g, sym in lexicon.graphemes.items()}
    out = []
    for i in ids:
        if i == lexicon.eos_id:
            break
        if i == lexicon.pad_id:
            continue
        out.append(inverse[i])
    return "".join(out)
