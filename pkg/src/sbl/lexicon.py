"""Phoneme inventories, target encoding, and PER / word-accuracy metrics.

Token ids are dense: ``<pad>``, ``<s>``, ``</s>`` first (PAD is 0), then the
sorted union of phoneme symbols, then one language flag per language.
"""
from __future__ import annotations

import hashlib
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, ContractError, DataError

PAD, BOS, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<s>", "</s>")


def flag_symbol(language: str) -> str:
    return f"<F:{language}>"


@dataclass(frozen=True)
class LexiconEntry:
    word: str
    language: str
    phonemes: tuple[str, ...]


@dataclass(frozen=True)
class PhonemeInventory:
    languages: tuple[str, ...]
    phonemes: Mapping[str, tuple[str, ...]]
    symbols: tuple[str, ...]

    @classmethod
    def from_symbols(cls, per_language: Mapping[str, Iterable[str]]) -> PhonemeInventory:
        if not per_language:
            raise DataError("an inventory needs at least one language")
        languages = tuple(per_language)
        phonemes = {lang: tuple(sorted(set(per_language[lang]))) for lang in languages}
        for lang, syms in phonemes.items():
            if not syms:
                raise DataError(f"language {lang!r} has no phonemes")
            bad = [s for s in syms if s in SPECIALS or s.startswith("<F:")]
            if bad:
                raise DataError(f"reserved symbols used as phonemes: {bad}")
        union = sorted(set().union(*phonemes.values()))
        symbols = SPECIALS + tuple(union) + tuple(flag_symbol(lang) for lang in languages)
        return cls(languages, phonemes, symbols)

    def __post_init__(self):
        object.__setattr__(self, "_ids", {s: i for i, s in enumerate(self.symbols)})

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def vocab_size(self) -> int:
        return len(self.symbols)

    @property
    def n_phonemes(self) -> int:
        return len(self.symbols) - len(SPECIALS) - len(self.languages)

    @property
    def phoneme_ids(self) -> range:
        return range(len(SPECIALS), len(SPECIALS) + self.n_phonemes)

    @property
    def flag_ids(self) -> dict[str, int]:
        return {lang: self.id(flag_symbol(lang)) for lang in self.languages}

    @property
    def shared(self) -> frozenset[str]:
        sets = [set(p) for p in self.phonemes.values()]
        return frozenset(set.intersection(*sets)) if sets else frozenset()

    def id(self, symbol: str) -> int:
        try:
            return self._ids[symbol]
        except KeyError:
            raise DataError(f"unknown symbol {symbol!r}") from None

    def symbol(self, token: int) -> str:
        return self.symbols[token]

    def is_flag(self, token: int) -> bool:
        return token >= len(SPECIALS) + self.n_phonemes

    def language_of_flag(self, token: int) -> str:
        return self.symbols[token][3:-1]

    def stats(self) -> dict[str, int]:
        out = {f"size_{lang}": len(p) for lang, p in self.phonemes.items()}
        out["shared"] = len(self.shared)
        out["union"] = self.n_phonemes
        return out

    def fingerprint(self) -> str:
        text = "\n".join(self.dump_lines())
        return hashlib.sha256(text.encode()).hexdigest()

    def dump_lines(self) -> list[str]:
        owners: dict[str, list[str]] = {}
        for lang, syms in self.phonemes.items():
            for s in syms:
                owners.setdefault(s, []).append(lang)
        lines = []
        for i, s in enumerate(self.symbols):
            if s in owners:
                langs = ",".join(owners[s])
            elif s.startswith("<F:"):
                langs = self.language_of_flag(i)
            else:
                langs = "-"
            lines.append(f"{s}\t{i}\t{langs}")
        return lines

    def write(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.dump_lines()) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> PhonemeInventory:
        per_language: dict[str, list[str]] = {}
        languages: list[str] = []
        rows = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected symbol<TAB>id<TAB>languages")
            symbol, token, langs = parts
            rows.append((symbol, int(token)))
            if symbol.startswith("<F:"):
                languages.append(langs)
            elif symbol not in SPECIALS:
                for lang in langs.split(","):
                    per_language.setdefault(lang, []).append(symbol)
        inv = cls.from_symbols({lang: per_language.get(lang, []) for lang in languages})
        if rows != [(s, i) for i, s in enumerate(inv.symbols)]:
            raise DataError(f"{path}: ids are not in canonical order")
        return inv


def read_lexicon(path: str | Path) -> list[LexiconEntry]:
    """Parse ``word<TAB>language<TAB>phonemes`` lines; ``#`` starts a comment line."""
    entries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not parts[2].split():
            raise DataError(f"{path}:{lineno}: expected word<TAB>language<TAB>phonemes")
        entries.append(LexiconEntry(parts[0], parts[1], tuple(parts[2].split())))
    return entries


def write_lexicon(path: str | Path, entries: Iterable[LexiconEntry]) -> None:
    lines = [f"{e.word}\t{e.language}\t{' '.join(e.phonemes)}" for e in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def build_inventory(lexicons: Mapping[str, Sequence[LexiconEntry]]) -> PhonemeInventory:
    """Build the joint inventory from per-language lexica (language order is kept)."""
    per_language = {}
    for lang, entries in lexicons.items():
        if not entries:
            raise DataError(f"lexicon for language {lang!r} is empty")
        seen = set()
        symbols = set()
        for e in entries:
            if e.language != lang:
                raise DataError(f"entry {e.word!r} is tagged {e.language!r}, expected {lang!r}")
            if e.word in seen:
                raise DataError(f"duplicate word {e.word!r} in language {lang!r}")
            seen.add(e.word)
            symbols.update(e.phonemes)
        per_language[lang] = symbols
    return PhonemeInventory.from_symbols(per_language)


def build_inventory_from_files(paths: Sequence[str | Path]) -> PhonemeInventory:
    lexicons: dict[str, list[LexiconEntry]] = {}
    for path in paths:
        entries = read_lexicon(path)
        if not entries:
            raise DataError(f"lexicon file {path} has no entries")
        for e in entries:
            lexicons.setdefault(e.language, []).append(e)
    return build_inventory(lexicons)


@dataclass(frozen=True)
class TargetSequence:
    """A padded target in both decoding orders.

    Only the phoneme payload is reversed for the right-to-left order; the
    language flag, when present, leads both orders.
    """

    language: str
    raw: tuple[int, ...]
    l2r: tuple[int, ...]
    r2l: tuple[int, ...]
    flag: int | None

    @property
    def flagged(self) -> tuple[int, ...]:
        return self.raw if self.flag is None else (self.flag, *self.raw)

    @property
    def length(self) -> int:
        return len(self.l2r)


def encode(entry: LexiconEntry, inventory: PhonemeInventory, with_flag: bool, max_len: int) -> TargetSequence:
    if entry.language not in inventory.phonemes:
        raise DataError(f"language {entry.language!r} not in inventory")
    allowed = inventory.phonemes[entry.language]
    for s in entry.phonemes:
        if s not in allowed:
            raise DataError(f"phoneme {s!r} is not in the {entry.language!r} inventory")
    raw = tuple(inventory.id(s) for s in entry.phonemes)
    flag = inventory.id(flag_symbol(entry.language)) if with_flag else None
    head = (flag,) if with_flag else ()
    needed = len(head) + len(raw) + 1
    if needed > max_len:
        raise ContractError(f"word {entry.word!r} needs {needed} positions but L={max_len}")
    tail = (EOS,) + (PAD,) * (max_len - needed)
    return TargetSequence(
        language=entry.language,
        raw=raw,
        l2r=head + raw + tail,
        r2l=head + raw[::-1] + tail,
        flag=flag,
    )


def strip(tokens: Iterable[int], inventory: PhonemeInventory) -> list[int]:
    """Phoneme payload of a token sequence: stop at EOS, drop flags / BOS / PAD."""
    out = []
    for t in tokens:
        t = int(t)
        if t == EOS:
            break
        if t in (PAD, BOS) or inventory.is_flag(t):
            continue
        out.append(t)
    return out


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit substitution / insertion / deletion costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i]
        for j, h in enumerate(hyp, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h)))
        prev = cur
    return prev[-1]


def phoneme_error_rate(ref: Sequence, hyp: Sequence) -> float:
    if len(ref) == 0:
        raise ContractError("PER needs a non-empty reference")
    return edit_distance(ref, hyp) / len(ref)


def word_accuracy(
    pairs: Iterable[tuple[Sequence, Sequence]], inventory: PhonemeInventory | None = None
) -> float:
    """Fraction of (ref, hyp) pairs that match exactly; ``1 - WER`` at word level.

    With an inventory both sides are stripped first, so flags and the PAD
    tail never count as errors.
    """
    pairs = list(pairs)
    if not pairs:
        raise ContractError("word accuracy over an empty batch")
    if inventory is not None:
        pairs = [(strip(r, inventory), strip(h, inventory)) for r, h in pairs]
    return sum(list(r) == list(h) for r, h in pairs) / len(pairs)


def corpus_per(pairs: Iterable[tuple[Sequence, Sequence]]) -> float:
    """Total edits over total reference length."""
    edits = total = 0
    for ref, hyp in pairs:
        edits += edit_distance(ref, hyp)
        total += len(ref)
    if total == 0:
        raise ContractError("PER over empty references")
    return edits / total


def check_languages(inventory: PhonemeInventory, languages: Iterable[str]) -> None:
    missing = [lang for lang in languages if lang not in inventory.phonemes]
    if missing:
        raise ConfigError(f"languages {missing} are not in the inventory {inventory.languages}")
