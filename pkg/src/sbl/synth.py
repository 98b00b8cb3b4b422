"""Paired synthetic languages rendered as noisy viseme feature sequences.

Phonemes map many-to-one onto visemes through one map defined over the
union inventory, so a phoneme shared by both languages always looks the
same. Each viseme is a fixed random unit vector; a phoneme occupies a few
frames of its viseme vector plus Gaussian noise.
"""
from __future__ import annotations

import itertools
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import read_features, write_features
from .errors import ConfigError, DataError
from .lexicon import LexiconEntry, PhonemeInventory, write_lexicon
from .seeding import stream

log = logging.getLogger(__name__)

LARGE_SIZES = (40, 48, 32)


@dataclass(frozen=True)
class SyntheticLanguageSpec:
    language: str
    phonemes: tuple[str, ...]
    shared: tuple[str, ...]
    viseme_of: dict[str, int]
    visemes: np.ndarray = field(compare=False, repr=False)
    word_len: tuple[int, int] = (2, 5)
    n_words: int = 50
    duration: tuple[int, int] = (2, 4)
    noise_std: float = 0.1

    @property
    def feature_dim(self) -> int:
        return self.visemes.shape[1]

    @property
    def n_visemes(self) -> int:
        return len(set(self.viseme_of.values()))

    def __eq__(self, other):
        if not isinstance(other, SyntheticLanguageSpec):
            return NotImplemented
        same_fields = (self.language, self.phonemes, self.shared, self.viseme_of, self.word_len,
                       self.n_words, self.duration, self.noise_std)
        other_fields = (other.language, other.phonemes, other.shared, other.viseme_of, other.word_len,
                        other.n_words, other.duration, other.noise_std)
        return same_fields == other_fields and np.array_equal(self.visemes, other.visemes)

    __hash__ = None


def generate_language_pair(
    seed: int,
    size_a: int = 12,
    size_b: int = 14,
    shared: int = 8,
    n_visemes: int = 0,
    languages: tuple[str, str] = ("A", "B"),
    word_len: tuple[int, int] = (2, 5),
    n_words: int = 50,
    duration: tuple[int, int] = (2, 4),
    feature_dim: int = 16,
    noise_std: float = 0.1,
) -> tuple[SyntheticLanguageSpec, SyntheticLanguageSpec]:
    """Two language specs sharing ``shared`` phonemes and one viseme map.

    ``n_visemes=0`` gives every union phoneme its own viseme.
    """
    if min(size_a, size_b) < 1 or shared < 0:
        raise ConfigError("inventory sizes must be positive and shared non-negative")
    if shared > min(size_a, size_b):
        raise ConfigError(f"shared={shared} exceeds the smaller inventory ({min(size_a, size_b)})")
    if len(set(languages)) != 2:
        raise ConfigError(f"need two distinct language names, got {languages}")
    lo, hi = word_len
    if not 1 <= lo <= hi:
        raise ConfigError(f"bad word length range {word_len}")
    if not 1 <= duration[0] <= duration[1]:
        raise ConfigError(f"bad duration range {duration}")
    if noise_std < 0 or feature_dim < 1:
        raise ConfigError("noise std must be >= 0 and feature dim >= 1")

    common = [f"s{k:02d}" for k in range(shared)]
    own_a = [f"{languages[0].lower()}{k:02d}" for k in range(size_a - shared)]
    own_b = [f"{languages[1].lower()}{k:02d}" for k in range(size_b - shared)]
    union = common + own_a + own_b
    if len(set(union)) != len(union):
        raise ConfigError(f"language names {languages} produce clashing phoneme symbols")
    n_vis = n_visemes or len(union)
    if not 1 <= n_vis <= len(union):
        raise ConfigError(f"viseme count {n_vis} must lie in [1, {len(union)}]")

    rng = stream(seed, "language-pair")
    order = rng.permutation(len(union))
    assignment = np.empty(len(union), dtype=np.int64)
    # Every viseme gets at least one phoneme; the rest land anywhere.
    assignment[order[:n_vis]] = np.arange(n_vis)
    assignment[order[n_vis:]] = rng.integers(0, n_vis, size=len(union) - n_vis)
    viseme_of = {s: int(v) for s, v in zip(union, assignment)}
    table = rng.normal(size=(n_vis, feature_dim))
    table /= np.linalg.norm(table, axis=1, keepdims=True)

    def make(lang, own):
        syms = tuple(sorted(common + own))
        return SyntheticLanguageSpec(
            language=lang,
            phonemes=syms,
            shared=tuple(common),
            viseme_of={s: viseme_of[s] for s in syms},
            visemes=table,
            word_len=(lo, hi),
            n_words=n_words,
            duration=tuple(duration),
            noise_std=float(noise_std),
        )

    return make(languages[0], own_a), make(languages[1], own_b)


def inventory_for(specs) -> PhonemeInventory:
    return PhonemeInventory.from_symbols({s.language: s.phonemes for s in specs})


def lexicon_capacity(n_symbols: int, word_len: tuple[int, int]) -> int:
    return sum(n_symbols**n for n in range(word_len[0], word_len[1] + 1))


def generate_lexicon(spec: SyntheticLanguageSpec, n_words: int, seed: int) -> list[LexiconEntry]:
    """``n_words`` distinct phoneme strings, length uniform over the spec's range."""
    if n_words < 1:
        raise ConfigError("n_words must be >= 1")
    capacity = lexicon_capacity(len(spec.phonemes), spec.word_len)
    if n_words > capacity:
        raise ConfigError(f"only {capacity} distinct words exist for {spec.language}, asked for {n_words}")
    rng = stream(seed, "lexicon", spec.language)
    lengths = range(spec.word_len[0], spec.word_len[1] + 1)
    left = {n: len(spec.phonemes) ** n for n in lengths}
    seen: set[tuple[str, ...]] = set()
    entries = []
    while len(entries) < n_words:
        open_lengths = [n for n in lengths if left[n] > 0]
        n = open_lengths[rng.integers(len(open_lengths))]
        word = tuple(spec.phonemes[i] for i in rng.integers(0, len(spec.phonemes), size=n))
        if word in seen:
            continue
        seen.add(word)
        left[n] -= 1
        entries.append(LexiconEntry(f"{spec.language}_{len(entries):03d}", spec.language, word))
    return entries


def render_features(entry: LexiconEntry, spec: SyntheticLanguageSpec, rng: np.random.Generator) -> np.ndarray:
    """Frames for one utterance: each phoneme holds its viseme vector for a random duration."""
    blocks = []
    for s in entry.phonemes:
        if s not in spec.viseme_of:
            raise DataError(f"phoneme {s!r} not in the {spec.language!r} spec")
        d = int(rng.integers(spec.duration[0], spec.duration[1] + 1))
        block = np.repeat(spec.visemes[spec.viseme_of[s]][None, :], d, axis=0)
        if spec.noise_std > 0:
            block = block + rng.normal(0.0, spec.noise_std, size=block.shape)
        blocks.append(block)
    return np.concatenate(blocks, axis=0)


def find_ambiguous_pairs(entries: list[LexiconEntry], spec: SyntheticLanguageSpec) -> list[tuple[str, str]]:
    """Word pairs with identical viseme strings but different phonemes (exhaustive)."""
    groups: dict[tuple[int, ...], list[LexiconEntry]] = defaultdict(list)
    for e in entries:
        groups[tuple(spec.viseme_of[s] for s in e.phonemes)].append(e)
    pairs = []
    for group in groups.values():
        for a, b in itertools.combinations(group, 2):
            if a.phonemes != b.phonemes:
                pairs.append((a.word, b.word))
    return pairs


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestRow:
    sample_id: str
    language: str
    word: str
    phonemes: tuple[str, ...]
    feature_path: str


@dataclass
class DatasetManifest:
    samples: list[ManifestRow]
    split: str
    root: Path = Path(".")

    def __len__(self):
        return len(self.samples)

    def languages(self) -> list[str]:
        return sorted({r.language for r in self.samples})

    def only(self, languages) -> DatasetManifest:
        keep = set(languages)
        return DatasetManifest([r for r in self.samples if r.language in keep], self.split, self.root)

    def entries(self) -> list[LexiconEntry]:
        return [LexiconEntry(r.word, r.language, r.phonemes) for r in self.samples]

    def load_features(self, row: ManifestRow) -> np.ndarray:
        return read_features(self.root / row.feature_path)

    def write(self, path: str | Path) -> None:
        lines = [
            f"{r.sample_id}\t{r.language}\t{r.word}\t{' '.join(r.phonemes)}\t{r.feature_path}" for r in self.samples
        ]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path, split: str = "") -> DatasetManifest:
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest {path} does not exist")
        rows = []
        seen = set()
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 tab-separated fields")
            if parts[0] in seen:
                raise DataError(f"{path}:{lineno}: duplicate sample id {parts[0]!r}")
            seen.add(parts[0])
            rows.append(ManifestRow(parts[0], parts[1], parts[2], tuple(parts[3].split()), parts[4]))
        return cls(rows, split or path.stem, path.parent)


def generate_dataset(
    specs,
    n_words: int,
    samples_per_word: int,
    train_fraction: float,
    seed: int,
    out_dir: str | Path,
) -> tuple[DatasetManifest, DatasetManifest]:
    """Render every language's lexicon and write joint train/test manifests.

    Each word's samples are split so the first ``round(k * train_fraction)``
    go to train and the rest to test; no feature file appears in both.
    """
    if samples_per_word < 1:
        raise ConfigError("samples_per_word must be >= 1")
    if not 0.0 < train_fraction <= 1.0:
        raise ConfigError(f"train fraction must lie in (0, 1], got {train_fraction}")
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    n_train = int(round(samples_per_word * train_fraction))
    train, test = [], []
    for spec in specs:
        lexicon = generate_lexicon(spec, n_words, seed)
        write_lexicon(out / f"lexicon_{spec.language}.tsv", lexicon)
        for entry in lexicon:
            for k in range(samples_per_word):
                sid = f"{entry.word}_{k:02d}"
                frames = render_features(entry, spec, stream(seed, "render", sid))
                rel = f"features/{sid}.sblf"
                write_features(out / rel, frames)
                row = ManifestRow(sid, spec.language, entry.word, entry.phonemes, rel)
                (train if k < n_train else test).append(row)
    if not test:
        log.warning("test split is empty (train_fraction=%s, samples_per_word=%d)", train_fraction, samples_per_word)
    inventory_for(specs).write(out / "inventory.tsv")
    train_m, test_m = DatasetManifest(train, "train", out), DatasetManifest(test, "test", out)
    train_m.write(out / "train.tsv")
    test_m.write(out / "test.tsv")
    return train_m, test_m


def specs_from_config(data) -> tuple[SyntheticLanguageSpec, SyntheticLanguageSpec]:
    """Language pair described by a ``DataConfig``."""
    return generate_language_pair(
        data.seed,
        size_a=data.size_a,
        size_b=data.size_b,
        shared=data.shared,
        n_visemes=data.visemes,
        languages=data.language_names,
        word_len=(data.word_len_min, data.word_len_max),
        n_words=data.words,
        duration=(data.dur_min, data.dur_max),
        feature_dim=data.feature_dim,
        noise_std=data.noise_std,
    )


def dataset_from_config(data, out_dir: str | Path | None = None):
    specs = specs_from_config(data)
    return specs, generate_dataset(specs, data.words, data.samples_per_word, data.train_fraction, data.seed,
                                   out_dir if out_dir is not None else data.dir)
