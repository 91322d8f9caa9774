"""Two-domain synthetic multi-modal data, feature files, answer vocabularies and batching.

The generator draws a shared "world" (answer concepts, a rendering map from
concept space to visual features, keyword semantics for questions) and then
samples a source and a target domain from it.  The target differs by
controlled shifts: a visual mean offset, extra variance in a target-only
subspace, conversational filler tokens, a skewed answer prior, a partially
overlapping answer vocabulary and an unanswerable class.
"""

from __future__ import annotations

import io
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

CATEGORIES = ("yes/no", "number", "other", "unanswerable")
DOMAIN_TAGS = ("source", "target")
N_ANNOTATORS = 10
UNANSWERABLE = "unanswerable"
MAX_QUESTION_LEN = 24
OOV = -1

_OTHER_WORDS = (
    "red blue green white black yellow orange pink purple brown gray dog cat bird horse cow "
    "sheep car bus train truck bike boat plane table chair bed sofa laptop phone book cup "
    "bottle bowl pizza cake apple banana tree grass water snow sky wall door window kitchen "
    "street beach tennis soccer baseball frisbee kite umbrella clock vase remote keyboard "
    "mouse oven sink"
).split()


class DataError(ValueError):
    """Malformed data or an impossible generator configuration."""


class FeatureFileError(DataError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def category_of(answer: str) -> str:
    a = normalize_answer(answer)
    if a in ("yes", "no"):
        return "yes/no"
    if a.isdigit():
        return "number"
    if a == UNANSWERABLE:
        return "unanswerable"
    return "other"


def normalize_answer(answer: str) -> str:
    return answer.strip().lower()


@dataclass
class Sample:
    regions: np.ndarray  # (K, d_v)
    grid: np.ndarray  # (G, d_v)
    tokens: np.ndarray  # (T,) int64, 1 <= T <= 24, no padding
    answers: tuple[str, ...]
    category: str
    domain: str

    def __post_init__(self):
        if len(self.answers) != N_ANNOTATORS:
            raise DataError(f"a sample needs exactly {N_ANNOTATORS} annotator answers, got {len(self.answers)}")
        if len(self.tokens) < 1:
            raise DataError("a sample needs at least one question token")
        if self.category not in CATEGORIES:
            raise DataError(f"unknown category {self.category!r}")
        if self.domain not in DOMAIN_TAGS:
            raise DataError(f"unknown domain {self.domain!r}")

    def consensus(self) -> str:
        """Most frequent normalized annotator answer; ties go to the lexicographically smallest."""
        counts = Counter(normalize_answer(a) for a in self.answers)
        return min(counts, key=lambda a: (-counts[a], a))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            np.array_equal(self.regions, other.regions)
            and np.array_equal(self.grid, other.grid)
            and np.array_equal(self.tokens, other.tokens)
            and tuple(self.answers) == tuple(other.answers)
            and self.category == other.category
            and self.domain == other.domain
        )


# ----------------------------------------------------------------------
# answer vocabulary


@dataclass(frozen=True)
class AnswerVocab:
    answers: tuple[str, ...]
    counts: tuple[int, ...]
    cap: int

    def __post_init__(self):
        if len(set(self.answers)) != len(self.answers):
            raise DataError("answer vocabulary entries must be unique")

    def __len__(self) -> int:
        return len(self.answers)

    def index(self, answer: str) -> int:
        try:
            return self._lookup[normalize_answer(answer)]
        except KeyError:
            return OOV

    @property
    def _lookup(self) -> dict:
        cache = self.__dict__.get("_lookup_cache")
        if cache is None:
            cache = {a: i for i, a in enumerate(self.answers)}
            object.__setattr__(self, "_lookup_cache", cache)
        return cache


def build_vocab(samples: Sequence[Sample], cap: int) -> AnswerVocab:
    """Consensus answers ranked by frequency (ties lexicographic), truncated at ``cap``."""
    if cap < 1:
        raise ValueError("vocabulary cap must be positive")
    counts = Counter(s.consensus() for s in samples)
    ranked = sorted(counts, key=lambda a: (-counts[a], a))[:cap]
    return AnswerVocab(tuple(ranked), tuple(counts[a] for a in ranked), cap)


# ----------------------------------------------------------------------
# batches


@dataclass
class MultiModalBatch:
    regions: np.ndarray  # (B, K, d_v)
    grid: np.ndarray  # (B, G, d_v)
    tokens: np.ndarray  # (B, T) int64, zero padded
    labels: np.ndarray  # (B,) int64, OOV for answers outside the vocabulary
    answers: list[tuple[str, ...]] = field(repr=False)
    categories: list[str] = field(repr=False)

    def __len__(self) -> int:
        return self.regions.shape[0]

    def take(self, idx) -> "MultiModalBatch":
        idx = np.asarray(idx, dtype=np.int64)
        return MultiModalBatch(
            self.regions[idx],
            self.grid[idx],
            _trim_padding(self.tokens[idx]),
            self.labels[idx],
            [self.answers[i] for i in idx],
            [self.categories[i] for i in idx],
        )


def _trim_padding(tokens: np.ndarray) -> np.ndarray:
    used = np.nonzero((tokens != 0).any(axis=0))[0]
    width = int(used[-1]) + 1 if used.size else 1
    return tokens[:, :width]


def collate(samples: Sequence[Sample], vocab: AnswerVocab | None = None, max_len: int = MAX_QUESTION_LEN) -> MultiModalBatch:
    """Stack samples into arrays; questions are truncated to ``max_len`` and zero padded."""
    if not samples:
        raise DataError("cannot collate an empty sample list")
    T = min(max_len, max(len(s.tokens) for s in samples))
    tokens = np.zeros((len(samples), T), dtype=np.int64)
    for i, s in enumerate(samples):
        t = s.tokens[:T]
        tokens[i, : len(t)] = t
    labels = np.array([vocab.index(s.consensus()) if vocab else OOV for s in samples], dtype=np.int64)
    return MultiModalBatch(
        np.stack([s.regions for s in samples]),
        np.stack([s.grid for s in samples]),
        tokens,
        labels,
        [tuple(s.answers) for s in samples],
        [s.category for s in samples],
    )


def batch_iter(data: MultiModalBatch, batch_size: int, seed: int, epoch: int) -> list[MultiModalBatch]:
    """One epoch of shuffled batches; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    n = len(data)
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [data.take(order[i : i + batch_size]) for i in range(0, n, batch_size)]


def batch_stream(data: MultiModalBatch, batch_size: int, seed: int) -> Iterator[MultiModalBatch]:
    """Endless batches, reshuffled every epoch."""
    epoch = 0
    while True:
        yield from batch_iter(data, batch_size, seed, epoch)
        epoch += 1


def paired_stream(source: MultiModalBatch, target: MultiModalBatch, batch_size: int, seed: int):
    """Endless (source, target) batch pairs; each stream cycles independently.

    Both halves shuffle with the same seed, so identical datasets give
    identical batches.
    """
    return zip(batch_stream(source, batch_size, seed * 2 + 2), batch_stream(target, batch_size, seed * 2 + 2))


def target_stream(target: MultiModalBatch, batch_size: int, seed: int) -> Iterator[MultiModalBatch]:
    """The target half of ``paired_stream`` on its own (identical batch order)."""
    return batch_stream(target, batch_size, seed * 2 + 2)


# ----------------------------------------------------------------------
# fractions


def split_fraction(samples: Sequence[Sample], fraction: float, seed: int) -> list[Sample]:
    """Seeded subsample stratified by category, of total size round(fraction * n)."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(samples)
    if fraction == 1:
        return list(samples)
    total = max(1, int(math.floor(fraction * n + 0.5)))
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.category, []).append(i)
    cats = sorted(groups)
    exact = [fraction * len(groups[c]) for c in cats]
    alloc = [int(math.floor(x)) for x in exact]
    remainder = total - sum(alloc)
    by_frac = sorted(range(len(cats)), key=lambda k: (-(exact[k] - alloc[k]), cats[k]))
    for k in by_frac[:remainder]:
        alloc[k] += 1
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    for c, k in zip(cats, alloc):
        idx = np.asarray(groups[c])
        chosen.extend(idx[rng.permutation(len(idx))[:k]].tolist())
    return [samples[i] for i in sorted(chosen)]


# ----------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class ShiftConfig:
    """How the target domain departs from the source."""

    visual_shift: float = 0.0  # per-dimension RMS of the visual mean offset
    text_shift: float = 0.0  # probability a filler token is conversational (target-only)
    cov_scale: float = 0.0  # std of extra target variance in a hidden visual subspace
    label_skew: float = 0.0  # Zipf exponent of the target answer prior
    overlap: float = 1.0  # fraction of the answer vocabulary shared by both domains
    unanswerable_frac: float = 0.0  # share of target questions that are unanswerable

    def __post_init__(self):
        for name in ("visual_shift", "text_shift", "cov_scale", "label_skew"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be nonnegative")
        if not 0 <= self.overlap <= 1:
            raise DataError(f"overlap must lie in [0, 1], got {self.overlap}")
        if not 0 <= self.unanswerable_frac <= 1:
            raise DataError(f"unanswerable_frac must lie in [0, 1], got {self.unanswerable_frac}")
        if self.text_shift > 1:
            raise DataError("text_shift is a probability")


@dataclass(frozen=True)
class WorldConfig:
    """Sizes and noise levels of the synthetic world."""

    n_regions: int = 8
    n_grid: int = 4
    d_v: int = 64
    token_vocab: int = 64
    n_answers: int = 30
    concept_dim: int = 16
    junk_dim: int = 16
    region_noise: float = 1.0
    grid_noise: float = 0.3
    salience: float = 1.0
    keyword_prob: float = 0.15
    min_agreement: float = 0.5
    shared_first: bool = False  # shared answers lead (True) or trail the target frequency ranking

    def __post_init__(self):
        for name in ("n_regions", "n_grid", "d_v", "n_answers", "concept_dim", "junk_dim"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be at least 1")
        if self.junk_dim > self.d_v:
            raise DataError("junk_dim cannot exceed d_v")
        for name in ("region_noise", "grid_noise"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be nonnegative")
        if self.salience <= 0:
            raise DataError("salience must be positive")
        for name in ("keyword_prob", "min_agreement"):
            if not 0 <= getattr(self, name) <= 1:
                raise DataError(f"{name} must lie in [0, 1]")


# token layout: 0 pad, 1..4 question type, keywords, common fillers, conversational fillers
_TYPE_TOKENS = {"yes/no": 1, "number": 2, "other": 3, "unanswerable": 4}
_N_COMMON_FILL = 10
_N_CONV_FILL = 10


def _token_ranges(world: WorldConfig) -> tuple[range, range, range]:
    kw_end = world.token_vocab - _N_COMMON_FILL - _N_CONV_FILL
    if kw_end <= 5 + 2:
        raise DataError("token vocabulary too small for the synthetic question grammar")
    return range(5, kw_end), range(kw_end, kw_end + _N_COMMON_FILL), range(kw_end + _N_COMMON_FILL, world.token_vocab)


def shared_answer_count(shift: ShiftConfig, n_answers: int) -> int:
    return int(math.floor(shift.overlap * n_answers))


@dataclass
class _World:
    source_answers: list[str]
    target_answers: list[str]
    concepts: dict[str, np.ndarray]
    keywords: dict[str, tuple[int, int]]
    render: np.ndarray  # (d_v, concept_dim)
    junk_basis: np.ndarray  # (d_v, junk_dim)
    offset_dir: np.ndarray  # (d_v,), RMS 1


def _build_world(shift: ShiftConfig, world: WorldConfig, rng: np.random.Generator) -> _World:
    n = world.n_answers
    n_shared = shared_answer_count(shift, n)
    if n_shared > n:
        raise DataError(f"overlap {shift.overlap} asks for {n_shared} shared answers but vocabularies hold {n}")
    needs_unans = shift.unanswerable_frac > 0
    if needs_unans and n_shared >= n:
        raise DataError("an unanswerable class needs at least one target-only answer slot")
    universe = ["yes", "no"] + [str(i) for i in range(10)] + list(_OTHER_WORDS)
    n_unique = 2 * n - n_shared
    if n_unique > len(universe):
        raise DataError(f"synthetic answer universe holds {len(universe)} answers, config needs {n_unique}")
    pool = [universe[i] for i in rng.permutation(len(universe))[:n_unique]]
    shared, rest = pool[:n_shared], pool[n_shared:]
    source = shared + rest[: n - n_shared]
    own = rest[n - n_shared :]
    if needs_unans:
        own[-1] = UNANSWERABLE
    target = shared + own if world.shared_first else own + shared

    kw_range, _, _ = _token_ranges(world)
    kw = np.asarray(kw_range)
    names = sorted(set(source) | set(target))
    concepts = {a: rng.normal(size=world.concept_dim) for a in names}
    keywords = {a: tuple(int(t) for t in rng.choice(kw, size=2, replace=False)) for a in names}
    render = rng.normal(size=(world.d_v, world.concept_dim)) / math.sqrt(world.concept_dim)
    junk_basis, _ = np.linalg.qr(rng.normal(size=(world.d_v, world.junk_dim)))
    offset_dir = rng.normal(size=world.d_v)
    offset_dir *= math.sqrt(world.d_v) / np.linalg.norm(offset_dir)
    return _World(source, target, concepts, keywords, render, junk_basis, offset_dir)


def _answer_prior(n: int, skew: float) -> np.ndarray:
    w = (np.arange(1, n + 1, dtype=np.float64)) ** (-skew)
    return w / w.sum()


def _f32(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


def _sample_domain(
    w: _World, world: WorldConfig, shift: ShiftConfig, n: int, domain: str, rng: np.random.Generator
) -> list[Sample]:
    is_target = domain == "target"
    answers = w.target_answers if is_target else w.source_answers
    answerable = [a for a in answers if a != UNANSWERABLE]
    prior = _answer_prior(len(answerable), shift.label_skew if is_target else 0.0)
    kw_range, common_fill, conv_fill = _token_ranges(world)
    K, G, d_v = world.n_regions, world.n_grid, world.d_v

    out: list[Sample] = []
    for _ in range(n):
        unanswerable = is_target and shift.unanswerable_frac > 0 and rng.random() < shift.unanswerable_frac
        cls = answerable[rng.choice(len(answerable), p=prior)]

        # image: one salient region rendering the answer concept among distractors
        z = rng.normal(size=(K, world.concept_dim))
        rel = int(rng.integers(K))
        if not unanswerable:
            z[rel] = w.concepts[cls] * world.salience
        # unanswerable: the asked-about content is simply absent from the frame
        regions = z @ w.render.T + world.region_noise * rng.normal(size=(K, d_v))
        if is_target:
            # every region drifts and picks up junk variance, so no region stands out as unshifted
            regions = regions + shift.visual_shift * w.offset_dir
            if shift.cov_scale > 0:
                regions = regions + shift.cov_scale * (rng.normal(size=(K, world.junk_dim)) @ w.junk_basis.T)
        grid = regions.mean(axis=0) + world.grid_noise * rng.normal(size=(G, d_v))

        # question: type token, keywords of the asked-about answer, filler
        category = category_of(cls)
        toks = [_TYPE_TOKENS[category]]
        for _k in range(int(rng.integers(1, 3))):
            if rng.random() < world.keyword_prob:
                toks.append(w.keywords[cls][int(rng.integers(2))])
            else:
                toks.append(int(rng.choice(kw_range)))
        for _f in range(int(rng.integers(1, 5))):
            if is_target and rng.random() < shift.text_shift:
                toks.append(int(rng.choice(conv_fill)))
            else:
                toks.append(int(rng.choice(common_fill)))
        body = toks[1:]
        rng.shuffle(body)
        tokens = np.asarray([toks[0]] + body, dtype=np.int64)[:MAX_QUESTION_LEN]

        # annotators
        truth = UNANSWERABLE if unanswerable else cls
        agree = world.min_agreement + (1.0 - world.min_agreement) * rng.random()
        ans = []
        for _a in range(N_ANNOTATORS):
            if rng.random() < agree:
                ans.append(truth)
            else:
                ans.append(answers[int(rng.integers(len(answers)))])
        out.append(
            Sample(
                _f32(regions),
                _f32(grid),
                tokens,
                tuple(ans),
                "unanswerable" if unanswerable else category,
                domain,
            )
        )
    return out


def generate_domain_pair(
    shift: ShiftConfig,
    sizes: tuple[int, int],
    seed: int,
    world: WorldConfig = WorldConfig(),
    world_seed: int | None = None,
) -> tuple[list[Sample], list[Sample]]:
    """Draw (source, target) sample lists.  Deterministic in (shift, sizes, seed, world, world_seed)."""
    n_s, n_t = sizes
    if n_s < 1 or n_t < 1:
        raise DataError("both domains need at least one sample")
    wrng = np.random.default_rng([0x57, seed if world_seed is None else world_seed])
    w = _build_world(shift, world, wrng)
    source = _sample_domain(w, world, shift, n_s, "source", np.random.default_rng([0x5A, seed, 0]))
    target = _sample_domain(w, world, shift, n_t, "target", np.random.default_rng([0x5A, seed, 1]))
    return source, target


def raw_features(samples: Sequence[Sample] | MultiModalBatch, token_vocab: int) -> np.ndarray:
    """Mean region feature ⊕ mean grid feature ⊕ normalized bag of question tokens."""
    batch = samples if isinstance(samples, MultiModalBatch) else collate(samples)
    bag = np.zeros((len(batch), token_vocab))
    for i, row in enumerate(batch.tokens):
        row = row[row != 0]
        np.add.at(bag[i], row, 1.0 / len(row))
    return np.concatenate([batch.regions.mean(axis=1), batch.grid.mean(axis=1), bag], axis=1)


# ----------------------------------------------------------------------
# feature files

MAGIC = b"MMDA"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIHHHI")
_CAT_CODE = {c: i for i, c in enumerate(CATEGORIES)}
_DOM_CODE = {d: i for i, d in enumerate(DOMAIN_TAGS)}


@dataclass(frozen=True)
class FeatureFileHeader:
    version: int
    count: int
    n_regions: int
    n_grid: int
    d_v: int
    token_vocab: int


def save_feature_file(samples: Sequence[Sample], path, token_vocab: int) -> None:
    """Write samples as little-endian records behind a fixed header."""
    if not samples:
        raise DataError("refusing to write an empty feature file")
    K, d_v = samples[0].regions.shape
    G = samples[0].grid.shape[0]
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(samples), K, G, d_v, token_vocab))
    for s in samples:
        if s.regions.shape != (K, d_v) or s.grid.shape != (G, d_v):
            raise DataError("all samples in a file must share feature shapes")
        if not (np.isfinite(s.regions).all() and np.isfinite(s.grid).all()):
            raise DataError("non-finite feature values")
        toks = np.asarray(s.tokens, dtype="<u4")
        if toks.size and int(toks.max()) >= token_vocab:
            raise DataError(f"token {int(toks.max())} outside vocabulary of {token_vocab}")
        buf.write(struct.pack("<H", toks.size))
        buf.write(toks.tobytes())
        buf.write(s.regions.astype("<f4").tobytes())
        buf.write(s.grid.astype("<f4").tobytes())
        for a in s.answers:
            raw = a.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
        buf.write(struct.pack("<BB", _CAT_CODE[s.category], _DOM_CODE[s.domain]))
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def read(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FeatureFileError(f"truncated while reading {what}", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.read(s.size, what))


def load_feature_file(path) -> tuple[list[Sample], FeatureFileHeader]:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise FeatureFileError("bad magic, not an MMDA feature file", 0)
    r = _Reader(data)
    _, version, count, K, G, d_v, vocab = r.unpack(_HEADER.format, "header")
    if version != FORMAT_VERSION:
        raise FeatureFileError(f"unsupported format version {version}", 4)
    header = FeatureFileHeader(version, count, K, G, d_v, vocab)
    samples = []
    for i in range(count):
        start = r.pos
        if start == len(data):
            raise FeatureFileError(f"record count mismatch: header declares {count} records, file holds {i}", start)
        (nt,) = r.unpack("<H", f"token count of record {i}")
        tokens = np.frombuffer(r.read(4 * nt, f"tokens of record {i}"), dtype="<u4").astype(np.int64)
        if nt and int(tokens.max()) >= vocab:
            raise FeatureFileError(f"record {i}: token {int(tokens.max())} outside vocabulary {vocab}", start)
        feat_at = r.pos
        regions = np.frombuffer(r.read(4 * K * d_v, f"regions of record {i}"), dtype="<f4").astype(np.float64)
        grid = np.frombuffer(r.read(4 * G * d_v, f"grid of record {i}"), dtype="<f4").astype(np.float64)
        if not (np.isfinite(regions).all() and np.isfinite(grid).all()):
            raise FeatureFileError(f"record {i}: non-finite feature value", feat_at)
        answers = []
        for _a in range(N_ANNOTATORS):
            (ln,) = r.unpack("<H", f"answer length in record {i}")
            at = r.pos
            try:
                answers.append(r.read(ln, f"answer text in record {i}").decode("utf-8"))
            except UnicodeDecodeError:
                raise FeatureFileError(f"record {i}: answer is not valid UTF-8", at) from None
        code_at = r.pos
        cat, dom = r.unpack("<BB", f"tags of record {i}")
        if cat >= len(CATEGORIES) or dom >= len(DOMAIN_TAGS):
            raise FeatureFileError(f"record {i}: bad category/domain code", code_at)
        try:
            samples.append(
                Sample(regions.reshape(K, d_v), grid.reshape(G, d_v), tokens, tuple(answers), CATEGORIES[cat], DOMAIN_TAGS[dom])
            )
        except DataError as exc:
            raise FeatureFileError(f"record {i}: {exc}", start) from None
    if r.pos != len(data):
        raise FeatureFileError(
            f"record count mismatch: header declares {count} records but {len(data) - r.pos} bytes follow them", r.pos
        )
    return samples, header


# ----------------------------------------------------------------------
# manifests


def write_manifest(path, entries: dict) -> None:
    lines = [f"{k}={v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out
