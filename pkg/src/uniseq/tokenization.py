"""Byte-level BPE, the unified text/location/vision vocabulary and the box codec."""
from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable

from .errors import BoxError, DataError, TokenRangeError

PAD, BOS, EOS, MASK, SEP = 0, 1, 2, 3, 4
SPECIALS = ("<pad>", "<bos>", "<eos>", "<mask>", "<sep>")
NUM_SPECIALS = len(SPECIALS)
BYTE_OFFSET = NUM_SPECIALS
FIRST_MERGE_ID = BYTE_OFFSET + 256

_PRETOKEN = re.compile(r"\s+|\S+")


def pretokenize(text: str) -> list[str]:
    """Split into maximal whitespace / non-whitespace runs; concatenation is lossless."""
    return _PRETOKEN.findall(text)


@dataclass(frozen=True, eq=False)
class BpeModel:
    """Ordered merge list over byte tokens.

    Ids: 0-4 reserved specials, 5-260 single bytes, then one id per merge in
    priority order.
    """

    merges: tuple[tuple[bytes, bytes], ...] = ()
    _ranks: dict = field(init=False, repr=False, compare=False)
    _ids: dict = field(init=False, repr=False, compare=False)
    _table: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        table: list[bytes | None] = [None] * NUM_SPECIALS + [bytes([b]) for b in range(256)]
        ids = {tok: i for i, tok in enumerate(table) if tok is not None}
        ranks = {}
        for rank, (left, right) in enumerate(self.merges):
            if left not in ids or right not in ids:
                raise DataError(f"merge {rank} references an unknown token")
            merged = left + right
            if merged in ids:
                raise DataError(f"merge {rank} duplicates token {merged!r}")
            ranks[(ids[left], ids[right])] = (rank, len(table))
            ids[merged] = len(table)
            table.append(merged)
        object.__setattr__(self, "_ranks", ranks)
        object.__setattr__(self, "_ids", ids)
        object.__setattr__(self, "_table", table)
        object.__setattr__(self, "_encode_word", lru_cache(maxsize=65536)(self._encode_word_uncached))

    @property
    def size(self) -> int:
        """Number of text token ids (specials + bytes + merges)."""
        return len(self._table)

    def token_bytes(self, token_id: int) -> bytes:
        if not 0 <= token_id < self.size:
            raise TokenRangeError(f"id {token_id} outside text range [0, {self.size})")
        tok = self._table[token_id]
        if tok is None:
            raise TokenRangeError(f"id {token_id} is a special token")
        return tok

    def token_id(self, token: bytes) -> int:
        return self._ids[token]

    def _encode_word_uncached(self, word: bytes) -> tuple[int, ...]:
        ids = [BYTE_OFFSET + b for b in word]
        ranks = self._ranks
        while len(ids) > 1:
            best = None
            for pair in zip(ids, ids[1:]):
                hit = ranks.get(pair)
                if hit is not None and (best is None or hit[0] < best[0]):
                    best = (hit[0], hit[1], pair)
            if best is None:
                break
            _, new_id, (a, b) = best
            out = []
            i = 0
            while i < len(ids):
                if i + 1 < len(ids) and ids[i] == a and ids[i + 1] == b:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            ids = out
        return tuple(ids)

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        for piece in pretokenize(text):
            out.extend(self._encode_word(piece.encode("utf-8")))
        return out

    def decode_bytes(self, ids: Iterable[int]) -> bytes:
        chunks = []
        for i in ids:
            i = int(i)
            if i in (EOS, SEP):
                continue
            if i in (PAD, BOS, MASK):
                raise TokenRangeError(f"cannot decode special id {i} ({SPECIALS[i]})")
            chunks.append(self.token_bytes(i))
        return b"".join(chunks)

    def decode(self, ids: Iterable[int]) -> str:
        """Inverse of :meth:`encode`; EOS/SEP decode to nothing."""
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    # -- persistence ---------------------------------------------------------

    def dumps(self) -> str:
        lines = [f"bpe v1 {len(self.merges)}"]
        lines += [f"{a.hex()} {b.hex()}" for a, b in self.merges]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "BpeModel":
        lines = text.splitlines()
        if not lines:
            raise DataError("empty BPE model file")
        header = lines[0].split()
        if len(header) != 3 or header[:2] != ["bpe", "v1"]:
            raise DataError(f"bad BPE header: {lines[0]!r}")
        n = int(header[2])
        body = lines[1:1 + n]
        if len(body) != n:
            raise DataError(f"BPE file declares {n} merges but has {len(body)}")
        merges = []
        for line in body:
            left, right = line.split()
            merges.append((bytes.fromhex(left), bytes.fromhex(right)))
        return cls(tuple(merges))

    def save(self, path: str | Path) -> None:
        from .io_utils import atomic_write_text
        atomic_write_text(path, self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "BpeModel":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def train_bpe(corpus: Iterable[str], num_merges: int) -> BpeModel:
    """Greedy most-frequent-pair merging; ties go to the lexicographically smallest pair.

    Pairs never cross pre-token boundaries.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be non-negative")
    words: Counter[tuple[bytes, ...]] = Counter()
    for text in corpus:
        for piece in pretokenize(text):
            words[tuple(bytes([b]) for b in piece.encode("utf-8"))] += 1
    vocab = dict(words)
    merges: list[tuple[bytes, bytes]] = []
    for _ in range(num_merges):
        counts: Counter[tuple[bytes, bytes]] = Counter()
        for word, freq in vocab.items():
            for pair in zip(word, word[1:]):
                counts[pair] += freq
        if not counts:
            break
        top = max(counts.values())
        pair = min(p for p, c in counts.items() if c == top)
        merges.append(pair)
        merged = pair[0] + pair[1]
        new_vocab = {}
        for word, freq in vocab.items():
            if len(word) > 1 and pair[0] in word:
                out = []
                i = 0
                while i < len(word):
                    if i + 1 < len(word) and word[i] == pair[0] and word[i + 1] == pair[1]:
                        out.append(merged)
                        i += 2
                    else:
                        out.append(word[i])
                        i += 1
                word = tuple(out)
            new_vocab[word] = new_vocab.get(word, 0) + freq
        vocab = new_vocab
    return BpeModel(tuple(merges))


# ----------------------------------------------------------------------------
# unified vocabulary
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class UnifiedVocabulary:
    bpe: BpeModel
    num_locations: int
    num_vision: int

    def __post_init__(self):
        if self.num_locations < 1 or self.num_vision < 1:
            raise ValueError("location and vision token counts must be at least 1")

    @property
    def num_text(self) -> int:
        return self.bpe.size

    @property
    def total(self) -> int:
        return self.num_text + self.num_locations + self.num_vision

    @property
    def location_offset(self) -> int:
        return self.num_text

    @property
    def vision_offset(self) -> int:
        return self.num_text + self.num_locations

    def classify(self, token_id: int) -> str:
        if 0 <= token_id < self.num_text:
            return "text"
        if token_id < self.vision_offset and token_id >= self.location_offset:
            return "location"
        if self.vision_offset <= token_id < self.total:
            return "vision"
        raise TokenRangeError(f"id {token_id} outside unified vocabulary [0, {self.total})")

    def location_id(self, bin_index: int) -> int:
        if not 0 <= bin_index < self.num_locations:
            raise TokenRangeError(f"location bin {bin_index} outside [0, {self.num_locations})")
        return self.location_offset + bin_index

    def vision_id(self, code: int) -> int:
        if not 0 <= code < self.num_vision:
            raise TokenRangeError(f"vision code {code} outside [0, {self.num_vision})")
        return self.vision_offset + code

    def encode(self, text: str) -> list[int]:
        return self.bpe.encode(text)

    def decode(self, ids: Iterable[int]) -> str:
        """Decode text-range ids, skipping location and vision ids."""
        return self.bpe.decode(i for i in ids if 0 <= int(i) < self.num_text)

    def dumps(self, bpe_path: str | None = None) -> str:
        head = f"uvocab v1 {self.num_text} {self.num_locations} {self.num_vision}\n"
        if bpe_path is not None:
            return head + f"bpe-file {bpe_path}\n"
        return head + self.bpe.dumps()

    @classmethod
    def loads(cls, text: str, base_dir: str | Path = ".") -> "UnifiedVocabulary":
        head, _, rest = text.partition("\n")
        parts = head.split()
        if len(parts) != 5 or parts[:2] != ["uvocab", "v1"]:
            raise DataError(f"bad vocabulary header: {head!r}")
        t, l, v = (int(x) for x in parts[2:])
        if rest.startswith("bpe-file "):
            ref = rest.splitlines()[0][len("bpe-file "):]
            bpe = BpeModel.load(Path(base_dir) / ref)
        else:
            bpe = BpeModel.loads(rest)
        if bpe.size != t:
            raise DataError(f"vocabulary header says T={t} but BPE model has {bpe.size} text ids")
        return cls(bpe, l, v)

    def save(self, path: str | Path) -> None:
        from .io_utils import atomic_write_text
        atomic_write_text(path, self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "UnifiedVocabulary":
        path = Path(path)
        return cls.loads(path.read_text(encoding="utf-8"), path.parent)


def assemble(model: BpeModel, num_locations: int, num_vision: int) -> UnifiedVocabulary:
    return UnifiedVocabulary(model, num_locations, num_vision)


# ----------------------------------------------------------------------------
# boxes <-> location tokens
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    width: float
    height: float

    def validate(self) -> "Box":
        if not (0 <= self.x1 < self.x2 <= self.width and 0 <= self.y1 < self.y2 <= self.height):
            raise BoxError(f"invalid box {self}")
        return self


def coord_bin(coord: float, extent: float, bins: int) -> int:
    return min(max(math.floor(coord * bins / extent), 0), bins - 1)


def bin_center(index: int, extent: float, bins: int) -> float:
    return (index + 0.5) * extent / bins


def box_to_tokens(box: Box, vocab: UnifiedVocabulary) -> list[int]:
    """Four location ids in x1, y1, x2, y2 order."""
    box.validate()
    n = vocab.num_locations
    bins = (coord_bin(box.x1, box.width, n), coord_bin(box.y1, box.height, n),
            coord_bin(box.x2, box.width, n), coord_bin(box.y2, box.height, n))
    return [vocab.location_offset + b for b in bins]


def tokens_to_box(ids: list[int], width: float, height: float,
                  vocab: UnifiedVocabulary) -> Box:
    """Bin-centre reconstruction of a box from four location ids."""
    if len(ids) != 4:
        raise TokenRangeError("a box needs exactly four location ids")
    bins = []
    for i in ids:
        if vocab.classify(int(i)) != "location":
            raise TokenRangeError(f"id {i} is not a location token")
        bins.append(int(i) - vocab.location_offset)
    n = vocab.num_locations
    return Box(bin_center(bins[0], width, n), bin_center(bins[1], height, n),
               bin_center(bins[2], width, n), bin_center(bins[3], height, n), width, height)
