"""Greedy, beam and answer-set constrained decoding."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, LengthError
from .model import Parameters, decode_batch, encode_batch
from .numerics import Tensor
from .tasks import RenderedPair
from .tokenization import BOS, EOS, MASK, PAD, BpeModel, UnifiedVocabulary

# ids that never make sense as generated output
BANNED = (PAD, BOS, MASK)

StepFn = Callable[[list[list[int]]], np.ndarray]
AllowedFn = Callable[[list[int]], Sequence[int]]


@dataclass(frozen=True)
class BeamHypothesis:
    tokens: tuple[int, ...]
    logp: float = 0.0

    @property
    def finished(self) -> bool:
        return len(self.tokens) > 1 and self.tokens[-1] == EOS

    @property
    def length(self) -> int:
        """Generated token count (BOS excluded)."""
        return len(self.tokens) - 1

    @property
    def normalized(self) -> float:
        return self.logp / max(self.length, 1)


class AnswerTrie:
    """Prefix tree over ``bpe.encode(answer) + [EOS]`` for each answer."""

    def __init__(self, sequences: Iterable[Sequence[int]]):
        self.root: dict = {}
        self.depth = 0
        count = 0
        for seq in sequences:
            seq = list(seq)
            if not seq or seq[-1] != EOS or EOS in seq[:-1]:
                raise ContractError("answer sequences must end with exactly one EOS")
            node = self.root
            for tok in seq:
                node = node.setdefault(int(tok), {})
            self.depth = max(self.depth, len(seq))
            count += 1
        if not count:
            raise ContractError("constrained decoding needs a non-empty answer set")

    @classmethod
    def from_answers(cls, answers: Iterable[str], bpe: BpeModel) -> "AnswerTrie":
        return cls(bpe.encode(a) + [EOS] for a in answers)

    def allowed(self, generated: Sequence[int]) -> list[int]:
        node = self.root
        for tok in generated:
            node = node.get(int(tok))
            if node is None:
                return []
        return sorted(node)

    def sequences(self) -> list[list[int]]:
        out = []

        def walk(node, path):
            if not node:
                out.append(path)
            for tok in sorted(node):
                walk(node[tok], path + [tok])

        walk(self.root, [])
        return out


def _log_softmax(row: np.ndarray, allowed: Sequence[int] | None, banned: Sequence[int]) -> np.ndarray:
    """Log-probabilities renormalized over the permitted ids; others are -inf."""
    keep = np.zeros(row.shape[0], dtype=bool)
    if allowed is None:
        keep[:] = True
        keep[list(banned)] = False
    else:
        keep[list(allowed)] = True
    out = np.full(row.shape[0], -np.inf)
    z = row[keep]
    z = z - z.max()
    out[keep] = z - np.log(np.exp(z).sum())
    return out


def greedy_search(step: StepFn, max_len: int, banned: Sequence[int] = BANNED) -> BeamHypothesis:
    """Argmax decoding; ties go to the lowest id."""
    hyp = BeamHypothesis((BOS,))
    for _ in range(max_len):
        logp = _log_softmax(np.asarray(step([list(hyp.tokens)])[0], dtype=np.float64), None, banned)
        tok = int(np.argmax(logp))
        hyp = BeamHypothesis(hyp.tokens + (tok,), hyp.logp + float(logp[tok]))
        if tok == EOS:
            break
    return hyp


def beam_search(step: StepFn, beam: int, max_len: int, allowed: AllowedFn | None = None,
                banned: Sequence[int] = BANNED) -> list[BeamHypothesis]:
    """Beam search keeping the ``beam`` best prefixes by cumulative log-probability.

    Returns hypotheses ranked by length-normalized log-probability. With an
    ``allowed`` function only finished hypotheses are eligible.
    """
    if beam < 1:
        raise ContractError("beam width must be at least 1")
    alive = [BeamHypothesis((BOS,))]
    finished: list[BeamHypothesis] = []
    for _ in range(max_len):
        logits = np.asarray(step([list(h.tokens) for h in alive]), dtype=np.float64)
        cands = []
        for i, (h, row) in enumerate(zip(alive, logits)):
            mask = None if allowed is None else allowed(list(h.tokens[1:]))
            logp = _log_softmax(row, mask, banned)
            finite = np.flatnonzero(np.isfinite(logp))
            top = finite[np.argsort(-logp[finite], kind="stable")[:beam]]
            cands += [(h.logp + float(logp[t]), i, -float(logp[t]), int(t)) for t in top]
        cands.sort(key=lambda c: (-c[0], c[1], c[2], c[3]))
        survivors = []
        for score, i, _, tok in cands[:beam]:
            hyp = BeamHypothesis(alive[i].tokens + (tok,), score)
            (finished if hyp.finished else survivors).append(hyp)
        alive = survivors
        if not alive:
            break
    pool = finished if allowed is not None else finished + alive
    if not pool:
        raise ContractError("beam search ended without a complete hypothesis")
    return sorted(pool, key=lambda h: -h.normalized)


# -- model-backed decoding ---------------------------------------------------

def model_step(params: Parameters, pair: RenderedPair) -> StepFn:
    """Next-token logits for a batch of equal-length prefixes, encoding the source once."""
    states, padding = encode_batch(params, [pair.source])

    def step(prefixes: list[list[int]]) -> np.ndarray:
        n = len(prefixes)
        batch_states = Tensor(np.repeat(states.data, n, axis=0))
        logits = decode_batch(params, batch_states, np.repeat(padding, n, axis=0), np.array(prefixes))
        return logits.data[:, -1, :]

    return step


@dataclass
class Generation:
    tokens: list[int]
    text: str
    score: float
    candidates: list[BeamHypothesis] = field(default_factory=list)


def generate(params: Parameters, pair: RenderedPair, vocab: UnifiedVocabulary, beam: int = 1,
             max_len: int | None = None, answer_set: Sequence[str] | None = None,
             greedy: bool = False) -> Generation:
    """Decode one rendered pair.

    ``answer_set`` switches to constrained mode. ``greedy`` uses the plain argmax
    loop (equivalent to ``beam=1``). ``score`` is the length-normalized log-probability.
    """
    limit = params.config.max_tgt - 1
    max_len = limit if max_len is None else max_len
    step = model_step(params, pair)
    if answer_set is not None:
        trie = AnswerTrie.from_answers(answer_set, vocab.bpe)
        if trie.depth > limit:
            raise LengthError(f"longest answer needs {trie.depth} tokens, max_tgt allows {limit}")
        ranked = beam_search(step, beam, max(max_len, trie.depth), allowed=trie.allowed)
    elif greedy:
        ranked = [greedy_search(step, min(max_len, limit))]
    else:
        ranked = beam_search(step, beam, min(max_len, limit))
    best = ranked[0]
    return Generation(list(best.tokens), vocab.decode(best.tokens[1:]), best.normalized, ranked)
