"""Candidate post-processing: near-duplicate removal, quality rules, decontamination.

The stage order is fixed: dedup (MinHash LSH against the batch itself and the
accumulated pool) -> quality rules -> decontamination against the held-out
test subset (exact Rouge-L, no approximation). The report accounts for every
input record.
"""

from __future__ import annotations

import hashlib
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .corpus import InstructionPair
from .errors import StageError
from .textutil import tokenize

logger = logging.getLogger(__name__)

# Hash field for the signature permutations. Products a*x stay below 2^62,
# so the modular arithmetic is exact in uint64, while coefficients up to p
# wrap the field thoroughly (order-preserving maps would bias estimates).
_MERSENNE_31 = np.uint64((1 << 31) - 1)


@dataclass(frozen=True)
class MinHashParams:
    num_hashes: int = 128
    shingle_size: int = 3
    lsh_bands: int = 32
    lsh_rows: int = 4
    jaccard_threshold: float = 0.8
    hash_seed: int = 1

    def __post_init__(self):
        if self.shingle_size < 1:
            raise ValueError("shingle_size must be >= 1")
        if self.lsh_bands * self.lsh_rows != self.num_hashes:
            raise ValueError("lsh_bands * lsh_rows must equal num_hashes")
        if not 0 < self.jaccard_threshold <= 1:
            raise ValueError("jaccard_threshold must be in (0, 1]")

    def miss_probability(self, jaccard: float) -> float:
        """Analytic chance that LSH buckets miss a pair of this similarity."""
        return (1.0 - jaccard ** self.lsh_rows) ** self.lsh_bands


def shingles(text: str, size: int) -> frozenset[tuple[str, ...]]:
    """Word-level k-shingles; texts shorter than k yield their single token run."""
    tokens = tokenize(text)
    if not tokens:
        raise StageError("cannot shingle empty text")
    if len(tokens) < size:
        return frozenset([tuple(tokens)])
    return frozenset(tuple(tokens[i:i + size]) for i in range(len(tokens) - size + 1))


def exact_jaccard(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 1.0
    inter = len(a & b)
    return inter / (len(a) + len(b) - inter)


def _permutation_coeffs(params: MinHashParams) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(params.hash_seed)
    p = int(_MERSENNE_31)
    a = rng.integers(1, p, size=params.num_hashes, dtype=np.uint64)
    b = rng.integers(0, p, size=params.num_hashes, dtype=np.uint64)
    return a, b


def _shingle_hashes(shingle_set: frozenset[tuple[str, ...]]) -> np.ndarray:
    values = [
        int.from_bytes(hashlib.blake2b(" ".join(s).encode("utf-8"),
                                       digest_size=4).digest(), "big")
        for s in shingle_set
    ]
    return np.asarray(values, dtype=np.uint64) % _MERSENNE_31


def minhash_signature(text: str, params: MinHashParams,
                      _coeffs: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Signature of ``num_hashes`` min-permutation values for the text's shingles."""
    if not text.strip():
        raise StageError("cannot fingerprint empty text")
    a, b = _coeffs if _coeffs is not None else _permutation_coeffs(params)
    hashes = _shingle_hashes(shingles(text, params.shingle_size))
    perms = (a[:, None] * hashes[None, :] + b[:, None]) % _MERSENNE_31
    return perms.min(axis=1)


def estimate_jaccard(sig_a: np.ndarray, sig_b: np.ndarray) -> float:
    if sig_a.shape != sig_b.shape:
        raise ValueError("signatures must have the same length")
    return float(np.count_nonzero(sig_a == sig_b)) / len(sig_a)


def dedup_key(pair: InstructionPair) -> str:
    """Samples are pairs; the key text covers both fields."""
    return pair.instruction + "\n\n" + pair.response


@dataclass
class RemovedPair:
    pair: InstructionPair
    reason: str
    matched_id: str | None = None


class _LshIndex:
    """Banded signature buckets holding positions of previously kept entries."""

    def __init__(self, params: MinHashParams):
        self.params = params
        self._buckets: dict[tuple[int, bytes], list[int]] = defaultdict(list)

    def band_keys(self, signature: np.ndarray) -> list[tuple[int, bytes]]:
        rows = self.params.lsh_rows
        return [
            (band, signature[band * rows:(band + 1) * rows].tobytes())
            for band in range(self.params.lsh_bands)
        ]

    def query(self, signature: np.ndarray) -> list[int]:
        seen: dict[int, None] = {}
        for key in self.band_keys(signature):
            for pos in self._buckets.get(key, ()):
                seen[pos] = None
        return list(seen)

    def insert(self, signature: np.ndarray, position: int) -> None:
        for key in self.band_keys(signature):
            self._buckets[key].append(position)


def dedup(candidates: list[InstructionPair], pool: list[InstructionPair],
          params: MinHashParams) -> tuple[list[InstructionPair], list[RemovedPair]]:
    """Drop candidates that near-duplicate the pool or an earlier candidate.

    LSH proposes collision pairs; a bucket hit is confirmed with the exact
    shingle-set Jaccard before removal, so false bucket collisions never
    remove anything and the only misses are LSH false negatives (bounded by
    ``params.miss_probability``). Pool members are never removed; among
    candidates the earlier one (batch order, then id) wins.
    """
    coeffs = _permutation_coeffs(params)
    entries: list[tuple[str, frozenset]] = []  # (owner id, shingle set) per kept position
    index = _LshIndex(params)

    for pos, pair in enumerate(pool):
        text = dedup_key(pair)
        sig = minhash_signature(text, params, coeffs)
        entries.append((pair.id, shingles(text, params.shingle_size)))
        index.insert(sig, pos)

    # Earlier batch position wins ties; the file loader already rejects
    # duplicate ids, so position order is a total order.
    survivors: list[InstructionPair] = []
    removed: list[RemovedPair] = []
    for pair in candidates:
        text = dedup_key(pair)
        sig = minhash_signature(text, params, coeffs)
        sh = shingles(text, params.shingle_size)
        duplicate_of: str | None = None
        for pos in index.query(sig):
            owner_id, owner_sh = entries[pos]
            if exact_jaccard(sh, owner_sh) >= params.jaccard_threshold:
                duplicate_of = owner_id
                break
        if duplicate_of is not None:
            removed.append(RemovedPair(pair, "near_duplicate", duplicate_of))
            continue
        index.insert(sig, len(entries))
        entries.append((pair.id, sh))
        survivors.append(pair)
    return survivors, removed


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float


def _lcs_length(a: list[str], b: list[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> RougeScore:
    """LCS-based Rouge-L over word tokens; f1 is 0 when both components are 0."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand or not ref:
        raise StageError("rouge_l requires non-empty texts after tokenization")
    lcs = _lcs_length(cand, ref)
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return RougeScore(precision=precision, recall=recall, f1=f1)


@dataclass(frozen=True)
class QualityRules:
    min_response_tokens: int = 3
    max_repeated_fourgram_ratio: float = 0.3


def quality_reason(pair: InstructionPair, rules: QualityRules) -> str | None:
    """None to keep, otherwise a machine-readable rejection reason."""
    response_tokens = tokenize(pair.response)
    if len(response_tokens) < rules.min_response_tokens:
        return "too_short"
    if pair.instruction.strip() == pair.response.strip():
        return "echo"
    if len(response_tokens) >= 4:
        grams = Counter(
            tuple(response_tokens[i:i + 4]) for i in range(len(response_tokens) - 3))
        top = grams.most_common(1)[0][1]
        if top / grams.total() > rules.max_repeated_fourgram_ratio:
            return "degenerate_repetition"
    return None


def _contaminated(candidate: InstructionPair, test_texts: list[str],
                  threshold: float) -> bool:
    # Both candidate fields are compared against both test fields: stricter
    # than any single-field reading, by design.
    for cand_text in (candidate.instruction, candidate.response):
        for test_text in test_texts:
            if rouge_l(cand_text, test_text).f1 >= threshold:
                return True
    return False


def decontaminate(candidates: list[InstructionPair], test_set: list[InstructionPair],
                  rouge_threshold: float = 0.7
                  ) -> tuple[list[InstructionPair], list[RemovedPair]]:
    """Remove candidates whose Rouge-L F1 against any test text reaches the threshold."""
    if not test_set:
        raise StageError("decontaminate requires a non-empty test set")
    test_texts = [t for p in test_set for t in (p.instruction, p.response)]
    survivors: list[InstructionPair] = []
    removed: list[RemovedPair] = []
    for pair in candidates:
        if _contaminated(pair, test_texts, rouge_threshold):
            removed.append(RemovedPair(pair, "test_overlap"))
        else:
            survivors.append(pair)
    return survivors, removed


@dataclass
class CurationReport:
    input_count: int = 0
    dedup_removed: int = 0
    quality_removed: int = 0
    decontam_removed: int = 0
    survivors: int = 0
    by_reason: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.check()

    def check(self) -> None:
        total = self.survivors + self.dedup_removed + self.quality_removed + self.decontam_removed
        if total != self.input_count:
            raise StageError(
                f"curation report does not conserve records: {total} != {self.input_count}")

    def to_dict(self) -> dict:
        return {
            "input_count": self.input_count,
            "dedup_removed": self.dedup_removed,
            "quality_removed": self.quality_removed,
            "decontam_removed": self.decontam_removed,
            "survivors": self.survivors,
            "by_reason": dict(sorted(self.by_reason.items())),
        }


@dataclass(frozen=True)
class CurationConfig:
    minhash: MinHashParams = MinHashParams()
    rules: QualityRules = QualityRules()
    decontam_threshold: float = 0.7


def curate(candidates: list[InstructionPair], pool: list[InstructionPair],
           test_set: list[InstructionPair],
           config: CurationConfig = CurationConfig()
           ) -> tuple[list[InstructionPair], CurationReport]:
    """Run dedup -> quality rules -> decontamination; report covers every input."""
    by_reason: Counter[str] = Counter()

    deduped, dropped_dup = dedup(candidates, pool, config.minhash)
    for rem in dropped_dup:
        by_reason[rem.reason] += 1

    quality_kept: list[InstructionPair] = []
    quality_removed = 0
    for pair in deduped:
        reason = quality_reason(pair, config.rules)
        if reason is None:
            quality_kept.append(pair)
        else:
            quality_removed += 1
            by_reason[reason] += 1

    if test_set and quality_kept:
        survivors, dropped_contam = decontaminate(
            quality_kept, test_set, config.decontam_threshold)
        for rem in dropped_contam:
            by_reason[rem.reason] += 1
    else:
        survivors, dropped_contam = quality_kept, []

    report = CurationReport(
        input_count=len(candidates),
        dedup_removed=len(dropped_dup),
        quality_removed=quality_removed,
        decontam_removed=len(dropped_contam),
        survivors=len(survivors),
        by_reason=dict(by_reason),
    )
    return survivors, report
