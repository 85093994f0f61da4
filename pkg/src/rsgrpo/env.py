"""Synthetic key-value evidence QA episodes.

Each document is a flat run of (key, value) pairs. A single-hop query asks for
the value of key ``q``; a two-hop query asks for the value of the value of
``q`` and needs two links ``(q, b)`` and ``(b, v)`` that live in different
documents. An episode is insufficient when the chain cannot be completed from
the supplied documents.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from rsgrpo.grammar import Layout, TaggedTrajectory, Vocabulary, build
from rsgrpo.rewards import derivation_reward, AnswerRecord


@dataclass(frozen=True)
class DatasetSpec:
    min_docs: int = 1
    max_docs: int = 5
    vocab_size: int = 45
    doc_length: int = 8
    insufficiency_rate: float = 0.3
    two_hop_rate: float = 0.2
    # hop mixture of the RL subset; raised above two_hop_rate to emphasise hard cases
    rl_two_hop_rate: float = 0.6
    episodes: int = 1000
    seed: int = 0

    def validate(self) -> None:
        if self.min_docs < 0 or self.max_docs < self.min_docs:
            raise ValueError(f"bad document range [{self.min_docs}, {self.max_docs}]")
        if self.episodes <= 0:
            raise ValueError("episode count must be positive")
        if not 0.0 <= self.insufficiency_rate <= 1.0:
            raise ValueError("insufficiency_rate must lie in [0, 1]")
        for name in ("two_hop_rate", "rl_two_hop_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.doc_length < 2 or self.doc_length % 2:
            raise ValueError(f"doc_length must be an even number >= 2 to hold a (key, value) pair, got {self.doc_length}")
        vocab = Vocabulary(self.vocab_size)
        # q, b, v plus a full document of distinct distractor keys and one value
        needed = 3 + self.doc_length // 2 + 1
        if len(vocab.symbols) < needed:
            raise ValueError(f"vocab_size {self.vocab_size} leaves {len(vocab.symbols)} symbols, need {needed}")

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.vocab_size)


@dataclass(frozen=True)
class Episode:
    id: int
    query: tuple[int, ...]
    docs: tuple[tuple[int, ...], ...]
    gold_evidence: tuple[tuple[int, ...], ...]
    answer: tuple[int, ...]
    sufficient: bool
    hops: int
    chain: tuple[int, ...] = field(default=())

    @property
    def k(self) -> int:
        return len(self.docs)

    @property
    def key(self) -> int:
        return self.query[-1]

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "query": list(self.query),
            "docs": [list(d) for d in self.docs],
            "gold_evidence": [list(e) for e in self.gold_evidence],
            "answer": list(self.answer),
            "sufficient": self.sufficient,
            "hops": self.hops,
            "chain": list(self.chain),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Episode":
        return cls(
            id=int(rec["id"]),
            query=tuple(rec["query"]),
            docs=tuple(tuple(d) for d in rec["docs"]),
            gold_evidence=tuple(tuple(e) for e in rec["gold_evidence"]),
            answer=tuple(rec["answer"]),
            sufficient=bool(rec["sufficient"]),
            hops=int(rec["hops"]),
            chain=tuple(rec.get("chain", ())),
        )


def follow_chain(docs: Sequence[Sequence[int]], key: int, hops: int) -> list[tuple[int, int, int]]:
    """Links ``(doc index, key, value)`` reachable from ``key`` in at most ``hops`` steps."""
    links = []
    cur = key
    for _ in range(hops):
        found = None
        for d, doc in enumerate(docs):
            for p in range(0, len(doc) - 1, 2):
                if doc[p] == cur:
                    found = (d, doc[p], doc[p + 1])
                    break
            if found:
                break
        if found is None:
            break
        links.append(found)
        cur = found[2]
    return links


def generate_episode(
    spec: DatasetSpec,
    rng: np.random.Generator,
    episode_id: int = 0,
    k: int | None = None,
    two_hop_rate: float | None = None,
) -> Episode:
    vocab = spec.vocab
    if k is None:
        k = int(rng.integers(spec.min_docs, spec.max_docs + 1))
    if two_hop_rate is None:
        two_hop_rate = spec.two_hop_rate
    symbols = np.array(vocab.symbols)
    n_pairs = spec.doc_length // 2

    # a two-hop chain needs two distinct documents
    hops = 2 if k >= 2 and rng.random() < two_hop_rate else 1
    sufficient = bool(rng.random() >= spec.insufficiency_rate) if k > 0 else False
    q, b, v = (int(x) for x in rng.choice(symbols, size=3, replace=False))
    reserved = {q, b, v}
    pool = np.array([s for s in symbols if s not in reserved])

    docs: list[list[tuple[int, int] | None]] = [[None] * n_pairs for _ in range(k)]
    gold_links: list[tuple[int, int]] = [(q, v)] if hops == 1 else [(q, b), (b, v)]
    if sufficient:
        placed = gold_links
    elif hops == 2:
        # drop one link; the other may still be present
        placed = [gold_links[int(rng.integers(2))]]
    else:
        placed = []
    if placed:
        targets = rng.choice(k, size=len(placed), replace=False)
        for (key, val), d in zip(placed, targets):
            docs[int(d)][int(rng.integers(n_pairs))] = (key, val)

    flat_docs = []
    for slots in docs:
        free = [i for i, s in enumerate(slots) if s is None]
        keys = rng.choice(pool, size=len(free), replace=False)
        vals = rng.choice(pool, size=len(free), replace=True)
        for i, kk, vv in zip(free, keys, vals):
            slots[i] = (int(kk), int(vv))
        flat_docs.append(tuple(x for pair in slots for x in pair))

    links = follow_chain(flat_docs, q, hops)
    complete = len(links) == hops
    assert complete == sufficient
    gold_evidence = [() for _ in range(k)]
    for d, key, val in links:
        gold_evidence[d] = (key, val)
    chain = (q,) + tuple(val for _, _, val in links)
    answer = (v,) if sufficient else (vocab.insufficient,)
    hop_marker = vocab.hop1 if hops == 1 else vocab.hop2
    return Episode(
        id=episode_id,
        query=(hop_marker, q),
        docs=tuple(flat_docs),
        gold_evidence=tuple(gold_evidence),
        answer=answer,
        sufficient=sufficient,
        hops=hops,
        chain=chain,
    )


def generate_dataset(spec: DatasetSpec, rng: np.random.Generator, start_id: int = 0) -> list[Episode]:
    spec.validate()
    return [generate_episode(spec, rng, start_id + i) for i in range(spec.episodes)]


def generate_splits(
    spec: DatasetSpec,
    rng: np.random.Generator,
    ratio: float = 0.8,
) -> tuple[list[Episode], list[Episode]]:
    """SFT and RL subsets of ``spec.episodes`` ids split 8:2; RL episodes use the RL hop mixture."""
    spec.validate()
    sft_ids, _ = split_dataset(list(range(spec.episodes)), ratio, spec.seed)
    in_sft = set(sft_ids)
    sft, rl = [], []
    for i in range(spec.episodes):
        rate = spec.two_hop_rate if i in in_sft else spec.rl_two_hop_rate
        (sft if i in in_sft else rl).append(generate_episode(spec, rng, i, two_hop_rate=rate))
    return sft, rl


def gold_trajectory(episode: Episode, vocab: Vocabulary, layout: Layout = Layout.EVIDENCE) -> TaggedTrajectory:
    """The reference trajectory: restate the key, record per-document evidence, walk the chain, answer."""
    think = episode.chain
    answer = episode.answer if episode.sufficient else (vocab.insufficient,)
    if layout is Layout.THINK_ANSWER:
        return build([think, answer], vocab, layout)
    evidence = [ev if ev else (vocab.no_info,) for ev in episode.gold_evidence]
    return build([(episode.key,), *evidence, think, answer], vocab, layout)


def split_dataset(episodes: Sequence, ratio: float = 0.8, seed: int = 0) -> tuple[list, list]:
    """Seeded disjoint split into (SFT, RL) subsets."""
    if not episodes:
        raise ValueError("cannot split an empty dataset")
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    order = np.random.default_rng(seed).permutation(len(episodes))
    n_first = int(round(ratio * len(episodes)))
    first = sorted(order[:n_first])
    second = sorted(order[n_first:])
    return [episodes[i] for i in first], [episodes[i] for i in second]


class RolloutPolicy(Protocol):
    def sample(self, episode: Episode, rng: np.random.Generator, temperature: float = 1.0): ...


@dataclass
class CurriculumEntry:
    episode_id: int
    scores: list[float]
    mean_score: float
    dropped: bool


@dataclass
class CurriculumReport:
    entries: list[CurriculumEntry]

    @property
    def dropped_fraction(self) -> float:
        return sum(e.dropped for e in self.entries) / max(len(self.entries), 1)

    def to_records(self) -> list[dict]:
        return [asdict(e) for e in self.entries]


def curriculum_filter(
    policy: RolloutPolicy,
    episodes: Sequence[Episode],
    vocab: Vocabulary,
    group_size: int = 8,
    rng: np.random.Generator | None = None,
    temperature: float = 1.0,
) -> tuple[list[Episode], CurriculumReport]:
    """Drop episodes the policy already solves in every rollout; order the rest easy to hard."""
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    entries = []
    kept = []
    for ep in episodes:
        scores = []
        for _ in range(group_size):
            traj = policy.sample(ep, rng, temperature).trajectory
            pred = traj.answer if traj.well_formed else None
            if pred is None:
                scores.append(0.0)
            else:
                scores.append(derivation_reward(AnswerRecord(pred, ep.answer, ep.sufficient), vocab.insufficient))
        mean = float(np.mean(scores))
        dropped = all(s == 1.0 for s in scores)
        entries.append(CurriculumEntry(ep.id, scores, mean, dropped))
        if not dropped:
            kept.append((mean, ep))
    # stable sort keeps generation order among ties
    kept.sort(key=lambda pair: -pair[0])
    return [ep for _, ep in kept], CurriculumReport(entries)


# ---------------------------------------------------------------------------
# JSONL persistence
# ---------------------------------------------------------------------------

def write_dataset(path: str | Path, episodes: Iterable[Episode], spec: DatasetSpec, split: str) -> None:
    path = Path(path)
    header = {"type": "header", "split": split, "spec": asdict(spec), "vocab": spec.vocab.to_header()}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(ep.to_record(), sort_keys=True) for ep in episodes]
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(path)


def read_dataset(path: str | Path) -> tuple[dict, Vocabulary, list[Episode]]:
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("type") != "header":
            raise ValueError(f"{path}: first line is not a dataset header")
        episodes = [Episode.from_record(json.loads(line)) for line in f if line.strip()]
    return header, Vocabulary.from_header(header["vocab"]), episodes
