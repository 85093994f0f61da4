"""A log-linear autoregressive policy with exact gradients.

The next-token logits are

    logit(v) = W[s, v] + sum_r U[s, r] * rel_r(v)

summed over the active states ``s`` of the prefix (its grammar phase and the
coarser group that phase belongs to), and ``rel_r(v)`` are binary relation
features tying candidate ``v`` to the episode: "v is the query key", "v is the
value paired with the last token in the current document", and so on. The
features are a deterministic function of (episode, prefix), so a trajectory is
encoded once and its log-probability is then linear-softmax in ``theta``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rsgrpo.env import Episode
from rsgrpo.grammar import Layout, TaggedTrajectory, Vocabulary, parse


class Phase(enum.IntEnum):
    START = 0
    OBS_OPEN = 1
    OBS_IN = 2
    OBS_DONE = 3
    EV_OPEN = 4
    EV_IN1 = 5
    EV_IN2 = 6
    EV_DONE_MORE = 7
    EV_DONE_ALL = 8
    TH_OPEN = 9
    TH_IN = 10
    TH_DONE = 11
    # answer opened after a think chain that is too short / exactly / too long for the query's hop count
    ANS_SHORT = 12
    ANS_FULL = 13
    ANS_LONG = 14
    ANS_IN = 15
    DONE = 16
    ERROR = 17


class Group(enum.IntEnum):
    """Coarser state shared by several phases; its weights add to the phase weights."""

    BETWEEN = 0
    OBSERVE = 1
    EVIDENCE = 2
    THINK = 3
    ANSWER = 4
    OTHER = 5


class Relation(enum.IntEnum):
    QUERY = 0
    NEXT_IN_CUR_DOC = 1
    NEXT_IN_ANY_DOC = 2
    NEXT_IN_EVIDENCE = 3
    KEY_IN_CUR_DOC = 4
    VALUE_OF_QUERY = 5
    LAST = 6
    IN_CUR_DOC = 7
    LAST_THINK = 8
    IN_EVIDENCE = 9


N_PHASES = len(Phase)
N_GROUPS = len(Group)
N_RELATIONS = len(Relation)
_EV_PHASES = (Phase.EV_OPEN, Phase.EV_IN1, Phase.EV_IN2)
_TH_PHASES = (Phase.TH_OPEN, Phase.TH_IN)
_ANS_PHASES = (Phase.ANS_SHORT, Phase.ANS_FULL, Phase.ANS_LONG, Phase.ANS_IN)

PHASE_GROUP = {
    **{ph: Group.BETWEEN for ph in (Phase.START, Phase.OBS_DONE, Phase.EV_DONE_MORE, Phase.EV_DONE_ALL, Phase.TH_DONE)},
    Phase.OBS_OPEN: Group.OBSERVE, Phase.OBS_IN: Group.OBSERVE,
    **{ph: Group.EVIDENCE for ph in _EV_PHASES},
    **{ph: Group.THINK for ph in _TH_PHASES},
    **{ph: Group.ANSWER for ph in _ANS_PHASES},
    Phase.DONE: Group.OTHER, Phase.ERROR: Group.OTHER,
}


@dataclass(frozen=True)
class PolicyConfig:
    vocab: Vocabulary = field(default_factory=Vocabulary)
    layout: Layout = Layout.EVIDENCE
    shared_groups: bool = True

    @property
    def n_states(self) -> int:
        """Rows of W and U: one per phase, then one per group."""
        return N_PHASES + N_GROUPS

    @property
    def dim(self) -> int:
        return self.n_states * (self.vocab.size + N_RELATIONS)

    def split(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Views of ``theta`` as the state-token table W and the state-relation table U."""
        n_w = self.n_states * self.vocab.size
        return (theta[:n_w].reshape(self.n_states, self.vocab.size),
                theta[n_w:].reshape(self.n_states, N_RELATIONS))

    def to_dict(self) -> dict:
        return {"vocab": self.vocab.to_header(), "layout": self.layout.value,
                "shared_groups": self.shared_groups}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        return cls(Vocabulary.from_header(d["vocab"]), Layout(d["layout"]), bool(d["shared_groups"]))


class EpisodeIndex:
    """Lookup tables over an episode's documents, built once per episode."""

    def __init__(self, episode: Episode):
        self.episode = episode
        self.query_key = episode.key
        self.hops = episode.hops
        self.doc_next: list[dict[int, int]] = []
        self.doc_keys: list[tuple[int, ...]] = []
        self.doc_tokens: list[tuple[int, ...]] = []
        any_next: dict[int, list[int]] = {}
        for doc in episode.docs:
            nxt: dict[int, int] = {}
            for p in range(0, len(doc) - 1, 2):
                nxt.setdefault(doc[p], doc[p + 1])
                bucket = any_next.setdefault(doc[p], [])
                if doc[p + 1] not in bucket:
                    bucket.append(doc[p + 1])
            self.doc_next.append(nxt)
            self.doc_keys.append(tuple(nxt))
            self.doc_tokens.append(tuple(dict.fromkeys(doc)))
        self.any_next = {key: tuple(vals) for key, vals in any_next.items()}
        self.query_values = self.any_next.get(self.query_key, ())


class PolicyContext:
    """Incremental grammar tracker plus the episode lookups; yields per-step features."""

    __slots__ = ("index", "config", "phase", "n_evidence", "last", "think", "ev_next", "ev_tokens", "_ev_prev")

    def __init__(self, index: EpisodeIndex, config: PolicyConfig):
        self.index = index
        self.config = config
        self.phase = Phase.START
        self.n_evidence = 0
        self.last: int | None = None
        self.think: list[int] = []
        self.ev_next: dict[int, list[int]] = {}
        self.ev_tokens: list[int] = []
        self._ev_prev: int | None = None

    @property
    def state(self) -> tuple[int, ...]:
        """Active rows of the parameter tables for the next position."""
        if self.config.shared_groups:
            return (int(self.phase), N_PHASES + int(PHASE_GROUP[self.phase]))
        return (int(self.phase),)

    @property
    def current_doc(self) -> int | None:
        if self.phase in _EV_PHASES and 0 < self.n_evidence <= len(self.index.doc_next):
            return self.n_evidence - 1
        return None

    def relations(self) -> list[tuple[int, int]]:
        """Active (relation, candidate token) pairs for the next position."""
        idx = self.index
        last = self.last
        out = [(Relation.QUERY, idx.query_key)]
        cur = self.current_doc
        if cur is not None:
            nxt = idx.doc_next[cur].get(last) if last is not None else None
            if nxt is not None:
                out.append((Relation.NEXT_IN_CUR_DOC, nxt))
            out.extend((Relation.KEY_IN_CUR_DOC, v) for v in idx.doc_keys[cur])
            out.extend((Relation.IN_CUR_DOC, v) for v in idx.doc_tokens[cur])
        if last is not None:
            out.extend((Relation.NEXT_IN_ANY_DOC, v) for v in idx.any_next.get(last, ()))
            out.extend((Relation.NEXT_IN_EVIDENCE, v) for v in self.ev_next.get(last, ()))
            out.append((Relation.LAST, last))
        out.extend((Relation.VALUE_OF_QUERY, v) for v in idx.query_values)
        if self.think:
            out.append((Relation.LAST_THINK, self.think[-1]))
        out.extend((Relation.IN_EVIDENCE, v) for v in self.ev_tokens)
        return out

    def step(self, token: int) -> None:
        vocab = self.config.vocab
        k = len(self.index.doc_next)
        ph = self.phase
        is_tag = vocab.is_tag(token)
        new = Phase.ERROR
        if ph is Phase.START:
            if self.config.layout is Layout.THINK_ANSWER:
                new = Phase.TH_OPEN if token == vocab.think_open else Phase.ERROR
            else:
                new = Phase.OBS_OPEN if token == vocab.observe_open else Phase.ERROR
        elif ph in (Phase.OBS_OPEN, Phase.OBS_IN):
            if not is_tag:
                new = Phase.OBS_IN
            elif token == vocab.observe_close:
                new = Phase.OBS_DONE
        elif ph is Phase.OBS_DONE:
            if token == vocab.evidence_open and k > 0:
                new = Phase.EV_OPEN
                self._open_evidence()
            elif token == vocab.think_open and k == 0:
                new = Phase.TH_OPEN
        elif ph in _EV_PHASES:
            if not is_tag:
                new = Phase.EV_IN1 if ph is Phase.EV_OPEN else Phase.EV_IN2
                if self._ev_prev is not None:
                    bucket = self.ev_next.setdefault(self._ev_prev, [])
                    if token not in bucket:
                        bucket.append(token)
                if token not in self.ev_tokens:
                    self.ev_tokens.append(token)
                self._ev_prev = token
            elif token == vocab.evidence_close:
                new = Phase.EV_DONE_MORE if self.n_evidence < k else Phase.EV_DONE_ALL
        elif ph is Phase.EV_DONE_MORE:
            if token == vocab.evidence_open:
                new = Phase.EV_OPEN
                self._open_evidence()
        elif ph is Phase.EV_DONE_ALL:
            if token == vocab.think_open:
                new = Phase.TH_OPEN
        elif ph in _TH_PHASES:
            if not is_tag:
                self.think.append(token)
                new = Phase.TH_IN
            elif token == vocab.think_close:
                new = Phase.TH_DONE
        elif ph is Phase.TH_DONE:
            if token == vocab.answer_open:
                # a complete chain is the key plus one value per hop
                full = self.index.hops + 1
                n = len(self.think)
                new = Phase.ANS_SHORT if n < full else Phase.ANS_FULL if n == full else Phase.ANS_LONG
        elif ph in _ANS_PHASES:
            if not is_tag:
                new = Phase.ANS_IN
            elif token == vocab.answer_close:
                new = Phase.DONE
        self.phase = new
        self.last = token

    def _open_evidence(self) -> None:
        self.n_evidence += 1
        self._ev_prev = None


@dataclass
class Encoded:
    """Per-position features of a fixed token sequence.

    ``states`` has one row of active state ids per position. ``rel_t``,
    ``rel_r``, ``rel_v`` list every active relation feature as (position,
    relation, candidate token) triples.
    """

    targets: np.ndarray
    states: np.ndarray
    rel_t: np.ndarray
    rel_r: np.ndarray
    rel_v: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)


class _EncodedBuilder:
    def __init__(self):
        self.targets: list[int] = []
        self.states: list[tuple[int, ...]] = []
        self.rel_t: list[int] = []
        self.rel_r: list[int] = []
        self.rel_v: list[int] = []

    def add(self, state: tuple[int, ...], rels: list[tuple[int, int]], target: int) -> None:
        t = len(self.targets)
        self.targets.append(target)
        self.states.append(state)
        for r, v in rels:
            self.rel_t.append(t)
            self.rel_r.append(r)
            self.rel_v.append(v)

    def finish(self) -> Encoded:
        return Encoded(
            np.array(self.targets, dtype=np.int64),
            np.array(self.states, dtype=np.int64).reshape(len(self.targets), -1),
            np.array(self.rel_t, dtype=np.int64),
            np.array(self.rel_r, dtype=np.int64),
            np.array(self.rel_v, dtype=np.int64),
        )


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def step_logits(theta: np.ndarray, config: PolicyConfig, state: tuple[int, ...], rels: list[tuple[int, int]]) -> np.ndarray:
    W, U = config.split(theta)
    rows = list(state)
    out = W[rows].sum(axis=0)
    u = U[rows].sum(axis=0)
    for r, v in rels:
        out[v] += u[r]
    return out


def encoded_logits(theta: np.ndarray, config: PolicyConfig, enc: Encoded) -> np.ndarray:
    W, U = config.split(theta)
    logits = W[enc.states].sum(axis=1)
    if len(enc.rel_t):
        u = U[enc.states[enc.rel_t], enc.rel_r[:, None]].sum(axis=1)
        np.add.at(logits, (enc.rel_t, enc.rel_v), u)
    return logits


def encoded_log_probs(theta: np.ndarray, config: PolicyConfig, enc: Encoded) -> np.ndarray:
    if len(enc) == 0:
        return np.zeros(0)
    logp = _log_softmax(encoded_logits(theta, config, enc))
    return logp[np.arange(len(enc)), enc.targets]


def encoded_grad(theta: np.ndarray, config: PolicyConfig, enc: Encoded, weights: np.ndarray | None = None) -> np.ndarray:
    """Gradient of ``sum_t weights[t] * log p(token_t | prefix_t)`` with respect to theta."""
    grad = np.zeros(config.dim)
    if len(enc) == 0:
        return grad
    weights = np.ones(len(enc)) if weights is None else np.asarray(weights, dtype=float)
    probs = np.exp(_log_softmax(encoded_logits(theta, config, enc)))
    g = -probs * weights[:, None]
    g[np.arange(len(enc)), enc.targets] += weights
    gW, gU = config.split(grad)
    n_active = enc.states.shape[1]
    np.add.at(gW, enc.states.ravel(), np.repeat(g, n_active, axis=0))
    if len(enc.rel_t):
        np.add.at(gU, (enc.states[enc.rel_t].ravel(), np.repeat(enc.rel_r, n_active)),
                  np.repeat(g[enc.rel_t, enc.rel_v], n_active))
    return grad


@dataclass
class Rollout:
    trajectory: TaggedTrajectory
    log_probs: np.ndarray
    encoded: Encoded


def max_length(k: int) -> int:
    return 4 * k + 16


class ToyPolicy:
    """Parameter vector plus feature configuration."""

    def __init__(self, config: PolicyConfig | None = None, theta: np.ndarray | None = None):
        self.config = config or PolicyConfig()
        if theta is None:
            theta = np.zeros(self.config.dim)
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.config.dim,):
            raise ValueError(f"theta has shape {theta.shape}, expected ({self.config.dim},)")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta has non-finite entries")
        self.theta = theta

    @property
    def vocab(self) -> Vocabulary:
        return self.config.vocab

    @property
    def layout(self) -> Layout:
        return self.config.layout

    def with_theta(self, theta: np.ndarray) -> "ToyPolicy":
        return ToyPolicy(self.config, theta)

    def context(self, episode: Episode, prefix: list[int] | tuple[int, ...] = ()) -> PolicyContext:
        ctx = PolicyContext(EpisodeIndex(episode), self.config)
        for tok in prefix:
            ctx.step(int(tok))
        return ctx

    def logits(self, ctx: PolicyContext) -> np.ndarray:
        return step_logits(self.theta, self.config, ctx.state, ctx.relations())

    def encode(self, tokens, episode: Episode) -> Encoded:
        ctx = self.context(episode)
        builder = _EncodedBuilder()
        for tok in tokens:
            builder.add(ctx.state, ctx.relations(), int(tok))
            ctx.step(int(tok))
        return builder.finish()

    def _decode(self, episode: Episode, rng: np.random.Generator | None, temperature: float) -> Rollout:
        vocab = self.vocab
        ctx = self.context(episode)
        builder = _EncodedBuilder()
        tokens: list[int] = []
        log_probs: list[float] = []
        cap = max_length(episode.k)
        W, U = self.config.split(self.theta)
        while len(tokens) < cap:
            state = ctx.state
            rels = ctx.relations()
            logit = W[list(state)].sum(axis=0)
            u = U[list(state)].sum(axis=0)
            for r, v in rels:
                logit[v] += u[r]
            logp = logit - logit.max()
            logp -= np.log(np.exp(logp).sum())
            if rng is None:
                tok = int(np.argmax(logit))
            else:
                scaled = (logit - logit.max()) / temperature
                p = np.exp(scaled)
                cdf = np.cumsum(p)
                tok = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
                tok = min(tok, vocab.size - 1)
            builder.add(state, rels, tok)
            tokens.append(tok)
            log_probs.append(float(logp[tok]))
            ctx.step(tok)
            if tok == vocab.answer_close:
                break
        traj = parse(tokens, vocab, episode.k, self.layout)
        return Rollout(traj, np.array(log_probs), builder.finish())

    def sample(self, episode: Episode, rng: np.random.Generator, temperature: float = 1.0) -> Rollout:
        """Sample at ``temperature``; the recorded log-probs are those of the untempered policy."""
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        return self._decode(episode, rng, temperature)

    def greedy(self, episode: Episode) -> Rollout:
        return self._decode(episode, None, 1.0)

    def log_prob(self, trajectory: TaggedTrajectory | list[int], episode: Episode) -> np.ndarray:
        tokens = trajectory.tokens if isinstance(trajectory, TaggedTrajectory) else trajectory
        return encoded_log_probs(self.theta, self.config, self.encode(tokens, episode))

    def log_prob_grad(self, trajectory: TaggedTrajectory | list[int], episode: Episode) -> np.ndarray:
        tokens = trajectory.tokens if isinstance(trajectory, TaggedTrajectory) else trajectory
        return encoded_grad(self.theta, self.config, self.encode(tokens, episode))

    # -- checkpoints --------------------------------------------------------

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(), "theta": [float(x) for x in self.theta]}

    @classmethod
    def from_dict(cls, d: dict) -> "ToyPolicy":
        return cls(PolicyConfig.from_dict(d["config"]), np.array(d["theta"], dtype=float))

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        """Atomic JSON write; floats are written with repr precision so reloads are exact."""
        path = Path(path)
        payload = self.to_dict()
        if extra:
            payload["meta"] = extra
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(payload))
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "ToyPolicy":
        return cls.from_dict(json.loads(Path(path).read_text()))


def oracle_params(config: PolicyConfig, scale: float = 10.0) -> np.ndarray:
    """Hand-set weights under which greedy decoding reproduces the gold trajectory.

    Only phase rows are set; group rows stay at zero.
    """
    vocab = config.vocab
    theta = np.zeros(config.dim)
    W, U = config.split(theta)
    hi, mid = scale, scale / 2
    W[Phase.START, vocab.think_open if config.layout is Layout.THINK_ANSWER else vocab.observe_open] = hi
    U[Phase.OBS_OPEN, Relation.QUERY] = hi
    W[Phase.OBS_IN, vocab.observe_close] = hi
    W[Phase.OBS_DONE, vocab.evidence_open] = hi
    # relevant key scores 0.6*hi, irrelevant candidates at most 0.3*hi, abstention 0.45*hi
    W[Phase.EV_OPEN, vocab.no_info] = 0.45 * hi
    U[Phase.EV_OPEN, Relation.QUERY] = 0.3 * hi
    U[Phase.EV_OPEN, Relation.KEY_IN_CUR_DOC] = 0.3 * hi
    U[Phase.EV_OPEN, Relation.VALUE_OF_QUERY] = 0.3 * hi
    U[Phase.EV_IN1, Relation.NEXT_IN_CUR_DOC] = hi
    W[Phase.EV_IN1, vocab.evidence_close] = mid
    W[Phase.EV_IN2, vocab.evidence_close] = hi
    W[Phase.EV_DONE_MORE, vocab.evidence_open] = hi
    W[Phase.EV_DONE_ALL, vocab.think_open] = hi
    U[Phase.TH_OPEN, Relation.QUERY] = hi
    chain_rel = Relation.NEXT_IN_ANY_DOC if config.layout is Layout.THINK_ANSWER else Relation.NEXT_IN_EVIDENCE
    U[Phase.TH_IN, chain_rel] = hi
    W[Phase.TH_IN, vocab.think_close] = mid
    W[Phase.TH_DONE, vocab.answer_open] = hi
    W[Phase.ANS_SHORT, vocab.insufficient] = hi
    U[Phase.ANS_FULL, Relation.LAST_THINK] = hi
    W[Phase.ANS_LONG, vocab.insufficient] = hi
    W[Phase.ANS_IN, vocab.answer_close] = hi
    return theta
