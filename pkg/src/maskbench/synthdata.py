"""Synthetic user corpora, alignment pairs and hard-pair mining.

Users are drawn from a handful of latent archetypes. Each archetype fixes a
categorical distribution over the event vocabulary of every modality and a
vector of attribute bits that serve as probe-task labels. A user perturbs the
archetype distribution with a Dirichlet draw, then samples a history window
and a future window from the same distribution, so the future is predictable
from the history.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

logger = logging.getLogger(__name__)

EVENT_MODALITIES = ("bill", "minipro", "spm", "app", "search")
MODALITIES = EVENT_MODALITIES + ("tabular",)
CATEGORIES = ("food", "travel", "transit", "shopping", "finance", "entertainment", "health", "utility")
EVENTS_PER_CATEGORY = 3
TAB_BINS = 4
MAX_COUNT_TOKEN = 9

QUERY_WORDS = ("will", "this", "user", "do", "next", "month", "?")
ANSWER_WORDS = ("yes", "no", "prefers", ";")

PAIR_KINDS = ("behavior", "qa")
PROVENANCES = ("generated", "filtered-hard", "rewritten")


def event_name(modality: str, category: str, k: int) -> str:
    return f"{modality}:{category}{k}"


def event_category(event: str) -> str | None:
    """Category of an event token such as ``bill:food2``; None for other tokens."""
    if ":" not in event:
        return None
    mod, rest = event.split(":", 1)
    if mod not in EVENT_MODALITIES:
        return None
    return rest.rstrip("0123456789") or None


def modality_events(modality: str) -> list[str]:
    return [event_name(modality, c, k) for c in CATEGORIES for k in range(EVENTS_PER_CATEGORY)]


def tab_token(feature: int, bin_: int) -> str:
    return f"tab{feature}:{bin_}"


def count_token(n: int) -> str:
    return f"x{min(n, MAX_COUNT_TOKEN)}"


def event_vocabulary(n_features: int) -> list[str]:
    """Every payload token the corpus can emit, in a fixed order."""
    words = [e for m in EVENT_MODALITIES for e in modality_events(m)]
    words += [tab_token(f, b) for f in range(n_features) for b in range(TAB_BINS)]
    words += list(CATEGORIES)
    words += list(QUERY_WORDS) + list(ANSWER_WORDS)
    words += [count_token(n) for n in range(1, MAX_COUNT_TOKEN + 1)]
    return words


# --------------------------------------------------------------------- records


@dataclass
class Archetype:
    id: int
    event_dists: dict[str, np.ndarray]
    tab_means: np.ndarray
    attributes: np.ndarray

    def __post_init__(self):
        for m, p in self.event_dists.items():
            if not np.isclose(p.sum(), 1.0):
                raise ValueError(f"archetype {self.id}: {m} distribution does not sum to 1")
        if len(self.attributes) < 3:
            raise ValueError("archetypes need at least 3 attribute bits")


@dataclass
class Window:
    events: dict[str, list[str]]
    tabular: np.ndarray

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Window)
            and self.events == other.events
            and np.array_equal(self.tabular, other.tabular)
        )


@dataclass
class UserRecord:
    user_id: int
    archetype_id: int
    history: Window
    future: Window
    labels: list[bool]


@dataclass
class PairRecord:
    kind: str
    user_id: int
    user_text: str
    answer_text: str
    labels: list[bool]
    query_text: str | None = None
    difficulty: float | None = None
    provenance: str = "generated"

    def __post_init__(self):
        if self.kind not in PAIR_KINDS:
            raise ValueError(f"unknown pair kind {self.kind!r}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.kind == "behavior" and self.query_text is not None:
            raise ValueError("behavior pairs carry no query")
        if self.kind == "qa" and not self.query_text:
            raise ValueError("qa pairs need a query")

    def user_side_text(self) -> str:
        """Text of the user tower input, query included when present."""
        if self.query_text:
            return f"{self.user_text} instruction: {self.query_text}"
        return self.user_text


@dataclass
class CorpusConfig:
    n_users: int = 2000
    n_archetypes: int = 4
    seed: int = 7
    noise: float = 0.05
    n_tasks: int = 4
    n_features: int = 4
    tab_dim: int = 3
    concentration: float = 4.0
    favored_categories: int = 2
    favored_boost: float = 8.0
    history_mean: float = 4.0
    future_mean: float = 2.0
    max_events: int = 8


# ------------------------------------------------------------------ generation


def make_archetypes(cfg: CorpusConfig, rng: np.random.Generator) -> list[Archetype]:
    n_cat = len(CATEGORIES)
    bits = _attribute_table(cfg.n_archetypes, cfg.n_tasks, rng)
    out = []
    for a in range(cfg.n_archetypes):
        favored = rng.choice(n_cat, size=cfg.favored_categories, replace=False)
        cat_w = np.ones(n_cat)
        cat_w[favored] = cfg.favored_boost
        dists = {}
        for m in EVENT_MODALITIES:
            w = rng.dirichlet(np.ones(n_cat * EVENTS_PER_CATEGORY))
            w = w * np.repeat(cat_w, EVENTS_PER_CATEGORY)
            dists[m] = w / w.sum()
        tab_means = rng.normal(0.0, 1.0, cfg.n_features)
        out.append(Archetype(a, dists, tab_means, bits[a]))
    return out


def _attribute_table(n_archetypes: int, n_tasks: int, rng: np.random.Generator) -> np.ndarray:
    """Random archetype bits; with two or more archetypes every task has both classes."""
    bits = rng.random((n_archetypes, n_tasks)) < 0.5
    if n_archetypes >= 2:
        for k in range(n_tasks):
            if bits[:, k].all() or not bits[:, k].any():
                i = int(rng.integers(n_archetypes))
                bits[i, k] = not bits[i, k]
    return bits


def _draw_window(dists, tab_means, mean_count, cfg: CorpusConfig, rng) -> Window:
    events = {}
    for m in EVENT_MODALITIES:
        n = min(1 + int(rng.poisson(mean_count - 1)), cfg.max_events)
        vocab = modality_events(m)
        idx = rng.choice(len(vocab), size=n, p=dists[m])
        events[m] = [vocab[i] for i in idx]
    grid = tab_means[:, None] + rng.normal(0.0, 1.0, (cfg.n_features, cfg.tab_dim))
    return Window(events, grid)


def generate_corpus(
    n_users: int,
    n_archetypes: int,
    seed: int,
    noise: float = 0.05,
    cfg: CorpusConfig | None = None,
) -> list[UserRecord]:
    if n_users < 1:
        raise ValueError("n_users must be >= 1")
    if n_archetypes < 1:
        raise ValueError("n_archetypes must be >= 1")
    base = cfg or CorpusConfig()
    cfg = CorpusConfig(**{**asdict(base), "n_users": n_users, "n_archetypes": n_archetypes, "seed": seed, "noise": noise})
    rng = np.random.default_rng(seed)
    archetypes = make_archetypes(cfg, rng)
    users = []
    for uid in range(n_users):
        arch = archetypes[int(rng.integers(n_archetypes))]
        # user-specific taste around the archetype, shared by both windows
        dists = {m: rng.dirichlet(cfg.concentration * len(p) * p + 1e-3) for m, p in arch.event_dists.items()}
        tab = arch.tab_means + rng.normal(0.0, 0.5, cfg.n_features)
        history = _draw_window(dists, tab, cfg.history_mean, cfg, rng)
        future = _draw_window(dists, tab, cfg.future_mean, cfg, rng)
        flips = rng.random(cfg.n_tasks) < noise
        labels = [bool(b) != bool(f) for b, f in zip(arch.attributes, flips)]
        users.append(UserRecord(uid, arch.id, history, future, labels))
    return users


def bag_of_events(users: Sequence[UserRecord], n_features: int = 4) -> np.ndarray:
    """Histogram of history tokens per user; a reference feature map for probes."""
    vocab = {w: i for i, w in enumerate(event_vocabulary(n_features))}
    X = np.zeros((len(users), len(vocab)))
    for r, u in enumerate(users):
        for tok in render_user_text(u).split():
            if tok in vocab:
                X[r, vocab[tok]] += 1
    return X


# ------------------------------------------------------------------- rendering


def tab_bins(grid: np.ndarray) -> list[int]:
    """Quantise each tabular feature (mean over its D dims) into one of four bins."""
    return [int(np.searchsorted((-1.0, 0.0, 1.0), v)) for v in np.asarray(grid).mean(axis=1)]


def render_user_text(user: UserRecord) -> str:
    """Delimited history text: ``<bill> ... </bill> ... <tabular> ... </tabular>``."""
    parts = []
    for m in EVENT_MODALITIES:
        parts.append(f"<{m}>")
        parts.extend(user.history.events[m])
        parts.append(f"</{m}>")
    parts.append("<tabular>")
    parts.extend(tab_token(f, b) for f, b in enumerate(tab_bins(user.history.tabular)))
    parts.append("</tabular>")
    return " ".join(parts)


def aggregate_future(window: Window) -> list[tuple[str, int]]:
    """Future events counted per action, in modality then first-seen order."""
    items: list[tuple[str, int]] = []
    for m in EVENT_MODALITIES:
        items.extend(Counter(window.events[m]).items())
    return items


def _content_seed(seed: int, text: str) -> list[int]:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return [seed, int.from_bytes(digest[:8], "little")]


def build_behavior_pairs(
    users: Sequence[UserRecord],
    sample_k: int,
    seed: int,
    stats: Counter | None = None,
) -> list[PairRecord]:
    """History-to-future alignment pairs; empty futures are skipped and counted."""
    if sample_k < 1:
        raise ValueError("sample_k must be >= 1")
    stats = stats if stats is not None else Counter()
    pairs = []
    for u in users:
        items = aggregate_future(u.future)
        if not items:
            stats["empty_future"] += 1
            continue
        key = " ".join(f"{e}*{n}" for e, n in items)
        rng = np.random.default_rng(_content_seed(seed, key))
        k = min(sample_k, len(items))
        chosen = sorted(rng.choice(len(items), size=k, replace=False))
        answer = " ".join(f"{items[i][0]} {count_token(items[i][1])}" for i in chosen)
        pairs.append(PairRecord("behavior", u.user_id, render_user_text(u), answer, list(u.labels)))
    if stats["empty_future"]:
        logger.info("skipped %d users with an empty future window", stats["empty_future"])
    return pairs


def builtin_pairs(
    n_users: int = 2000,
    n_archetypes: int = 4,
    seed: int = 7,
    noise: float = 0.05,
    sample_k: int = 5,
) -> list[PairRecord]:
    """The default training corpus: one behavior pair per user with a non-empty future."""
    return build_behavior_pairs(generate_corpus(n_users, n_archetypes, seed, noise), sample_k, seed)


# ---------------------------------------------------------- difficulty probing

Embedder = Callable[[str], np.ndarray]


def difficulty_score(pair: PairRecord, emb: Embedder) -> float:
    """Hard-to-align score ``1 - cos(emb(user side), emb(answer))``, stored on the pair."""
    u = np.asarray(emb(pair.user_side_text()), dtype=np.float64)
    a = np.asarray(emb(pair.answer_text), dtype=np.float64)
    for name, v in (("user", u), ("answer", a)):
        n = float(np.linalg.norm(v))
        if not np.isfinite(n) or n == 0.0:
            raise ArithmeticError(f"degenerate {name} embedding")
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"{name} embedding is not unit-norm (norm {n})")
    score = 1.0 - float(u @ a)
    pair.difficulty = score
    return score


def filter_hard(pairs: Sequence[PairRecord], T_filter: float) -> list[PairRecord]:
    """Keep pairs with ``difficulty >= T_filter`` in order, tagged ``filtered-hard``."""
    kept = []
    for p in pairs:
        if p.difficulty is None:
            raise ValueError(f"pair for user {p.user_id} has no difficulty score")
        if p.difficulty >= T_filter:
            p.provenance = "filtered-hard"
            kept.append(p)
    return kept


def hashed_bow_embedder(dim: int = 64, seed: int = 0) -> Embedder:
    """Unit-norm bag-of-tokens embedding with a fixed random code per token.

    A cheap stand-in for a pretrained text embedder: texts sharing tokens get
    high cosine similarity.
    """
    cache: dict[str, np.ndarray] = {}

    def code(tok: str) -> np.ndarray:
        if tok not in cache:
            rng = np.random.default_rng(_content_seed(seed, tok))
            cache[tok] = rng.normal(size=dim)
        return cache[tok]

    def emb(text: str) -> np.ndarray:
        toks = [t for t in text.split() if not (t.startswith("<") and t.endswith(">"))]
        if not toks:
            raise ArithmeticError("nothing to embed")
        v = np.sum([code(t) for t in toks], axis=0)
        return v / np.linalg.norm(v)

    return emb


# ---------------------------------------------------------------- QA pipeline


class GeneratorError(RuntimeError):
    pass


class TextGenerator(Protocol):
    def generate(self, user: UserRecord, rng: np.random.Generator, hints: Sequence[str] = ()) -> tuple[str, str]:
        """Return ``(query, answer)`` for one user."""


class TemplateGenerator:
    """Deterministic query/answer templates about next-month category activity.

    Hinted categories are ``hint_boost`` times more likely to be asked about.
    """

    def __init__(self, hint_boost: float = 3.0, max_items: int = 3):
        self.hint_boost = hint_boost
        self.max_items = max_items

    def generate(self, user, rng, hints=()):
        future = [e for m in EVENT_MODALITIES for e in user.future.events[m]]
        if not future:
            raise GeneratorError(f"user {user.user_id} has an empty future window")
        seen = Counter(event_category(e) for e in future)
        w = np.array([1.0 + seen[c] for c in CATEGORIES])
        for h in hints:
            w[CATEGORIES.index(h)] *= self.hint_boost
        cat = CATEGORIES[int(rng.choice(len(CATEGORIES), p=w / w.sum()))]
        query = f"will this user do {cat} next month ?"
        if seen[cat]:
            items = [e for e in future if event_category(e) == cat][: self.max_items]
            answer = " ; ".join(["yes " + cat] + items)
        else:
            top = [c for c, _ in seen.most_common(2)]
            answer = " ; ".join(["no " + cat, "prefers " + " ".join(top)])
        return query, answer


def pair_categories(pair: PairRecord) -> list[str]:
    """Event-vocabulary categories mentioned on the query/answer side of a pair."""
    out = []
    for tok in f"{pair.query_text or ''} {pair.answer_text}".split():
        if tok in CATEGORIES:
            out.append(tok)
        else:
            c = event_category(tok)
            if c:
                out.append(c)
    return out


def extract_rules(hard: Sequence[PairRecord], everything: Sequence[PairRecord], min_ratio: float = 1.25) -> list[str]:
    """Categories over-represented in hard pairs by a frequency-ratio test."""
    if not hard or not everything:
        return []
    hc = Counter(c for p in hard for c in pair_categories(p))
    ac = Counter(c for p in everything for c in pair_categories(p))
    nh, na = sum(hc.values()), sum(ac.values())
    if nh == 0:
        return []
    rules = []
    for c in CATEGORIES:
        if hc[c] >= 2 and (hc[c] / nh) >= min_ratio * (ac[c] / na):
            rules.append(c)
    return rules


def rewrite_answer(answer: str) -> str:
    """Keep the verdict clause first; sort and deduplicate the remaining clauses."""
    clauses = [c.strip() for c in answer.split(";")]
    head, rest = clauses[0], clauses[1:]
    return " ; ".join([head] + sorted(set(c for c in rest if c)))


@dataclass
class QAConfig:
    calibration_size: int = 1000
    T_filter: float = 0.6
    scale_n: int = 500
    seed: int = 7


def qa_pipeline(
    users: Sequence[UserRecord],
    generator: TextGenerator,
    emb: Embedder,
    cfg: QAConfig,
    stats: dict | None = None,
) -> list[PairRecord]:
    """Calibrate, probe difficulty, extract emphasis rules, then scale and rewrite."""
    stats = stats if stats is not None else {}
    skipped = Counter()
    rng = np.random.default_rng([cfg.seed, 1])
    order = rng.permutation(len(users))

    def make(n, hints, gen_rng):
        out = []
        for i in range(n):
            u = users[int(order[i % len(users)])]
            try:
                q, a = generator.generate(u, gen_rng, hints)
            except GeneratorError:
                skipped["generator"] += 1
                continue
            out.append(PairRecord("qa", u.user_id, render_user_text(u), a, list(u.labels), query_text=q))
        return out

    calibration = make(cfg.calibration_size, (), np.random.default_rng([cfg.seed, 2]))
    for p in calibration:
        difficulty_score(p, emb)
    hard = filter_hard([_copy(p) for p in calibration], cfg.T_filter)
    rules = extract_rules(hard, calibration)
    scaled = make(cfg.scale_n, rules, np.random.default_rng([cfg.seed, 3]))
    for p in scaled:
        p.answer_text = rewrite_answer(p.answer_text)
        p.provenance = "rewritten"
    stats.update(
        calibration=len(calibration),
        hard=len(hard),
        rules=rules,
        scaled=len(scaled),
        skipped=dict(skipped),
    )
    return scaled


def _copy(p: PairRecord) -> PairRecord:
    return PairRecord(**{**asdict(p), "labels": list(p.labels)})


# ------------------------------------------------------------------ corpus I/O

FIELDS = ("kind", "user_id", "user_text", "query_text", "answer_text", "difficulty", "provenance", "labels")


class CorpusFormatError(ValueError):
    pass


def _record_line(p: PairRecord) -> str:
    d = {
        "kind": p.kind,
        "user_id": p.user_id,
        "user_text": p.user_text,
        "query_text": p.query_text,
        "answer_text": p.answer_text,
        "difficulty": p.difficulty,
        "provenance": p.provenance,
        "labels": [bool(b) for b in p.labels],
    }
    return json.dumps(d, ensure_ascii=False, separators=(",", ":"))


def write_corpus(path, records: Iterable[PairRecord]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in records:
            fh.write(_record_line(p) + "\n")
    return path


def parse_record(line: str, lineno: int = 1) -> PairRecord:
    try:
        d = json.loads(line)
    except json.JSONDecodeError as e:
        raise CorpusFormatError(f"line {lineno}: malformed record ({e.msg})") from None
    if not isinstance(d, dict):
        raise CorpusFormatError(f"line {lineno}: record is not an object")
    keys = tuple(d)
    if keys != FIELDS:
        unknown = sorted(set(keys) - set(FIELDS))
        missing = sorted(set(FIELDS) - set(keys))
        raise CorpusFormatError(
            f"line {lineno}: bad fields (unknown={unknown}, missing={missing}, expected order {list(FIELDS)})"
        )
    try:
        return PairRecord(
            kind=d["kind"],
            user_id=int(d["user_id"]),
            user_text=d["user_text"],
            answer_text=d["answer_text"],
            labels=[bool(b) for b in d["labels"]],
            query_text=d["query_text"],
            difficulty=None if d["difficulty"] is None else float(d["difficulty"]),
            provenance=d["provenance"],
        )
    except (TypeError, ValueError) as e:
        raise CorpusFormatError(f"line {lineno}: {e}") from None


def read_corpus(path) -> list[PairRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.endswith("\n"):
                raise CorpusFormatError(f"line {n}: truncated record (no line terminator)")
            if not line.strip():
                continue
            out.append(parse_record(line, n))
    return out


@dataclass
class CorpusManifest:
    seed: int
    counts: dict[str, int]
    vocab: list[str]
    T_filter: float | None
    files: dict[str, str]
    params: dict = field(default_factory=dict)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "CorpusManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))
