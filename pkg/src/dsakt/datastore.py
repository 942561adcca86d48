"""Interaction logs, token encoding, windowing and synthetic BKT students."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np


class LogFormatError(ValueError):
    """A malformed interaction log. ``row`` is the 1-based line number when known."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class LogFormat:
    user: str = "user_id"
    exercise: str = "exercise_id"
    correct: str = "correct"
    timestamp: str | None = "timestamp"
    delimiter: str = ","


CANONICAL = LogFormat()
FORMATS = {
    "canonical": CANONICAL,
    # ASSISTments exports: skill tags stand in for exercises by default
    "assist": LogFormat(exercise="skill_id", timestamp="order_id"),
    "assist-problem": LogFormat(exercise="problem_id", timestamp="order_id"),
}


@dataclass
class Vocabulary:
    """Bijection between opaque exercise ids and indices ``1..e`` (0 is padding)."""

    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._index = {ex: i + 1 for i, ex in enumerate(self.ids)}
        if len(self._index) != len(self.ids):
            raise ValueError("duplicate exercise ids in vocabulary")

    @property
    def e(self) -> int:
        return len(self.ids)

    def __len__(self):
        return len(self.ids)

    def __contains__(self, exercise_id):
        return exercise_id in self._index

    def add(self, exercise_id: str) -> int:
        idx = self._index.get(exercise_id)
        if idx is None:
            self.ids.append(exercise_id)
            idx = self._index[exercise_id] = len(self.ids)
        return idx

    def index(self, exercise_id: str) -> int:
        try:
            return self._index[exercise_id]
        except KeyError:
            raise KeyError(f"unknown exercise id {exercise_id!r}") from None

    def exercise_id(self, index: int) -> str:
        if not 1 <= index <= len(self.ids):
            raise KeyError(f"exercise index {index} outside [1, {len(self.ids)}]")
        return self.ids[index - 1]


@dataclass
class UserSequence:
    user_id: str
    exercises: np.ndarray  # int, values in [1, e]
    corrects: np.ndarray  # int, values in {0, 1}
    rows: np.ndarray | None = None  # 0-based data-row numbers in the source log

    def __post_init__(self):
        self.exercises = np.asarray(self.exercises, dtype=np.int64)
        self.corrects = np.asarray(self.corrects, dtype=np.int64)
        if self.rows is not None:
            self.rows = np.asarray(self.rows, dtype=np.int64)
        if self.exercises.shape != self.corrects.shape or self.exercises.ndim != 1:
            raise ValueError("exercises and corrects must be 1-d and equally long")

    def __len__(self):
        return len(self.exercises)


@dataclass
class EncodedWindow:
    interaction_tokens: np.ndarray
    query_tokens: np.ndarray
    targets: np.ndarray
    valid_mask: np.ndarray

    @property
    def k(self) -> int:
        return len(self.interaction_tokens)

    @property
    def n_valid(self) -> int:
        return int(self.valid_mask.sum())


@dataclass
class ParseResult:
    sequences: list[UserSequence]
    vocabulary: Vocabulary
    skipped_users: int
    n_rows: int


# ---------------------------------------------------------------------------
# ingestion


def _read_rows(stream: TextIO | str, fmt: LogFormat):
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.reader(stream, delimiter=fmt.delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise LogFormatError("empty input") from None
    header = [h.strip() for h in header]
    wanted = [fmt.user, fmt.exercise, fmt.correct]
    if fmt.timestamp is not None and fmt.timestamp in header:
        wanted.append(fmt.timestamp)
    missing = [c for c in wanted[:3] if c not in header]
    if missing:
        raise LogFormatError(f"header lacks column(s) {', '.join(missing)}", row=1)
    cols = [header.index(c) for c in wanted]
    return header, cols, reader


def parse_interaction_log(
    stream: TextIO | str,
    fmt: LogFormat = CANONICAL,
    vocabulary: Vocabulary | None = None,
    min_length: int = 2,
) -> ParseResult:
    """Read a delimited log into per-user sequences.

    Rows are grouped by user and stably sorted by timestamp when the format
    has one (file order otherwise, and for ties). Exercise ids are numbered
    by first appearance unless a fixed ``vocabulary`` is given, in which
    case unknown ids are an error. Rows with an empty exercise field are
    skipped; this is how ASSIST exports mark untagged problems.
    """
    header, cols, reader = _read_rows(stream, fmt)
    has_ts = len(cols) == 4
    frozen = vocabulary is not None
    vocab = vocabulary if frozen else Vocabulary()

    per_user: dict[str, list[tuple[int, int, int, int]]] = {}
    n_rows = 0
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise LogFormatError(f"expected {len(header)} columns, got {len(row)}", row=lineno)
        user, ex, corr = (row[c].strip() for c in cols[:3])
        if ex == "":
            continue
        if corr not in ("0", "1"):
            raise LogFormatError(f"correct must be 0 or 1, got {corr!r}", row=lineno)
        ts = 0
        if has_ts:
            try:
                ts = int(row[cols[3]])
            except ValueError:
                raise LogFormatError(f"bad timestamp {row[cols[3]]!r}", row=lineno) from None
        if frozen:
            try:
                idx = vocab.index(ex)
            except KeyError as err:
                raise LogFormatError(str(err.args[0]), row=lineno) from None
        else:
            idx = vocab.add(ex)
        per_user.setdefault(user, []).append((ts, idx, int(corr), n_rows))
        n_rows += 1

    if n_rows == 0:
        raise LogFormatError("no interaction rows")

    sequences, skipped = [], 0
    for user, items in per_user.items():
        if len(items) < min_length:
            skipped += 1
            continue
        items.sort(key=lambda it: it[0])  # list.sort is stable
        sequences.append(
            UserSequence(user, [it[1] for it in items], [it[2] for it in items], [it[3] for it in items])
        )
    return ParseResult(sequences, vocab, skipped, n_rows)


def write_interaction_log(sequences: Iterable[UserSequence], vocabulary: Vocabulary, stream: TextIO):
    """Write sequences in the canonical format (timestamps are step indices)."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["user_id", "exercise_id", "correct", "timestamp"])
    for seq in sequences:
        for t, (ex, r) in enumerate(zip(seq.exercises, seq.corrects)):
            writer.writerow([seq.user_id, vocabulary.exercise_id(int(ex)), int(r), t])


# ---------------------------------------------------------------------------
# tokens and windows


def encode_interaction(exercise_index, correct, e: int):
    """Interaction token ``correct * e + exercise_index``; works elementwise on arrays."""
    ex = np.asarray(exercise_index)
    r = np.asarray(correct)
    if np.any((ex < 1) | (ex > e)):
        raise ValueError(f"exercise index outside [1, {e}]")
    if np.any((r != 0) & (r != 1)):
        raise ValueError("correct must be 0 or 1")
    tok = r * e + ex
    return int(tok) if tok.ndim == 0 else tok


def decode_interaction(token, e: int):
    """Inverse of :func:`encode_interaction` for tokens in ``[1, 2e]``."""
    tok = np.asarray(token)
    r = (tok - 1) // e
    ex = tok - r * e
    if tok.ndim == 0:
        return int(ex), int(r)
    return ex, r


def window_user(seq: UserSequence, k: int, e: int) -> list[EncodedWindow]:
    """Cut one user's history into right-padded windows of ``k`` positions.

    Spans of ``k + 1`` interactions start every ``k`` steps; position ``t``
    of a window carries interaction ``t`` as input and exercise/outcome
    ``t + 1`` as query/target.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(seq)
    tokens = encode_interaction(seq.exercises, seq.corrects, e)
    windows = []
    for start in range(0, n - 1, k):
        m = min(k, n - 1 - start)
        itok = np.zeros(k, dtype=np.int64)
        qtok = np.zeros(k, dtype=np.int64)
        tgt = np.zeros(k, dtype=np.int64)
        valid = np.zeros(k, dtype=np.int64)
        itok[:m] = tokens[start : start + m]
        qtok[:m] = seq.exercises[start + 1 : start + 1 + m]
        tgt[:m] = seq.corrects[start + 1 : start + 1 + m]
        valid[:m] = 1
        windows.append(EncodedWindow(itok, qtok, tgt, valid))
    return windows


def window_all(sequences: Iterable[UserSequence], k: int, e: int) -> list[EncodedWindow]:
    out = []
    for seq in sequences:
        out.extend(window_user(seq, k, e))
    return out


def stack_windows(windows: Sequence[EncodedWindow]):
    """Stack windows into ``(interaction, query, targets, valid)`` arrays of shape ``[B, k]``."""
    return (
        np.stack([w.interaction_tokens for w in windows]),
        np.stack([w.query_tokens for w in windows]),
        np.stack([w.targets for w in windows]),
        np.stack([w.valid_mask for w in windows]),
    )


def split_dataset(sequences: Sequence[UserSequence], ratio: float, seed: int):
    """User-level shuffle split. Returns ``(train, test)``; train keeps ``round(ratio * n)`` users."""
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie strictly between 0 and 1")
    n = len(sequences)
    if n < 2:
        raise ValueError(f"need at least 2 users to split, got {n}")
    n_train = min(max(math.floor(ratio * n + 0.5), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return [sequences[i] for i in train_idx], [sequences[i] for i in test_idx]


# ---------------------------------------------------------------------------
# synthetic students


@dataclass
class SyntheticSkillModel:
    """Per-skill BKT parameters plus the exercise ids belonging to each skill."""

    p_init: np.ndarray
    p_learn: np.ndarray
    p_slip: np.ndarray
    p_guess: np.ndarray
    skill_exercises: list[list[int]]

    def __post_init__(self):
        n = len(self.skill_exercises)
        for name in ("p_init", "p_learn", "p_slip", "p_guess"):
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=np.float64), (n,)).copy()
            if np.any((arr < 0) | (arr > 1)):
                raise ValueError(f"{name} must lie in [0, 1]")
            setattr(self, name, arr)
        if np.any(self.p_guess >= 1 - self.p_slip):
            raise ValueError("need p_guess < 1 - p_slip for every skill")
        if any(len(ex) == 0 for ex in self.skill_exercises):
            raise ValueError("every skill needs at least one exercise")

    @property
    def n_skills(self) -> int:
        return len(self.skill_exercises)

    @property
    def n_exercises(self) -> int:
        return sum(len(ex) for ex in self.skill_exercises)

    @classmethod
    def uniform(cls, n_skills, exercises_per_skill, p_init, p_learn, p_slip, p_guess):
        """Identical parameters for every skill; exercises numbered ``1..n_skills*per`` skill-major."""
        skill_ex = [
            list(range(s * exercises_per_skill + 1, (s + 1) * exercises_per_skill + 1))
            for s in range(n_skills)
        ]
        return cls(p_init, p_learn, p_slip, p_guess, skill_ex)


def reference_skill_model() -> SyntheticSkillModel:
    """10 skills, 2 exercises each, p_init=0.4, p_learn=0.3, p_slip=0.1, p_guess=0.2."""
    return SyntheticSkillModel.uniform(10, 2, 0.4, 0.3, 0.1, 0.2)


def bkt_filter(model: SyntheticSkillModel, skills, corrects) -> np.ndarray:
    """Exact one-step-ahead P(correct) for a history under the BKT HMM.

    Each skill is an independent two-state chain, so the filter only needs
    the current mastery belief of each skill.
    """
    belief = model.p_init.copy()
    probs = np.empty(len(skills), dtype=np.float64)
    for t, (s, r) in enumerate(zip(skills, corrects)):
        L, slip, guess = belief[s], model.p_slip[s], model.p_guess[s]
        p = L * (1 - slip) + (1 - L) * guess
        probs[t] = p
        if r:
            post = L * (1 - slip) / p
        else:
            post = L * slip / (1 - p)
        belief[s] = post + (1 - post) * model.p_learn[s]
    return probs


def generate_synthetic(model: SyntheticSkillModel, n_users: int, seq_len: int, seed: int):
    """Sample BKT students.

    Returns ``(sequences, oracle_probs, skills)`` where ``oracle_probs[u][t]``
    is the Bayes-filter prediction for step ``t`` given steps before it and
    ``skills[u][t]`` the skill practiced. Each user draws from its own
    substream of ``seed``.
    """
    skill_ex = [np.asarray(ex, dtype=np.int64) for ex in model.skill_exercises]
    streams = np.random.SeedSequence(seed).spawn(n_users)
    width = len(str(max(n_users - 1, 0)))
    sequences, oracles, skills_out = [], [], []
    for u, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        mastered = rng.random(model.n_skills) < model.p_init
        skills = rng.integers(0, model.n_skills, size=seq_len)
        exercises = np.empty(seq_len, dtype=np.int64)
        corrects = np.empty(seq_len, dtype=np.int64)
        for t, s in enumerate(skills):
            choices = skill_ex[s]
            exercises[t] = choices[rng.integers(len(choices))]
            p = 1 - model.p_slip[s] if mastered[s] else model.p_guess[s]
            corrects[t] = int(rng.random() < p)
            if not mastered[s]:
                mastered[s] = rng.random() < model.p_learn[s]
        sequences.append(UserSequence(f"u{u:0{width}d}", exercises, corrects))
        oracles.append(bkt_filter(model, skills, corrects))
        skills_out.append(skills)
    return sequences, oracles, skills_out


def synthetic_vocabulary(model: SyntheticSkillModel) -> Vocabulary:
    """Vocabulary whose index ``i`` is exercise id ``"e{i}"``."""
    return Vocabulary([f"e{i}" for i in range(1, model.n_exercises + 1)])
