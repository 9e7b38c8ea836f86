"""Interaction-log ingestion, adapters, synthesis, splitting, and batching.

The canonical on-disk format is a UTF-8, LF-terminated CSV with the exact
header ``student_id,order,question_id,kc_id,literacy_id,correct``; the
literacy column may be empty (uniformly for the whole file). Ids are densely
re-indexed from 1 at load time, with id 0 reserved for padding everywhere.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import stream

CANONICAL_HEADER = ["student_id", "order", "question_id", "kc_id", "literacy_id", "correct"]


class LoadError(ValueError):
    """A data file violates the canonical or raw-format contract."""


@dataclass(frozen=True)
class Interaction:
    """One answered-question event."""

    student_id: str
    order: int
    question_id: int
    kc_id: int
    literacy_id: int | None
    correct: int


@dataclass
class StudentSequence:
    student_id: str
    interactions: list[Interaction]

    def __len__(self) -> int:
        return len(self.interactions)


@dataclass
class DatasetStats:
    n_students: int
    n_questions: int
    n_kcs: int
    n_interactions: int
    n_literacy: int | None = None

    def to_dict(self) -> dict:
        d = {
            "n_students": self.n_students,
            "n_questions": self.n_questions,
            "n_kcs": self.n_kcs,
            "n_interactions": self.n_interactions,
        }
        if self.n_literacy is not None:
            d["n_literacy"] = self.n_literacy
        return d


@dataclass
class IdMaps:
    """Original id -> dense id (from 1), one map per id kind."""

    question: dict[int, int] = field(default_factory=dict)
    kc: dict[int, int] = field(default_factory=dict)
    literacy: dict[int, int] = field(default_factory=dict)

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("original_id,dense_id,kind\n")
            for kind, mapping in (("question", self.question), ("kc", self.kc), ("literacy", self.literacy)):
                for orig in sorted(mapping):
                    fh.write(f"{orig},{mapping[orig]},{kind}\n")


@dataclass
class LoadedDataset:
    sequences: list[StudentSequence]
    stats: DatasetStats
    id_maps: IdMaps


def _dense_map(values) -> dict[int, int]:
    return {orig: dense for dense, orig in enumerate(sorted(set(values)), start=1)}


def load_canonical(path: str | Path) -> LoadedDataset:
    """Parse a canonical CSV into per-student sequences plus dataset stats.

    Rows are grouped by student and sorted by ``order`` (ties keep file
    order). Question/KC/literacy ids are densely re-indexed from 1.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LoadError(f"{path}: empty file") from None
        if header != CANONICAL_HEADER:
            missing = [c for c in CANONICAL_HEADER if c not in header]
            raise LoadError(f"{path}: bad header; missing columns {missing or header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CANONICAL_HEADER):
                raise LoadError(f"{path}: row {lineno}: expected {len(CANONICAL_HEADER)} fields, got {len(row)}")
            student, order_s, q_s, kc_s, lit_s, correct_s = row
            try:
                order = int(order_s)
                q = int(q_s)
                kc = int(kc_s)
                lit = int(lit_s) if lit_s != "" else None
                correct = int(correct_s)
            except ValueError:
                raise LoadError(f"{path}: row {lineno}: non-integer field in {row}") from None
            if correct not in (0, 1):
                raise LoadError(f"{path}: row {lineno}: correct must be 0 or 1, got {correct_s}")
            if q < 1 or kc < 1 or (lit is not None and lit < 1):
                raise LoadError(f"{path}: row {lineno}: ids must be >= 1 (0 is reserved for padding)")
            rows.append((lineno, student, order, q, kc, lit, correct))

    if not rows:
        raise LoadError(f"{path}: no interaction rows")
    has_lit = rows[0][5] is not None
    for lineno, _s, _o, _q, _k, lit, _c in rows:
        if (lit is not None) != has_lit:
            raise LoadError(f"{path}: row {lineno}: literacy_id present in some rows but not others")

    seen: set[tuple[str, int]] = set()
    for lineno, student, order, *_ in rows:
        key = (student, order)
        if key in seen:
            raise LoadError(f"{path}: row {lineno}: duplicate (student_id, order) = {key}")
        seen.add(key)

    qmap = _dense_map(r[3] for r in rows)
    kcmap = _dense_map(r[4] for r in rows)
    litmap = _dense_map(r[5] for r in rows) if has_lit else {}

    by_student: dict[str, list[tuple[int, int, Interaction]]] = {}
    for file_pos, (lineno, student, order, q, kc, lit, correct) in enumerate(rows):
        inter = Interaction(
            student_id=student,
            order=order,
            question_id=qmap[q],
            kc_id=kcmap[kc],
            literacy_id=litmap[lit] if has_lit else None,
            correct=correct,
        )
        by_student.setdefault(student, []).append((order, file_pos, inter))

    sequences = []
    for student in sorted(by_student):
        events = sorted(by_student[student], key=lambda t: (t[0], t[1]))
        sequences.append(StudentSequence(student, [e[2] for e in events]))

    stats = DatasetStats(
        n_students=len(sequences),
        n_questions=len(qmap),
        n_kcs=len(kcmap),
        n_interactions=len(rows),
        n_literacy=len(litmap) if has_lit else None,
    )
    return LoadedDataset(sequences, stats, IdMaps(question=qmap, kc=kcmap, literacy=litmap))


def write_canonical(path: str | Path, sequences: list[StudentSequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(CANONICAL_HEADER) + "\n")
        for seq in sequences:
            for it in seq.interactions:
                lit = "" if it.literacy_id is None else str(it.literacy_id)
                fh.write(f"{it.student_id},{it.order},{it.question_id},{it.kc_id},{lit},{it.correct}\n")


# ---------------------------------------------------------------------------
# ASSIST09 adapter


def adapt_assist09(raw_csv: str | Path, out_path: str | Path, max_bad_fraction: float = 0.01) -> DatasetStats:
    """Convert a raw ASSISTments skill-builder CSV into the canonical format.

    Keeps user_id/order_id/problem_id/skill_id/correct, drops rows with a
    null skill id, keeps the first row per (user, order) so multi-skill
    problems contribute one KC, and leaves the literacy column empty.
    Unparseable rows are counted; more than ``max_bad_fraction`` is an error.
    """
    try:
        text = Path(raw_csv).read_text(encoding="utf-8")
    except UnicodeDecodeError:
        text = Path(raw_csv).read_text(encoding="latin-1")
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise LoadError(f"{raw_csv}: empty file") from None
    header = [h.strip() for h in header]
    needed = ["user_id", "order_id", "problem_id", "skill_id", "correct"]
    missing = [c for c in needed if c not in header]
    if missing:
        raise LoadError(f"{raw_csv}: missing columns {missing}")
    col = {c: header.index(c) for c in needed}

    total = 0
    bad = 0
    kept: dict[tuple[str, int], tuple[int, int, int]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        total += 1
        try:
            skill_raw = row[col["skill_id"]].strip()
            if skill_raw in ("", "NA", "NaN", "nan"):
                continue  # null skill: stated drop rule, not an error
            user = row[col["user_id"]].strip()
            order = int(row[col["order_id"]])
            problem = int(row[col["problem_id"]])
            skill = int(float(skill_raw))
            correct = int(float(row[col["correct"]]))
            if correct not in (0, 1) or not user:
                raise ValueError
        except (ValueError, IndexError):
            bad += 1
            continue
        kept.setdefault((user, order), (problem, skill, correct))

    if total and bad / total > max_bad_fraction:
        raise LoadError(f"{raw_csv}: {bad}/{total} unparseable rows exceeds {max_bad_fraction:.0%}")
    if not kept:
        raise LoadError(f"{raw_csv}: no usable rows")

    by_student: dict[str, list[tuple[int, int, int, int]]] = {}
    for (user, order), (problem, skill, correct) in kept.items():
        by_student.setdefault(user, []).append((order, problem, skill, correct))

    sequences = []
    for user in sorted(by_student):
        events = sorted(by_student[user])
        sequences.append(
            StudentSequence(
                user,
                [
                    Interaction(user, order, problem, skill, None, correct)
                    for order, problem, skill, correct in events
                ],
            )
        )
    write_canonical(out_path, sequences)
    return load_canonical(out_path).stats


# ---------------------------------------------------------------------------
# synthetic literacy data


@dataclass
class SynthConfig:
    n_students: int = 5224
    n_questions: int = 16
    n_kcs: int = 16
    n_literacy: int = 6
    seq_len: int = 16
    seed: int = 0


def sample_response(rng: np.random.Generator, theta: float, difficulty: float) -> int:
    """Draw one Bernoulli response with P(correct) = sigmoid(theta - difficulty)."""
    p = 1.0 / (1.0 + np.exp(-(theta - difficulty)))
    return int(rng.random() < p)


def generate_synthetic_literacy(
    config: SynthConfig, out_path: str | Path, truth_path: str | Path
) -> DatasetStats:
    """Write a canonical literacy dataset plus its hidden ability trajectories.

    Each student s carries one ability per literacy dimension that grows
    linearly over the sequence; dimension 1 grows for every student so
    trajectory probes have a known monotone target. Each question has a fixed
    difficulty and a fixed (kc, literacy) pair; responses are Bernoulli in
    sigmoid(theta - difficulty). Deterministic given the seed.
    """
    cfg = config
    rng = stream(cfg.seed, "synthetic-literacy")
    # difficulty spread dominates: per-question difficulty is learnable across
    # students, so it sets the floor any competent model can reach
    difficulty = rng.normal(0.0, 2.5, size=cfg.n_questions + 1)
    kc_of_q = np.array([0] + [1 + (q % cfg.n_kcs) for q in range(cfg.n_questions)])
    lit_of_kc = np.array([0] + [1 + (k % cfg.n_literacy) for k in range(cfg.n_kcs)])

    theta0 = rng.normal(0.0, 1.2, size=(cfg.n_students, cfg.n_literacy + 1))
    growth = rng.normal(0.0, 0.8, size=(cfg.n_students, cfg.n_literacy + 1))
    # dimension 1 rises for every student: the known monotone trajectory
    growth[:, 1] = 2.0 + rng.random(cfg.n_students)

    denom = max(cfg.seq_len - 1, 1)
    width = len(str(cfg.n_students - 1))
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh, open(
        truth_path, "w", encoding="utf-8", newline="\n"
    ) as truth:
        fh.write(",".join(CANONICAL_HEADER) + "\n")
        truth.write("student_id,step,literacy_id,theta\n")
        for s in range(cfg.n_students):
            sid = f"synth{s:0{width}d}"
            qs = rng.integers(1, cfg.n_questions + 1, size=cfg.seq_len)
            for t in range(cfg.seq_len):
                q = int(qs[t])
                kc = int(kc_of_q[q])
                lit = int(lit_of_kc[kc])
                frac = t / denom
                theta = theta0[s, lit] + growth[s, lit] * frac
                r = sample_response(rng, theta, float(difficulty[q]))
                fh.write(f"{sid},{t},{q},{kc},{lit},{r}\n")
            for lit in range(1, cfg.n_literacy + 1):
                for t in range(cfg.seq_len):
                    theta = float(theta0[s, lit] + growth[s, lit] * (t / denom))
                    truth.write(f"{sid},{t},{lit},{theta!r}\n")
    return load_canonical(out_path).stats


# ---------------------------------------------------------------------------
# splitting


def split_students(
    sequences: list[StudentSequence], ratio: float = 0.8, seed: int = 0
) -> tuple[list[StudentSequence], list[StudentSequence]]:
    """Partition by student: first floor(n * ratio) go to train+validation."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    if len(sequences) < 10:
        raise ValueError(f"need at least 10 students to split, got {len(sequences)}")
    order = sorted(sequences, key=lambda s: s.student_id)
    rng = stream(seed, "student-split")
    perm = rng.permutation(len(order))
    n_train_val = int(len(order) * ratio)
    train_val = [order[i] for i in perm[:n_train_val]]
    test = [order[i] for i in perm[n_train_val:]]
    return train_val, test


def split_train_val(
    train_val: list[StudentSequence], seed: int = 0, ratio: float = 0.9
) -> tuple[list[StudentSequence], list[StudentSequence]]:
    """Student-level 90/10 split of the train+validation pool."""
    order = sorted(train_val, key=lambda s: s.student_id)
    rng = stream(seed, "train-val-split")
    perm = rng.permutation(len(order))
    n_train = int(len(order) * ratio)
    train = [order[i] for i in perm[:n_train]]
    val = [order[i] for i in perm[n_train:]]
    return train, val


# ---------------------------------------------------------------------------
# windowing and batching


@dataclass
class Batch:
    """Padded, windowed arrays ready for a model forward pass.

    All arrays are [B, T]. Position t carries the step-t interaction; the
    target at t is the correctness of step t+1, with q_next/l_next its ids.
    ``valid_mask`` marks prediction positions (cells with a defined target);
    padding cells hold id 0.
    """

    q_ids: np.ndarray
    kc_ids: np.ndarray
    l_ids: np.ndarray
    responses: np.ndarray
    q_next: np.ndarray
    l_next: np.ndarray
    targets: np.ndarray
    valid_mask: np.ndarray
    window_origin: list[tuple[str, int]]

    @property
    def n_rows(self) -> int:
        return self.q_ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.q_ids.shape[1]

    @property
    def n_targets(self) -> int:
        return int(self.valid_mask.sum())

    def input_valid(self) -> np.ndarray:
        """Positions that hold a real interaction (vs padding)."""
        return self.q_ids > 0

    def take(self, indices) -> "Batch":
        idx = np.asarray(indices, dtype=np.int64)
        return Batch(
            q_ids=self.q_ids[idx],
            kc_ids=self.kc_ids[idx],
            l_ids=self.l_ids[idx],
            responses=self.responses[idx],
            q_next=self.q_next[idx],
            l_next=self.l_next[idx],
            targets=self.targets[idx],
            valid_mask=self.valid_mask[idx],
            window_origin=[self.window_origin[i] for i in idx],
        )

    def trimmed(self) -> "Batch":
        """Drop trailing all-padding columns (scores at valid steps unchanged)."""
        lengths = self.input_valid().sum(axis=1)
        t = max(1, int(lengths.max()))
        if t == self.seq_len:
            return self
        return Batch(
            q_ids=self.q_ids[:, :t],
            kc_ids=self.kc_ids[:, :t],
            l_ids=self.l_ids[:, :t],
            responses=self.responses[:, :t],
            q_next=self.q_next[:, :t],
            l_next=self.l_next[:, :t],
            targets=self.targets[:, :t],
            valid_mask=self.valid_mask[:, :t],
            window_origin=self.window_origin,
        )


def window_and_pad(
    sequences: list[StudentSequence],
    max_seq_len: int,
    batch_size: int | None = None,
) -> list[Batch]:
    """Cut each sequence into consecutive non-overlapping windows and pad.

    Every interaction lands in exactly one window. The last valid step of a
    window has no in-window successor, so it is not a prediction position.
    Length-1 sequences yield no prediction positions and are dropped with a
    warning. State does not carry across windows.
    """
    if max_seq_len < 2:
        raise ValueError(f"max_seq_len must be >= 2, got {max_seq_len}")
    t_len = max_seq_len
    rows: list[tuple[StudentSequence, int, list[Interaction]]] = []
    for seq in sequences:
        if len(seq) < 2:
            warnings.warn(
                f"student {seq.student_id}: length-{len(seq)} sequence has no "
                "prediction positions; dropped"
            )
            continue
        for start in range(0, len(seq), t_len):
            rows.append((seq, start, seq.interactions[start : start + t_len]))

    def build(chunk) -> Batch:
        b = len(chunk)
        q = np.zeros((b, t_len), dtype=np.int64)
        kc = np.zeros((b, t_len), dtype=np.int64)
        lit = np.zeros((b, t_len), dtype=np.int64)
        resp = np.zeros((b, t_len), dtype=np.int64)
        q_next = np.zeros((b, t_len), dtype=np.int64)
        l_next = np.zeros((b, t_len), dtype=np.int64)
        targets = np.zeros((b, t_len), dtype=np.float64)
        mask = np.zeros((b, t_len), dtype=bool)
        origin = []
        for i, (seq, start, window) in enumerate(chunk):
            n = len(window)
            for t, it in enumerate(window):
                q[i, t] = it.question_id
                kc[i, t] = it.kc_id
                lit[i, t] = it.literacy_id if it.literacy_id is not None else it.kc_id
                resp[i, t] = it.correct
            for t in range(n - 1):
                nxt = window[t + 1]
                q_next[i, t] = nxt.question_id
                l_next[i, t] = nxt.literacy_id if nxt.literacy_id is not None else nxt.kc_id
                targets[i, t] = float(nxt.correct)
                mask[i, t] = True
            origin.append((seq.student_id, start))
        return Batch(q, kc, lit, resp, q_next, l_next, targets, mask, origin)

    if batch_size is None:
        return [build(rows)] if rows else []
    return [build(rows[i : i + batch_size]) for i in range(0, len(rows), batch_size)]
