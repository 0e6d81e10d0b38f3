"""LLM-as-judge evaluation: question banks, judging, scoring and aggregation."""

from __future__ import annotations

import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .agent import MonitoringReport
from .llm import LLMError, RecordingLLM
from .memory import ProceduralMemory, WorkingMemory, sha256_text
from .tabular import to_csv_text

LETTERS = ("A", "B", "C", "D")
UNKNOWN = "UNKNOWN"
IDK = "I DON'T KNOW"
DEFAULT_BANK_SIZE = 39


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class QuestionItem:
    id: str
    stem: str
    options: Mapping[str, str]
    gold: str
    topic: str = ""

    def __post_init__(self) -> None:
        if not str(self.stem).strip():
            raise EvalError(f"{self.id}: empty stem")
        if sorted(self.options) != list(LETTERS):
            raise EvalError(f"{self.id}: options must be exactly A-D, got {sorted(self.options)}")
        if any(not str(v).strip() for v in self.options.values()):
            raise EvalError(f"{self.id}: empty option text")
        if self.gold not in LETTERS:
            raise EvalError(f"{self.id}: gold answer {self.gold!r} is not one of A-D")
        object.__setattr__(self, "options", {k: str(self.options[k]) for k in LETTERS})

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "stem": self.stem, "options": dict(self.options), "gold": self.gold,
                "topic": self.topic}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], id: str | None = None) -> "QuestionItem":
        gold = d.get("gold", d.get("answer"))
        opts = d.get("options")
        if not isinstance(opts, Mapping):
            raise EvalError("options must be an object keyed A-D")
        return cls(id or d["id"], d["stem"], dict(opts), str(gold).strip().upper(), d.get("topic", ""))


@dataclass
class QuestionBank:
    dataset: str
    items: list[QuestionItem]
    provenance: str = "manual"
    retries: int = 0

    def __post_init__(self) -> None:
        ids = [i.id for i in self.items]
        if len(set(ids)) != len(ids):
            raise EvalError("question ids must be unique")

    def __len__(self) -> int:
        return len(self.items)

    def to_dict(self) -> dict[str, Any]:
        return {"dataset": self.dataset, "provenance": self.provenance, "retries": self.retries,
                "items": [i.to_dict() for i in self.items]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "QuestionBank":
        return cls(d["dataset"], [QuestionItem.from_dict(i) for i in d["items"]], d.get("provenance", "manual"),
                   int(d.get("retries", 0)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "QuestionBank":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# --------------------------------------------------------- question generation


def _parse_item(line: str, qid: str) -> QuestionItem:
    try:
        d = json.loads(line)
    except json.JSONDecodeError as exc:
        raise EvalError(f"{qid}: not valid JSON ({exc.msg})") from None
    if not isinstance(d, Mapping):
        raise EvalError(f"{qid}: not a JSON object")
    try:
        return QuestionItem.from_dict(d, id=qid)
    except KeyError as exc:
        raise EvalError(f"{qid}: missing key {exc}") from None


def generate_questions(ground_truth: str, llm: RecordingLLM, procedural: ProceduralMemory,
                       n: int = DEFAULT_BANK_SIZE, seed: int = 0, dataset: str = "",
                       max_retries: int = 3) -> QuestionBank:
    """Ask the LLM for ``n`` items (JSON Lines), then regenerate each malformed one up to ``max_retries`` times."""
    provenance = f"llm:{llm.model}"
    if n == 0:
        return QuestionBank(dataset, [], provenance)
    if not ground_truth.strip():
        raise EvalError("ground-truth report is empty")
    text = llm.ask(procedural.render("question_gen", n=n, seed=seed, report=ground_truth)).content
    lines = [ln.strip() for ln in text.splitlines() if ln.strip().startswith(("{", "[")) or ln.strip()]
    slots: list[QuestionItem | None] = []
    for i in range(n):
        qid = f"q{i + 1:02d}"
        try:
            slots.append(_parse_item(lines[i], qid) if i < len(lines) else None)
        except EvalError:
            slots.append(None)
    retries = 0
    failures = []
    for i, item in enumerate(slots):
        qid = f"q{i + 1:02d}"
        attempts = 0
        last_err = "missing"
        while item is None and attempts < max_retries:
            attempts += 1
            retries += 1
            reply = llm.ask(procedural.render("question_regen", index=i + 1, report=ground_truth)).content
            try:
                item = _parse_item(reply.strip(), qid)
            except EvalError as exc:
                last_err = str(exc)
        if item is None:
            failures.append(f"{qid}: {last_err}")
        slots[i] = item
    if failures:
        raise EvalError(f"question generation failed after {max_retries} retries: {failures}")
    return QuestionBank(dataset, list(slots), provenance, retries)


def ground_truth_report(wm: WorkingMemory, llm: RecordingLLM, procedural: ProceduralMemory) -> str:
    """Reference report written from raw rows plus every tool output."""
    return llm.ask(procedural.render("ground_truth", context=wm.context_text(),
                                     rows=to_csv_text(wm.test_sample))).content.strip()


def _fmt(x: float) -> str:
    return f"{x:.3g}" if abs(x) < 1000 else f"{x:,.0f}"


def _distinct(gold: str, candidates: Sequence[str], fillers: Sequence[str] = ()) -> list[str] | None:
    out = [gold]
    for c in list(candidates) + list(fillers):
        if c not in out:
            out.append(c)
        if len(out) == 4:
            return out
    return None


def reference_bank(wm: WorkingMemory, n: int = DEFAULT_BANK_SIZE, seed: int = 0) -> QuestionBank:
    """Template-built bank whose gold answers come straight from the tool outputs and statistics.

    Used as the offline fallback bank; it needs no LLM.
    """
    wm.ensure_tools()
    rng = np.random.default_rng(seed)
    schema = wm.schema
    names = schema.names
    drift, attr = wm.drift, wm.attribution
    d = len(names)
    drifted = drift.drifted
    stable = [x for x in names if x not in drifted]

    def others(exclude: str) -> list[str]:
        pool = [x for x in names if x != exclude]
        return [pool[i] for i in rng.permutation(len(pool))]

    globals_: list[tuple[str, str, list[str] | None]] = []
    top_stat = max(drift.features, key=lambda f: (f.statistic if f.test == "ks" else -1.0)).feature
    globals_.append(("global", "Which numerical feature shows the largest KS drift statistic?",
                     _distinct(top_stat, [x for x in others(top_stat) if schema.feature(x).is_numerical],
                               others(top_stat))))
    rank1 = min(attr.features, key=lambda a: a.rank).feature
    globals_.append(("global", "Which feature is the most influential for the model according to the attribution results?",
                     _distinct(rank1, others(rank1))))
    last = max(attr.features, key=lambda a: a.rank).feature
    globals_.append(("global", "Which feature is the least influential for the model according to the attribution results?",
                     _distinct(last, others(last))))
    k = len(drifted)
    globals_.append(("global", "How many features were flagged as drifted?",
                     _distinct(str(k), [str(x) for x in (k + 1, k + 2, max(k - 1, 0), k + 3, d)])))
    m = len(wm.test_sample)
    globals_.append(("global", "How many rows did the test monitoring sample contain?",
                     _distinct(str(m), [str(x) for x in (m * 10, m // 2, m * 5, m + 1)])))
    globals_.append(("global", "Which significance level was used for the drift tests?",
                     _distinct(f"{drift.alpha:g}", ["0.01", "0.1", "0.001", "0.2"])))
    if drifted and len(stable) >= 3:
        g = drifted[int(rng.integers(len(drifted)))]
        globals_.append(("global", "Which of these features was flagged as drifted?",
                         _distinct(g, [stable[i] for i in rng.permutation(len(stable))])))
    if stable and len(drifted) >= 3:
        g = stable[int(rng.integers(len(stable)))]
        globals_.append(("global", "Which of these features was NOT flagged as drifted?",
                         _distinct(g, [drifted[i] for i in rng.permutation(len(drifted))])))

    per_feature: list[tuple[str, str, list[str] | None]] = []
    for f in schema:
        fd, fa = drift.get(f.name), attr.get(f.name)
        tr, te = wm.train_stats(f.name), wm.test_stats(f.name)
        yes_no = "Yes" if fd.drifted else "No"
        per_feature.append((f.name, f"Was drift detected in the feature '{f.name}'?",
                            _distinct(yes_no, ["No" if fd.drifted else "Yes", "The feature was not tested",
                                               "Only in the training data"])))
        test_name = "Kolmogorov-Smirnov test" if fd.test == "ks" else "Chi-square test"
        per_feature.append((f.name, f"Which statistical test was used to check '{f.name}' for drift?",
                            _distinct(test_name, ["Kolmogorov-Smirnov test", "Chi-square test", "Welch t-test",
                                                  "Population stability index"])))
        ranks = [str(r) for r in range(1, d + 1) if r != fa.rank] + [str(d + 1), str(d + 2)]
        per_feature.append((f.name, f"What importance rank does '{f.name}' have (1 = most important)?",
                            _distinct(str(fa.rank), [ranks[i] for i in rng.permutation(len(ranks))])))
        p = fd.p_value
        bucket = "below 0.001" if p < 0.001 else "between 0.001 and 0.01" if p < 0.01 else \
            "between 0.01 and 0.05" if p < 0.05 else "0.05 or higher"
        per_feature.append((f.name, f"In which range is the drift-test p-value for '{f.name}'?",
                            _distinct(bucket, ["below 0.001", "between 0.001 and 0.01", "between 0.01 and 0.05",
                                               "0.05 or higher"])))
        per_feature.append((f.name, f"Is '{f.name}' a numerical or a categorical feature?",
                            _distinct(f.kind.capitalize(), ["Numerical", "Categorical", "Ordinal text", "Binary label"])))
        if f.is_numerical:
            step = f.base_std
            cands = [_fmt(te.q2 + s * step) for s in (1.5, -1.5, 3.0, -3.0, 4.5)]
            per_feature.append((f.name, f"What was the median of '{f.name}' in the test sample (approximately)?",
                                _distinct(_fmt(te.q2), cands)))
            cands = [_fmt(te.mean + s * step) for s in (-1.5, 1.5, 3.0, -3.0, 4.5)]
            per_feature.append((f.name, f"What was the mean of '{f.name}' in the test sample (approximately)?",
                                _distinct(_fmt(te.mean), cands)))
            diff = te.mean - tr.mean
            direction = "It stayed about the same" if abs(diff) < 0.1 * step else \
                "It increased" if diff > 0 else "It decreased"
            per_feature.append((f.name, f"How did the mean of '{f.name}' change from training data to the test sample?",
                                _distinct(direction, ["It increased", "It decreased", "It stayed about the same",
                                                      "It was not measured"])))
        else:
            freqs = te.frequencies
            top = max(freqs, key=lambda c: (freqs[c], -list(freqs).index(c)))
            per_feature.append((f.name, f"Which category of '{f.name}' was most frequent in the test sample?",
                                _distinct(top, list(f.categories), ["None of the listed categories", "Unknown"])))
            change = {c: freqs[c] - tr.frequencies[c] for c in f.categories}
            grew = max(change, key=lambda c: (change[c], -list(change).index(c)))
            per_feature.append((f.name, f"Which category of '{f.name}' gained the most share from training to test?",
                                _distinct(grew, list(f.categories), ["None of the listed categories", "Unknown"])))
            share = freqs[top]
            cands = [f"{round(100 * x)}%" for x in (share - 0.2, share + 0.2, share - 0.35, share + 0.35, share / 2)
                     if 0 <= x <= 1]
            per_feature.append((f.name, f"What share of the test sample had '{f.name}' = '{top}' (approximately)?",
                                _distinct(f"{round(100 * share)}%", cands, ["1%", "99%"])))

    pool = [q for q in globals_ if q[2] is not None]
    rest = [q for q in per_feature if q[2] is not None]
    pool += [rest[i] for i in rng.permutation(len(rest))]
    if len(pool) < n:
        raise EvalError(f"only {len(pool)} template questions available for {schema.name}, need {n}")
    items = []
    for i, (topic, stem, options) in enumerate(pool[:n]):
        order = rng.permutation(4)
        shuffled = [options[j] for j in order]
        gold = LETTERS[int(np.flatnonzero(order == 0)[0])]
        items.append(QuestionItem(f"q{i + 1:02d}", stem, dict(zip(LETTERS, shuffled)), gold, topic))
    return QuestionBank(schema.name, items, "manual")


# ---------------------------------------------------------------------- judge


_LETTER = re.compile(r"(?<![A-Za-z0-9])([ABCD])(?![A-Za-z0-9])")


def extract_choice(raw: str) -> tuple[str, bool]:
    """Map judge text to (choice, parse_warning).

    The first standalone capital A-D wins; otherwise the reply is UNKNOWN,
    with a warning unless it contains the refusal phrase.
    """
    m = _LETTER.search(raw or "")
    if m:
        return m.group(1), False
    normalized = (raw or "").upper().replace("’", "'")
    if IDK in normalized:
        return UNKNOWN, False
    return UNKNOWN, True


@dataclass(frozen=True)
class Answer:
    id: str
    chosen: str
    raw: str
    parse_warning: bool = False
    failed: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "chosen": self.chosen, "raw": self.raw, "parse_warning": self.parse_warning,
                "failed": self.failed}


@dataclass
class AnswerSheet:
    answers: list[Answer]
    judge_model: str
    report_digest: str
    tokens: float = 0.0
    time: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {"judge_model": self.judge_model, "report_digest": self.report_digest, "tokens": self.tokens,
                "time": self.time, "answers": [a.to_dict() for a in self.answers]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AnswerSheet":
        return cls([Answer(**a) for a in d["answers"]], d["judge_model"], d["report_digest"],
                   float(d.get("tokens", 0.0)), float(d.get("time", 0.0)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "AnswerSheet":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def judge(report: MonitoringReport | str, bank: QuestionBank, llm: RecordingLLM, procedural: ProceduralMemory,
          parallelism: int = 1) -> AnswerSheet:
    """One judge call per question; the sheet is assembled in bank order."""
    if len(bank) == 0:
        raise EvalError("question bank is empty")
    if isinstance(report, MonitoringReport):
        text = report.render()
        tokens = float(report.metrics.get("total_tokens", 0))
        seconds = float(report.metrics.get("wall_seconds", 0.0))
    else:
        text, tokens, seconds = report, 0.0, 0.0

    def ask(item: QuestionItem) -> Answer:
        prompt = procedural.render("judge", report=text, stem=item.stem, **item.options)
        try:
            raw = llm.ask(prompt).content
        except LLMError as exc:
            return Answer(item.id, UNKNOWN, f"[judge call failed: {exc}]", parse_warning=False, failed=True)
        chosen, warn = extract_choice(raw)
        return Answer(item.id, chosen, raw, warn)

    if parallelism <= 1:
        answers = [ask(i) for i in bank.items]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            answers = list(pool.map(ask, bank.items))
    return AnswerSheet(answers, llm.model, sha256_text(text)[:16], tokens, seconds)


# -------------------------------------------------------------------- metrics


@dataclass(frozen=True)
class EvalMetrics:
    accuracy: float
    unknown_ratio: float
    tokens: float
    time: float
    accuracy_std: float = 0.0
    unknown_ratio_std: float = 0.0
    tokens_std: float = 0.0
    time_std: float = 0.0
    runs: int = 1

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def score(sheet: AnswerSheet, bank: QuestionBank) -> EvalMetrics:
    if [a.id for a in sheet.answers] != [i.id for i in bank.items]:
        raise EvalError("answer sheet does not cover the question bank item for item")
    total = len(bank)
    correct = sum(a.chosen == q.gold for a, q in zip(sheet.answers, bank.items))
    unknown = sum(a.chosen == UNKNOWN for a in sheet.answers)
    return EvalMetrics(100.0 * correct / total, 100.0 * unknown / total, sheet.tokens, sheet.time)


def aggregate(runs: Sequence[EvalMetrics]) -> EvalMetrics:
    """Per-metric mean and sample standard deviation (0 for a single run)."""
    if not runs:
        raise EvalError("no runs to aggregate")
    cols = {k: np.array([getattr(r, k) for r in runs], dtype=np.float64)
            for k in ("accuracy", "unknown_ratio", "tokens", "time")}
    ddof_std = (lambda a: float(np.std(a, ddof=1))) if len(runs) > 1 else (lambda a: 0.0)
    return EvalMetrics(
        **{k: float(v.mean()) for k, v in cols.items()},
        **{f"{k}_std": ddof_std(v) for k, v in cols.items()},
        runs=len(runs),
    )


def pm(mean: float, std: float) -> str:
    return f"{mean:.1f} ± {std:.1f}"


def metrics_table(rows: Mapping[str, EvalMetrics], label: str = "Method") -> str:
    """Markdown table shaped like the Accuracy / Unknown / Tokens / Time comparison."""
    out = [f"| {label} | Accuracy (%) | Unknown (%) | Tokens | Time (s) | Runs |", "|---|---|---|---|---|---|"]
    for name, m in rows.items():
        out.append(f"| {name} | {pm(m.accuracy, m.accuracy_std)} | {pm(m.unknown_ratio, m.unknown_ratio_std)} | "
                   f"{pm(m.tokens, m.tokens_std)} | {pm(m.time, m.time_std)} | {m.runs} |")
    return "\n".join(out) + "\n"
