"""Claims ingestion, the enrollee-time matrix, cohort tests and splits."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

FORMAT = "mupod-v1"
AGE_SCALE = 100.0  # demographic age is stored as years / AGE_SCALE
SEXES = ("F", "M")
DEMO_DIM = 1 + len(SEXES)
KINDS = ("medication", "diagnosis")
PAPER_WINDOW = (0, 120)  # Jan 2009 .. Dec 2018, by month


class IngestionError(ValueError):
    pass


class MatchingError(RuntimeError):
    def __init__(self, message: str, unmatched: Sequence[str] = ()):
        super().__init__(message)
        self.unmatched = list(unmatched)


@dataclass(frozen=True)
class ClaimRow:
    enrollee_id: str
    month: int
    kind: str
    code: str


@dataclass(frozen=True)
class Enrollee:
    label: int
    age: float
    sex: str


def demo_vector(age: float, sex: str) -> np.ndarray:
    v = np.zeros(DEMO_DIM)
    v[0] = min(max(age / AGE_SCALE, 0.0), 1.0)
    v[1 + SEXES.index(sex)] = 1.0
    return v


@dataclass
class PatientRecord:
    """One enrollee's aligned streams.

    ``meds`` and ``diags`` are ``T x vocab`` multi-hot matrices, ``times``
    holds the calendar month of each row and ``demo`` is the static
    demographic vector replicated over time by :attr:`demo_stream`.
    """

    id: str
    label: int
    meds: np.ndarray
    diags: np.ndarray
    demo: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        self.meds = np.asarray(self.meds, dtype=np.float64)
        self.diags = np.asarray(self.diags, dtype=np.float64)
        self.demo = np.asarray(self.demo, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.int64)
        if not (len(self.meds) == len(self.diags) == len(self.times)):
            raise ValueError(f"patient {self.id}: stream lengths differ")
        if self.label not in (0, 1):
            raise ValueError(f"patient {self.id}: label must be 0 or 1")

    @property
    def T(self) -> int:
        return len(self.times)

    @property
    def demo_stream(self) -> np.ndarray:
        return np.tile(self.demo, (self.T, 1))

    @property
    def active_months(self) -> int:
        return int(np.count_nonzero(self.meds.any(axis=1) | self.diags.any(axis=1)))

    @property
    def age(self) -> float:
        return float(self.demo[0] * AGE_SCALE)

    @property
    def sex(self) -> str:
        return SEXES[int(np.argmax(self.demo[1 : 1 + len(SEXES)]))]

    def opioid_ratio(self, opioid_codes: Iterable[int]) -> float:
        """Fraction of active months with at least one opioid medication."""
        active = self.active_months
        if active == 0:
            return 0.0
        cols = sorted(set(opioid_codes))
        if not cols:
            return 0.0
        return float(np.count_nonzero(self.meds[:, cols].any(axis=1))) / active

    def to_json(self) -> dict:
        months = []
        for t, m, d in zip(self.times, self.meds, self.diags):
            months.append(
                {"t": int(t), "meds": np.flatnonzero(m).tolist(), "diags": np.flatnonzero(d).tolist()}
            )
        return {
            "format": FORMAT,
            "id": self.id,
            "label": int(self.label),
            "demo": [float(x) for x in self.demo],
            "months": months,
        }

    @classmethod
    def from_json(cls, obj: Mapping, n_meds: int, n_diags: int) -> "PatientRecord":
        if obj.get("format") != FORMAT:
            raise IngestionError(f"unsupported record format {obj.get('format')!r}")
        months = obj["months"]
        meds = np.zeros((len(months), n_meds))
        diags = np.zeros((len(months), n_diags))
        for i, m in enumerate(months):
            meds[i, m["meds"]] = 1.0
            diags[i, m["diags"]] = 1.0
        return cls(
            id=str(obj["id"]),
            label=int(obj["label"]),
            meds=meds,
            diags=diags,
            demo=np.asarray(obj["demo"], dtype=np.float64),
            times=np.asarray([m["t"] for m in months], dtype=np.int64),
        )


@dataclass
class EnrolleeTimeMatrix:
    patients: list[PatientRecord]
    med_vocab_size: int
    diag_vocab_size: int
    window: tuple[int, int] = PAPER_WINDOW

    def __post_init__(self):
        self._index = {p.id: i for i, p in enumerate(self.patients)}
        if len(self._index) != len(self.patients):
            raise ValueError("duplicate patient ids")
        for p in self.patients:
            if p.meds.shape[1] != self.med_vocab_size or p.diags.shape[1] != self.diag_vocab_size:
                raise ValueError(f"patient {p.id}: multi-hot width does not match vocabulary")

    def __len__(self) -> int:
        return len(self.patients)

    def __iter__(self) -> Iterator[PatientRecord]:
        return iter(self.patients)

    def __getitem__(self, pid: str) -> PatientRecord:
        return self.patients[self._index[pid]]

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.patients]

    @property
    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.patients], dtype=np.int64)

    def subset(self, ids: Iterable[str]) -> "EnrolleeTimeMatrix":
        return EnrolleeTimeMatrix(
            [self[i] for i in ids], self.med_vocab_size, self.diag_vocab_size, self.window
        )

    def dense(self, pid: str) -> tuple[np.ndarray, np.ndarray]:
        """Medication and diagnosis matrices over the full window; empty months are zero."""
        p = self[pid]
        start, end = self.window
        meds = np.zeros((end - start, self.med_vocab_size))
        diags = np.zeros((end - start, self.diag_vocab_size))
        meds[p.times - start] = p.meds
        diags[p.times - start] = p.diags
        return meds, diags


# -------------------------------------------------------------- vocabulary


@dataclass
class Vocabulary:
    meds: dict[str, int]
    diags: dict[str, int]
    opioids: list[str] = field(default_factory=list)

    @property
    def n_meds(self) -> int:
        return len(self.meds)

    @property
    def n_diags(self) -> int:
        return len(self.diags)

    def opioid_columns(self) -> list[int]:
        return sorted(self.meds[c] for c in self.opioids if c in self.meds)

    def med_names(self) -> list[str]:
        return sorted(self.meds, key=self.meds.__getitem__)

    def diag_names(self) -> list[str]:
        return sorted(self.diags, key=self.diags.__getitem__)

    def to_json(self) -> dict:
        return {"format": FORMAT, "medications": self.meds, "diagnoses": self.diags, "opioids": self.opioids}

    @classmethod
    def from_json(cls, obj: Mapping) -> "Vocabulary":
        if obj.get("format") != FORMAT:
            raise IngestionError(f"unsupported vocabulary format {obj.get('format')!r}")
        v = cls(dict(obj["medications"]), dict(obj["diagnoses"]), list(obj.get("opioids", [])))
        for name, table in (("medications", v.meds), ("diagnoses", v.diags)):
            if sorted(table.values()) != list(range(len(table))):
                raise IngestionError(f"{name} indices must be 0..{len(table) - 1}")
        return v

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text()))


# --------------------------------------------------------------- ingestion


def read_claims_csv(path) -> Iterator[ClaimRow]:
    """Stream rows of an ``enrollee_id,month,kind,code`` CSV."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["enrollee_id", "month", "kind", "code"]:
            raise IngestionError(f"{path}: line 1: expected header enrollee_id,month,kind,code")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 4:
                raise IngestionError(f"{path}: line {lineno}: expected 4 fields, got {len(rec)}")
            pid, month, kind, code = (x.strip() for x in rec)
            try:
                month_i = int(month)
            except ValueError:
                raise IngestionError(f"{path}: line {lineno}: month {month!r} is not an integer") from None
            if kind not in KINDS or not pid or not code:
                raise IngestionError(f"{path}: line {lineno}: malformed row {rec!r}")
            yield ClaimRow(pid, month_i, kind, code)


def read_enrollees_csv(path) -> dict[str, Enrollee]:
    """``enrollee_id,label,age,sex`` -> Enrollee."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"enrollee_id", "label", "age", "sex"}:
            raise IngestionError(f"{path}: line 1: expected header enrollee_id,label,age,sex")
        for lineno, rec in enumerate(reader, start=2):
            try:
                label = int(rec["label"])
                age = float(rec["age"])
            except (TypeError, ValueError):
                raise IngestionError(f"{path}: line {lineno}: bad label/age") from None
            if label not in (0, 1) or rec["sex"] not in SEXES:
                raise IngestionError(f"{path}: line {lineno}: label must be 0/1 and sex one of {SEXES}")
            out[rec["enrollee_id"]] = Enrollee(label, age, rec["sex"])
    return out


@dataclass
class BuildReport:
    rows: int = 0
    unknown_codes: Counter = field(default_factory=Counter)
    out_of_window: int = 0
    unknown_enrollees: int = 0

    def summary(self) -> str:
        return (
            f"{self.rows} rows; skipped {sum(self.unknown_codes.values())} unknown-code rows "
            f"({len(self.unknown_codes)} distinct), {self.out_of_window} out-of-window, "
            f"{self.unknown_enrollees} without enrollee record"
        )


def build_matrix(
    claims: Iterable[ClaimRow],
    vocab: Vocabulary,
    enrollees: Mapping[str, Enrollee],
    window: tuple[int, int] = PAPER_WINDOW,
) -> tuple[EnrolleeTimeMatrix, BuildReport]:
    """Set-union claims into one multi-hot row per (patient, active month).

    Each record lists its active months in calendar order; :meth:`EnrolleeTimeMatrix.dense`
    expands to the full window. Output is independent of claim order.
    """
    report = BuildReport()
    events: dict[str, dict[int, tuple[set, set]]] = defaultdict(dict)
    start, end = window
    for row in claims:
        report.rows += 1
        if not start <= row.month < end:
            report.out_of_window += 1
            continue
        if row.enrollee_id not in enrollees:
            report.unknown_enrollees += 1
            continue
        table = vocab.meds if row.kind == "medication" else vocab.diags
        idx = table.get(row.code)
        if idx is None:
            report.unknown_codes[(row.kind, row.code)] += 1
            continue
        slot = events[row.enrollee_id].setdefault(row.month, (set(), set()))
        slot[0 if row.kind == "medication" else 1].add(idx)
    if report.unknown_codes or report.out_of_window or report.unknown_enrollees:
        log.warning("build_matrix: %s", report.summary())

    patients = []
    for pid in sorted(events):
        months = sorted(events[pid])
        meds = np.zeros((len(months), vocab.n_meds))
        diags = np.zeros((len(months), vocab.n_diags))
        for i, t in enumerate(months):
            ms, ds = events[pid][t]
            meds[i, sorted(ms)] = 1.0
            diags[i, sorted(ds)] = 1.0
        e = enrollees[pid]
        patients.append(PatientRecord(pid, e.label, meds, diags, demo_vector(e.age, e.sex), np.array(months)))
    return EnrolleeTimeMatrix(patients, vocab.n_meds, vocab.n_diags, window), report


def filter_min_entries(m: EnrolleeTimeMatrix, min_entries: int = 3) -> EnrolleeTimeMatrix:
    """Drop patients with fewer than ``min_entries`` non-empty months."""
    kept = [p for p in m.patients if p.active_months >= min_entries]
    dropped = len(m) - len(kept)
    if dropped:
        log.info("filter_min_entries: dropped %d of %d patients (< %d active months)", dropped, len(m), min_entries)
    out = EnrolleeTimeMatrix(kept, m.med_vocab_size, m.diag_vocab_size, m.window)
    out.dropped = dropped
    return out


# ------------------------------------------------------------ cohort tests


def _log_comb(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def hypergeometric_pvalue(N: int, K: int, n: int, k: int) -> float:
    """P(X >= k) for X ~ Hypergeometric(population N, K successes, n draws)."""
    if min(N, K, n, k) < 0 or K > N or n > N or k > min(K, n):
        raise ValueError(f"inconsistent counts N={N} K={K} n={n} k={k}")
    lo = max(k, n - (N - K))
    if lo <= max(0, n - (N - K)):
        return 1.0
    hi = min(K, n)
    denom = _log_comb(N, n)
    terms = [_log_comb(K, i) + _log_comb(N - K, n - i) - denom for i in range(lo, hi + 1)]
    top = max(terms)
    p = math.exp(top) * math.fsum(math.exp(t - top) for t in terms)
    return min(1.0, p)


@dataclass
class CohortSummary:
    n: int
    age_mean: float
    age_sd: float
    female: float
    opioid_ratio: float


@dataclass
class Cohort:
    case_ids: list[str]
    control_ids: list[str]
    cases: CohortSummary
    controls: CohortSummary

    @property
    def pairs(self) -> list[tuple[str, str]]:
        return list(zip(self.case_ids, self.control_ids))


def _summary(records: Sequence[PatientRecord], opioid_codes) -> CohortSummary:
    ages = np.array([r.age for r in records])
    return CohortSummary(
        n=len(records),
        age_mean=float(ages.mean()) if len(ages) else 0.0,
        age_sd=float(ages.std(ddof=1)) if len(ages) > 1 else 0.0,
        female=float(np.mean([r.sex == "F" for r in records])) if records else 0.0,
        opioid_ratio=float(np.mean([r.opioid_ratio(opioid_codes) for r in records])) if records else 0.0,
    )


def age_band(age: float, width: float = 5.0) -> int:
    return int(age // width)


def match_controls(
    cases: Sequence[PatientRecord],
    pool: Sequence[PatientRecord],
    seed: int = 0,
    opioid_codes: Iterable[int] = (),
    band_width: float = 5.0,
    ratio_tolerance: float = 0.05,
) -> Cohort:
    """1:1 control selection within (sex, age band) strata.

    Cases are visited in a seeded random order; each takes the unused
    candidate of its stratum closest in opioid-use ratio (then age).
    """
    opioid_codes = sorted(set(opioid_codes))
    case_ids = {c.id for c in cases}
    strata: dict[tuple, list[PatientRecord]] = defaultdict(list)
    for p in pool:
        if p.id not in case_ids:
            strata[(p.sex, age_band(p.age, band_width))].append(p)
    ratio = {p.id: p.opioid_ratio(opioid_codes) for p in list(cases) + list(pool)}

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(cases))
    chosen: dict[str, PatientRecord] = {}
    unmatched = []
    for i in order:
        c = cases[i]
        cands = strata.get((c.sex, age_band(c.age, band_width)), [])
        if not cands:
            unmatched.append(c.id)
            continue
        j = min(
            range(len(cands)),
            key=lambda j: (abs(ratio[cands[j].id] - ratio[c.id]), abs(cands[j].age - c.age), cands[j].id),
        )
        chosen[c.id] = cands.pop(j)
    if unmatched:
        raise MatchingError(f"{len(unmatched)} cases have no control left in their stratum", sorted(unmatched))

    controls = [chosen[c.id] for c in cases]
    cohort = Cohort(
        case_ids=[c.id for c in cases],
        control_ids=[c.id for c in controls],
        cases=_summary(cases, opioid_codes),
        controls=_summary(controls, opioid_codes),
    )
    gap = abs(cohort.cases.opioid_ratio - cohort.controls.opioid_ratio)
    if gap > ratio_tolerance:
        raise MatchingError(f"mean opioid-use ratio differs by {gap:.3f} > {ratio_tolerance}")
    return cohort


# ------------------------------------------------------------------ splits


def split_dataset(
    m: EnrolleeTimeMatrix, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0
) -> tuple[list[str], list[str], list[str]]:
    """Label-stratified train/validation/test id lists."""
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    out: tuple[list[str], list[str], list[str]] = ([], [], [])
    ids = np.array(m.ids, dtype=object)
    labels = m.labels
    for cls in (0, 1):
        members = ids[labels == cls]
        members = members[rng.permutation(len(members))]
        n = len(members)
        n_train = int(round(fractions[0] * n))
        n_val = min(n - n_train, int(round(fractions[1] * n)))
        out[0].extend(members[:n_train])
        out[1].extend(members[n_train : n_train + n_val])
        out[2].extend(members[n_train + n_val :])
    return tuple(sorted(s) for s in out)


# -------------------------------------------------------------- file i/o


def write_jsonl(m: EnrolleeTimeMatrix, path) -> None:
    with open(path, "w") as fh:
        for p in m.patients:
            fh.write(json.dumps(p.to_json(), separators=(",", ":")) + "\n")


def read_jsonl(path, n_meds: int, n_diags: int, window=PAPER_WINDOW) -> EnrolleeTimeMatrix:
    patients = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                patients.append(PatientRecord.from_json(obj, n_meds, n_diags))
            except (KeyError, TypeError, ValueError, IndexError) as exc:
                raise IngestionError(f"{path}: line {lineno}: {exc}") from None
    return EnrolleeTimeMatrix(patients, n_meds, n_diags, window)


@dataclass
class Dataset:
    """A dataset directory: patients.jsonl, vocab.json, splits.json and optional truth.json."""

    matrix: EnrolleeTimeMatrix
    vocab: Vocabulary
    splits: dict[str, list[str]]
    truth: dict | None = None

    def part(self, name: str) -> EnrolleeTimeMatrix:
        return self.matrix.subset(self.splits[name])

    def save(self, directory) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_jsonl(self.matrix, d / "patients.jsonl")
        self.vocab.save(d / "vocab.json")
        splits = {"format": FORMAT, "window": list(self.matrix.window), **self.splits}
        (d / "splits.json").write_text(json.dumps(splits, indent=1, sort_keys=True) + "\n")
        files = [d / "patients.jsonl", d / "vocab.json", d / "splits.json"]
        if self.truth is not None:
            (d / "truth.json").write_text(json.dumps({"format": FORMAT, **self.truth}, indent=1, sort_keys=True) + "\n")
            files.append(d / "truth.json")
        return files

    @classmethod
    def load(cls, directory) -> "Dataset":
        d = Path(directory)
        vocab = Vocabulary.load(d / "vocab.json")
        splits = json.loads((d / "splits.json").read_text())
        window = tuple(splits.pop("window", PAPER_WINDOW))
        splits.pop("format", None)
        matrix = read_jsonl(d / "patients.jsonl", vocab.n_meds, vocab.n_diags, window)
        truth = None
        if (d / "truth.json").exists():
            truth = json.loads((d / "truth.json").read_text())
            truth.pop("format", None)
        return cls(matrix, vocab, {k: list(v) for k, v in splits.items()}, truth)
