"""Synthetic longitudinal cohorts with a planted medication -> diagnosis signal.

Every patient carries the same number of designated-token events
(``m_star`` in the medication stream, ``d_star`` in the diagnosis stream)
regardless of label. What differs is timing: each planted pair is
*aligned* (the diagnosis follows the medication within ``lag`` months)
with probability ``(1 + s) / 2`` for positives and ``(1 - s) / 2`` for
negatives; otherwise the diagnosis is placed outside every medication's
lag window. Counting a single stream therefore says nothing about the
label, and ``s = 0`` removes the signal entirely.

Under the single-stream rule positives instead carry extra ``m_star``
events, so the medication stream alone is informative.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import DEMO_DIM, EnrolleeTimeMatrix, PatientRecord, Vocabulary, demo_vector, split_dataset

RULES = ("cross-stream", "single-stream")


@dataclass
class GeneratorConfig:
    n_patients: int = 2000
    n_months: int = 24
    med_vocab_size: int = 20
    diag_vocab_size: int = 20
    base_rate: float = 0.05
    strength: float = 0.8
    rule: str = "cross-stream"
    lag: int = 2
    pairs: int = 3
    seed: int = 0

    def validate(self) -> None:
        if self.med_vocab_size < 4 or self.diag_vocab_size < 4:
            raise ValueError("vocabulary sizes must be >= 4")
        if self.n_months < 3:
            raise ValueError("n_months must be >= 3")
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError("strength must lie in [0, 1]")
        if not 0.0 < self.base_rate < 1.0:
            raise ValueError("base_rate must lie in (0, 1)")
        if self.rule not in RULES:
            raise ValueError(f"rule must be one of {RULES}")
        if not 0 <= self.lag < self.n_months - 1:
            raise ValueError("lag must be in [0, n_months - 1)")
        if self.n_patients < 2 or self.pairs < 1:
            raise ValueError("need n_patients >= 2 and pairs >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown generator fields: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


def truth_of(config: GeneratorConfig) -> dict:
    """Ground truth for the oracle; the designated tokens are always index 0."""
    return {"m_star": 0, "d_star": 0, "lag": config.lag, "strength": config.strength, "rule": config.rule}


def vocabulary(config: GeneratorConfig) -> Vocabulary:
    meds = {f"MED{i:03d}": i for i in range(config.med_vocab_size)}
    diags = {f"DX{i:03d}": i for i in range(config.diag_vocab_size)}
    # MED001 doubles as the opioid class used by cohort matching
    return Vocabulary(meds, diags, opioids=["MED001"])


def _place_pairs(rng, T: int, lag: int, aligned: np.ndarray) -> tuple[list[int], list[int]]:
    """Medication times first, then diagnosis times.

    Aligned diagnoses land 0..lag months after their medication; the others
    avoid every medication's lag window so they never co-occur by accident.
    """
    deltas = [int(rng.integers(0, lag + 1)) if a else 0 for a in aligned]
    med_t = [int(rng.integers(0, T - d)) for d in deltas]
    covered = np.zeros(T, dtype=bool)
    for t in med_t:
        covered[t : t + lag + 1] = True
    free = np.flatnonzero(~covered)
    diag_t = []
    for t, d, a in zip(med_t, deltas, aligned):
        if a:
            diag_t.append(t + d)
        elif free.size:
            diag_t.append(int(free[rng.integers(0, free.size)]))
        else:
            diag_t.append(int(rng.integers(0, T)))
    return med_t, diag_t


def _patient(rng, idx: int, label: int, config: GeneratorConfig) -> PatientRecord:
    T = config.n_months
    meds = (rng.random((T, config.med_vocab_size)) < config.base_rate).astype(np.float64)
    diags = (rng.random((T, config.diag_vocab_size)) < config.base_rate).astype(np.float64)
    meds[:, 0] = 0.0
    diags[:, 0] = 0.0
    s = config.strength
    if config.rule == "cross-stream":
        p_align = (1.0 + s) / 2.0 if label else (1.0 - s) / 2.0
        med_t, diag_t = _place_pairs(rng, T, config.lag, rng.random(config.pairs) < p_align)
        meds[med_t, 0] = 1.0
        diags[diag_t, 0] = 1.0
    else:
        extra = config.pairs if rng.random() < (0.5 + s / 2.0 if label else 0.5 - s / 2.0) else 0
        for _ in range(config.pairs + extra):
            meds[int(rng.integers(0, T)), 0] = 1.0
        for _ in range(config.pairs):
            diags[int(rng.integers(0, T)), 0] = 1.0
    # demographics drawn from one distribution for both labels
    age = float(np.clip(rng.normal(48.0, 14.0), 18.0, 90.0))
    sex = "F" if rng.random() < 0.55 else "M"
    return PatientRecord(
        id=f"P{idx:06d}",
        label=label,
        meds=meds,
        diags=diags,
        demo=demo_vector(round(age, 1), sex),
        times=np.arange(T),
    )


def generate(config: GeneratorConfig) -> EnrolleeTimeMatrix:
    config.validate()
    master = np.random.default_rng(config.seed)
    n_pos = config.n_patients // 2
    labels = np.array([1] * n_pos + [0] * (config.n_patients - n_pos))
    labels = labels[master.permutation(config.n_patients)]
    seeds = master.integers(0, 2**63 - 1, size=config.n_patients)
    patients = [
        _patient(np.random.default_rng(int(seeds[i])), i, int(labels[i]), config)
        for i in range(config.n_patients)
    ]
    return EnrolleeTimeMatrix(patients, config.med_vocab_size, config.diag_vocab_size, (0, config.n_months))


def cooccurrences(med_times, diag_times, lag: int) -> int:
    """Pairs (t_m, t_d) with 0 <= t_d - t_m <= lag."""
    med_times = np.asarray(med_times)
    diag_times = np.asarray(diag_times)
    if med_times.size == 0 or diag_times.size == 0:
        return 0
    delta = diag_times[None, :] - med_times[:, None]
    return int(np.count_nonzero((delta >= 0) & (delta <= lag)))


def oracle_score(p: PatientRecord, truth: dict) -> float:
    """Generative score: lag-window co-occurrences (cross rule) or m_star count (single rule)."""
    med_t = p.times[p.meds[:, truth["m_star"]] > 0]
    if truth.get("rule", "cross-stream") == "single-stream":
        return float(len(med_t))
    diag_t = p.times[p.diags[:, truth["d_star"]] > 0]
    return float(cooccurrences(med_t, diag_t, truth["lag"]))


def single_stream_oracle(p: PatientRecord, truth: dict, stream: str = "med") -> float:
    """Best one-stream summary of the planted tokens: their event count."""
    if stream == "med":
        return float(p.meds[:, truth["m_star"]].sum())
    return float(p.diags[:, truth["d_star"]].sum())


def generate_dataset(config: GeneratorConfig, fractions=(0.8, 0.1, 0.1)):
    from .data import Dataset

    m = generate(config)
    train, val, test = split_dataset(m, fractions, seed=config.seed)
    truth = truth_of(config)
    truth["config"] = asdict(config)
    return Dataset(m, vocabulary(config), {"train": train, "val": val, "test": test}, truth)


__all__ = [
    "DEMO_DIM",
    "GeneratorConfig",
    "generate",
    "generate_dataset",
    "oracle_score",
    "single_stream_oracle",
    "cooccurrences",
    "truth_of",
    "vocabulary",
]
