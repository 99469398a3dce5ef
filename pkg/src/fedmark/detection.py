"""Statistical screening of watermarked uploads.

The server verifies each uploaded representation against the client's true
slice and keeps a ledger of the resulting accuracy records. While few
uploads have been rejected, a new record is accepted when its accuracy
clears a lower confidence band around its honest cohort (records with the
same embedding count, including the current round's peers). Once the
rejected pool is large enough, the test flips: a record is accepted only
when it rises above an upper confidence band around the rejected pool.
"""

import csv
import math
import statistics
from dataclasses import dataclass, field

_NORMAL = statistics.NormalDist()


def inverse_normal_cdf(confidence: float) -> float:
    """Standard normal quantile, accurate to well under 1e-6."""
    if not 0.0 < confidence < 1.0:
        raise ValueError(f"confidence must lie in (0, 1), got {confidence}")
    return _NORMAL.inv_cdf(confidence)


def lower_band(mean: float, std: float, num: int, confidence: float) -> float:
    """mean - z(confidence) * std / sqrt(num)."""
    return mean - inverse_normal_cdf(confidence) * std / math.sqrt(num)


def upper_band(mean: float, std: float, num: int, confidence: float) -> float:
    """mean + z(confidence) * std / sqrt(num)."""
    return mean + inverse_normal_cdf(confidence) * std / math.sqrt(num)


@dataclass
class DetectorConfig:
    honest_confidence: float = 0.975
    malicious_confidence: float = 0.5
    pool_threshold: int = 5  # rejected records needed before the test flips
    min_cohort: int = 3  # below this, accept for lack of evidence

    def __post_init__(self):
        for name in ("honest_confidence", "malicious_confidence"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.pool_threshold < 1:
            raise ValueError("pool_threshold must be at least 1")
        if self.min_cohort < 1:
            raise ValueError("min_cohort must be at least 1")


@dataclass(frozen=True)
class DetectionRecord:
    """One verified upload: who, when, how many times they have embedded so
    far, and the measured slice accuracy."""

    round_index: int
    client_id: int
    embedding_count: int
    acc: float

    def __post_init__(self):
        if not 0.0 <= self.acc <= 1.0:
            raise ValueError(f"acc must lie in [0, 1], got {self.acc}")
        if self.embedding_count < 1:
            raise ValueError("embedding_count starts at 1")


@dataclass
class DetectionLedger:
    """Accepted records grouped by embedding count, the rejected pool, and
    the current round's still-undecided records."""

    honest: dict = field(default_factory=dict)  # embedding_count -> [records]
    malicious: list = field(default_factory=list)
    pending: list = field(default_factory=list)
    history: list = field(default_factory=list)  # (record, accepted) in arrival order

    @property
    def num_malicious(self) -> int:
        return len(self.malicious)

    def begin_round(self, records) -> None:
        if self.pending:
            raise RuntimeError("previous round was never committed")
        self.pending = list(records)

    def commit_round(self, decisions) -> None:
        """decisions: iterable of (record, accepted) covering every pending record."""
        decisions = list(decisions)
        if {id(r) for r, _ in decisions} != {id(r) for r in self.pending}:
            raise ValueError("decisions must cover exactly the pending records")
        for record, accepted in decisions:
            if accepted:
                self.honest.setdefault(record.embedding_count, []).append(record)
            else:
                self.malicious.append(record)
            self.history.append((record, accepted))
        self.pending = []


def cohort_stats(ledger: DetectionLedger, embedding_count: int, exclude=None):
    """(mean, sample std, size) of accepted plus pending records that share
    an embedding count. `exclude` removes the record under test itself.
    std is None when fewer than two records remain; mean is NaN when none do."""
    records = [
        r
        for r in ledger.honest.get(embedding_count, []) + ledger.pending
        if r.embedding_count == embedding_count and r is not exclude
    ]
    num = len(records)
    if num == 0:
        return math.nan, None, 0
    accs = [r.acc for r in records]
    mean = statistics.fmean(accs)
    std = statistics.stdev(accs) if num >= 2 else None
    return mean, std, num


def decide(record: DetectionRecord, ledger: DetectionLedger, config: DetectorConfig) -> bool:
    """Accept or reject one upload record against the current ledger."""
    if ledger.num_malicious < config.pool_threshold:
        mean, std, num = cohort_stats(ledger, record.embedding_count, exclude=record)
        if num < config.min_cohort or std is None:
            return True
        if std == 0.0:
            # Degenerate cohort: every peer scored identically. Accept a
            # record that matches them, reject only a strictly lower one.
            return record.acc >= mean
        return record.acc > lower_band(mean, std, num, config.honest_confidence)

    accs = [r.acc for r in ledger.malicious]
    num = len(accs)
    if num < config.min_cohort or num < 2:
        return True
    mean = statistics.fmean(accs)
    std = statistics.stdev(accs)
    return record.acc > upper_band(mean, std, num, config.malicious_confidence)


def detection_metrics(ledger: DetectionLedger, malicious_ids, n_clients: int):
    """(true detection rate, false positive rate): the fraction of truly
    malicious clients ever rejected, and of honest clients ever rejected."""
    malicious_ids = set(malicious_ids)
    honest_total = n_clients - len(malicious_ids)
    rejected = {record.client_id for record, accepted in ledger.history if not accepted}
    caught = len(rejected & malicious_ids)
    falsely = len(rejected - malicious_ids)
    d_t = caught / len(malicious_ids) if malicious_ids else 0.0
    d_f = falsely / honest_total if honest_total else 0.0
    return d_t, d_f


def export_ledger_csv(ledger: DetectionLedger, path) -> None:
    """All records with their decisions, in arrival order."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["round", "client", "embedding_count", "acc", "decision"])
        for record, accepted in ledger.history:
            writer.writerow(
                [
                    record.round_index,
                    record.client_id,
                    record.embedding_count,
                    f"{record.acc:.6f}",
                    "accept" if accepted else "reject",
                ]
            )
