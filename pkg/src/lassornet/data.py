"""Cohort ingestion, Z-score normalisation, person-level splitting and synthetic cohorts."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .circular import encode, wrap24
from .errors import (
    AllGenesRemoved,
    BadSpec,
    DuplicateSample,
    InconsistentGenes,
    ParseError,
    TooFewPeople,
)

logger = logging.getLogger(__name__)

LONG_CSV_HEADER = ("person_id", "sample_index", "zt", "dlmo", "gene_id", "value")


@dataclass
class PersonRecord:
    """All samples of one person, in collection order.

    ``expression`` has shape ``(N_i, G)``; ``zt`` has shape ``(N_i,)``.
    """

    person_id: str
    zt: np.ndarray
    expression: np.ndarray
    dlmo: Optional[float] = None
    sample_ids: Optional[list] = None

    @property
    def n_samples(self) -> int:
        return len(self.zt)

    @property
    def ict(self) -> np.ndarray:
        """Internal clock time of each sample (ZT + DLMO); needs a known DLMO."""
        if self.dlmo is None:
            raise ValueError(f"person {self.person_id!r} has no DLMO label")
        return wrap24(self.zt + self.dlmo)


@dataclass
class GeneStats:
    gene_ids: list
    mean: np.ndarray
    sd: np.ndarray

    def to_dict(self) -> dict:
        return {"gene_ids": list(self.gene_ids), "mean": self.mean.tolist(), "sd": self.sd.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GeneStats":
        return cls(list(d["gene_ids"]), np.asarray(d["mean"], float), np.asarray(d["sd"], float))


@dataclass
class Cohort:
    """A set of people measured on a common gene list.

    Used for both raw and normalised data; ``stats`` is set once the expression
    values have been Z-scored.
    """

    people: list
    gene_ids: list
    stats: Optional[GeneStats] = None
    removed_genes: list = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.gene_ids)) != len(self.gene_ids):
            raise InconsistentGenes("gene identifiers must be unique")
        g = len(self.gene_ids)
        for p in self.people:
            if p.expression.shape != (p.n_samples, g):
                raise InconsistentGenes(
                    f"person {p.person_id!r}: expression shape {p.expression.shape} "
                    f"does not match {p.n_samples} samples x {g} genes"
                )

    @property
    def n_people(self) -> int:
        return len(self.people)

    @property
    def n_genes(self) -> int:
        return len(self.gene_ids)

    @property
    def n_samples(self) -> int:
        return sum(p.n_samples for p in self.people)

    @property
    def normalized(self) -> bool:
        return self.stats is not None

    def subset(self, idx: Sequence[int]) -> "Cohort":
        return replace(self, people=[self.people[i] for i in idx])

    def stacked(self) -> np.ndarray:
        return np.vstack([p.expression for p in self.people]) if self.people else np.empty((0, self.n_genes))


RawCohort = Cohort
NormalizedCohort = Cohort


@dataclass
class SplitCohort:
    train: Cohort
    validation: Cohort
    test: Cohort
    seed: Optional[int] = None

    def parts(self):
        return {"train": self.train, "validation": self.validation, "test": self.test}


# ---------------------------------------------------------------------------
# long_csv I/O


def _parse_float(text: str, what: str, lineno: int) -> float:
    text = text.strip()
    if text == "" or text.lower() in {"nan", "na"}:
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"line {lineno}: cannot parse {what} {text!r}") from None


def read_long_csv(stream) -> Cohort:
    """Parse a long-format cohort from an open text stream.

    Lines starting with ``#`` are metadata comments and are skipped.
    """
    rows = (line for line in stream if not line.lstrip().startswith("#"))
    reader = csv.reader(rows)
    header = next(reader, None)
    if header is None:
        raise ParseError("empty cohort file")
    header = tuple(h.strip() for h in header)
    if header != LONG_CSV_HEADER:
        raise ParseError(f"bad header {header!r}; expected {','.join(LONG_CSV_HEADER)}")

    gene_index: dict = {}
    people: dict = {}  # person_id -> {"dlmo", "samples": {sample_index: {"zt", "values"}}}
    n_rows = 0
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(LONG_CSV_HEADER):
            raise ParseError(f"line {lineno}: expected 6 fields, got {len(row)}")
        pid, sidx, zt_s, dlmo_s, gene, value_s = (c.strip() for c in row)
        if not pid or not sidx or not gene:
            raise ParseError(f"line {lineno}: person_id, sample_index and gene_id are required")
        zt = _parse_float(zt_s, "zt", lineno)
        if math.isnan(zt):
            raise ParseError(f"line {lineno}: missing zt")
        dlmo = None if dlmo_s == "" else _parse_float(dlmo_s, "dlmo", lineno)
        value = _parse_float(value_s, "value", lineno)
        n_rows += 1

        if gene not in gene_index:
            gene_index[gene] = len(gene_index)
        person = people.setdefault(pid, {"dlmo": dlmo, "samples": {}})
        if person["dlmo"] != dlmo and not (
            person["dlmo"] is not None and dlmo is not None and math.isnan(person["dlmo"]) and math.isnan(dlmo)
        ):
            raise ParseError(f"line {lineno}: person {pid!r} has conflicting dlmo values")
        sample = person["samples"].setdefault(sidx, {"zt": zt, "values": {}})
        if sample["zt"] != zt:
            raise ParseError(f"line {lineno}: sample {pid}/{sidx} has conflicting zt values")
        if gene in sample["values"]:
            raise DuplicateSample(f"line {lineno}: duplicate row for sample {pid}/{sidx}, gene {gene!r}")
        sample["values"][gene] = value

    if n_rows == 0:
        raise ParseError("cohort file has no data rows")

    gene_ids = list(gene_index)
    records = []
    for pid, person in people.items():
        zts, mat, sids = [], [], []
        for sidx, sample in person["samples"].items():
            if len(sample["values"]) != len(gene_ids):
                missing = [g for g in gene_ids if g not in sample["values"]]
                raise InconsistentGenes(f"sample {pid}/{sidx} is missing gene(s) {missing[:5]}")
            zts.append(sample["zt"])
            mat.append([sample["values"][g] for g in gene_ids])
            sids.append(sidx)
        dlmo = person["dlmo"]
        records.append(
            PersonRecord(
                person_id=pid,
                zt=np.asarray(zts, float),
                expression=np.asarray(mat, float),
                dlmo=None if dlmo is None or math.isnan(dlmo) else float(dlmo),
                sample_ids=sids,
            )
        )
    return Cohort(people=records, gene_ids=gene_ids)


def load_cohort(path, format: str = "long_csv") -> Cohort:
    """Load a cohort file. ``path`` may be ``"-"`` for standard input."""
    if format != "long_csv":
        raise ParseError(f"unsupported cohort format {format!r}")
    if str(path) == "-":
        import sys

        return read_long_csv(sys.stdin)
    with open(path, newline="", encoding="utf-8") as fh:
        return read_long_csv(fh)


def write_long_csv(cohort: Cohort, stream, meta: Optional[dict] = None) -> None:
    if meta:
        stream.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(LONG_CSV_HEADER)
    for p in cohort.people:
        dlmo = "" if p.dlmo is None else repr(float(p.dlmo))
        sids = p.sample_ids or [str(j) for j in range(p.n_samples)]
        for j in range(p.n_samples):
            zt = repr(float(p.zt[j]))
            for k, gene in enumerate(cohort.gene_ids):
                writer.writerow((p.person_id, sids[j], zt, dlmo, gene, repr(float(p.expression[j, k]))))


def save_cohort(cohort: Cohort, path, meta: Optional[dict] = None) -> None:
    if str(path) == "-":
        import sys

        write_long_csv(cohort, sys.stdout, meta)
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        write_long_csv(cohort, fh, meta)


def cohort_to_csv_string(cohort: Cohort, meta: Optional[dict] = None) -> str:
    buf = io.StringIO()
    write_long_csv(cohort, buf, meta)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# normalisation


def drop_genes(cohort: Cohort, keep: np.ndarray, reason: str) -> Cohort:
    keep = np.asarray(keep, bool)
    if keep.all():
        return cohort
    removed = [g for g, k in zip(cohort.gene_ids, keep) if not k]
    logger.info("removing %d gene(s) (%s): %s", len(removed), reason, removed[:10])
    if not keep.any():
        raise AllGenesRemoved(f"every gene was removed ({reason})")
    people = [replace(p, expression=p.expression[:, keep]) for p in cohort.people]
    return replace(
        cohort,
        people=people,
        gene_ids=[g for g, k in zip(cohort.gene_ids, keep) if k],
        removed_genes=list(cohort.removed_genes) + removed,
    )


def drop_missing_genes(cohort: Cohort) -> Cohort:
    """Remove every gene with a missing value in any sample of the cohort."""
    x = cohort.stacked()
    return drop_genes(cohort, ~np.isnan(x).any(axis=0), "missing values")


def compute_stats(cohort: Cohort) -> GeneStats:
    x = cohort.stacked()
    # population sd (divide by n)
    return GeneStats(list(cohort.gene_ids), x.mean(axis=0), x.std(axis=0))


def normalize(cohort: Cohort, stats: Optional[GeneStats] = None) -> Cohort:
    """Z-score every gene: ``(x - m_k) / s_k``.

    Without ``stats`` the mean and population standard deviation come from every
    sample of ``cohort``; genes with missing values or zero spread are removed (and
    logged). With ``stats`` (e.g. from a training split) the cohort is restricted to
    the genes in ``stats`` and transformed with them.
    """
    if stats is None:
        cohort = drop_missing_genes(cohort)
        stats = compute_stats(cohort)
        ok = (stats.sd > 0) & np.isfinite(stats.sd)
        if not ok.all():
            cohort = drop_genes(cohort, ok, "zero standard deviation")
            stats = GeneStats(
                [g for g, k in zip(stats.gene_ids, ok) if k], stats.mean[ok], stats.sd[ok]
            )
    else:
        if len(stats.mean) != len(stats.gene_ids) or len(stats.sd) != len(stats.gene_ids):
            raise InconsistentGenes("normalisation stats lengths do not match their gene list")
        index = {g: k for k, g in enumerate(cohort.gene_ids)}
        missing = [g for g in stats.gene_ids if g not in index]
        if missing:
            raise InconsistentGenes(f"cohort lacks gene(s) required by the stats: {missing[:5]}")
        cols = np.array([index[g] for g in stats.gene_ids], dtype=int)
        removed = [g for g in cohort.gene_ids if g not in set(stats.gene_ids)]
        cohort = replace(
            cohort,
            people=[replace(p, expression=p.expression[:, cols]) for p in cohort.people],
            gene_ids=list(stats.gene_ids),
            removed_genes=list(cohort.removed_genes) + removed,
        )
        if np.any(stats.sd <= 0):
            raise InconsistentGenes("normalisation stats contain a non-positive standard deviation")
    people = [replace(p, expression=(p.expression - stats.mean) / stats.sd) for p in cohort.people]
    return replace(cohort, people=people, stats=stats)


# ---------------------------------------------------------------------------
# splitting


def split_sizes(m: int) -> tuple:
    """Person counts for the 0.4 / 0.3 / 0.3 split.

    Train gets floor(0.4 M); validation and test get floor(0.3 M) each, and any
    leftover people are dealt round-robin starting with validation.
    """
    if m < 3:
        raise TooFewPeople(f"need at least 3 people to split, got {m}")
    n_train = (4 * m) // 10
    n_val = n_test = (3 * m) // 10
    n_train = max(n_train, 1)
    left = m - n_train - n_val - n_test
    turn = 0
    while left > 0:
        if turn % 2 == 0:
            n_val += 1
        else:
            n_test += 1
        turn += 1
        left -= 1
    return n_train, n_val, n_test


def split(cohort: Cohort, seed: int) -> SplitCohort:
    """Deterministic person-level split; all samples of a person stay together."""
    n_train, n_val, _ = split_sizes(cohort.n_people)
    order = np.random.default_rng(seed).permutation(cohort.n_people)
    tr = sorted(order[:n_train].tolist())
    va = sorted(order[n_train : n_train + n_val].tolist())
    te = sorted(order[n_train + n_val :].tolist())
    return SplitCohort(cohort.subset(tr), cohort.subset(va), cohort.subset(te), seed=seed)


def prepare_split(cohort: Cohort, seed: int, scope: str = "train") -> SplitCohort:
    """Split a raw cohort and Z-score it.

    ``scope="train"`` (default) computes gene statistics on the training people and
    applies them to every split. ``scope="full"`` computes them over the whole
    cohort before splitting.
    """
    if scope not in {"train", "full"}:
        raise ValueError(f"unknown normalisation scope {scope!r}")
    cohort = drop_missing_genes(cohort)
    if scope == "full":
        normed = normalize(cohort)
        return split(normed, seed)
    parts = split(cohort, seed)
    train = normalize(parts.train)
    return SplitCohort(
        train,
        normalize(parts.validation, train.stats),
        normalize(parts.test, train.stats),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# design matrices


def design(cohort: Cohort, augmented: bool) -> np.ndarray:
    """Stack all samples into an ``(n, G)`` matrix, or ``(n, G + 2)`` with encoded ZT."""
    blocks = []
    for p in cohort.people:
        if augmented:
            blocks.append(np.hstack([p.expression, encode(p.zt)]))
        else:
            blocks.append(p.expression)
    width = cohort.n_genes + (2 if augmented else 0)
    return np.vstack(blocks) if blocks else np.empty((0, width))


def person_inputs(p: PersonRecord, augmented: bool) -> np.ndarray:
    return np.hstack([p.expression, encode(p.zt)]) if augmented else p.expression


def targets(cohort: Cohort) -> np.ndarray:
    """Encoded ICT of every sample, ``(n, 2)``."""
    return np.vstack([encode(p.ict) for p in cohort.people]) if cohort.people else np.empty((0, 2))


def feature_names(gene_ids: Sequence[str], augmented: bool) -> list:
    return list(gene_ids) + (["zt_sin", "zt_cos"] if augmented else [])


# ---------------------------------------------------------------------------
# synthetic cohorts


@dataclass
class SynthSpec:
    """Parameters of a synthetic longitudinal cohort.

    Rhythmic gene ``k`` of person ``i`` reads ``a_k sin(pi (zt + Z_i) / 12 + phi_k) + eps``
    with ``eps ~ N(0, (noise_sd * a_k)^2)``, i.e. ``noise_sd`` is relative to the
    gene's amplitude. Non-rhythmic genes are standard normal noise. Sampling starts at
    a ZT drawn from ``zt_start_range`` and repeats every ``sample_interval`` hours.
    """

    n_people: int = 30
    n_samples: object = 8  # int, or one int per person
    n_genes: int = 200
    n_rhythmic: int = 40
    amplitude_range: tuple = (0.5, 2.0)
    noise_sd: float = 0.3
    dlmo_range: tuple = (0.0, 24.0)
    sample_interval: float = 3.0
    zt_start_range: tuple = (0.0, 0.0)

    def validate(self) -> None:
        if self.n_people < 1:
            raise BadSpec("n_people must be >= 1")
        ns = self.samples_per_person()
        if len(ns) != self.n_people or any(n < 1 for n in ns):
            raise BadSpec("n_samples must be >= 1 for every person")
        if self.n_genes < 1:
            raise BadSpec("n_genes must be >= 1")
        if not 0 <= self.n_rhythmic <= self.n_genes:
            raise BadSpec("n_rhythmic must lie in [0, n_genes]")
        lo, hi = self.amplitude_range
        if not 0 < lo <= hi:
            raise BadSpec("amplitude_range must satisfy 0 < low <= high")
        if self.noise_sd < 0:
            raise BadSpec("noise_sd must be >= 0")
        if self.dlmo_range[0] > self.dlmo_range[1]:
            raise BadSpec("dlmo_range must be (low, high) with low <= high")
        if self.zt_start_range[0] > self.zt_start_range[1]:
            raise BadSpec("zt_start_range must be (low, high) with low <= high")
        if self.sample_interval <= 0:
            raise BadSpec("sample_interval must be > 0")

    def samples_per_person(self) -> list:
        if isinstance(self.n_samples, (list, tuple)):
            return [int(n) for n in self.n_samples]
        return [int(self.n_samples)] * self.n_people

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise BadSpec(f"unknown SynthSpec field(s): {sorted(unknown)}")
        kw = dict(d)
        for key in ("amplitude_range", "dlmo_range", "zt_start_range"):
            if key in kw:
                kw[key] = tuple(float(x) for x in kw[key])
        return cls(**kw)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        for key in ("amplitude_range", "dlmo_range", "zt_start_range"):
            d[key] = list(d[key])
        if isinstance(d["n_samples"], tuple):
            d["n_samples"] = list(d["n_samples"])
        return d


def synth_cohort(spec: SynthSpec, seed: int) -> Cohort:
    """Generate a synthetic cohort with known DLMO for every person."""
    spec.validate()
    rng = np.random.default_rng(seed)
    g, gr = spec.n_genes, spec.n_rhythmic
    amp = rng.uniform(*spec.amplitude_range, size=gr)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=gr)
    width = len(str(g - 1))
    gene_ids = [f"g{k:0{width}d}" for k in range(g)]

    people = []
    for i, n in enumerate(spec.samples_per_person()):
        dlmo = float(wrap24(rng.uniform(*spec.dlmo_range)))
        start = rng.uniform(*spec.zt_start_range)
        zt = np.asarray(wrap24(start + spec.sample_interval * np.arange(n)), float).reshape(n)
        ict = zt + dlmo
        x = rng.standard_normal((n, g))
        if gr:
            signal = amp * np.sin(np.pi * ict[:, None] / 12.0 + phase)
            x[:, :gr] = signal + spec.noise_sd * amp * x[:, :gr]
        people.append(
            PersonRecord(
                person_id=f"p{i:03d}",
                zt=zt,
                expression=x,
                dlmo=dlmo,
                sample_ids=[str(j) for j in range(n)],
            )
        )
    return Cohort(people=people, gene_ids=gene_ids)


def load_synth_spec(path) -> SynthSpec:
    import json

    return SynthSpec.from_dict(json.loads(Path(path).read_text()))
