"""Multi-round retrieval metrics: accumulated Hits@K, degradation, gate behaviour."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .exceptions import ConfigError, DataFormatError, DegenerateRegressionError
from .model import DEFAULT_STATIC_WEIGHT, FusionParams, GateRecord, fuse_forward_batch, gate_records, static_fusion
from .retrieval import EmbeddingIndex

METHODS = ("text_only", "static", "adafuse")
FUSED_METHODS = ("static", "adafuse")


@dataclass
class RankTable:
    """Rank of the ground-truth target per dialogue (rows) and round (columns)."""

    method: str
    dialogue_ids: np.ndarray
    ranks: np.ndarray

    def __post_init__(self):
        self.dialogue_ids = np.asarray(self.dialogue_ids)
        try:
            self.ranks = np.asarray(self.ranks, dtype=np.int64)
        except ValueError as exc:
            raise DataFormatError(f"{self.method}: ragged rank table") from exc
        if self.ranks.ndim != 2 or self.ranks.shape[0] != len(self.dialogue_ids):
            raise DataFormatError(f"{self.method}: rank table must be a complete (dialogues x rounds) grid")
        if self.ranks.size and self.ranks.min() < 1:
            raise DataFormatError(f"{self.method}: ranks must be >= 1")

    @property
    def n_rounds(self) -> int:
        return self.ranks.shape[1]


def hits_at_k_accumulated(table: RankTable, k: int) -> np.ndarray:
    """Fraction of dialogues whose target reached the top ``k`` by each round."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    best_so_far = np.minimum.accumulate(table.ranks, axis=1)
    return (best_so_far <= k).mean(axis=0)


def _check_pair(fused: RankTable, text: RankTable, n: int | None = None) -> None:
    if fused.ranks.shape != text.ranks.shape or not np.array_equal(fused.dialogue_ids, text.dialogue_ids):
        raise DataFormatError(f"{fused.method} and {text.method} tables cover different dialogues")
    if n is not None and not 0 <= n < fused.n_rounds:
        raise DataFormatError(f"round {n} outside 0..{fused.n_rounds - 1}")


def degradation_rate(fused: RankTable, text: RankTable, n: int) -> float:
    """Share of dialogues whose target ranks strictly worse with the fused query."""
    _check_pair(fused, text, n)
    return float(np.mean(fused.ranks[:, n] > text.ranks[:, n]))


def avg_rank_drop(fused: RankTable, text: RankTable, n: int) -> float:
    """Mean rank loss over degraded dialogues only; 0 when none degraded."""
    _check_pair(fused, text, n)
    delta = fused.ranks[:, n] - text.ranks[:, n]
    worse = delta > 0
    if not worse.any():
        return 0.0
    return float(delta[worse].mean())


@dataclass(frozen=True)
class GateAnalysis:
    slope: float
    intercept: float
    pearson_r: float
    n: int
    csv_export: str = field(repr=False, default="")


GATE_CSV_HEADER = ["sample_id", "round", "cos_td", "image_weight"]


def gate_analysis(records) -> GateAnalysis:
    """OLS fit of image weight (1 - lambda) on text/image cosine, plus Pearson r."""
    records = list(records)
    if len(records) < 3:
        raise DegenerateRegressionError("gate analysis needs at least 3 records")
    c = np.array([r.cos_TD for r in records], dtype=np.float64)
    w = np.array([r.image_weight for r in records], dtype=np.float64)
    cc = c - c.mean()
    wc = w - w.mean()
    sxx = float(cc @ cc)
    if sxx <= 1e-24 * len(c):
        raise DegenerateRegressionError("cos_TD is constant; slope undefined")
    sxy = float(cc @ wc)
    syy = float(wc @ wc)
    slope = sxy / sxx
    r = sxy / np.sqrt(sxx * syy) if syy > 0 else 0.0

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(GATE_CSV_HEADER)
    for rec in records:
        writer.writerow([rec.sample_id, rec.round, repr(float(rec.cos_TD)), repr(float(rec.image_weight))])
    return GateAnalysis(slope, float(w.mean() - slope * c.mean()), float(np.clip(r, -1.0, 1.0)), len(records), buf.getvalue())


# ---------------------------------------------------------------------------
# end-to-end protocol


def build_queries(method: str, z_T, z_D, params: FusionParams | None = None,
                  static_w: float = DEFAULT_STATIC_WEIGHT):
    """Unit query rows for one method; adafuse also returns its activations."""
    if method == "text_only":
        return nx.l2_normalize(z_T), None
    if method == "static":
        return static_fusion(z_T, z_D, static_w), None
    if method == "adafuse":
        if params is None:
            raise ConfigError("adafuse evaluation needs trained parameters")
        return fuse_forward_batch(params, z_T, z_D)
    raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")


@dataclass
class EvalReport:
    k: int
    n_rounds: int
    methods: list[str]
    hits: dict[str, list[float]]
    degradation: dict[str, dict[str, list[float]]]
    gate: dict | None = None
    static_w: float = DEFAULT_STATIC_WEIGHT
    n_dialogues: int = 0
    tables: dict[str, RankTable] = field(default_factory=dict, repr=False)
    gate_records: list[GateRecord] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "n_rounds": self.n_rounds,
            "n_dialogues": self.n_dialogues,
            "static_w": self.static_w,
            "methods": list(self.methods),
            "hits_at_k": self.hits,
            "degradation": self.degradation,
            "gate": self.gate,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        try:
            return cls(
                k=int(data["k"]),
                n_rounds=int(data["n_rounds"]),
                methods=list(data["methods"]),
                hits={m: [float(x) for x in v] for m, v in data["hits_at_k"].items()},
                degradation={
                    m: {key: [float(x) for x in vals] for key, vals in d.items()}
                    for m, d in data["degradation"].items()
                },
                gate=data.get("gate"),
                static_w=float(data.get("static_w", DEFAULT_STATIC_WEIGHT)),
                n_dialogues=int(data.get("n_dialogues", 0)),
            )
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise DataFormatError(f"not an evaluation report: {exc}") from exc

    def write(self, out_dir) -> list[str]:
        """Write ``report.json`` and the per-figure CSVs; returns file names."""
        os.makedirs(out_dir, exist_ok=True)
        written = ["report.json", "hits_curve.csv"]
        with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
        with open(os.path.join(out_dir, "hits_curve.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", "method", "hits_at_k"])
            for n in range(self.n_rounds):
                for m in self.methods:
                    w.writerow([n, m, repr(self.hits[m][n])])
        fused = [m for m in FUSED_METHODS if m in self.degradation]
        if fused:
            primary = "adafuse" if "adafuse" in fused else fused[0]
            for method in fused:
                name = f"degradation_{method}.csv"
                self._write_degradation(os.path.join(out_dir, name), method)
                written.append(name)
            self._write_degradation(os.path.join(out_dir, "degradation.csv"), primary)
            written.append("degradation.csv")
        if self.gate_records:
            with open(os.path.join(out_dir, "gate_scatter.csv"), "w", newline="", encoding="utf-8") as fh:
                fh.write(gate_analysis(self.gate_records).csv_export)
            written.append("gate_scatter.csv")
        return written

    def _write_degradation(self, path, method: str) -> None:
        deg = self.degradation[method]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", "rate", "avg_drop"])
            for n in range(self.n_rounds):
                w.writerow([n, repr(deg["rate"][n]), repr(deg["avg_drop"][n])])


def rank_tables(index: EmbeddingIndex, dialogues, methods, params: FusionParams | None = None,
                static_w: float = DEFAULT_STATIC_WEIGHT):
    """Rank tables per method, plus adafuse gate records in (dialogue, round) order."""
    if not dialogues:
        raise ConfigError("no dialogues to evaluate")
    R = dialogues[0].n_rounds
    if any(dlg.n_rounds != R for dlg in dialogues):
        raise DataFormatError("dialogues have differing round counts")
    ids = np.array([dlg.dialogue_id for dlg in dialogues])
    Z_T = np.concatenate([dlg.z_T for dlg in dialogues])
    Z_D = np.concatenate([dlg.z_D for dlg in dialogues])
    targets = np.repeat([dlg.target_id for dlg in dialogues], R)
    rounds = np.tile(np.arange(R), len(dialogues))
    sample_ids = np.repeat(ids, R)

    tables, records = {}, []
    for method in methods:
        queries, acts = build_queries(method, Z_T, Z_D, params, static_w)
        ranks = index.rank_of_batch(queries, targets).reshape(len(dialogues), R)
        tables[method] = RankTable(method, ids, ranks)
        if acts is not None:
            records = gate_records(acts, sample_ids.tolist(), rounds.tolist())
    return tables, records


def evaluate_methods(index: EmbeddingIndex, dialogues, params: FusionParams | None = None,
                     static_w: float = DEFAULT_STATIC_WEIGHT, k: int = 10,
                     methods=METHODS) -> EvalReport:
    """Run every requested method over every (dialogue, round) and score it."""
    unknown = set(methods) - set(METHODS)
    methods = [m for m in METHODS if m in methods]
    if not methods or unknown:
        raise ConfigError(f"methods must be a non-empty subset of {METHODS}")
    needed = list(methods)
    if "text_only" not in needed and any(m in FUSED_METHODS for m in needed):
        needed.insert(0, "text_only")  # baseline for degradation, not reported
    tables, records = rank_tables(index, dialogues, needed, params, static_w)
    R = dialogues[0].n_rounds

    hits = {m: [float(x) for x in hits_at_k_accumulated(tables[m], k)] for m in methods}
    degradation = {}
    for m in methods:
        if m in FUSED_METHODS:
            degradation[m] = {
                "rate": [degradation_rate(tables[m], tables["text_only"], n) for n in range(R)],
                "avg_drop": [avg_rank_drop(tables[m], tables["text_only"], n) for n in range(R)],
            }
    gate = None
    if records:
        try:
            ga = gate_analysis(records)
            gate = {"slope": ga.slope, "intercept": ga.intercept, "pearson_r": ga.pearson_r, "n": ga.n,
                    "mean_image_weight": float(np.mean([r.image_weight for r in records]))}
        except DegenerateRegressionError:
            gate = None
    return EvalReport(
        k=k, n_rounds=R, methods=methods, hits=hits, degradation=degradation, gate=gate,
        static_w=static_w, n_dialogues=len(dialogues),
        tables={m: tables[m] for m in methods}, gate_records=records,
    )
