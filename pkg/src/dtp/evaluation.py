"""Retrieval metrics (mAP, rank-1) and lifelong aggregates."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

REPORT_FIELDS = ("stage", "domain", "split", "mAP", "rank1", "n_query", "n_gallery")
CURVE_FIELDS = ("stage", "first_domain_mAP", "first_domain_rank1", "unseen_mAP", "unseen_rank1")


class ProtocolError(ValueError):
    pass


@dataclass
class RankingResult:
    order: list[np.ndarray]  # per query: valid gallery indices, best first
    average_precision: np.ndarray
    first_match_rank: np.ndarray  # 0-based rank of the first true match


def rank_gallery(
    similarity: np.ndarray,
    query_ids: np.ndarray,
    gallery_ids: np.ndarray,
    query_cams: np.ndarray | None = None,
    gallery_cams: np.ndarray | None = None,
    camera_exclusion: bool = True,
) -> RankingResult:
    """Rank the gallery for each query by descending similarity, ties to the lower index."""
    similarity = np.asarray(similarity, dtype=np.float64)
    n_q, n_g = similarity.shape
    orders, aps, firsts = [], np.zeros(n_q), np.zeros(n_q, dtype=np.int64)
    for q in range(n_q):
        order = np.argsort(-similarity[q], kind="stable")
        if camera_exclusion and query_cams is not None:
            drop = (gallery_ids[order] == query_ids[q]) & (gallery_cams[order] == query_cams[q])
            order = order[~drop]
        matches = gallery_ids[order] == query_ids[q]
        if not matches.any():
            raise ProtocolError(f"query {q} (identity {int(query_ids[q])}) has no valid gallery match")
        hits = np.flatnonzero(matches)
        # fsum is correctly rounded, so AP does not depend on summation order
        aps[q] = math.fsum((np.arange(1, hits.size + 1) / (hits + 1)).tolist()) / hits.size
        firsts[q] = hits[0]
        orders.append(order)
    return RankingResult(orders, aps, firsts)


def evaluate_features(
    query_feats: np.ndarray,
    query_ids: np.ndarray,
    query_cams: np.ndarray,
    gallery_feats: np.ndarray,
    gallery_ids: np.ndarray,
    gallery_cams: np.ndarray,
    camera_exclusion: bool = True,
) -> tuple[float, float, RankingResult]:
    qn = query_feats / np.maximum(np.linalg.norm(query_feats, axis=1, keepdims=True), 1e-12)
    gn = gallery_feats / np.maximum(np.linalg.norm(gallery_feats, axis=1, keepdims=True), 1e-12)
    res = rank_gallery(qn @ gn.T, query_ids, gallery_ids, query_cams, gallery_cams, camera_exclusion)
    return float(res.average_precision.mean()), float(np.mean(res.first_match_rank == 0)), res


def evaluate(query, gallery, embed: Callable[[np.ndarray], np.ndarray], camera_exclusion: bool = True):
    """Embed both splits with ``embed`` and score retrieval; returns (mAP, rank1, RankingResult)."""
    return evaluate_features(
        embed(query.regions),
        query.identity_ids,
        query.camera_ids,
        embed(gallery.regions),
        gallery.identity_ids,
        gallery.camera_ids,
        camera_exclusion,
    )


def aggregate(per_domain: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Unweighted means of (mAP, rank1) pairs."""
    if not per_domain:
        raise ValueError("cannot aggregate an empty list of domains")
    arr = np.asarray(per_domain, dtype=np.float64)
    return float(arr[:, 0].mean()), float(arr[:, 1].mean())


@dataclass
class MetricReport:
    stage: int
    trained_domain: int
    records: list[dict] = field(default_factory=list)

    def add(self, domain: int, split: str, mAP: float, rank1: float, n_query: int, n_gallery: int) -> None:
        self.records.append(
            {"stage": self.stage, "domain": domain, "split": split, "mAP": mAP, "rank1": rank1, "n_query": n_query, "n_gallery": n_gallery}
        )

    def _select(self, split: str) -> list[tuple[float, float]]:
        return [(r["mAP"], r["rank1"]) for r in self.records if r["split"] == split]

    @property
    def seen_average(self) -> tuple[float, float]:
        return aggregate(self._select("seen"))

    @property
    def unseen_average(self) -> tuple[float, float] | None:
        rows = self._select("unseen")
        return aggregate(rows) if rows else None

    def metric(self, domain: int) -> dict:
        for r in self.records:
            if r["domain"] == domain:
                return r
        raise KeyError(f"domain {domain} not evaluated at stage {self.stage}")

    @classmethod
    def from_records(cls, records: list[dict], trained_domain: int = -1) -> "MetricReport":
        if not records:
            raise ValueError("empty report")
        for r in records:
            if set(r) != set(REPORT_FIELDS):
                raise ValueError(f"report record has fields {sorted(r)}, expected {list(REPORT_FIELDS)}")
        return cls(int(records[0]["stage"]), trained_domain, list(records))


def tendency_curves(reports: Sequence[MetricReport], first_domain: int | None = None) -> list[dict]:
    """Per stage: first trained domain's metrics and the unseen average."""
    if not reports:
        raise ValueError("no completed stages")
    first = reports[0].trained_domain if first_domain is None else first_domain
    rows = []
    for rep in reports:
        m = rep.metric(first)
        unseen = rep.unseen_average or (float("nan"), float("nan"))
        rows.append(
            {
                "stage": rep.stage,
                "first_domain_mAP": m["mAP"],
                "first_domain_rank1": m["rank1"],
                "unseen_mAP": unseen[0],
                "unseen_rank1": unseen[1],
            }
        )
    return rows


def forgetting_drops(curve: Sequence[dict], key: str = "first_domain_rank1") -> list[float]:
    return [curve[i][key] - curve[i - 1][key] for i in range(1, len(curve))]


def curves_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CURVE_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: repr(float(r[k])) if k != "stage" else r[k] for k in CURVE_FIELDS})
    return buf.getvalue()
