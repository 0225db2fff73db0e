"""Training objectives."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

log = logging.getLogger(__name__)

TEMPERATURE_FLOOR = 0.25
TEMPERATURE_CEIL = 16.0
NORM_EPS = 1e-12


class DegenerateBatchError(ValueError):
    pass


def _labels(labels) -> np.ndarray:
    return np.asarray(labels).reshape(-1)


def supcon(similarities: Tensor, labels, scale: Tensor | float = 1.0) -> Tensor:
    """Supervised contrastive loss over a square similarity matrix.

    For anchor i, candidates are every column a != i and positives are the
    same-label columns among them. Anchors without a positive are skipped.
    """
    labels = _labels(labels)
    b = similarities.shape[0]
    if similarities.shape != (b, b) or labels.shape[0] != b:
        raise ag.ShapeError(f"need a square similarity matrix matching {labels.shape[0]} labels, got {similarities.shape}")
    off_diag = ~np.eye(b, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & off_diag
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0
    if not anchors.any():
        raise DegenerateBatchError("no anchor has a positive pair")
    logits = similarities * scale
    # per-row shift for stability; it cancels in the log-ratio
    shift = np.where(off_diag, logits.data, -np.inf).max(axis=1, keepdims=True)
    shifted = logits - shift
    denom = ag.log((ag.exp(shifted) * off_diag.astype(float)).sum(axis=1, keepdims=True))
    log_prob = shifted - denom
    weights = np.zeros((b, b))
    weights[anchors] = pos[anchors] / n_pos[anchors, None]
    per_anchor = -(log_prob * weights).sum(axis=1)
    return per_anchor[np.flatnonzero(anchors)].mean()


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    return ag.l2_normalize(a, eps=NORM_EPS) @ ag.l2_normalize(b, eps=NORM_EPS).T


def global_loss(f_img: Tensor, f_txt: Tensor, labels, logit_scale: Tensor | float = 0.0) -> Tensor:
    """Symmetric supcon over text-to-image and image-to-text cosine similarities."""
    scale = ag.exp(logit_scale) if isinstance(logit_scale, Tensor) else float(np.exp(logit_scale))
    t2i = cosine_matrix(f_txt, f_img)
    i2t = cosine_matrix(f_img, f_txt)
    return supcon(t2i, labels, scale) + supcon(i2t, labels, scale)


def partial_loss(local_img: Tensor, local_txt: Tensor) -> Tensor:
    """Mean over batch and body parts of 1 - cos(text part, image part)."""
    if local_img.shape != local_txt.shape:
        raise ag.ShapeError(f"local feature shapes differ: {local_img.shape} vs {local_txt.shape}")
    cos = (ag.l2_normalize(local_img, eps=NORM_EPS) * ag.l2_normalize(local_txt, eps=NORM_EPS)).sum(axis=-1)
    return (1.0 - cos).mean()


def id_loss(logits: Tensor, labels) -> Tensor:
    labels = _labels(labels).astype(np.int64)
    lp = ag.log_softmax(logits, axis=-1)
    return -lp[np.arange(labels.shape[0]), labels].mean()


def triplet_loss(features: Tensor, labels, margin: float = 0.3) -> Tensor:
    """Batch-hard triplet loss on Euclidean distances."""
    labels = _labels(labels)
    same = labels[:, None] == labels[None, :]
    eye = np.eye(labels.shape[0], dtype=bool)
    has_pos = (same & ~eye).any(axis=1)
    has_neg = (~same).any(axis=1)
    valid = np.flatnonzero(has_pos & has_neg)
    if valid.size == 0:
        raise DegenerateBatchError("batch has no anchor with both a positive and a negative")
    sq = (features * features).sum(axis=1, keepdims=True)
    d2 = sq + sq.T - 2.0 * (features @ features.T)
    dist = ag.sqrt(ag.maximum(d2, 1e-12))
    big = float(dist.data.max()) + 1.0
    hardest_pos = (dist * same.astype(float)).max(axis=1)
    # push positives out of the min by adding a constant larger than any distance
    hardest_neg = -((-(dist + big * same.astype(float))).max(axis=1))
    hinge = ag.maximum(hardest_pos - hardest_neg + margin, 0.0)
    return hinge[valid].mean()


def tempered(logits: Tensor, temperature) -> Tensor:
    """softmax(logits)^(1/T), renormalised; equal to softmax(logits / T)."""
    return ag.softmax(logits, axis=-1, inverse_temperature=1.0 / temperature)


def _distill(student: Tensor, teacher: Tensor, t_student, t_teacher) -> Tensor:
    if student.shape != teacher.shape:
        raise ag.ShapeError(f"logit shapes differ: {student.shape} vs {teacher.shape}")
    p_s = tempered(student, t_student)
    # log of the tempered teacher distribution, computed stably
    log_p_t = ag.log_softmax(teacher * (1.0 / t_teacher), axis=-1)
    per_sample = -(p_s * log_p_t).sum(axis=-1)
    return per_sample.mean()


def kd_loss(student_logits: Tensor, teacher_logits: Tensor, t: float = 2.0) -> Tensor:
    if not t > 0:
        raise ValueError(f"distillation temperature must be positive, got {t}")
    teacher = teacher_logits.detach()
    return _distill(student_logits, teacher, ag.Tensor(np.float64(t)), ag.Tensor(np.float64(t)))


@dataclass
class TemperaturePair:
    base: float
    delta1: Tensor
    delta2: Tensor

    @classmethod
    def create(cls, base: float = 2.0) -> "TemperaturePair":
        return cls(base, ag.parameter(0.0), ag.parameter(0.0))

    def effective(self) -> tuple[Tensor, Tensor]:
        out = []
        for name, delta in (("student", self.delta1), ("teacher", self.delta2)):
            raw = delta + self.base
            if not TEMPERATURE_FLOOR <= raw.item() <= TEMPERATURE_CEIL:
                log.info("%s temperature %.4f clamped to [%g, %g]", name, raw.item(), TEMPERATURE_FLOOR, TEMPERATURE_CEIL)
            out.append(ag.clamp(raw, TEMPERATURE_FLOOR, TEMPERATURE_CEIL))
        return out[0], out[1]


def lkd_loss(student_logits: Tensor, teacher_logits: Tensor, temps: TemperaturePair) -> Tensor:
    """Distillation with learnable additive temperature offsets for student and teacher."""
    t_s, t_t = temps.effective()
    return _distill(student_logits, teacher_logits.detach(), t_s, t_t)


@dataclass
class StageTwoTerms:
    id: Tensor
    tri: Tensor
    global_: Tensor
    partial: Tensor | None = None
    lkd: Tensor | None = None


def stage2_loss(terms: StageTwoTerms, lkd_weight: float = 0.1, partial_weight: float = 1.0) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum id + tri + global + partial + lkd_weight * lkd; absent terms are skipped."""
    total = terms.id + terms.tri + terms.global_
    parts = {"id": terms.id.item(), "tri": terms.tri.item(), "global": terms.global_.item()}
    if terms.partial is not None:
        total = total + terms.partial * partial_weight
        parts["partial"] = terms.partial.item() * partial_weight
    if terms.lkd is not None:
        total = total + terms.lkd * lkd_weight
        parts["lkd"] = terms.lkd.item() * lkd_weight
    return total, parts
