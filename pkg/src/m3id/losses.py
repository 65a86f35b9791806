"""Training objectives: multi-instance KD, BCE, alpha schedules, baselines, mixup.

The distillation signal is a KL divergence between bag distributions: per
volume, the M per-patch sigmoid disease scores pass through a softmax
(directly on the scores, no temperature) and the student's distribution is
matched to the teacher's. KD is summed over the bag and averaged over the
batch; the composite objective is L = L_BCE + alpha_t * L_KD with alpha_t
ramped per epoch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor, clamp_min, log, matmul, softmax_axis, sqrt, transpose, tsum

__all__ = [
    "BagDistribution",
    "AlphaSchedule",
    "VanillaKDConfig",
    "BaselineDistillConfig",
    "MixupConfig",
    "bag_softmax",
    "kd_loss",
    "bce_loss",
    "total_loss",
    "alpha_at",
    "vanilla_kd_loss",
    "attention_transfer_loss",
    "similarity_preserving_loss",
    "mixup",
    "draw_mixup_lambda",
]

PROB_FLOOR = 1e-12


@dataclass
class BagDistribution:
    """Per-patch sigmoid scores and their bag softmax, shape [M] or [B, M]."""

    scores: Tensor
    probs: Tensor

    @property
    def m(self) -> int:
        return self.scores.shape[-1]


def bag_softmax(scores) -> BagDistribution:
    """Softmax over the bag axis (last): p_m = exp(v_m) / sum_k exp(v_k)."""
    if not isinstance(scores, Tensor):
        scores = Tensor(scores)
    if scores.ndim not in (1, 2):
        raise ContractViolation(f"bag scores must be [M] or [B, M], got shape {scores.shape}")
    if scores.shape[-1] < 1:
        raise ContractViolation("bag must contain at least one instance")
    if not np.all(np.isfinite(scores.data)):
        raise ContractViolation("bag scores must be finite")
    return BagDistribution(scores, softmax_axis(scores, axis=scores.ndim - 1))


def _probs_of(d) -> Tensor:
    if isinstance(d, BagDistribution):
        return d.probs
    return d if isinstance(d, Tensor) else Tensor(d)


def kd_loss(teacher, student) -> Tensor:
    """KL(p_T || p_S) summed over the bag, averaged over the batch.

    The teacher distribution is expected detached (sequential mode) or
    detached by the caller per direction (mutual mode); gradients here flow
    into whatever graph the arguments carry.
    """
    p_t, p_s = _probs_of(teacher), _probs_of(student)
    if p_t.shape != p_s.shape:
        raise ContractViolation(f"bag shape mismatch: teacher {p_t.shape} vs student {p_s.shape}")
    per_entry = p_t * (log(clamp_min(p_t, PROB_FLOOR)) - log(clamp_min(p_s, PROB_FLOOR)))
    per_bag = tsum(per_entry, axis=per_entry.ndim - 1)
    if per_bag.ndim == 0:
        return per_bag
    return per_bag.mean()


def bce_loss(pred, target) -> Tensor:
    """-(1/B) sum[y log p + (1-y) log(1-p)], probabilities clamped at 1e-12.

    Targets may be soft (mixup labels in [0, 1]).
    """
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractViolation(f"pred shape {pred.shape} != target shape {target.shape}")
    if np.any(target < 0) or np.any(target > 1):
        raise ContractViolation("targets must lie in [0, 1]")
    term = Tensor(target) * log(clamp_min(pred, PROB_FLOOR)) \
        + Tensor(1.0 - target) * log(clamp_min(1.0 - pred, PROB_FLOOR))
    return -term.mean()


def total_loss(bce, kd, alpha_t: float):
    """L = L_BCE + alpha_t * L_KD."""
    if alpha_t < 0:
        raise ContractViolation(f"alpha_t must be >= 0, got {alpha_t}")
    return bce + alpha_t * kd


@dataclass(frozen=True)
class AlphaSchedule:
    kind: str
    alpha_max: float
    t_max: int

    def __post_init__(self):
        if self.kind not in ("cosine", "linear", "constant"):
            raise ContractViolation(f"unknown schedule kind {self.kind!r}")
        if self.alpha_max < 0:
            raise ContractViolation(f"alpha_max must be >= 0, got {self.alpha_max}")
        if self.t_max < 1:
            raise ContractViolation(f"t_max must be >= 1, got {self.t_max}")


def alpha_at(schedule: AlphaSchedule, t_cur: int) -> float:
    """Distillation weight after t_cur completed epochs.

    cosine: (alpha/2) * (1 + cos(pi * t/T + pi)), 0 at t=0 and alpha at t=T;
    linear: alpha * t / T; constant: alpha.
    """
    if not 0 <= t_cur <= schedule.t_max:
        raise ContractViolation(f"t_cur {t_cur} outside [0, {schedule.t_max}]")
    a, T = schedule.alpha_max, schedule.t_max
    if schedule.kind == "constant":
        return a
    if schedule.kind == "linear":
        return a * t_cur / T
    return 0.5 * a * (1.0 + np.cos(np.pi * t_cur / T + np.pi))


@dataclass(frozen=True)
class VanillaKDConfig:
    """Logit-space KD baseline: two-unit output head, temperature-scaled KL."""

    temperature: float = 1.0
    two_logit_head: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ContractViolation(f"temperature must be > 0, got {self.temperature}")


def vanilla_kd_loss(teacher_logits, student_logits, temperature: float = 1.0) -> Tensor:
    """KL(softmax(t/T) || softmax(s/T)) * T^2, averaged over the batch."""
    if temperature <= 0:
        raise ContractViolation(f"temperature must be > 0, got {temperature}")
    t = teacher_logits if isinstance(teacher_logits, Tensor) else Tensor(teacher_logits)
    s = student_logits if isinstance(student_logits, Tensor) else Tensor(student_logits)
    if t.ndim != 2 or t.shape[1] != 2 or s.shape != t.shape:
        raise ContractViolation(
            f"expected matching [B, 2] logits, got {t.shape} and {s.shape}"
        )
    p_t = softmax_axis(t * (1.0 / temperature), axis=1)
    p_s = softmax_axis(s * (1.0 / temperature), axis=1)
    per_entry = p_t * (log(clamp_min(p_t, PROB_FLOOR)) - log(clamp_min(p_s, PROB_FLOOR)))
    return tsum(per_entry, axis=1).mean() * (temperature ** 2)


@dataclass(frozen=True)
class BaselineDistillConfig:
    """Tap points and weights for the AT/SP baseline losses."""

    at_weight: float = 1000.0
    sp_weight: float = 100.0
    at_taps: tuple = ("res_out", "a2n0", "a2n1")
    sp_tap: str = "fc1"

    def __post_init__(self):
        if self.at_weight < 0 or self.sp_weight < 0:
            raise ContractViolation("baseline distillation weights must be >= 0")


def _spatial_attention(feature_map: Tensor) -> Tensor:
    # [B, C, ...] -> channel-summed squared activations, flattened per sample
    a = tsum(feature_map * feature_map, axis=1)
    return a.reshape((a.shape[0], int(np.prod(a.shape[1:]))))


def _l2_normalize_rows(a: Tensor) -> Tensor:
    return a / sqrt(clamp_min(tsum(a * a, axis=1, keepdims=True), PROB_FLOOR))


def attention_transfer_loss(teacher_maps, student_maps) -> Tensor:
    """Sum over taps of ||a_S/|a_S| - a_T/|a_T|||^2, batch-averaged.

    a is the channel-sum of squared activations, L2-normalized per sample.
    """
    if len(teacher_maps) != len(student_maps) or not teacher_maps:
        raise ContractViolation(
            f"tap count mismatch: {len(teacher_maps)} teacher vs {len(student_maps)} student"
        )
    loss = None
    for t_map, s_map in zip(teacher_maps, student_maps):
        if t_map.shape[0] != s_map.shape[0] or t_map.shape[2:] != s_map.shape[2:]:
            raise ContractViolation(
                f"tap shape mismatch: teacher {t_map.shape} vs student {s_map.shape}"
            )
        diff = _l2_normalize_rows(_spatial_attention(s_map)) \
            - _l2_normalize_rows(_spatial_attention(t_map))
        tap_loss = tsum(diff * diff, axis=1).mean()
        loss = tap_loss if loss is None else loss + tap_loss
    return loss


def similarity_preserving_loss(teacher_acts, student_acts) -> Tensor:
    """(1/B^2) ||G_S - G_T||_F^2 over row-normalized batch Gram matrices."""
    t = teacher_acts if isinstance(teacher_acts, Tensor) else Tensor(teacher_acts)
    s = student_acts if isinstance(student_acts, Tensor) else Tensor(student_acts)
    if t.ndim != 2 or s.ndim != 2:
        raise ContractViolation("activations must be [B, F]")
    if t.shape[0] != s.shape[0]:
        raise ContractViolation(f"batch mismatch: teacher {t.shape[0]} vs student {s.shape[0]}")
    b = t.shape[0]
    if b < 2:
        raise ContractViolation("similarity preservation needs batch size >= 2")

    def gram(a):
        return _l2_normalize_rows(matmul(a, transpose(a, (1, 0))))

    diff = gram(s) - gram(t)
    return tsum(diff * diff) * (1.0 / (b * b))


@dataclass(frozen=True)
class MixupConfig:
    enabled: bool = True
    beta_param: float = 0.2

    def __post_init__(self):
        if self.beta_param <= 0:
            raise ContractViolation(f"mixup beta parameter must be > 0, got {self.beta_param}")


def draw_mixup_lambda(rng, beta_param: float = 0.2) -> float:
    return float(rng.beta(beta_param, beta_param))


def mixup(sample_a, sample_b, lam: float):
    """Convex combination of (volume, clinical, label) triples; label goes soft.

    Clinical entries may be None (volume-only data) as long as both sides agree.
    """
    if not 0.0 <= lam <= 1.0:
        raise ContractViolation(f"mixup lambda must be in [0, 1], got {lam}")
    vol_a, clin_a, y_a = sample_a
    vol_b, clin_b, y_b = sample_b
    vol_a, vol_b = np.asarray(vol_a), np.asarray(vol_b)
    if vol_a.shape != vol_b.shape:
        raise ContractViolation(f"volume shape mismatch: {vol_a.shape} vs {vol_b.shape}")
    if (clin_a is None) != (clin_b is None):
        raise ContractViolation("cannot mix a sample with clinical data into one without")
    mixed_clin = None
    if clin_a is not None:
        clin_a, clin_b = np.asarray(clin_a), np.asarray(clin_b)
        if clin_a.shape != clin_b.shape:
            raise ContractViolation(f"clinical shape mismatch: {clin_a.shape} vs {clin_b.shape}")
        mixed_clin = lam * clin_a + (1.0 - lam) * clin_b
    return lam * vol_a + (1.0 - lam) * vol_b, mixed_clin, lam * float(y_a) + (1.0 - lam) * float(y_b)
