"""Classification and distillation losses."""

import numpy as np

from .errors import LabelOutOfRange, NonPositiveTemperature, ShapeMismatch
from .tensor import Tensor, _log_softmax_np, as_tensor, log_softmax, softmax

TEACHER_AS_TARGET = "teacher_as_target"
STUDENT_FIRST = "student_first"
KL_DIRECTIONS = (TEACHER_AS_TARGET, STUDENT_FIRST)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeMismatch(f"cross_entropy expects [batch, C] logits, got {logits.shape}")
    batch, n_classes = logits.shape
    if batch < 1 or labels.shape != (batch,):
        raise ShapeMismatch(f"labels shape {labels.shape} does not match batch {batch}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise LabelOutOfRange(f"labels must lie in [0, {n_classes})")
    onehot = np.zeros((batch, n_classes))
    onehot[np.arange(batch), labels] = 1.0
    return -(log_softmax(logits) * onehot).sum() / batch


def kd_loss(z_student, z_teacher, tau=1.0, direction=TEACHER_AS_TARGET):
    """tau^2 times the batch-mean KL divergence between softened distributions.

    ``teacher_as_target`` computes KL(p_teacher || p_student); ``student_first``
    computes KL(p_student || p_teacher). Teacher logits are always detached.
    """
    z_student = as_tensor(z_student)
    z_teacher = as_tensor(z_teacher).data
    if z_student.shape != z_teacher.shape or z_student.ndim != 2:
        raise ShapeMismatch(f"kd_loss: student {z_student.shape} vs teacher {z_teacher.shape}")
    if not tau > 0:
        raise NonPositiveTemperature(f"tau must be positive, got {tau}")
    batch = z_student.shape[0]
    log_pt = _log_softmax_np(z_teacher / tau)
    log_ps = log_softmax(z_student / tau)
    if direction == TEACHER_AS_TARGET:
        kl = ((Tensor(log_pt) - log_ps) * np.exp(log_pt)).sum()
    elif direction == STUDENT_FIRST:
        kl = ((log_ps - Tensor(log_pt)) * softmax(z_student / tau)).sum()
    else:
        raise ValueError(f"unknown KL direction {direction!r}")
    return kl * (tau * tau / batch)
