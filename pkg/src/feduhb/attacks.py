"""Unlearning-efficacy metrics: membership inference (MISR) and backdoor ASR."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from . import models
from .datasets import Dataset, TriggerSpec, stamp_trigger
from .errors import AttackSetupError, MetricError
from .models import ModelSpec


@dataclass
class ShadowAttackModel:
    """Binary member/non-member classifier over sorted confidence vectors."""

    params: np.ndarray
    feature_dim: int
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    train_accuracy: float = float("nan")
    num_members: int = 0
    num_nonmembers: int = 0

    @property
    def spec(self) -> ModelSpec:
        return ModelSpec("logistic", self.feature_dim, num_classes=2)

    def member_probability(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.feature_dim:
            raise MetricError(f"expected features of width {self.feature_dim}, got {features.shape}")
        z = (features - self.feature_mean) / self.feature_scale
        return models.predict_proba(self.spec, self.params, z)[:, 1]

    def is_member(self, features: np.ndarray) -> np.ndarray:
        return self.member_probability(features) >= 0.5


@dataclass
class MIAReport:
    misr: float
    member_classified: int
    total: int

    def to_dict(self):
        return {"misr": self.misr, "member_classified": self.member_classified, "total": self.total}


@dataclass
class BackdoorReport:
    asr: float
    clean_accuracy: float
    trigger: TriggerSpec
    eligible: int = 0
    excluded: int = 0
    hits: int = 0

    def to_dict(self):
        return {"asr": self.asr, "clean_accuracy": self.clean_accuracy, "eligible": self.eligible,
                "excluded": self.excluded, "hits": self.hits, "trigger": self.trigger.__dict__}


def attack_features(spec: ModelSpec, params, X) -> np.ndarray:
    """Softmax probabilities of the target model, sorted in descending order."""
    p = models.predict_proba(spec, params, X)
    return -np.sort(-p, axis=1)


def _fit_logistic(Z: np.ndarray, labels: np.ndarray, l2: float) -> np.ndarray:
    spec = ModelSpec("logistic", Z.shape[1], num_classes=2)
    batch = Dataset(Z, labels, num_classes=2)

    def objective(w):
        g = models.grad(spec, w, batch)
        return g.loss + 0.5 * l2 * float(w @ w), g.gradient + l2 * w

    res = scipy.optimize.minimize(objective, np.zeros(spec.num_params), jac=True, method="L-BFGS-B",
                                  options={"maxiter": 1000, "gtol": 1e-10})
    return res.x


def train_shadow_attack(spec: ModelSpec, pre_params, target_train: Dataset, test_data: Dataset,
                        rng: np.random.Generator, l2: float = 1e-4) -> ShadowAttackModel:
    """Fit the attack on the pre-unlearning ("compromised") model.

    Members are the target clients' training examples, non-members held-out
    test examples; the larger side is subsampled so both classes are equal.
    """
    if len(target_train) == 0 or len(test_data) == 0:
        raise AttackSetupError("membership attack needs both member and non-member examples")
    n = min(len(target_train), len(test_data))
    mem_idx = np.sort(rng.permutation(len(target_train))[:n])
    non_idx = np.sort(rng.permutation(len(test_data))[:n])
    F = np.vstack([attack_features(spec, pre_params, target_train.X[mem_idx]),
                   attack_features(spec, pre_params, test_data.X[non_idx])])
    labels = np.concatenate([np.ones(n, dtype=np.int64), np.zeros(n, dtype=np.int64)])
    mean = F.mean(axis=0)
    scale = F.std(axis=0)
    scale[scale == 0] = 1.0
    params = _fit_logistic((F - mean) / scale, labels, l2)
    attack = ShadowAttackModel(params, F.shape[1], mean, scale, num_members=n, num_nonmembers=n)
    attack.train_accuracy = float(np.mean(attack.is_member(F) == labels.astype(bool)))
    return attack


def attack_accuracy(attack: ShadowAttackModel, spec: ModelSpec, params, members: Dataset, nonmembers: Dataset) -> float:
    """Balanced accuracy: mean of the member and non-member hit rates.

    Member and non-member sets usually differ in size (target shards versus
    the whole test split), so plain accuracy would mostly measure one class.
    """
    if len(members) == 0 or len(nonmembers) == 0:
        raise MetricError("attack accuracy needs both member and non-member examples")
    tpr = float(np.mean(attack.is_member(attack_features(spec, params, members.X))))
    tnr = float(np.mean(~attack.is_member(attack_features(spec, params, nonmembers.X))))
    return 0.5 * (tpr + tnr)


def misr(attack: ShadowAttackModel, spec: ModelSpec, post_params, target_train: Dataset) -> MIAReport:
    """Fraction of target training examples still classified as members."""
    if len(target_train) == 0:
        raise MetricError("MISR needs target training examples")
    flagged = int(attack.is_member(attack_features(spec, post_params, target_train.X)).sum())
    return MIAReport(flagged / len(target_train), flagged, len(target_train))


def asr(spec: ModelSpec, params, test_data: Dataset, trigger: TriggerSpec) -> BackdoorReport:
    """Share of triggered, non-target-class test images predicted as the target label."""
    eligible = test_data.y != trigger.target_label
    n_eligible = int(eligible.sum())
    if n_eligible == 0:
        raise MetricError(f"no test examples outside target class {trigger.target_label}")
    stamped = stamp_trigger(test_data.X[eligible], test_data.image_shape, trigger)
    hits = int((models.predict(spec, params, stamped) == trigger.target_label).sum())
    clean = models.accuracy(spec, params, test_data)
    return BackdoorReport(hits / n_eligible, clean, trigger, n_eligible, len(test_data) - n_eligible, hits)
