"""Observation-to-landmark data association.

A new object observation either matches an existing landmark or founds a new
one. Candidates are screened by an appearance gate (cosine similarity of the
observation embedding against each landmark's running-mean embedding) and a
geometric gate, then the surviving candidate with the smallest geometric
distance wins (maximum Gaussian likelihood).

The geometric gate is normally a Mahalanobis chi-square test against the
recovered landmark covariance plus a diagonal observation term; for ablation
runs it can be swapped for a plain nearest-neighbor radius. Disabling the
appearance gate is done by setting the cosine threshold to -1, which lets
every landmark through.

Within one camera frame each landmark may be claimed by at most one
detection; claims are resolved greedily by ascending geometric distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.stats import chi2

from .embedding import cosine_similarity
from .errors import GatingError, InputError

MATCHED = "matched"
NEW_LANDMARK = "new_landmark"


@dataclass
class LandmarkView:
    """The slice of landmark state association needs: identity, position,
    appearance, and support count. `class_label` is simulator ground truth
    carried for diagnostics only; association never reads it."""

    id: int
    position: np.ndarray
    embedding: np.ndarray
    observation_count: int
    class_label: int | None = None

    def __post_init__(self):
        if self.observation_count < 1:
            raise InputError("landmark must have at least one observation")


@dataclass(frozen=True)
class CandidateScore:
    landmark_id: int
    cosine: float
    d2: float


@dataclass(frozen=True)
class AssociationDecision:
    outcome: str                      # MATCHED or NEW_LANDMARK
    landmark_id: int | None
    scores: tuple[CandidateScore, ...]


@dataclass
class AssociationConfig:
    cosine_threshold: float = 0.8     # -1 disables the appearance gate
    chi2_confidence: float = 0.95
    chi2_dof: int = 6                 # per the gating test's stated distribution
    use_mahalanobis: bool = True
    nn_radius: float = 0.75           # geometric gate when use_mahalanobis is off
    gate_position_sigma: float = 0.1  # diagonal observation term added to the
                                      # recovered landmark covariance


@lru_cache(maxsize=32)
def chi2_quantile(confidence: float, dof: int) -> float:
    return float(chi2.ppf(confidence, dof))


def cosine_gate(obs_embedding: np.ndarray, landmarks: list[LandmarkView],
                threshold: float) -> list[int]:
    """Ids of landmarks whose running-mean embedding clears the threshold."""
    return [lm.id for lm in landmarks
            if cosine_similarity(obs_embedding, lm.embedding) >= threshold]


def mahalanobis_gate(obs_world: np.ndarray, candidate_position: np.ndarray,
                     cov: np.ndarray, confidence: float = 0.95,
                     dof: int = 6) -> tuple[bool, float]:
    """(passes, d2) for d2 = (l - lj)^T cov^-1 (l - lj) against the chi-square
    quantile at `confidence` with `dof` degrees of freedom."""
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (3, 3) or not np.allclose(cov, cov.T, atol=1e-9):
        raise GatingError("gating covariance must be symmetric 3x3")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise GatingError("gating covariance is not positive definite")
    delta = np.asarray(obs_world, dtype=float) - np.asarray(candidate_position, dtype=float)
    y = np.linalg.solve(chol, delta)
    d2 = float(np.dot(y, y))
    return d2 < chi2_quantile(confidence, dof), d2


def select_hypothesis(candidates: list[CandidateScore]) -> AssociationDecision:
    """Max-likelihood pick among candidates that passed both gates: smallest
    geometric distance wins; ties break on higher cosine, then lower id."""
    scores = tuple(candidates)
    if not candidates:
        return AssociationDecision(NEW_LANDMARK, None, scores)
    best = min(candidates, key=lambda c: (c.d2, -c.cosine, c.landmark_id))
    return AssociationDecision(MATCHED, best.landmark_id, scores)


def _frame_candidates(obs_world, obs_embedding, landmarks, cov_provider,
                      config: AssociationConfig, log=None):
    passed_cosine = set(cosine_gate(obs_embedding, landmarks, config.cosine_threshold))
    out: list[CandidateScore] = []
    gated: list[CandidateScore] = []
    for lm in landmarks:
        if lm.id not in passed_cosine:
            continue
        cos = cosine_similarity(obs_embedding, lm.embedding)
        if config.use_mahalanobis:
            try:
                cov = cov_provider(lm.id) + config.gate_position_sigma ** 2 * np.eye(3)
                ok, d2 = mahalanobis_gate(obs_world, lm.position, cov,
                                          config.chi2_confidence, config.chi2_dof)
            except GatingError as e:
                if log is not None:
                    log.append({"landmark": lm.id, "gating_error": str(e)})
                continue
        else:
            d2 = float(np.sum((np.asarray(obs_world) - lm.position) ** 2))
            ok = d2 <= config.nn_radius ** 2
        gated.append(CandidateScore(lm.id, cos, d2))
        if ok:
            out.append(CandidateScore(lm.id, cos, d2))
    return out, gated


def associate_frame(observations: list[tuple[np.ndarray, np.ndarray]],
                    landmarks: list[LandmarkView],
                    cov_provider,
                    config: AssociationConfig,
                    log: list | None = None) -> list[AssociationDecision]:
    """Associate all observations of one frame.

    `observations` is a list of (world position, embedding); `cov_provider`
    maps a landmark id to its recovered 3x3 covariance. Returns one decision
    per observation, in observation order, with per-frame uniqueness enforced
    greedily by ascending geometric distance.
    """
    per_obs: list[tuple[list[CandidateScore], tuple[CandidateScore, ...]]] = []
    for obs_world, obs_emb in observations:
        passing, gated = _frame_candidates(obs_world, obs_emb, landmarks,
                                           cov_provider, config, log)
        per_obs.append((passing, tuple(gated)))

    # global greedy claim over (observation, candidate) pairs
    pairs = []
    for obs_idx, (passing, _) in enumerate(per_obs):
        for c in passing:
            pairs.append((c.d2, -c.cosine, c.landmark_id, obs_idx, c))
    pairs.sort(key=lambda p: (p[0], p[1], p[2], p[3]))
    claimed_landmarks: set[int] = set()
    claimed_obs: dict[int, CandidateScore] = {}
    for d2, _negcos, lid, obs_idx, cand in pairs:
        if lid in claimed_landmarks or obs_idx in claimed_obs:
            continue
        claimed_landmarks.add(lid)
        claimed_obs[obs_idx] = cand

    decisions = []
    for obs_idx, (_passing, gated) in enumerate(per_obs):
        if obs_idx in claimed_obs:
            decisions.append(AssociationDecision(MATCHED,
                                                 claimed_obs[obs_idx].landmark_id,
                                                 gated))
        else:
            decisions.append(AssociationDecision(NEW_LANDMARK, None, gated))
    return decisions
