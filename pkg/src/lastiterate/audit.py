"""Monte Carlo privacy auditing with Clopper-Pearson certified epsilon lower bounds.

An audit draws scores from the "canary" arm and the "no canary" arm, picks a
decision threshold on a calibration split, and certifies
``eps >= ln((TPR_lo - delta) / FPR_hi)`` on the disjoint held-out split.

Randomness is counter based: trials are cut into fixed blocks and every
block owns a Philox stream keyed by (seed, arm, block). Scores therefore do
not depend on how many workers evaluate the blocks.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np
from scipy import stats

from .accountant import SgdParams
from .counterexamples import EncoderConfig, encoding_score, simulate_encoding_batch
from .numerics import clopper_pearson

BLOCK_SIZE = 8192
ARM_CANARY, ARM_NO_CANARY = 1, 0

Scenario = Union[str, EncoderConfig]


@dataclass(frozen=True)
class AuditConfig:
    trials_per_arm: int = 100_000
    confidence: float = 0.05  # total error budget of the two one-sided bounds
    delta_target: float = 1e-6
    calibration_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.trials_per_arm < 100:
            raise ValueError("trials_per_arm must be at least 100")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if not 0.0 < self.calibration_fraction < 1.0:
            raise ValueError("calibration_fraction must lie in (0, 1)")
        if self.trials_per_arm - self.n_calibration < 50:
            raise ValueError("calibration split leaves fewer than 50 estimation samples per arm")

    @property
    def n_calibration(self) -> int:
        return int(round(self.trials_per_arm * self.calibration_fraction))


@dataclass
class AuditResult:
    threshold: float
    direction: str
    tpr_bound: float
    fpr_bound: float
    eps_lower: float
    true_positives: int
    false_positives: int
    n_pos: int
    n_neg: int
    calibration_indices: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    estimation_indices: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("calibration_indices")
        d.pop("estimation_indices")
        return d


def block_rng(seed: int, arm: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(arm), int(block)))
    return np.random.Generator(np.random.Philox(ss))


def simulate_last_iterate_score(params: SgdParams, with_canary: bool, rng: np.random.Generator, size=None):
    """Canary-direction projection of the last iterate under a linear loss.

    Draws k ~ Binomial(T, q) (canary arm only) plus the summed noise
    N(0, T sigma^2).
    """
    noise = rng.standard_normal(size) * math.sqrt(params.T) * params.sigma
    if not with_canary:
        return noise
    return rng.binomial(params.T, params.q, size) + noise


def _block_scores(params: SgdParams, scenario: Scenario, arm: int, seed: int, block: int, n: int) -> np.ndarray:
    rng = block_rng(seed, arm, block)
    with_canary = arm == ARM_CANARY
    if scenario == "linear":
        return np.asarray(simulate_last_iterate_score(params, with_canary, rng, n), dtype=float)
    if isinstance(scenario, EncoderConfig):
        models, _ = simulate_encoding_batch(scenario, with_canary, rng, n)
        return encoding_score(models, scenario)
    raise ValueError(f"unknown scenario {scenario!r}")


def sample_scores(
    params: SgdParams, scenario: Scenario, arm: int, n: int, seed: int, workers: int = 1
) -> np.ndarray:
    sizes = [min(BLOCK_SIZE, n - start) for start in range(0, n, BLOCK_SIZE)]
    jobs = [(params, scenario, arm, seed, b, size) for b, size in enumerate(sizes)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda job: _block_scores(*job), jobs))
    else:
        parts = [_block_scores(*job) for job in jobs]
    return np.concatenate(parts) if parts else np.empty(0)


def _eps_from_bounds(tpr_lo, fpr_hi, delta):
    tpr_lo = np.asarray(tpr_lo, dtype=float)
    fpr_hi = np.asarray(fpr_hi, dtype=float)
    num = tpr_lo - delta
    with np.errstate(divide="ignore", invalid="ignore"):
        eps = np.where((num > 0) & (fpr_hi > 0), np.log(num / np.where(fpr_hi > 0, fpr_hi, 1.0)), 0.0)
    return np.maximum(eps, 0.0)


def epsilon_lower_bound(
    tp: int,
    fp: int,
    n_pos: int,
    n_neg: int,
    delta: float,
    confidence: float = 0.05,
    direction: str = "both",
) -> float:
    """Certified epsilon lower bound from confusion counts.

    ``confidence`` is the total error budget; each one-sided Clopper-Pearson
    bound is taken at level ``1 - confidence / 2``. ``direction="upper"``
    tests "score above threshold means canary" (TPR vs FPR), ``"lower"`` the
    mirrored test (TNR vs FNR); ``"both"`` returns the larger of the two.
    """
    if not (0 <= tp <= n_pos and 0 <= fp <= n_neg):
        raise ValueError("counts inconsistent with totals")
    level = 1.0 - confidence / 2.0
    out = 0.0
    if direction in ("upper", "both"):
        tpr_lo = clopper_pearson(tp, n_pos, level, "lower")
        fpr_hi = clopper_pearson(fp, n_neg, level, "upper")
        out = max(out, float(_eps_from_bounds(tpr_lo, fpr_hi, delta)))
    if direction in ("lower", "both"):
        tnr_lo = clopper_pearson(n_neg - fp, n_neg, level, "lower")
        fnr_hi = clopper_pearson(n_pos - tp, n_pos, level, "upper")
        out = max(out, float(_eps_from_bounds(tnr_lo, fnr_hi, delta)))
    if direction not in ("upper", "lower", "both"):
        raise ValueError(f"unknown direction {direction!r}")
    return out


def _cp_lower_vec(k, n: int, level: float) -> np.ndarray:
    k = np.asarray(k)
    safe = np.clip(k, 1, n)
    out = stats.beta.ppf(1.0 - level, safe, n - safe + 1)
    out = np.where(k >= n, (1.0 - level) ** (1.0 / n), out)
    return np.where(k <= 0, 0.0, out)


def _cp_upper_vec(k, n: int, level: float) -> np.ndarray:
    k = np.asarray(k)
    safe = np.clip(k, 0, n - 1)
    out = stats.beta.ppf(level, safe + 1, n - safe)
    out = np.where(k <= 0, 1.0 - (1.0 - level) ** (1.0 / n), out)
    return np.where(k >= n, 1.0, out)


def select_threshold(pos: np.ndarray, neg: np.ndarray, delta: float, confidence: float) -> tuple[float, str]:
    """Pick (threshold, direction) from calibration scores.

    Candidates are midpoints between consecutive distinct scores. Each is
    rated by the Clopper-Pearson bound its calibration counts certify, which
    discounts far-tail thresholds whose rates rest on a handful of samples.
    Ties go to the smaller threshold.
    """
    pos = np.sort(pos)
    neg = np.sort(neg)
    grid = np.unique(np.concatenate((pos, neg)))
    if grid.size < 2:
        return float(grid[0]) if grid.size else 0.0, "upper"
    cand = 0.5 * (grid[:-1] + grid[1:])
    n_pos, n_neg = pos.size, neg.size
    tp = n_pos - np.searchsorted(pos, cand, side="left")
    fp = n_neg - np.searchsorted(neg, cand, side="left")
    level = 1.0 - confidence / 2.0
    up = _eps_from_bounds(_cp_lower_vec(tp, n_pos, level), _cp_upper_vec(fp, n_neg, level), delta)
    low = _eps_from_bounds(_cp_lower_vec(n_neg - fp, n_neg, level), _cp_upper_vec(n_pos - tp, n_pos, level), delta)
    i_up, i_low = int(np.argmax(up)), int(np.argmax(low))
    if low[i_low] > up[i_up]:
        return float(cand[i_low]), "lower"
    return float(cand[i_up]), "upper"


def audit_scores(pos: np.ndarray, neg: np.ndarray, cfg: AuditConfig) -> AuditResult:
    """Split, calibrate and certify on precomputed per-arm scores."""
    n = cfg.trials_per_arm
    if pos.size != n or neg.size != n:
        raise ValueError("score arrays must hold trials_per_arm entries each")
    n_cal = cfg.n_calibration
    cal_idx = np.arange(n_cal)
    est_idx = np.arange(n_cal, n)
    n_est = est_idx.size
    threshold, direction = select_threshold(pos[cal_idx], neg[cal_idx], cfg.delta_target, cfg.confidence)
    tp = int(np.count_nonzero(pos[est_idx] >= threshold))
    fp = int(np.count_nonzero(neg[est_idx] >= threshold))
    level = 1.0 - cfg.confidence / 2.0
    if direction == "upper":
        tpr_b = clopper_pearson(tp, n_est, level, "lower")
        fpr_b = clopper_pearson(fp, n_est, level, "upper")
    else:
        tpr_b = clopper_pearson(n_est - fp, n_est, level, "lower")
        fpr_b = clopper_pearson(n_est - tp, n_est, level, "upper")
    eps = epsilon_lower_bound(tp, fp, n_est, n_est, cfg.delta_target, cfg.confidence, direction)
    return AuditResult(
        threshold=threshold,
        direction=direction,
        tpr_bound=tpr_b,
        fpr_bound=fpr_b,
        eps_lower=eps,
        true_positives=tp,
        false_positives=fp,
        n_pos=n_est,
        n_neg=n_est,
        calibration_indices=cal_idx,
        estimation_indices=est_idx,
    )


def run_audit(
    params: SgdParams,
    cfg: AuditConfig,
    scenario: Scenario = "linear",
    workers: int = 1,
    scores_out: Optional[str] = None,
) -> AuditResult:
    """Simulate both arms and certify an epsilon lower bound.

    ``scenario`` is ``"linear"`` (adversarial dataset with a constant canary
    gradient and zero gradients elsewhere) or an ``EncoderConfig`` for the
    malicious-dataset encoding attack.
    """
    pos = sample_scores(params, scenario, ARM_CANARY, cfg.trials_per_arm, cfg.seed, workers)
    neg = sample_scores(params, scenario, ARM_NO_CANARY, cfg.trials_per_arm, cfg.seed, workers)
    if scores_out is not None:
        write_scores_csv(scores_out, pos, neg)
    return audit_scores(pos, neg, cfg)


def write_scores_csv(path: str, pos: np.ndarray, neg: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "trial", "score"])
        for arm, scores in (("canary", pos), ("no_canary", neg)):
            for i, s in enumerate(scores):
                writer.writerow([arm, i, repr(float(s))])
