"""
Alignment coefficients and the scaling threshold of a linear classifier.

With margin direction ``c = e_y - e_bd`` the triggered margin at scale ``s``
is ``M_s = <c, (W_pre + s dW) x_trig>``. The coefficients

    rho_bd = -<c, W_pre x_trig> / (|c| sigma_pre)
    rho_cl =  <c, dW x> / (|c| sigma_delta)
    rho_tr = |<c, dW (x_trig - x)>| / (|c| sigma_delta)

bound the two terms of the margin, and for ``rho_eff = rho_cl - rho_tr > 0``
every ``s > s* = (rho_bd / rho_eff) (sigma_pre / sigma_delta)`` yields a
positive triggered margin. The verifier evaluates the margin directly and
re-checks both intermediate bounds.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.linalg import as_matrix, as_vector, normalize, sigma_max
from core.rng import Rng
from data.synth import Dataset, TriggerSpec, apply_trigger
from utils.errors import ConfigError, DegenerateInputError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-9
BOUND_SLACK = 1e-9
DEFAULT_MULTIPLIERS = (1.01, 1.1, 2.0, 10.0)
EARLY_MULTIPLIERS = (0.5, 0.9, 0.99)


@dataclass(frozen=True)
class RhoReport:
    rho_bd: float
    rho_cl: Optional[float]
    rho_tr: Optional[float]
    c_norm: float
    sigma_pre: float
    sigma_delta: float
    margin_at: Dict[float, float] = field(default_factory=dict)

    @property
    def rho_eff(self) -> Optional[float]:
        if self.rho_cl is None:
            return None
        return self.rho_cl - self.rho_tr

    @property
    def a1_holds(self) -> bool:
        return self.rho_bd > 0.0

    @property
    def applicable(self) -> bool:
        return self.rho_eff is not None and self.rho_eff > 0.0

    @property
    def s_star(self) -> Optional[float]:
        if not self.applicable:
            return None
        return (self.rho_bd / self.rho_eff) * (self.sigma_pre / self.sigma_delta)


def margin_direction(num_classes: int, y: int, y_bd: int) -> np.ndarray:
    if y == y_bd:
        raise ConfigError(f"Margin direction needs y != y_bd, got {y}")
    if not (0 <= y < num_classes and 0 <= y_bd < num_classes):
        raise ConfigError(f"Labels {y}, {y_bd} outside [0, {num_classes})")
    c = np.zeros(num_classes)
    c[y] = 1.0
    c[y_bd] = -1.0
    return c


def margin(w_pre, delta, x, y: int, y_bd: int, s: float) -> float:
    """Logit margin ``<c, (W_pre + s dW) x>``."""
    w_pre = as_matrix(w_pre, "w_pre")
    delta = as_matrix(delta, "delta")
    c = margin_direction(w_pre.shape[0], y, y_bd)
    x = as_vector(x, "x")
    return float(c @ (w_pre @ x) + s * (c @ (delta @ x)))


def _check_unit(v: np.ndarray, name: str) -> None:
    if abs(float(np.linalg.norm(v)) - 1.0) > UNIT_TOL:
        raise ValueError(f"{name} must be unit-norm")


def estimate_rhos(
    w_pre, delta, x, x_trig, y: int, y_bd: int, sigmas: Optional[Tuple[float, float]] = None
) -> RhoReport:
    """
    Tightest alignment coefficients for one input pair.

    Args:
        sigmas: Precomputed ``(sigma_max(w_pre), sigma_max(delta))`` when
            many pairs share the same weights

    Returns:
        RhoReport; ``rho_cl``/``rho_tr`` are None when the update is zero

    Raises:
        DegenerateInputError: If ``w_pre`` is zero
    """
    w_pre = as_matrix(w_pre, "w_pre")
    delta = as_matrix(delta, "delta")
    x = as_vector(x, "x")
    x_trig = as_vector(x_trig, "x_trig")
    if delta.shape != w_pre.shape or x.shape[0] != w_pre.shape[1] or x_trig.shape != x.shape:
        raise ShapeError(f"Incompatible shapes w_pre{w_pre.shape}, delta{delta.shape}, x{x.shape}")
    _check_unit(x, "x")
    _check_unit(x_trig, "x_trig")
    c = margin_direction(w_pre.shape[0], y, y_bd)
    c_norm = float(np.linalg.norm(c))

    sigma_pre, sigma_delta = sigmas if sigmas is not None else (sigma_max(w_pre), sigma_max(delta))
    if sigma_pre == 0.0:
        raise DegenerateInputError("w_pre is zero, rho_bd undefined")
    rho_bd = -float(c @ (w_pre @ x_trig)) / (c_norm * sigma_pre)
    if rho_bd <= 0.0:
        logger.debug(f"Backdoor not effective on this instance (rho_bd={rho_bd:.4g})")

    if sigma_delta == 0.0:
        return RhoReport(rho_bd, None, None, c_norm, sigma_pre, 0.0)
    rho_cl = float(c @ (delta @ x)) / (c_norm * sigma_delta)
    rho_tr = abs(float(c @ (delta @ (x_trig - x)))) / (c_norm * sigma_delta)
    return RhoReport(rho_bd, rho_cl, rho_tr, c_norm, sigma_pre, sigma_delta)


@dataclass(frozen=True)
class PropositionCheck:
    """Outcome of checking the threshold statement on one instance."""

    rhos: RhoReport
    margins: Dict[float, float]
    violations: List[float]
    delta_bound_holds: bool
    pre_bound_holds: bool
    early_positive: bool

    @property
    def applicable(self) -> bool:
        return self.rhos.applicable

    @property
    def proof_holds(self) -> bool:
        return self.delta_bound_holds and self.pre_bound_holds


def verify_proposition(
    w_pre,
    delta,
    x,
    x_trig,
    y: int,
    y_bd: int,
    s_grid: Optional[Sequence[float]] = None,
    rhos: Optional[RhoReport] = None,
) -> PropositionCheck:
    """
    Evaluate ``M_s(x_trig)`` over ``s_grid`` and re-derive the proof's bounds.

    When ``s_grid`` is omitted it is ``s*`` times the default multipliers.
    An instance with ``rho_eff <= 0`` is reported as inapplicable, with
    empty margins and no violations.
    """
    w_pre = as_matrix(w_pre, "w_pre")
    delta = as_matrix(delta, "delta")
    x = as_vector(x, "x")
    x_trig = as_vector(x_trig, "x_trig")
    rhos = rhos or estimate_rhos(w_pre, delta, x, x_trig, y, y_bd)
    if not rhos.applicable:
        logger.debug(f"Proposition inapplicable (rho_eff={rhos.rho_eff})")
        return PropositionCheck(rhos, {}, [], False, False, False)

    s_star = rhos.s_star
    c = margin_direction(w_pre.shape[0], y, y_bd)
    pre_term = float(c @ (w_pre @ x_trig))
    delta_term = float(c @ (delta @ x_trig))

    delta_bound_holds = delta_term >= rhos.rho_eff * rhos.c_norm * rhos.sigma_delta - BOUND_SLACK
    pre_bound_holds = pre_term >= -rhos.rho_bd * rhos.c_norm * rhos.sigma_pre - BOUND_SLACK

    grid = list(s_grid) if s_grid is not None else [m * s_star for m in DEFAULT_MULTIPLIERS]
    margins = {float(s): pre_term + s * delta_term for s in grid}
    violations = [s for s, m in margins.items() if s > s_star and m <= -BOUND_SLACK]
    early = any(pre_term + m * s_star * delta_term > 0.0 for m in EARLY_MULTIPLIERS)
    return PropositionCheck(
        rhos=RhoReport(
            rhos.rho_bd, rhos.rho_cl, rhos.rho_tr, rhos.c_norm, rhos.sigma_pre, rhos.sigma_delta, margins
        ),
        margins=margins,
        violations=violations,
        delta_bound_holds=delta_bound_holds,
        pre_bound_holds=pre_bound_holds,
        early_positive=early,
    )


@dataclass(frozen=True)
class ProblemInstance:
    w_pre: np.ndarray
    delta: np.ndarray
    x: np.ndarray
    x_trig: np.ndarray
    y: int
    y_bd: int


def random_instance(rng: Rng, num_classes: int, d: int) -> ProblemInstance:
    """
    Random instance biased toward an effective backdoor and a clean-aligned update.

    ``W_pre`` gets ``-beta c x_trig^T`` and ``dW`` gets ``+kappa c x^T`` added
    with random non-negative strengths, so a good share of draws satisfies
    ``rho_bd > 0`` and ``rho_eff > 0``; callers still filter.
    """
    y_bd = int(rng.choice(num_classes, 1)[0])
    y = int((y_bd + 1 + rng.choice(num_classes - 1, 1)[0]) % num_classes)
    c = margin_direction(num_classes, y, y_bd)
    x = rng.unit_vector(d)
    tau = 0.2 + 1.3 * float(rng.uniform(1)[0])
    while True:
        z = x + tau * rng.unit_vector(d)
        if float(np.linalg.norm(z)) > 1e-6:
            break
    x_trig = normalize(z)
    beta, kappa = 3.0 * rng.uniform(2)
    w_pre = rng.normal((num_classes, d)) - beta * np.outer(c, x_trig)
    delta = rng.normal((num_classes, d)) + kappa * np.outer(c, x)
    return ProblemInstance(w_pre, delta, x, x_trig, y, y_bd)


@dataclass(frozen=True)
class SoundnessReport:
    instances: int
    attempts: int
    skipped: int
    violations: int
    proof_violations: int
    early_positive: int
    s_star_quantiles: Tuple[float, float, float]
    multipliers: Tuple[float, ...] = DEFAULT_MULTIPLIERS

    def as_row(self) -> Dict[str, object]:
        q05, q50, q95 = self.s_star_quantiles
        return {
            "instances": self.instances,
            "violations": self.violations,
            "proof_violations": self.proof_violations,
            "early_positive": self.early_positive,
            "s_star_q05": q05,
            "s_star_q50": q50,
            "s_star_q95": q95,
        }


def check_proposition_soundness(
    n: int = 1000,
    seed: int = 0,
    multipliers: Sequence[float] = DEFAULT_MULTIPLIERS,
    max_classes: int = 8,
    max_dim: int = 32,
    max_attempts: Optional[int] = None,
) -> SoundnessReport:
    """
    Check the threshold statement on ``n`` random valid instances.

    Instance ``i`` draws from its own stream of ``seed`` so the run is
    reproducible regardless of how many draws are filtered out.

    Raises:
        NumericalError: If fewer than ``n`` valid instances turn up within ``max_attempts``
    """
    if any(m <= 1.0 for m in multipliers):
        raise ConfigError(f"Multipliers must exceed 1, got {multipliers}")
    root = Rng(seed).child("proposition")
    max_attempts = max_attempts or 50 * n
    valid = violations = proof_violations = early = skipped = 0
    s_stars: List[float] = []
    attempt = 0
    while valid < n and attempt < max_attempts:
        rng = root.stream(attempt)
        attempt += 1
        num_classes = 2 + int(rng.choice(max_classes - 1, 1)[0])
        d = 2 + int(rng.choice(max_dim - 1, 1)[0])
        inst = random_instance(rng, num_classes, d)
        try:
            rhos = estimate_rhos(inst.w_pre, inst.delta, inst.x, inst.x_trig, inst.y, inst.y_bd)
        except NumericalError as e:
            skipped += 1
            logger.debug(f"Skipping instance {attempt - 1}: {e}")
            continue
        if not (rhos.applicable and rhos.a1_holds):
            continue
        check = verify_proposition(
            inst.w_pre, inst.delta, inst.x, inst.x_trig, inst.y, inst.y_bd,
            s_grid=[m * rhos.s_star for m in multipliers], rhos=rhos,
        )
        valid += 1
        s_stars.append(rhos.s_star)
        if check.violations:
            violations += 1
            logger.warning(f"Margin violation on instance {attempt - 1}: {check.violations}")
        if not check.proof_holds:
            proof_violations += 1
            logger.warning(f"Proof bound violated on instance {attempt - 1}")
        if check.early_positive:
            early += 1

    if valid < n:
        raise NumericalError(
            f"Only {valid} valid instances in {attempt} attempts",
            details={"valid": valid, "attempts": attempt},
        )
    q05, q50, q95 = (float(q) for q in np.quantile(np.array(s_stars), [0.05, 0.5, 0.95]))
    logger.info(
        f"Soundness run: {valid} instances, {violations} violations, "
        f"{proof_violations} proof violations, {early} early positive"
    )
    return SoundnessReport(valid, attempt, skipped, violations, proof_violations, early, (q05, q50, q95), tuple(multipliers))


@dataclass(frozen=True)
class RhoAggregate:
    """Dataset-level coefficients: worst case over rows and means."""

    worst: RhoReport
    mean_rho_bd: float
    mean_rho_cl: Optional[float]
    mean_rho_tr: Optional[float]
    rows: int
    s_star_quantiles: Optional[Tuple[float, float, float]]

    @property
    def mean_rho_eff(self) -> Optional[float]:
        if self.mean_rho_cl is None:
            return None
        return self.mean_rho_cl - self.mean_rho_tr

    @property
    def mean_s_star(self) -> Optional[float]:
        if self.mean_rho_eff is None or self.mean_rho_eff <= 0.0:
            return None
        return (self.mean_rho_bd / self.mean_rho_eff) * (self.worst.sigma_pre / self.worst.sigma_delta)


def aggregate_rhos(w_pre, delta, dataset: Dataset, trig: TriggerSpec, limit: Optional[int] = None) -> RhoAggregate:
    """
    Coefficients over every row whose label differs from ``y_bd``.

    The worst case takes min rho_bd, min rho_cl and max rho_tr, which keeps
    the threshold guarantee for all evaluated rows at once.
    """
    rows = np.flatnonzero(dataset.labels != trig.y_bd)
    if limit is not None:
        rows = rows[:limit]
    if rows.size == 0:
        raise DegenerateInputError("no rows outside the backdoor target class")
    w_pre = as_matrix(w_pre, "w_pre")
    delta = as_matrix(delta, "delta")
    sigmas = (sigma_max(w_pre), sigma_max(delta))
    reports = [
        estimate_rhos(
            w_pre, delta, dataset.inputs[i], apply_trigger(dataset.inputs[i], trig),
            int(dataset.labels[i]), trig.y_bd, sigmas=sigmas,
        )
        for i in rows
    ]
    bd = np.array([r.rho_bd for r in reports])
    first = reports[0]
    if first.rho_cl is None:
        worst = RhoReport(float(bd.min()), None, None, first.c_norm, first.sigma_pre, 0.0)
        return RhoAggregate(worst, float(bd.mean()), None, None, len(reports), None)

    cl = np.array([r.rho_cl for r in reports])
    tr = np.array([r.rho_tr for r in reports])
    worst = RhoReport(float(bd.min()), float(cl.min()), float(tr.max()), first.c_norm, first.sigma_pre, first.sigma_delta)
    stars = [r.s_star for r in reports if r.s_star is not None]
    quantiles = None
    if stars:
        quantiles = tuple(float(q) for q in np.quantile(np.array(stars), [0.05, 0.5, 0.95]))
    logger.info(
        f"rho over {len(reports)} rows: worst bd={worst.rho_bd:.4g} cl={worst.rho_cl:.4g} "
        f"tr={worst.rho_tr:.4g}; {len(stars)} rows with a finite threshold"
    )
    return RhoAggregate(worst, float(bd.mean()), float(cl.mean()), float(tr.mean()), len(reports), quantiles)
