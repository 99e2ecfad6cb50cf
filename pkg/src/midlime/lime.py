"""Perturbation-based attribution of a scalar predictor to spectrogram segments.

The instance is represented as a binary vector over segments. Perturbed
samples blank out subsets of segments, the black box is queried on each, and
a proximity-weighted least-squares surrogate is fitted with exact
per-coefficient inference. Features are kept when the p-value is tiny
relative to the coefficient magnitude, which makes the kept count adaptive
instead of fixed. All sampling is counter-based, so results are independent
of chunking and worker count.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import rng
from .dsp import SCALE_DB, Spectrogram
from .errors import (
    ComparabilityError,
    ConfigError,
    MidlimeError,
    PredictionValueError,
    RankDeficiencyError,
    ScaleMismatchError,
    ShapeMismatchError,
    TransportError,
)
from .segmentation import SegmentMap


class FillStrategy(str, Enum):
    """What masked-out pixels become."""

    SILENCE_FLOOR = "silence-floor"
    SEGMENT_MEAN = "segment-mean"
    GLOBAL_MEAN = "global-mean"

    @classmethod
    def coerce(cls, value) -> "FillStrategy":
        if isinstance(value, cls):
            return value
        aliases = {"silence": cls.SILENCE_FLOOR}
        try:
            return aliases.get(value) or cls(value)
        except ValueError:
            raise ConfigError(
                f"unknown fill strategy {value!r}; expected one of "
                f"{[m.value for m in cls]}"
            ) from None


@dataclass(frozen=True)
class LimeConfig:
    n_samples: int = 50000
    kernel_width: float = 0.25
    fill: FillStrategy = FillStrategy.SILENCE_FLOOR
    ridge_alpha: float = 0.0
    ratio_threshold: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fill", FillStrategy.coerce(self.fill))
        if self.n_samples < 3:
            raise ConfigError(f"n_samples must be >= 3, got {self.n_samples}")
        if not self.kernel_width > 0:
            raise ConfigError(f"kernel_width must be positive, got {self.kernel_width}")
        if not self.ratio_threshold > 0:
            raise ConfigError(
                f"ratio_threshold must be positive, got {self.ratio_threshold}"
            )
        if self.ridge_alpha < 0:
            raise ConfigError(f"ridge_alpha must be >= 0, got {self.ridge_alpha}")

    def echo(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "kernel_width": self.kernel_width,
            "fill": self.fill.value,
            "ridge_alpha": self.ridge_alpha,
            "ratio_threshold": self.ratio_threshold,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class MaskSet:
    """Binary perturbation matrix; row 0 is always the unperturbed instance."""

    masks: np.ndarray

    def __post_init__(self):
        masks = np.asarray(self.masks)
        if masks.ndim != 2 or masks.shape[0] < 1 or masks.shape[1] < 1:
            raise ShapeMismatchError(f"masks must be a non-empty 2-D matrix, got {masks.shape}")
        masks = masks.astype(np.uint8)
        if not np.isin(masks, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        if not (masks[0] == 1).all():
            raise ValueError("mask row 0 must be all ones")
        object.__setattr__(self, "masks", masks)

    @property
    def n_samples(self) -> int:
        return self.masks.shape[0]

    @property
    def n_segments(self) -> int:
        return self.masks.shape[1]


@dataclass(frozen=True)
class SurrogateFit:
    weights: np.ndarray
    intercept: float
    std_errors: np.ndarray
    p_values: np.ndarray
    r_squared: float
    dof: int


@dataclass(frozen=True)
class SelectedFeature:
    segment: int
    weight: float
    p_value: float


@dataclass(frozen=True)
class LimeExplanation:
    target: str | None
    target_value: float
    prediction_at_ones: float
    selected: tuple[SelectedFeature, ...]
    positive_ids: tuple[int, ...]
    negative_ids: tuple[int, ...]
    fit: SurrogateFit
    config: LimeConfig


def sample_masks(n_segments: int, config: LimeConfig) -> MaskSet:
    """Row 0 all ones, rows below i.i.d. fair coins keyed by (seed, row, col)."""
    if n_segments < 1:
        raise ConfigError(f"need at least one segment, got {n_segments}")
    if config.n_samples < n_segments + 2:
        raise ConfigError(
            f"n_samples {config.n_samples} cannot overdetermine {n_segments} "
            f"segments; need at least {n_segments + 2}"
        )
    masks = np.empty((config.n_samples, n_segments), dtype=np.uint8)
    masks[0] = 1
    masks[1:] = rng.bernoulli_grid(
        config.seed, np.arange(1, config.n_samples), np.arange(n_segments)
    )
    return MaskSet(masks=masks)


def apply_mask(spec: Spectrogram, seg_map: SegmentMap, mask: np.ndarray,
               fill: FillStrategy) -> Spectrogram:
    """Keep pixels of mask=1 segments; replace the rest per the fill strategy."""
    if spec.scale != SCALE_DB:
        raise ScaleMismatchError(f"masking operates on dB spectrograms, got '{spec.scale}'")
    if seg_map.labels.shape != spec.values.shape:
        raise ShapeMismatchError(
            f"segment map {seg_map.labels.shape} does not match spectrogram "
            f"{spec.values.shape}"
        )
    mask = np.asarray(mask)
    if mask.shape != (seg_map.segment_count,):
        raise ShapeMismatchError(
            f"mask length {mask.shape} does not match segment count "
            f"{seg_map.segment_count}"
        )
    fill = FillStrategy.coerce(fill)
    keep = mask.astype(bool)[seg_map.labels]
    if keep.all():
        return spec
    values = spec.values
    if fill is FillStrategy.SILENCE_FLOOR:
        filler = np.full_like(values, spec.config.floor_db)
    elif fill is FillStrategy.SEGMENT_MEAN:
        flat = seg_map.labels.ravel()
        sums = np.bincount(flat, weights=values.ravel(), minlength=seg_map.segment_count)
        counts = np.bincount(flat, minlength=seg_map.segment_count)
        filler = (sums / counts)[seg_map.labels]
    else:
        filler = np.full_like(values, values.mean())
    return Spectrogram(values=np.where(keep, values, filler), scale=spec.scale,
                       config=spec.config, sample_rate=spec.sample_rate)


def proximity_weights(masks: np.ndarray, kernel_width: float) -> np.ndarray:
    """exp(-d^2 / width^2) with d the cosine distance to the all-ones mask."""
    masks = np.atleast_2d(np.asarray(masks))
    n_segments = masks.shape[1]
    k = masks.sum(axis=1).astype(np.float64)
    d = np.where(k > 0, 1.0 - np.sqrt(k / n_segments), 1.0)
    return np.exp(-(d * d) / float(kernel_width) ** 2)


def proximity_weight(mask: np.ndarray, kernel_width: float) -> float:
    return float(proximity_weights(np.asarray(mask)[None, :], kernel_width)[0])


def fit_surrogate(masks: MaskSet | np.ndarray, targets: np.ndarray,
                  weights: np.ndarray, alpha: float = 0.0) -> SurrogateFit:
    """Weighted least squares with exact t-based p-values.

    The proximity weights are rescaled to trace n. At alpha 0 the standard
    errors come from the plain WLS covariance; with ridge they use the
    sandwich form, since the penalized estimator is biased.
    """
    m = masks.masks if isinstance(masks, MaskSet) else np.asarray(masks)
    y = np.asarray(targets, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    n, n_seg = m.shape
    if y.shape != (n,) or w.shape != (n,):
        raise ShapeMismatchError(
            f"targets {y.shape} / weights {w.shape} do not match {n} masks"
        )
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    if not np.all(np.isfinite(w)) or (w < 0).any() or w.sum() <= 0:
        raise ValueError("weights must be finite, non-negative, not all zero")
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    dof = n - n_seg - 1
    if dof < 1:
        raise ConfigError(
            f"{n} samples leave no residual degrees of freedom for "
            f"{n_seg} segments (need at least {n_seg + 2})"
        )

    pi = w * (n / w.sum())
    x = np.empty((n, n_seg + 1), dtype=np.float64)
    x[:, 0] = 1.0
    x[:, 1:] = m
    xt_pi = x.T * pi
    gram = xt_pi @ x
    moment = xt_pi @ y
    del xt_pi

    if alpha == 0:
        a = gram
    else:
        ridge = np.full(n_seg + 1, float(alpha))
        ridge[0] = 0.0
        a = gram + np.diag(ridge)
    if not np.all(np.isfinite(a)) or np.linalg.cond(a) > 1e12:
        raise RankDeficiencyError(
            "normal matrix is singular or near-singular; use ridge_alpha > 0 "
            "or more samples"
        )
    a_inv = np.linalg.inv(a)
    beta = a_inv @ moment
    resid = y - x @ beta
    wrss = float(resid @ (pi * resid))
    sigma2 = max(wrss, 0.0) / dof

    if alpha == 0:
        cov_diag = np.diag(a_inv) * sigma2
    else:
        cov_diag = np.einsum("ij,jk,ki->i", a_inv, gram, a_inv) * sigma2
    cov_diag = np.maximum(cov_diag, 0.0)
    se = np.sqrt(cov_diag)

    coef = beta[1:]
    coef_se = se[1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_stats = np.abs(coef) / coef_se
    p = np.where(
        coef_se > 0,
        2.0 * stats.t.sf(np.where(coef_se > 0, t_stats, 0.0), dof),
        np.where(coef == 0.0, 1.0, 0.0),
    )

    y_mean = float((pi * y).sum() / pi.sum())
    tss = float(pi @ (y - y_mean) ** 2)
    r_squared = 0.0 if tss <= 0 else 1.0 - wrss / tss

    return SurrogateFit(
        weights=coef,
        intercept=float(beta[0]),
        std_errors=coef_se,
        p_values=np.clip(p, 0.0, 1.0),
        r_squared=float(r_squared),
        dof=dof,
    )


def select_features(fit: SurrogateFit, ratio_threshold: float) -> tuple[SelectedFeature, ...]:
    """Keep segments with p/|w| at or below the threshold, heaviest first.

    A coefficient counts as nonzero only when it clears machine noise at the
    fit's own scale; on an interpolating fit the residual variance collapses
    and float-level coefficients would otherwise draw arbitrary t statistics.
    """
    if not ratio_threshold > 0:
        raise ConfigError(f"ratio_threshold must be positive, got {ratio_threshold}")
    scale = max(float(np.max(np.abs(fit.weights), initial=0.0)), abs(fit.intercept))
    tol = 1e-9 * scale
    out = []
    for j, (w, p) in enumerate(zip(fit.weights, fit.p_values)):
        if abs(w) > tol and p / abs(w) <= ratio_threshold:
            out.append(SelectedFeature(segment=j, weight=float(w), p_value=float(p)))
    out.sort(key=lambda s: (-abs(s.weight), s.segment))
    return tuple(out)


def explain_instance(
    predict: Callable[[Sequence[Spectrogram]], Sequence[float]],
    spec: Spectrogram,
    seg_map: SegmentMap,
    config: LimeConfig,
    *,
    target: str | None = None,
    batch_size: int = 256,
    workers: int = 1,
) -> LimeExplanation:
    """Full attribution of one scalar output over one instance.

    `predict` receives a list of spectrograms and must return one finite
    real per entry (the chosen output dimension of the black box).
    """
    if batch_size < 1 or workers < 1:
        raise ConfigError("batch_size and workers must be >= 1")
    mask_set = sample_masks(seg_map.segment_count, config)
    targets = _predict_masked(predict, spec, seg_map, mask_set.masks,
                              config.fill, batch_size, workers)
    weights = proximity_weights(mask_set.masks, config.kernel_width)
    fit = fit_surrogate(mask_set, targets, weights, config.ridge_alpha)
    selected = select_features(fit, config.ratio_threshold)
    positive = tuple(sorted(s.segment for s in selected if s.weight > 0))
    negative = tuple(sorted(s.segment for s in selected if s.weight < 0))
    at_ones = float(targets[0])
    return LimeExplanation(
        target=target,
        target_value=at_ones,
        prediction_at_ones=at_ones,
        selected=selected,
        positive_ids=positive,
        negative_ids=negative,
        fit=fit,
        config=config,
    )


def _predict_masked(predict, spec, seg_map, masks, fill, batch_size, workers):
    n = masks.shape[0]
    bounds = [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]

    def eval_chunk(bound):
        start, stop = bound
        batch = [apply_mask(spec, seg_map, masks[i], fill) for i in range(start, stop)]
        try:
            values = predict(batch)
        except PredictionValueError as exc:
            index = start + exc.index if exc.index is not None else None
            raise PredictionValueError(
                f"while predicting mask rows {start}..{stop - 1}: {exc}",
                index=index,
            ) from exc
        except MidlimeError as exc:
            raise type(exc)(
                f"while predicting mask rows {start}..{stop - 1}: {exc}"
            ) from exc
        arr = np.asarray(list(values), dtype=np.float64)
        if arr.shape != (stop - start,):
            raise TransportError(
                f"predictor returned {arr.shape} values for mask rows "
                f"{start}..{stop - 1} (expected {stop - start})"
            )
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            raise PredictionValueError(
                f"non-finite prediction at mask row {start + bad[0]}",
                index=int(start + bad[0]),
            )
        return arr

    if workers == 1 or len(bounds) == 1:
        parts = [eval_chunk(b) for b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(eval_chunk, bounds))
    return np.concatenate(parts)


@dataclass(frozen=True)
class StabilityScore:
    mean_pairwise_jaccard: float
    per_pair: tuple[tuple[int, int, float], ...]


def jaccard(a, b) -> float:
    """Set overlap; two empty sets count as identical."""
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def stability_score(explanations: Sequence[LimeExplanation]) -> StabilityScore:
    """Mean pairwise Jaccard of the selected-segment sets."""
    if len(explanations) < 2:
        raise ConfigError(f"need at least 2 explanations, got {len(explanations)}")
    targets = {e.target for e in explanations}
    if len(targets) > 1:
        raise ComparabilityError(
            f"explanations target different outputs: {sorted(map(str, targets))}"
        )
    sets = [frozenset(s.segment for s in e.selected) for e in explanations]
    pairs = []
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            pairs.append((i, j, jaccard(sets[i], sets[j])))
    mean = sum(p[2] for p in pairs) / len(pairs)
    return StabilityScore(mean_pairwise_jaccard=mean, per_pair=tuple(pairs))


def explanation_to_json(expl: LimeExplanation) -> dict:
    return {
        "target": expl.target,
        "target_value": expl.target_value,
        "prediction_at_ones": expl.prediction_at_ones,
        "selected": [
            {"segment": s.segment, "weight": s.weight, "p_value": s.p_value}
            for s in expl.selected
        ],
        "positive_ids": list(expl.positive_ids),
        "negative_ids": list(expl.negative_ids),
        "r_squared": expl.fit.r_squared,
        "config_echo": expl.config.echo(),
    }


def write_explanation_json(expl: LimeExplanation, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(explanation_to_json(expl), fh, indent=2)
        fh.write("\n")


def write_fit_csv(fit: SurrogateFit, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("segment,weight,std_error,p_value\n")
        for j in range(len(fit.weights)):
            fh.write(f"{j},{float(fit.weights[j])!r},"
                     f"{float(fit.std_errors[j])!r},{float(fit.p_values[j])!r}\n")
