"""End-to-end run: audio in, explanation bundle out.

Stage order: decode audio, STFT + dB view, full-clip prediction, effects
decomposition, target resolution, segmentation, per-segment attribution,
masked spectrogram rendering, audio resynthesis, bundle writing. Every
computation happens before the first byte is written, and a failure after
writing started removes what was written, so an output directory is either
complete or absent.
"""

from __future__ import annotations

import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .audio import AudioClip, decode_wav, encode_wav
from .dsp import (
    SCALE_MAGNITUDE,
    ComplexSpectrogram,
    Spectrogram,
    StftConfig,
    griffin_lim,
    magnitude_db,
    stft,
)
from .effects import (
    EffectsMatrix,
    head_discrepancy,
    instance_effects,
    top_effect,
    write_effects_csv,
)
from .errors import (
    AudioIOError,
    ConfigError,
    MidlimeError,
    ShapeMismatchError,
    StageError,
)
from .lime import (
    FillStrategy,
    LimeConfig,
    LimeExplanation,
    apply_mask,
    explain_instance,
    stability_score,
    write_explanation_json,
)
from .predictor import (
    BuiltinPredictor,
    ConstantPredictor,
    ExternalPredictor,
    PredictorCapabilities,
)
from .segmentation import (
    SegmentationConfig,
    SegmentMap,
    felzenszwalb_segment,
    write_segment_csv,
)

log = logging.getLogger("midlime")

BUNDLE_FILES = {
    "prediction": "prediction.json",
    "effects": "effects.csv",
    "explanation": "explanation.json",
    "segments": "segments.csv",
    "pos_mask": "pos_mask.csv",
    "neg_mask": "neg_mask.csv",
    "masked_pos": "masked_pos.wav",
    "masked_neg": "masked_neg.wav",
    "modified_add": "modified_add.wav",
    "modified_sub": "modified_sub.wav",
    "report": "report.json",
}

MODE_MASK_ONLY = "mask-only"
MODE_ADD = "add"
MODE_SUBTRACT = "subtract"


@dataclass(frozen=True)
class RunConfig:
    audio_path: str
    out_dir: str
    predictor: str = "builtin"
    target: str = "auto"
    lime: LimeConfig = field(default_factory=LimeConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    gl_iterations: int = 32
    synth_gain: float = 1.0
    workers: int = 1
    batch_size: int = 256
    timeout: float = 30.0
    predictor_seed: int = 0

    def __post_init__(self):
        if self.gl_iterations < 0:
            raise ConfigError(f"gl_iterations must be >= 0, got {self.gl_iterations}")
        if not self.synth_gain >= 0:
            raise ConfigError(f"synth_gain must be >= 0, got {self.synth_gain}")
        if self.workers < 1 or self.batch_size < 1:
            raise ConfigError("workers and batch_size must be >= 1")


@dataclass(frozen=True)
class ExplanationBundle:
    out_dir: Path
    files: dict
    report: dict
    explanation: LimeExplanation


@contextmanager
def _stage(name: str, timings: dict):
    started = time.perf_counter()
    log.info("stage %s: start", name)
    try:
        yield
    except StageError:
        raise
    except (MidlimeError, OSError) as exc:
        raise StageError(name, exc) from exc
    finally:
        timings[name] = round(time.perf_counter() - started, 6)
        log.info("stage %s: %.3fs", name, timings[name])


def make_predictor(spec_string: str, *, seed: int = 0, timeout: float = 30.0,
                   batch_size: int = 256):
    """Predictor handle + capabilities from a CLI-style predictor string."""
    if spec_string == "builtin":
        handle = BuiltinPredictor(seed)
        return handle, handle.capabilities()
    if spec_string == "constant":
        handle = ConstantPredictor()
        return handle, handle.capabilities()
    if spec_string.startswith("exec:"):
        command = spec_string[len("exec:"):]
        handle = ExternalPredictor(command, timeout=timeout, batch_size=batch_size)
        return handle, handle.start()
    raise ConfigError(
        f"unknown predictor {spec_string!r}; expected builtin, constant, or exec:CMD"
    )


def _resolve_target(target: str, caps: PredictorCapabilities,
                    effects: EffectsMatrix | None,
                    emotion: np.ndarray) -> dict:
    """Map the target string to a concrete output dimension."""
    if target == "auto":
        if effects is None:
            raise ConfigError(
                "target=auto needs a predictor that exposes its linear head; "
                "pass an explicit mid:NAME target instead"
            )
        emotion_index = int(np.argmax(emotion))
        mid_index, effect_value = top_effect(effects, emotion_index)
        return {
            "kind": "mid",
            "index": mid_index,
            "name": caps.mid_names[mid_index],
            "auto": {
                "emotion_index": emotion_index,
                "emotion_name": caps.emotion_names[emotion_index],
                "effect_value": effect_value,
            },
        }
    for kind, names in (("mid", caps.mid_names), ("emotion", caps.emotion_names)):
        prefix = kind + ":"
        if target.startswith(prefix):
            key = target[len(prefix):]
            if key in names:
                index = names.index(key)
            else:
                try:
                    index = int(key)
                except ValueError:
                    raise ConfigError(
                        f"{kind} target {key!r} is neither a known name "
                        f"{list(names)} nor an index"
                    ) from None
                if not 0 <= index < len(names):
                    raise ConfigError(
                        f"{kind} index {index} out of range 0..{len(names) - 1}"
                    )
            return {"kind": kind, "index": index, "name": names[index], "auto": None}
    raise ConfigError(
        f"cannot parse target {target!r}; expected auto, mid:NAME, or mid:INDEX"
    )


def synthesize_modified(
    original: ComplexSpectrogram,
    explanation: LimeExplanation,
    seg_map: SegmentMap,
    mode: str,
    gain: float = 1.0,
    *,
    iterations: int = 32,
    segment_ids: Sequence[int] | None = None,
) -> AudioClip:
    """Magnitude-domain edit of the selected segments, inverted to audio.

    mask-only keeps the segments and zeroes the rest; add scales them up by
    (1 + gain); subtract scales them down, clamped at zero. By default
    mask-only and add act on the positive segment set and subtract on the
    negative one; segment_ids overrides the set. Inversion runs with the
    original phase as the starting point.
    """
    if not gain >= 0:
        raise ConfigError(f"gain must be >= 0, got {gain}")
    if iterations < 0:
        raise ConfigError(f"iterations must be >= 0, got {iterations}")
    if mode not in (MODE_MASK_ONLY, MODE_ADD, MODE_SUBTRACT):
        raise ConfigError(f"unknown synthesis mode {mode!r}")
    if seg_map.labels.shape != original.values.shape:
        raise ShapeMismatchError(
            f"segment map {seg_map.labels.shape} does not match "
            f"spectrogram {original.values.shape}"
        )
    if segment_ids is None:
        segment_ids = (explanation.negative_ids if mode == MODE_SUBTRACT
                       else explanation.positive_ids)
    ids = np.asarray(sorted(set(int(i) for i in segment_ids)), dtype=np.int64)
    selected = (np.isin(seg_map.labels, ids) if ids.size
                else np.zeros(seg_map.labels.shape, dtype=bool))
    magnitude = np.abs(original.values)
    if mode == MODE_MASK_ONLY:
        edited = np.where(selected, magnitude, 0.0)
    elif mode == MODE_ADD:
        edited = magnitude + gain * magnitude * selected
    else:
        edited = np.maximum(magnitude - gain * magnitude * selected, 0.0)
    target = Spectrogram(values=edited, scale=SCALE_MAGNITUDE,
                         config=original.config, sample_rate=original.sample_rate)
    return griffin_lim(target, original.config, iterations, init_phase=original)


def _prepare(config: RunConfig, timings: dict):
    """Shared front half: decode, analyze, predict, resolve target, segment."""
    with _stage("audio", timings):
        try:
            clip = decode_wav(config.audio_path)
        except FileNotFoundError as exc:
            raise AudioIOError(f"cannot read {config.audio_path}: {exc}") from exc
    with _stage("analysis", timings):
        cspec = stft(clip, config.stft)
        dbspec = magnitude_db(cspec)
    predictor, caps = None, None
    with _stage("predictor", timings):
        predictor, caps = make_predictor(
            config.predictor, seed=config.predictor_seed,
            timeout=config.timeout, batch_size=config.batch_size,
        )
    try:
        with _stage("prediction", timings):
            (mid, emotion), = predictor.predict([dbspec])
        effects = None
        discrepancy = None
        if caps.linear_head is not None:
            with _stage("effects", timings):
                effects = instance_effects(mid, caps.linear_head,
                                           caps.mid_names, caps.emotion_names)
                discrepancy = head_discrepancy(effects, emotion)
        with _stage("target", timings):
            target_info = _resolve_target(config.target, caps, effects, emotion)
        with _stage("segmentation", timings):
            seg_map = felzenszwalb_segment(dbspec, config.segmentation)
        log.info("segmented into %d regions", seg_map.segment_count)
    except BaseException:
        predictor.close()
        raise
    return clip, cspec, dbspec, predictor, caps, mid, emotion, effects, discrepancy, target_info, seg_map


def _target_fn(predictor, target_info):
    kind, index = target_info["kind"], target_info["index"]

    def fn(batch):
        results = predictor.predict(batch)
        position = 0 if kind == "mid" else 1
        return [float(pair[position][index]) for pair in results]

    return fn


def _lime_workers(config: RunConfig) -> int:
    if config.workers > 1 and config.predictor.startswith("exec:"):
        log.warning("external predictor gateway is serial; ignoring workers=%d",
                    config.workers)
        return 1
    return config.workers


def run_explanation(config: RunConfig) -> ExplanationBundle:
    """The whole workflow; returns the bundle and leaves it on disk."""
    timings: dict = {}
    started = time.perf_counter()
    (clip, cspec, dbspec, predictor, caps, mid, emotion, effects, discrepancy,
     target_info, seg_map) = _prepare(config, timings)
    predictor_exit = None
    try:
        with _stage("lime", timings):
            explanation = explain_instance(
                _target_fn(predictor, target_info), dbspec, seg_map, config.lime,
                target=f"{target_info['kind']}:{target_info['name']}",
                batch_size=config.batch_size, workers=_lime_workers(config),
            )
        log.info("selected %d segments (%d positive, %d negative)",
                 len(explanation.selected), len(explanation.positive_ids),
                 len(explanation.negative_ids))
        with _stage("render", timings):
            pos_spec = _indicator_masked(dbspec, seg_map, explanation.positive_ids)
            neg_spec = _indicator_masked(dbspec, seg_map, explanation.negative_ids)
        with _stage("synthesis", timings):
            clips = {
                "masked_pos": synthesize_modified(
                    cspec, explanation, seg_map, MODE_MASK_ONLY,
                    iterations=config.gl_iterations,
                    segment_ids=explanation.positive_ids),
                "masked_neg": synthesize_modified(
                    cspec, explanation, seg_map, MODE_MASK_ONLY,
                    iterations=config.gl_iterations,
                    segment_ids=explanation.negative_ids),
                "modified_add": synthesize_modified(
                    cspec, explanation, seg_map, MODE_ADD, config.synth_gain,
                    iterations=config.gl_iterations),
                "modified_sub": synthesize_modified(
                    cspec, explanation, seg_map, MODE_SUBTRACT, config.synth_gain,
                    iterations=config.gl_iterations),
            }
    finally:
        predictor_exit = predictor.close()

    report = {
        "version": __version__,
        "audio": {
            "path": str(config.audio_path),
            "sample_rate": clip.sample_rate,
            "samples": len(clip.samples),
            "duration_s": round(clip.duration, 6),
        },
        "config": {
            "predictor": config.predictor,
            "predictor_seed": config.predictor_seed,
            "target_requested": config.target,
            "stft": {
                "frame_size": config.stft.frame_size,
                "hop_size": config.stft.hop_size,
                "window": config.stft.window,
                "floor_db": config.stft.floor_db,
            },
            "segmentation": {
                "scale": config.segmentation.scale,
                "min_size": config.segmentation.min_size,
                "sigma": config.segmentation.sigma,
            },
            "lime": config.lime.echo(),
            "gl_iterations": config.gl_iterations,
            "synth_gain": config.synth_gain,
            "workers": config.workers,
            "batch_size": config.batch_size,
            "timeout": config.timeout,
        },
        "predictor": {
            "mid_names": list(caps.mid_names),
            "emotion_names": list(caps.emotion_names),
            "has_linear_head": caps.linear_head is not None,
            "exit_code": predictor_exit,
        },
        "target": target_info,
        "prediction": {
            "mid": [float(v) for v in mid],
            "emotion": [float(v) for v in emotion],
        },
        "linear_head_discrepancy": (
            [float(v) for v in discrepancy] if discrepancy is not None else None
        ),
        "spectrogram": {"bins": dbspec.shape[0], "frames": dbspec.shape[1]},
        "segments": {"count": seg_map.segment_count},
        "selected": {
            "total": len(explanation.selected),
            "positive": len(explanation.positive_ids),
            "negative": len(explanation.negative_ids),
        },
        "files": {k: v for k, v in BUNDLE_FILES.items()
                  if k != "effects" or effects is not None},
    }

    out_dir = Path(config.out_dir)
    created_dir = not out_dir.exists()
    written: list[Path] = []
    try:
        with _stage("write", timings):
            out_dir.mkdir(parents=True, exist_ok=True)

            def path_of(key: str) -> Path:
                p = out_dir / BUNDLE_FILES[key]
                written.append(p)
                return p

            _write_json(path_of("prediction"), {
                "mid_names": list(caps.mid_names),
                "mid": [float(v) for v in mid],
                "emotion_names": list(caps.emotion_names),
                "emotion": [float(v) for v in emotion],
            })
            if effects is not None:
                write_effects_csv(effects, caps.linear_head, path_of("effects"))
            write_explanation_json(explanation, path_of("explanation"))
            write_segment_csv(seg_map, path_of("segments"))
            np.savetxt(path_of("pos_mask"), pos_spec.values, fmt="%.17g", delimiter=",")
            np.savetxt(path_of("neg_mask"), neg_spec.values, fmt="%.17g", delimiter=",")
            for key in ("masked_pos", "masked_neg", "modified_add", "modified_sub"):
                encode_wav(clips[key], path_of(key))
            report["timings_s"] = {**timings,
                                   "total": round(time.perf_counter() - started, 6)}
            _write_json(out_dir / BUNDLE_FILES["report"], report)
            written.append(out_dir / BUNDLE_FILES["report"])
    except BaseException:
        for p in written:
            try:
                p.unlink()
            except OSError:
                pass
        if created_dir:
            try:
                out_dir.rmdir()
            except OSError:
                pass
        raise

    files = {k: out_dir / v for k, v in BUNDLE_FILES.items()
             if k != "effects" or effects is not None}
    return ExplanationBundle(out_dir=out_dir, files=files, report=report,
                             explanation=explanation)


def _indicator_masked(dbspec: Spectrogram, seg_map: SegmentMap,
                      ids: Sequence[int]) -> Spectrogram:
    mask = np.zeros(seg_map.segment_count, dtype=np.uint8)
    for i in ids:
        mask[i] = 1
    return apply_mask(dbspec, seg_map, mask, FillStrategy.SILENCE_FLOOR)


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def run_stability(config: RunConfig, seeds: Sequence[int],
                  sample_counts: Sequence[int]) -> dict:
    """Re-run the attribution per (seed, sample count); write Jaccard tables.

    Returns {sample_count: {"score": StabilityScore, "selected_counts": [...]}}
    and writes stability.csv (pairwise) plus stability_summary.csv.
    """
    seeds = [int(s) for s in seeds]
    sample_counts = [int(c) for c in sample_counts]
    if len(seeds) < 2:
        raise ConfigError(f"stability needs at least 2 seeds, got {len(seeds)}")
    if not sample_counts:
        raise ConfigError("stability needs at least one sample count")

    timings: dict = {}
    (clip, cspec, dbspec, predictor, caps, mid, emotion, effects, discrepancy,
     target_info, seg_map) = _prepare(config, timings)
    results: dict = {}
    try:
        fn = _target_fn(predictor, target_info)
        workers = _lime_workers(config)
        for count in sample_counts:
            explanations = []
            for seed in seeds:
                lime_cfg = replace(config.lime, seed=seed, n_samples=count)
                with _stage(f"lime[n={count},seed={seed}]", timings):
                    explanations.append(explain_instance(
                        fn, dbspec, seg_map, lime_cfg,
                        target=f"{target_info['kind']}:{target_info['name']}",
                        batch_size=config.batch_size, workers=workers,
                    ))
            results[count] = {
                "score": stability_score(explanations),
                "selected_counts": [len(e.selected) for e in explanations],
            }
    finally:
        predictor.close()

    out_dir = Path(config.out_dir)
    created_dir = not out_dir.exists()
    written: list[Path] = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        pairwise = out_dir / "stability.csv"
        written.append(pairwise)
        with open(pairwise, "w", encoding="utf-8") as fh:
            fh.write("sample_count,seed_i,seed_j,jaccard\n")
            for count in sample_counts:
                for i, j, value in results[count]["score"].per_pair:
                    fh.write(f"{count},{seeds[i]},{seeds[j]},{value!r}\n")
        summary = out_dir / "stability_summary.csv"
        written.append(summary)
        with open(summary, "w", encoding="utf-8") as fh:
            fh.write("sample_count,mean_pairwise_jaccard,seeds,selected_counts\n")
            for count in sample_counts:
                score = results[count]["score"]
                counts = " ".join(str(c) for c in results[count]["selected_counts"])
                fh.write(f"{count},{score.mean_pairwise_jaccard!r},"
                         f"{' '.join(map(str, seeds))},{counts}\n")
    except BaseException:
        for p in written:
            try:
                p.unlink()
            except OSError:
                pass
        if created_dir:
            try:
                out_dir.rmdir()
            except OSError:
                pass
        raise
    return results
