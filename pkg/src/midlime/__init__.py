"""Explanations for black-box music-emotion predictors.

Two layers of attribution: per-segment spectrogram attribution of a
mid-level output (perturbation-based, with p-value driven feature
selection), and exact decomposition of emotion outputs into per-mid-feature
effects through the model's linear head. Includes audible renderings of the
explanatory regions via phase-retrieval resynthesis.
"""

__version__ = "0.1.0"

from .audio import AudioClip, decode_wav, encode_wav
from .dsp import (
    SCALE_DB,
    SCALE_MAGNITUDE,
    ComplexSpectrogram,
    Spectrogram,
    StftConfig,
    db_to_magnitude,
    griffin_lim,
    griffin_lim_trace,
    istft,
    magnitude_db,
    stft,
)
from .effects import (
    EffectsMatrix,
    global_effects,
    head_discrepancy,
    instance_effects,
    top_effect,
)
from .errors import MidlimeError
from .lime import (
    FillStrategy,
    LimeConfig,
    LimeExplanation,
    MaskSet,
    SurrogateFit,
    apply_mask,
    explain_instance,
    fit_surrogate,
    proximity_weight,
    sample_masks,
    select_features,
    stability_score,
)
from .predictor import (
    BuiltinPredictor,
    ConstantPredictor,
    ExternalPredictor,
    LinearHead,
    PredictorCapabilities,
    external_handshake,
)
from .pipeline import (
    ExplanationBundle,
    RunConfig,
    run_explanation,
    run_stability,
    synthesize_modified,
)
from .segmentation import (
    SegmentationConfig,
    SegmentMap,
    felzenszwalb_segment,
    gaussian_smooth,
    segment_stats,
)

__all__ = [
    "__version__",
    "AudioClip", "decode_wav", "encode_wav",
    "SCALE_DB", "SCALE_MAGNITUDE", "ComplexSpectrogram", "Spectrogram",
    "StftConfig", "db_to_magnitude", "griffin_lim", "griffin_lim_trace",
    "istft", "magnitude_db", "stft",
    "EffectsMatrix", "global_effects", "head_discrepancy", "instance_effects",
    "top_effect",
    "MidlimeError",
    "FillStrategy", "LimeConfig", "LimeExplanation", "MaskSet", "SurrogateFit",
    "apply_mask", "explain_instance", "fit_surrogate", "proximity_weight",
    "sample_masks", "select_features", "stability_score",
    "BuiltinPredictor", "ConstantPredictor", "ExternalPredictor", "LinearHead",
    "PredictorCapabilities", "external_handshake",
    "ExplanationBundle", "RunConfig", "run_explanation", "run_stability",
    "synthesize_modified",
    "SegmentationConfig", "SegmentMap", "felzenszwalb_segment",
    "gaussian_smooth", "segment_stats",
]
