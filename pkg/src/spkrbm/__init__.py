"""Speaker-subspace GRBM toolkit.

A Gaussian-Binary RBM whose hidden layer splits into a per-speaker
shared factor and per-vector channel factors, with contrastive-
divergence maximum-likelihood training, four verification scoring
rules, PLDA, and detection-cost evaluation.
"""

from .data import (
    IVectorCorpus,
    IVectorRecord,
    WhiteningTransform,
    apply_whitening,
    filter_by_duration,
    fit_whitening,
    load_corpus,
    partition_by_count,
    save_corpus,
    unit_sphere_project,
)
from .errors import NumericError, ValidationError
from .grbm import (
    GrbmParams,
    LatentState,
    LogPartition,
    SpeakerData,
    energy,
    energy_total,
    generate_speaker,
    load_grbm,
    log_joint,
    log_marginal,
    log_partition,
    posterior_channel,
    posterior_speaker,
    sample_latent,
    sample_visible,
    save_grbm,
)
from .metrics import MetricReport, build_trials, compute_metrics, export_det
from .plda import PldaParams, PldaScorer, load_plda, plda_score, plda_train, save_plda
from .scoring import (
    FusionWeights,
    ScoreFile,
    Trial,
    fuse_apply,
    fuse_train,
    project_f,
    score_cosine,
    score_cosine_normalized,
    score_llr,
    score_plda_projected,
)
from .synth import synth_corpus, synth_plda_corpus
from .train import (
    GradientAccumulator,
    TrainConfig,
    TrainReport,
    init_params,
    negative_phase_cd,
    positive_gradient,
    train,
)

__version__ = "0.1.0"
