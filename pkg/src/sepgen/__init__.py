"""Separation-before-generation: separate multi-source audio, align the
separations with text labels in a shared embedding space, and condition a
latent-diffusion image generator on the separated components."""

from .config import PipelineConfig, load_config, toy_config
from .dsp import Waveform, Spectrogram, load_audio, stft, istft, make_mom
from .losses import (
    Bipartition,
    LossWeights,
    si_sdr_loss,
    reconstruction_loss,
    spearman_rank_loss,
    spearman_rank_loss_exact,
    soft_assign,
    contrastive_loss,
    stage1_loss,
    schedule_weights,
)
from .embedding import (
    Embedder,
    ToyEmbedder,
    build_embedder,
    make_label_phrases,
    embed_separations,
    similarity_vector,
)
from .separator import MaskUNet, forward_masks, separate, load_separator, save_separator
from .adapter import (
    AudioConditionedGenerator,
    ConditionProjector,
    DecoupledCrossAttention,
    NoiseSchedule,
    classifier_free_eps,
    load_generator,
    save_generator,
)
from .metrics import (
    FeatureSet,
    MetricReport,
    fid,
    kid,
    clip_fid,
    pairwise_similarity,
    semantic_spread,
)
from .corpus import SyntheticCorpusSpec, default_corpus_spec, generate_corpus, load_manifest

__version__ = "0.1.0"
