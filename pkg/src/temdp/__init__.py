"""Metric differential privacy for words: the truncated exponential mechanism (TEM),
the Madlib noise baseline, a precomputed truncation index and exact verifiers."""

from .embeddings import (
    EmbeddingFormatError,
    EmbeddingMatrix,
    MetricSpace,
    Vocabulary,
    distance,
    dump_embeddings,
    load_embeddings,
    load_space,
)
from .index import (
    CandidateSet,
    FingerprintMismatchError,
    IndexFormatError,
    TruncatedStreamError,
    TruncationIndex,
    build_index,
    load_index,
    nearest_neighbor,
    nearest_neighbors,
    range_query,
    save_index,
)
from .mechanisms import (
    TEM,
    Distribution,
    Madlib,
    MechanismConfig,
    OOVError,
    PrivacyParams,
    calibrate_gamma,
    madlib_privatize_word,
    privatize_document,
    privatize_documents,
    random_source,
    sample_exp_ball_noise,
    sample_gumbel,
    tem_exact_distribution,
    tem_privatize_word,
    tem_privatize_words,
)
from . import verify

__version__ = "0.1.0"
