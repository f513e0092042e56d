"""corpus-sieve: score, review, filter, and evaluate image-caption corpora."""

from .annotations import Annotation, AnnotationStore, export_sft
from .errors import ConfigError, CorpusSieveError
from .filtering import BucketSpec, SplitManifest, apply_threshold, bucketize, build_splits, sample_random
from .gateway import PromptPayload, Rubric, build_score_prompt, default_rubric, mock_score, parse_judge_output, parse_scorer_output
from .manifest import Manifest, PairRecord, dedupe, parse_manifest, write_manifest
from .stats import (
    cosine_similarity,
    corpus_perplexity,
    mean_alignment,
    mock_embed,
    preference_rate,
    regularized_incomplete_beta,
    students_t_two_sample,
)

__version__ = "0.1.0"
