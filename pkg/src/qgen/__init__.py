"""Synthetic query generation pipeline for retrieval training data."""

__version__ = "0.1.0"

from .bm25 import Bm25Index, bm25_retrieve_topk, bm25_score, bm25_softmax_score, build_bm25_index
from .corpus import (
    Document,
    Qrel,
    Query,
    RelevantPair,
    load_corpus,
    load_qrels,
    load_queries,
    sample_relevant_pairs,
)
from .cpo import (
    CpoParams,
    PreferenceTriplet,
    TripletCandidate,
    build_triplets,
    cpo_loss_grad,
    cpo_nll_loss,
    cpo_prefer_loss,
    cpo_total_loss,
    read_triplets,
    select_preference,
    write_triplets,
)
from .embeddings import CachingEmbedder, HashingEmbedder, HttpEmbedder, embed
from .errors import BackendError, ConfigError, DataFormatError, QgenError
from .evaluation import (
    MetricReport,
    ablate_filter,
    export_training_file,
    first_stage_retrieve,
    ndcg_at_k,
    recall_at_k,
    rerank,
)
from .filters import (
    FilterConfig,
    filter_consistency,
    filter_logprob_topk,
    filter_margin,
    filter_reranker_topk,
    subsample,
)
from .genclient import (
    Generation,
    GenerationParams,
    HttpBackend,
    MockBackend,
    generate,
    generate_batch,
)
from .prompts import (
    CotProfile,
    FewshotExample,
    Prompt,
    PromptTemplate,
    build_cot_prompt,
    build_prompt,
    build_prompts_parallel,
    load_template,
    sample_fewshot_examples,
)
from .scoring import (
    HttpPointwiseScorer,
    LocalCombinedScorer,
    ScoredQuery,
    combined_score,
    enc_score,
    mean_logprob,
    score_generations,
)
from .trecrun import Run, RunEntry, read_run, write_run
