"""Scalable graph anomaly detection with dual-pass Chebyshev filters,
Rayleigh-Quotient-guided context, and adaptive frequency fusion."""

from .chebyshev import (
    ChebBasisCache,
    build_cheb_basis,
    dense_spectral_oracle,
    read_cache,
    write_cache,
)
from .context import (
    ContextCache,
    build_context_cache,
    max_rq_subgraph,
    rayleigh_quotient,
    read_context_cache,
    write_context_cache,
)
from .csbm import (
    CsbmParams,
    SeparatorSpec,
    generate_csbm,
    random_walk_filter,
    separability_experiment,
    theoretical_separator,
)
from .errors import CacheFormatError, ConfigError, DatasetFormatError, SagadError
from .graph import (
    GraphDataset,
    HomophilyReport,
    SparseAdjacency,
    SplitSet,
    class_homophily,
    edge_homophily,
    homophily_report,
    load_dataset,
    node_homophily,
    normalized_adjacency,
    write_dataset,
)
from .metrics import (
    EvalReport,
    QuartileReport,
    auroc,
    average_precision,
    evaluate,
    quartile_report,
    rec_at_k,
)
from .model import (
    FilterParams,
    MlpParams,
    ModelConfig,
    ModelState,
    cheb_weights,
    dual_embed,
    filter_response,
    forward,
    fuse,
    fusion_coefficients,
    init_model,
    load_checkpoint,
    reparam_filter_values,
    save_checkpoint,
)
from .training import (
    OptimizerState,
    TrainConfig,
    adam_step,
    backward_gradients,
    bce_loss,
    compute_beta,
    fpg_loss,
    score_all,
    total_loss,
    train,
)

__version__ = "0.1.0"
