"""Space-filling-curve block partitioning, dynamic block-sparse attention,
and a progressive-resolution flow sampler, with the matching analyzers."""

from .analyze import (
    FlopsReport,
    OverheadReport,
    PartitionStrategy,
    SparsityReport,
    attention_flops,
    effective_sparsity,
    partition_overhead,
)
from .attention import (
    AmplifierBias,
    AttentionInputs,
    block_mask_logit_bias,
    carve_attention,
    compute_beta,
    dense_attention,
)
from .errors import ContractError, DomainError, ParseError, ShapeError, SizeError
from .masks import (
    BlockMask,
    PooledBlocks,
    SelectionParams,
    block_pool,
    build_block_mask,
    importance_mask,
    relevance,
    union_mask,
)
from .partition import BlockLayout, StaticMasks, adjacency_mask, build_layout, condition_mask
from .pipeline import (
    PipelineResult,
    SigmaSchedule,
    StageConfig,
    StagePlan,
    StepContext,
    denoise_step,
    gaussian_analytic_denoiser,
    gaussian_posterior_mean,
    plan_from_dict,
    plan_to_dict,
    predict_clean,
    run_pipeline,
    shifted_sigmas,
    skip_schedule,
    stage_transition,
    toy_transformer_denoiser,
    upsample_area_3d,
)
from .sfc import (
    GridDims,
    Permutation,
    apply_permutation,
    build_curve,
    invert_permutation,
    padded_token_count,
)
from .tensorio import read_mask, read_tensor, write_mask, write_tensor

__version__ = "0.1.0"
