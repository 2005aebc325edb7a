"""Self-supervised contrastive pretraining for semantic segmentation.

Two complementary objectives learned from unlabeled imagery: a global
branch contrasting whole-image style descriptors between augmented views,
and a local branch contrasting small matched regions located through
per-pixel provenance maps. Pretrained encoders (and optionally decoder
stages) are then fine-tuned on small labeled fractions and scored with
overall accuracy, kappa, and per-class F1.
"""

from .augment import (
    AugmentationPipeline,
    IndexLabel,
    ViewPair,
    apply_view,
    build_index_label,
    make_view_pair,
)
from .checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (
    DatasetManifest,
    RasterScene,
    SplitSpec,
    SyntheticSceneSpec,
    build_manifests,
    generate_synthetic_dataset,
    tile_raster,
)
from .finetune import FinetuneSchedule, evaluate, finetune
from .losses import ContrastiveConfig, EmbeddingBatch, cosine_similarity, nt_xent_loss
from .metrics import ConfusionMatrix, MetricReport, compute_metrics
from .network import NetworkConfig, ProjectionHead, SegmentationModel, build_model, parameter_groups
from .pretrain import (
    LocalRegionSpec,
    PretrainConfig,
    Pretrainer,
    extract_local_features,
    global_style_loss,
    local_matching_loss,
    run_pretraining,
    select_local_regions,
    style_vector,
    total_loss,
)

__version__ = "0.1.0"
