"""Few-shot oriented object detection toolkit.

Rotated-box geometry, a FIFO proposal memory bank, the memory-bank
contrastive loss with analytic gradients, K-shot episode machinery with
Gaussian shot masking, VOC2007 AP50 evaluation, and a desk-scale trainer.
"""

__version__ = "0.1.0"

from .geometry import (
    AxisAlignedBox,
    ConvexPolygon,
    OrientedBox,
    aabb_iou,
    obb_to_hbb,
    obb_to_polygon,
    polygon_area,
    polygon_intersection,
    quad_to_obb,
    rotated_iou,
)
from .membank import MemoryBank, ProposalRecord, backward_offsets, load_bank, save_bank
from .contrastive import (
    ContrastiveBatch,
    ContrastiveConfig,
    LossBreakdown,
    TotalLossInputs,
    consistency_weight,
    contrastive_loss,
    contrastive_loss_grad,
    cross_batch_loss,
    in_batch_loss,
    l2_normalize_backward,
    step_weight,
    total_loss,
)
from .fewshot import (
    DatasetIndex,
    EpisodeSpec,
    ImageInfo,
    Instance,
    SplitSpec,
    apply_gaussian_mask,
    crop_instances,
    mask_plan,
    parse_annotations,
    sample_k_shots,
    split_dataset,
    tile_windows,
)
from .evaluation import (
    Detection,
    EvalReport,
    GroundTruth,
    average_precision_voc07,
    map_report,
    match_detections,
    precision_recall,
)
from .toytrain import (
    LrSchedule,
    SgdState,
    SyntheticConfig,
    compactness_metrics,
    encoder_backward,
    encoder_forward,
    export_embeddings,
    generate_batch,
    gradcheck,
    init_encoder,
    lr_at,
    sgd_step,
    train,
)
