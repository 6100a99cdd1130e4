"""Layer masking for CNNs: run a network on only the unmasked part of its
input, plus baseline masking strategies, segmentation, LIME, and the
evaluation harness around them."""

from .errors import FileFormatError, GraphError, NumericalError, RankDeficiencyError
from .graph import (ModelGraph, LayerSpec, forward, graph_from_dict, load_graph,
                    load_weights, read_weights_file, save_weights)
from .masking import (Mask, MaskedActivation, MaskingConfig, full_mask,
                      mask_propagation_oracle, masked_add, masked_elementwise,
                      masked_forward, masked_spatial, neighbor_pad, neighbor_pad_steps)
from .perturb import (IMAGENET_NORM, Normalization, Strategy, apply_pixel_strategy,
                      evaluate, normalize, parse_strategy, strategy_label)
from .segmentation import (SegmentMap, grid_patches, mask_dropping_segments,
                           quickshift, rgb_to_lab, segment_saliency, slic)
from .lime import (Explanation, GroundTruthExplanation, alignment_score, ground_truth,
                   lime_explain, render_overlay, win_rate)
from .evaluation import (ABLATION_MODES, FRACTION_GRID, AblationPoint, DatasetItem,
                         DiagnosticsResult, Hierarchy, ablation_curve, ablation_order,
                         auc, class_entropy, collapse_test, cosine, linearity_test,
                         load_manifest, magnitude_test, taxonomy_similarity,
                         unchanged_fraction)
from . import tensor

__version__ = "0.1.0"
