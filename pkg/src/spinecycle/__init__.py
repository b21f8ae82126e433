"""spinecycle: anatomy-constrained vertebra localization and labeling for
spine CT, built around statistical priors, a label graph with transitional
anatomy edges, and an iterative consistency cycle over pluggable
localization/classification oracles."""

from . import labels
from .grid import (VolumeGrid, boundary_voxels, connected_components, extract_crop,
                   mask_centroid_mm, mask_volume_mm3, reorient, resample_isotropic,
                   residual_mask, union_masks)
from .graph import (GraphWeights, IdentGraph, LabelPath, build_graph, dp_oracle,
                    fuse_predictions, postprocess_transitional, shortest_path)
from .priors import (AnatomyStats, Direction, GapMode, NeighborContext, ScanAnnotation,
                     accept_residual, check_gap_gaussian, check_gap_mre,
                     extreme_candidates, fit_stats, gap_candidates, predict_gap,
                     predict_volume)
from .records import (Flag, InconsistencyReport, LocalPrediction, ReportEntry,
                      SpineState, TransitionalEvent, VertebraRecord, sort_records)

__version__ = "0.1.0"
