"""Multi-modal image fusion CNNs (feature, classifier and decision level) for patch segmentation."""

from fusenet.data import (
    FoldPlan, PatchSample, SubjectVolume, balanced_sample, enumerate_patches, extract_patch,
    label_patch, make_folds, normalize_subject,
)
from fusenet.evaluate import (
    FoldMetrics, Heatmap, Labelmap, fold_statistics, majority_vote, pixel_accuracy, predict_heatmap,
    predict_labelmap, run_crossval, threshold,
)
from fusenet.nets import (
    BaseConfig, FusionScheme, TrainedNetwork, build_single, build_type1, build_type2, build_type3,
    param_count, train,
)
from fusenet.phantom import PhantomConfig, generate_cohort, generate_subject

__version__ = "0.1.0"
