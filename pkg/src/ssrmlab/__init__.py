"""Semi-supervised reward modeling over pairwise preference data."""

from ssrmlab.backend import (
    FeaturizerSpec,
    ModelSnapshot,
    TrainConfig,
    featurize,
    fit,
    load_snapshot,
    loss_gradient,
    predict,
    save_snapshot,
    srm_loss,
)
from ssrmlab.evaluation import calibration, confidence_histogram, evaluate
from ssrmlab.prefdata import (
    Label,
    LabeledExample,
    PreferenceDataset,
    PreferenceTriplet,
    SplitSpec,
    format_template,
    load_jsonl,
    randomize_order,
    split,
)
from ssrmlab.ssrm import SsrmConfig, build_iteration_dataset, confidence_filter, pseudo_label, run_ssrm

__version__ = "0.1.0"
