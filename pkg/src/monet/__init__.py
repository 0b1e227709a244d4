"""Motion-feature hallucination toolkit.

Learns to predict optical-flow-style feature sequences directly from
appearance features with a bidirectional-context recurrent unit, compares
it against matched recurrent and convolutional baselines, and evaluates
two-stream classification with the hallucinated stream.  Built on an
explicit-tape reverse-mode autodiff core so structural gradient claims
(receptive fields, causality) are checkable exactly.
"""

from .cells import (CellConfig, FAMILIES, Hallucinator, MoNetParams,
                    MoNetTrace, count_params, match_params, monet_forward,
                    monet_unit)
from .classify import (LinearClassifier, Prediction, classify, ensemble,
                       fit_linear_classifier, top1_accuracy)
from .data import (FeatureRecord, SyntheticTaskSpec, generate_synthetic,
                   read_dataset, split, write_dataset)
from .tensor import Tape, Tensor, backward, finite_diff_grad, jacobian
from .training import (LossConfig, TrainConfig, TrainReport, evaluate,
                       hallucination_loss, lr_at, train)

__version__ = "1.0.0"

__all__ = [
    "CellConfig", "FAMILIES", "FeatureRecord", "Hallucinator",
    "LinearClassifier", "LossConfig", "MoNetParams", "MoNetTrace",
    "Prediction", "SyntheticTaskSpec", "Tape", "Tensor", "TrainConfig",
    "TrainReport", "backward", "classify", "count_params", "ensemble",
    "evaluate", "finite_diff_grad", "fit_linear_classifier",
    "generate_synthetic", "hallucination_loss", "jacobian", "lr_at",
    "match_params", "monet_forward", "monet_unit", "read_dataset", "split",
    "top1_accuracy", "train", "write_dataset",
]
