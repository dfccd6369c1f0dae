"""Spatial-temporal neonatal EEG seizure detection toolkit.

Channel-shared temporal convolution, attention-based spatial fusion,
GRU/TCN baselines, mixture-of-experts ensembling, montage transfer,
occlusion localization, and a synthetic-cohort benchmark harness.
"""

__version__ = "0.1.0"

from .autodiff import (ParamSet, Tensor, bce_l2_loss, dense, dilated_conv1d,
                       grad_check, gru_seq, no_grad, relu, sigmoid, softmax)
from .data import (AnnotationTrack, EegWindow, FoldSplit, Montage, Recording,
                   SynthConfig, builtin_montage, consensus_label, load_cohort,
                   load_recording, make_windows, patient_folds, save_cohort,
                   synth_cohort, windows_for_cohort)
from .ensemble import (EnsembleBundle, GateConfig, Member, ensemble_predict,
                       gate_weights, load_bundle, make_bundle, save_bundle,
                       train_gate)
from .errors import (DataFormatError, NotTransferableError, ShapeMismatchError,
                     UndefinedMetricError)
from .evaluation import (CrossValResult, MetricReport, cross_validate,
                         transfer_eval)
from .interpret import OcclusionMap, occlusion_map
from .metrics import auprc, auroc
from .models import (GruClassifierConfig, Model, StateNetConfig,
                     TcnClassifierConfig, gat_layer, gru_classifier_forward,
                     load_model, new_model, save_model, spatial_fuse,
                     statenet_forward, tcn_classifier_forward, temporal_encode)
from .training import FitResult, OptimizerState, TrainConfig, fit, opt_step

__all__ = [name for name in dir() if not name.startswith("_")]
