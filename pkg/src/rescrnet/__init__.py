"""Res-CR-Net: residual semantic segmentation with separable atrous
convolutions and orthogonal bidirectional ConvLSTM blocks, on a
self-contained reverse-mode autodiff engine."""

from .augment import AugmentParams, AugmentRanges, apply_affine, epoch_stream, sample_params
from .data import ClassPalette, SegDataset, decode_mask, encode_mask, encode_prediction, \
    load_dataset, parse_run_config
from .layers import (ConvLSTMState, NetworkConfig, ResCRNet, bidirectional_conv_lstm,
                     build_network, conv_lstm_step, conv_res_block, lstm_res_block, stem_block)
from .losses import (LossConfig, contour_weight_map, dice_coefficient, tanimoto,
                     tanimoto_loss, tanimoto_with_complement)
from .metrics import ConfusionCounts, confusion_and_metrics, confusion_counts
from .tensor import Tape, Tensor, backward, record
from .train import Adam, TrainRun, evaluate, predict, train

__version__ = "0.1.0"
