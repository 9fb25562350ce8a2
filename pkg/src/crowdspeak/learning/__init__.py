from .cnn import (AccelCnn, CnnConfig, cnn_forward, cnn_predict_proba, cnn_train, load_cnn,
                  normalize_window, save_cnn)
from .fusion import FusionModel, fuse_fit
from .svm import LAMBDA_GRID, LinearSvm, platt_apply, platt_fit, svm_objective, train_svm

__all__ = [
    "AccelCnn", "CnnConfig", "cnn_forward", "cnn_predict_proba", "cnn_train", "load_cnn",
    "normalize_window", "save_cnn", "FusionModel", "fuse_fit", "LAMBDA_GRID", "LinearSvm",
    "platt_apply", "platt_fit", "svm_objective", "train_svm",
]
